#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "fdreg/fdreg.hpp"

namespace fdreg::test {

inline Grid grid(std::int64_t nx, std::int64_t ny, std::int64_t nz) { return Grid(Dims3{nx, ny, nz}); }

template <class T = float>
VolumeT<T> random_volume(const Grid& g, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  SplitMix64 rng(seed);
  std::vector<T> s(g.voxel_count());
  for (auto& v : s) v = static_cast<T>(rng.uniform(lo, hi));
  return VolumeT<T>(g, std::move(s));
}

template <class F>
VolumeT<float> volume_from(const Grid& g, F&& f) {
  std::vector<float> s(g.voxel_count());
  const Dims3 d = g.dims;
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) s[d.index(x, y, z)] = static_cast<float>(f(x, y, z));
  return Volume(g, std::move(s));
}

template <class T = float, class F>
DisplacementFieldT<T> field_from(const Grid& g, F&& f) {
  DisplacementFieldT<T> u(g);
  const Dims3 d = g.dims;
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        const Vec3 v = f(x, y, z);
        for (int c = 0; c < 3; ++c) u.at(c, i) = static_cast<T>(v[c]);
      }
  return u;
}

/// Three organs on a 16x16x32 grid, one per region.
inline PhantomSpec small_spec() {
  PhantomSpec s;
  s.grid = grid(16, 16, 32);
  s.background = 0.4;
  s.noise_sigma = 0.0;
  s.organs = {
      {"lung", "thorax", {8, 8, 24}, {4, 4, 5}, 0.1},
      {"liver", "abdomen", {7, 8, 14}, {4, 4, 4}, 0.7},
      {"pelvis", "bone", {8, 8, 5}, {5, 3, 3}, 0.9},
  };
  return s;
}

inline RegionSpec small_regions() {
  return RegionSpec{{{"bone", {"pelvis"}}, {"thorax", {"lung"}}, {"abdomen", {"liver"}}}};
}

template <class T = float>
TrainingPair<T> small_pair(std::uint64_t seed, double amplitude = 2.0) {
  DeformationSpec d;
  d.amplitude = amplitude;
  d.sigma = 3.0;
  d.seed = seed;
  auto p = make_pair(small_spec(), d, seed);
  return {p.fixed.cast<T>(), p.moving.cast<T>(), p.fixed_mask, p.moving_mask};
}

/// Fresh empty directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("fdreg_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

template <class Fn>
ErrorCode error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an fdreg::Error";
  return ErrorCode::contract;
}

}  // namespace fdreg::test
