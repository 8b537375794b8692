#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace fdreg {

enum class ErrorCode {
  invalid_range,
  contract,
  grid_mismatch,
  empty_mask,
  too_small,
  undefined,
  shape,
  not_divisible,
  io,
  format,
  version,
  checksum,
  missing,
  config,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_range: return "invalid_range";
    case ErrorCode::contract: return "contract";
    case ErrorCode::grid_mismatch: return "grid_mismatch";
    case ErrorCode::empty_mask: return "empty_mask";
    case ErrorCode::too_small: return "too_small";
    case ErrorCode::undefined: return "undefined";
    case ErrorCode::shape: return "shape";
    case ErrorCode::not_divisible: return "not_divisible";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    case ErrorCode::version: return "version";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::missing: return "missing";
    case ErrorCode::config: return "config";
  }
  return "unknown";
}

/// Every failure in the library surfaces as this exception; `code()` is the
/// machine-readable part the CLI reports.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

using Vec3 = std::array<double, 3>;
using Index3 = std::array<std::int64_t, 3>;

/// Voxel counts along x, y, z.
struct Dims3 {
  std::int64_t nx = 1, ny = 1, nz = 1;

  std::int64_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  std::int64_t count() const { return nx * ny * nz; }
  std::size_t size() const { return static_cast<std::size_t>(count()); }
  std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return (z * ny + y) * nx + x;
  }
  bool operator==(const Dims3&) const = default;
};

inline std::string to_string(const Dims3& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

/// Sampling lattice: voxel (i,j,k) sits at origin + (i,j,k) * spacing, in mm.
struct Grid {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  Grid() = default;
  Grid(Dims3 d, Vec3 s = {1.0, 1.0, 1.0}, Vec3 o = {0.0, 0.0, 0.0})
      : dims(d), spacing(s), origin(o) {
    validate();
  }

  void validate() const {
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1)
      fail(ErrorCode::contract, "grid dims must be >= 1, got " + to_string(dims));
    for (double s : spacing)
      if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorCode::contract, "grid spacing must be > 0");
    for (double o : origin)
      if (!std::isfinite(o)) fail(ErrorCode::contract, "grid origin must be finite");
  }

  std::size_t voxel_count() const { return dims.size(); }
  bool operator==(const Grid&) const = default;
};

inline void require_same_grid(const Grid& a, const Grid& b, std::string_view what) {
  if (!(a == b))
    fail(ErrorCode::grid_mismatch, std::string(what) + ": grids differ (" + to_string(a.dims) +
                                       " vs " + to_string(b.dims) + ")");
}

/// Maps voxel indices of one grid to fractional voxel indices of another
/// through physical space. Exactly the identity when the grids coincide.
struct IndexMap {
  bool identity = true;
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 offset{0.0, 0.0, 0.0};

  IndexMap() = default;
  IndexMap(const Grid& from, const Grid& to) {
    identity = from.spacing == to.spacing && from.origin == to.origin;
    for (int a = 0; a < 3; ++a) {
      scale[a] = from.spacing[a] / to.spacing[a];
      offset[a] = (from.origin[a] - to.origin[a]) / to.spacing[a];
    }
  }

  double apply(int axis, double idx) const {
    return identity ? idx : offset[axis] + idx * scale[axis];
  }
  double derivative(int axis) const { return identity ? 1.0 : scale[axis]; }
};

// ---------------------------------------------------------------------------
// Intra-run parallelism. Loops handed to parallel_for must write disjoint
// outputs so results stay bitwise identical for any thread count.

inline unsigned& thread_setting() {
  static unsigned n = [] {
    if (const char* env = std::getenv("REG_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
  }();
  return n;
}

inline void set_threads(unsigned n) { thread_setting() = std::max(1u, n); }
inline unsigned threads() { return thread_setting(); }

template <class Fn>
void parallel_for(std::int64_t begin, std::int64_t end, Fn&& fn, std::int64_t min_chunk = 1) {
  const std::int64_t n = end - begin;
  if (n <= 0) return;
  const auto workers = static_cast<std::int64_t>(
      std::min<std::int64_t>(threads(), std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, min_chunk))));
  if (workers <= 1) {
    for (std::int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (std::int64_t w = 0; w < workers; ++w) {
    const std::int64_t lo = begin + n * w / workers;
    const std::int64_t hi = begin + n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace fdreg
