#pragma once

#include <nlohmann/json.hpp>

#include "io/binary.hpp"
#include "random.hpp"
#include "transform.hpp"

namespace fdreg {

struct Ellipsoid {
  std::string name;
  std::string region;
  Vec3 center{};     // voxels
  Vec3 semi_axes{};  // voxels
  double intensity = 0.5;
};

struct PhantomSpec {
  Grid grid{Dims3{64, 48, 80}};
  std::vector<Ellipsoid> organs;
  double background = 0.4;
  double noise_sigma = 0.0;

  void validate() const {
    grid.validate();
    if (background < 0 || background > 1) fail(ErrorCode::invalid_range, "background intensity must be in [0,1]");
    if (noise_sigma < 0) fail(ErrorCode::invalid_range, "noise sigma must be >= 0");
    for (const auto& o : organs) {
      if (o.intensity < 0 || o.intensity > 1)
        fail(ErrorCode::invalid_range, "organ '" + o.name + "' intensity must be in [0,1]");
      for (int a = 0; a < 3; ++a) {
        if (!(o.semi_axes[a] > 0)) fail(ErrorCode::invalid_range, "organ '" + o.name + "' semi-axes must be > 0");
        if (o.center[a] - o.semi_axes[a] < 0 || o.center[a] + o.semi_axes[a] > grid.dims[a] - 1)
          fail(ErrorCode::invalid_range, "organ '" + o.name + "' ellipsoid leaves the grid");
      }
    }
  }

  /// Label ids by first appearance of each organ name (an organ may span
  /// several ellipsoids, e.g. left and right lung).
  LabelTable label_table() const {
    LabelTable t;
    std::uint16_t next = 1;
    for (const auto& o : organs) {
      bool known = false;
      for (const auto& [id, n] : t) known |= n == o.name;
      if (!known) t[next++] = o.name;
    }
    return t;
  }
};

struct DeformationSpec {
  double amplitude = 4.0;  // voxels
  double sigma = 6.0;      // voxels
  std::uint64_t seed = 0;
  std::map<std::string, double> region_amplitude;  // optional per-region overrides

  void validate() const {
    if (!(amplitude >= 0)) fail(ErrorCode::invalid_range, "amplitude must be >= 0");
    if (!(sigma > 0)) fail(ErrorCode::invalid_range, "sigma must be > 0");
    for (const auto& [r, a] : region_amplitude)
      if (!(a >= 0)) fail(ErrorCode::invalid_range, "region amplitude for '" + r + "' must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const Ellipsoid& e) {
  j = {{"name", e.name}, {"region", e.region}, {"center", e.center}, {"semi_axes", e.semi_axes},
       {"intensity", e.intensity}};
}
inline void from_json(const nlohmann::json& j, Ellipsoid& e) {
  e.name = j.at("name");
  e.region = j.value("region", "");
  e.center = j.at("center").get<Vec3>();
  e.semi_axes = j.at("semi_axes").get<Vec3>();
  e.intensity = j.at("intensity");
}

inline nlohmann::json to_json(const PhantomSpec& s) {
  return {{"grid",
           {{"dims", {s.grid.dims.nx, s.grid.dims.ny, s.grid.dims.nz}}, {"spacing", s.grid.spacing},
            {"origin", s.grid.origin}}},
          {"organs", s.organs},
          {"background", s.background},
          {"noise_sigma", s.noise_sigma}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    const auto d = g.at("dims").get<std::array<std::int64_t, 3>>();
    s.grid = Grid({d[0], d[1], d[2]}, g.value("spacing", Vec3{1, 1, 1}), g.value("origin", Vec3{0, 0, 0}));
  }
  s.organs = j.value("organs", std::vector<Ellipsoid>{});
  s.background = j.value("background", s.background);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.validate();
  return s;
}

inline nlohmann::json to_json(const DeformationSpec& d) {
  return {{"amplitude", d.amplitude}, {"sigma", d.sigma}, {"seed", d.seed}, {"region_amplitude", d.region_amplitude}};
}

inline DeformationSpec deformation_spec_from_json(const nlohmann::json& j) {
  DeformationSpec d;
  d.amplitude = j.value("amplitude", d.amplitude);
  d.sigma = j.value("sigma", d.sigma);
  d.seed = j.value("seed", d.seed);
  d.region_amplitude = j.value("region_amplitude", d.region_amplitude);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Generation

/// Three-region torso on the default 64x48x80 grid, two organs per region.
inline PhantomSpec default_phantom_spec() {
  PhantomSpec s;
  s.background = 0.4;
  s.noise_sigma = 0.02;
  s.organs = {
      {"lung", "thorax", {21, 22, 60}, {10, 11, 13}, 0.1},
      {"lung", "thorax", {43, 22, 60}, {10, 11, 13}, 0.1},
      {"heart", "thorax", {34, 17, 52}, {8, 7, 8}, 0.6},
      {"liver", "abdomen", {22, 22, 36}, {13, 11, 8}, 0.65},
      {"kidney", "abdomen", {44, 29, 32}, {5, 5, 8}, 0.75},
      {"pelvis", "bone", {32, 24, 12}, {20, 10, 6}, 0.85},
      {"vertebrae", "bone", {32, 37, 42}, {4, 4, 30}, 0.95},
  };
  return s;
}

/// Randomly shifts and rescales every ellipsoid (shift up to `shift` voxels,
/// semi-axes scaled by 1 +- `scale`), keeping it inside the grid.
inline PhantomSpec jitter(PhantomSpec s, std::uint64_t seed, double shift = 2.0, double scale = 0.1) {
  SplitMix64 rng(derive_seed(seed, 0x71));
  for (auto& o : s.organs)
    for (int a = 0; a < 3; ++a) {
      o.semi_axes[a] *= 1.0 + rng.uniform(-scale, scale);
      const double lo = o.semi_axes[a], hi = static_cast<double>(s.grid.dims[a] - 1) - o.semi_axes[a];
      o.center[a] = std::clamp(o.center[a] + rng.uniform(-shift, shift), lo, hi);
    }
  s.validate();
  return s;
}

namespace detail {

inline bool inside(const Ellipsoid& e, double x, double y, double z) {
  const double dx = (x - e.center[0]) / e.semi_axes[0];
  const double dy = (y - e.center[1]) / e.semi_axes[1];
  const double dz = (z - e.center[2]) / e.semi_axes[2];
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

/// Label volume and noise-free intensities.
inline std::pair<std::vector<float>, std::vector<std::uint16_t>> rasterize(const PhantomSpec& s, const LabelTable& t) {
  const Dims3 d = s.grid.dims;
  std::vector<float> img(d.size(), static_cast<float>(s.background));
  std::vector<std::uint16_t> lab(d.size(), 0);
  std::vector<std::uint16_t> ids;
  for (const auto& o : s.organs)
    for (const auto& [id, n] : t)
      if (n == o.name) ids.push_back(id);
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        for (std::size_t k = 0; k < s.organs.size(); ++k)
          if (inside(s.organs[k], double(x), double(y), double(z))) {  // last listed wins
            img[i] = static_cast<float>(s.organs[k].intensity);
            lab[i] = ids[k];
          }
      }
  return {std::move(img), std::move(lab)};
}

inline void add_noise(std::vector<float>& img, double sigma, SplitMix64& rng) {
  if (sigma <= 0) return;
  for (auto& v : img) v = static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
}

/// Separable Gaussian smoothing with clamp-to-edge borders, radius 3 sigma.
inline void gaussian_smooth(std::vector<double>& v, const Dims3& d, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= sum;
  const std::int64_t stride[3] = {1, d.nx, d.nx * d.ny};
  std::vector<double> tmp(v.size());
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = d[axis];
    for (std::int64_t z = 0; z < d.nz; ++z)
      for (std::int64_t y = 0; y < d.ny; ++y)
        for (std::int64_t x = 0; x < d.nx; ++x) {
          const std::int64_t p[3] = {x, y, z};
          const auto i = d.index(x, y, z);
          double s = 0;
          for (int t = -r; t <= r; ++t) {
            const std::int64_t q = std::clamp<std::int64_t>(p[axis] + t, 0, n - 1);
            s += k[t + r] * v[i + (q - p[axis]) * stride[axis]];
          }
          tmp[i] = s;
        }
    v.swap(tmp);
  }
}

}  // namespace detail

struct Phantom {
  Volume image;
  LabelMask mask;
};

/// Ellipsoid phantom: voxels inside organ k take its label and intensity,
/// later organs overwrite earlier ones, then clipped Gaussian noise is added.
inline Phantom gen_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto table = spec.label_table();
  auto [img, lab] = detail::rasterize(spec, table);
  SplitMix64 rng(derive_seed(seed, 0x9A));
  detail::add_noise(img, spec.noise_sigma, rng);
  return {Volume(spec.grid, std::move(img)), LabelMask(spec.grid, std::move(lab), table)};
}

struct SmoothField {
  DisplacementField field;
  double amplitude = 0.0;  // achieved max displacement
  int halvings = 0;
};

/// Smoothed white noise rescaled to max norm `amplitude`, halved until fold
/// free. `amplitude_map` (optional) replaces the amplitude per voxel.
inline SmoothField gen_smooth_field(const DeformationSpec& spec, const Grid& grid,
                                    const std::vector<double>* amplitude_map = nullptr) {
  spec.validate();
  const Dims3 d = grid.dims;
  const std::size_t n = d.size();
  SmoothField out{DisplacementField(grid), 0.0, 0};
  if (spec.amplitude == 0.0 && !amplitude_map) return out;
  SplitMix64 rng(derive_seed(spec.seed, 0xDEF));
  // noise on a domain padded by the kernel radius keeps the statistics
  // stationary up to the border
  const std::int64_t r = std::max(1, static_cast<int>(std::ceil(3 * spec.sigma)));
  const Dims3 pd{d.nx + 2 * r, d.ny + 2 * r, d.nz + 2 * r};
  std::vector<std::vector<double>> comp(3, std::vector<double>(n));
  std::vector<double> padded(pd.size());
  for (auto& c : comp) {
    for (auto& v : padded) v = rng.normal();
    detail::gaussian_smooth(padded, pd, spec.sigma);
    for (std::int64_t z = 0; z < d.nz; ++z)
      for (std::int64_t y = 0; y < d.ny; ++y)
        for (std::int64_t x = 0; x < d.nx; ++x)
          c[static_cast<std::size_t>(d.index(x, y, z))] = padded[static_cast<std::size_t>(pd.index(x + r, y + r, z + r))];
  }
  double maxn = 0;
  for (std::size_t i = 0; i < n; ++i)
    maxn = std::max(maxn, std::sqrt(comp[0][i] * comp[0][i] + comp[1][i] * comp[1][i] + comp[2][i] * comp[2][i]));
  if (maxn == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = amplitude_map ? (*amplitude_map)[i] : spec.amplitude;
    for (int c = 0; c < 3; ++c) out.field.at(c, i) = static_cast<float>(comp[c][i] / maxn * a);
  }
  while (folding_fraction(jacobian(out.field)) > 0.0) {
    out.field *= 0.5f;
    ++out.halvings;
  }
  out.amplitude = out.field.max_norm();
  return out;
}

/// Inverse of x -> x + t(x) on the grid by fixed-point iteration
/// v <- -t(x + v(x)); converges for the fold-free, smooth fields produced
/// above.
inline DisplacementField invert_field(const DisplacementField& t, int iterations = 30) {
  const Dims3 d = t.dims();
  DisplacementField v(t.grid());
  for (int it = 0; it < iterations; ++it) {
    DisplacementField next(t.grid());
    parallel_for(0, d.nz, [&](std::int64_t z) {
      for (std::int64_t y = 0; y < d.ny; ++y)
        for (std::int64_t x = 0; x < d.nx; ++x) {
          const auto i = static_cast<std::size_t>(d.index(x, y, z));
          const double px = x + v.at(0, i), py = y + v.at(1, i), pz = z + v.at(2, i);
          for (int c = 0; c < 3; ++c)
            next.at(c, i) = static_cast<float>(-detail::trilinear(t.component(c).data(), d, px, py, pz));
        }
    });
    v = std::move(next);
  }
  return v;
}

struct PhantomPair {
  Volume fixed;
  LabelMask fixed_mask;
  Volume moving;
  LabelMask moving_mask;
  DisplacementField truth;  // registers moving onto fixed: moving(x + truth(x)) ~ fixed(x)
  double amplitude = 0.0;
};

/// Smoothed per-region indicator used to vary the deformation amplitude by
/// region.
inline std::vector<double> amplitude_map(const PhantomSpec& ps, const LabelMask& mask, const DeformationSpec& ds) {
  const std::size_t n = mask.size();
  std::vector<double> base(n, ds.amplitude);
  for (const auto& [region, amp] : ds.region_amplitude) {
    std::vector<double> w(n, 0.0);
    for (const auto& [id, name] : mask.label_table()) {
      bool in_region = false;
      for (const auto& o : ps.organs) in_region |= o.name == name && o.region == region;
      if (!in_region) continue;
      for (std::size_t i = 0; i < n; ++i)
        if (mask[i] == id) w[i] = 1.0;
    }
    detail::gaussian_smooth(w, mask.dims(), ds.sigma);
    for (std::size_t i = 0; i < n; ++i) base[i] += w[i] * (amp - ds.amplitude);
  }
  return base;
}

/// Fixed phantom plus a moving phantom deformed by the inverse of a smooth
/// truth field; noise is drawn independently for each image.
inline PhantomPair make_pair(const PhantomSpec& ps, const DeformationSpec& ds, std::uint64_t seed) {
  ps.validate();
  const auto table = ps.label_table();
  auto [clean, lab] = detail::rasterize(ps, table);
  const LabelMask fixed_mask(ps.grid, std::move(lab), table);
  std::optional<std::vector<double>> amap;
  if (!ds.region_amplitude.empty()) amap = amplitude_map(ps, fixed_mask, ds);
  auto sf = gen_smooth_field(ds, ps.grid, amap ? &*amap : nullptr);
  const auto inv = invert_field(sf.field);
  const Volume clean_fixed(ps.grid, clean);
  auto moving_img = warp(clean_fixed, inv).samples();
  SplitMix64 rng(derive_seed(seed, 0x9A));
  detail::add_noise(clean, ps.noise_sigma, rng);
  detail::add_noise(moving_img, ps.noise_sigma, rng);
  return {Volume(ps.grid, std::move(clean)), fixed_mask, Volume(ps.grid, std::move(moving_img)),
          warp_mask_nearest(fixed_mask, inv), std::move(sf.field), sf.amplitude};
}

/// `n` pairs, each with its own jittered anatomy and deformation seed.
inline std::vector<PhantomPair> make_suite(const PhantomSpec& base, DeformationSpec ds, int n, std::uint64_t seed,
                                           double shift = 2.0, double scale = 0.1) {
  std::vector<PhantomPair> out;
  for (int i = 0; i < n; ++i) {
    const auto s = derive_seed(seed, 1000 + static_cast<std::uint64_t>(i));
    ds.seed = derive_seed(s, 1);
    out.push_back(make_pair(jitter(base, s, shift, scale), ds, s));
  }
  return out;
}

}  // namespace fdreg
