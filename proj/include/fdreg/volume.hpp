#pragma once

#include <map>
#include <optional>
#include <span>
#include <utility>

#include "core.hpp"

namespace fdreg {

/// Scalar intensity grid. `normalized()` is derived from the content: true
/// iff every sample lies in [0,1].
template <class T>
class VolumeT {
 public:
  using value_type = T;

  VolumeT() = default;
  explicit VolumeT(Grid grid, T fill = T(0))
      : grid_(grid), samples_(grid.voxel_count(), fill) {
    grid_.validate();
    refresh();
  }
  VolumeT(Grid grid, std::vector<T> samples) : grid_(grid), samples_(std::move(samples)) {
    grid_.validate();
    if (samples_.size() != grid_.voxel_count())
      fail(ErrorCode::shape, "volume sample count " + std::to_string(samples_.size()) +
                                 " does not match grid " + to_string(grid_.dims));
    refresh();
  }

  const Grid& grid() const { return grid_; }
  const Dims3& dims() const { return grid_.dims; }
  const std::vector<T>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  bool normalized() const { return normalized_; }

  T operator[](std::size_t i) const { return samples_[i]; }
  T at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return samples_[static_cast<std::size_t>(grid_.dims.index(x, y, z))];
  }

  template <class U>
  VolumeT<U> cast() const {
    return VolumeT<U>(grid_, std::vector<U>(samples_.begin(), samples_.end()));
  }

  bool operator==(const VolumeT& o) const { return grid_ == o.grid_ && samples_ == o.samples_; }

 private:
  void refresh() {
    normalized_ = true;
    for (T s : samples_) {
      if (!std::isfinite(static_cast<double>(s))) fail(ErrorCode::contract, "volume sample is not finite");
      if (s < T(0) || s > T(1)) normalized_ = false;
    }
  }

  Grid grid_;
  std::vector<T> samples_;
  bool normalized_ = true;
};

using Volume = VolumeT<float>;

using LabelTable = std::map<std::uint16_t, std::string>;

/// Integer organ labels on a grid; 0 is background.
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(Grid grid, std::vector<std::uint16_t> labels, LabelTable table)
      : grid_(grid), labels_(std::move(labels)), table_(std::move(table)) {
    grid_.validate();
    if (labels_.size() != grid_.voxel_count())
      fail(ErrorCode::shape, "label count does not match grid " + to_string(grid_.dims));
    for (auto l : labels_)
      if (l != 0 && !table_.count(l))
        fail(ErrorCode::contract, "label " + std::to_string(l) + " missing from label table");
  }

  const Grid& grid() const { return grid_; }
  const Dims3& dims() const { return grid_.dims; }
  const std::vector<std::uint16_t>& labels() const { return labels_; }
  const LabelTable& label_table() const { return table_; }
  std::size_t size() const { return labels_.size(); }
  std::uint16_t operator[](std::size_t i) const { return labels_[i]; }

  std::optional<std::uint16_t> label_of(std::string_view name) const {
    for (const auto& [id, n] : table_)
      if (n == name) return id;
    return std::nullopt;
  }

  std::size_t count(std::uint16_t label) const {
    return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), label));
  }

  bool operator==(const LabelMask&) const = default;

 private:
  Grid grid_;
  std::vector<std::uint16_t> labels_;
  LabelTable table_;
};

// ---------------------------------------------------------------------------
// Sampling kernels (clamp-to-edge, fractional voxel coordinates).

namespace detail {

inline double clamp_coord(double c, std::int64_t n) {
  return std::clamp(c, 0.0, static_cast<double>(n - 1));
}

struct LerpAxis {
  std::int64_t i0, i1;
  double f;
  bool inside;  // false when the coordinate was clamped; derivative is 0 there
};

inline LerpAxis lerp_axis(double c, std::int64_t n) {
  LerpAxis a{};
  a.inside = c >= 0.0 && c <= static_cast<double>(n - 1);
  const double cc = clamp_coord(c, n);
  a.i0 = static_cast<std::int64_t>(std::floor(cc));
  a.i1 = std::min(a.i0 + 1, n - 1);
  a.f = cc - static_cast<double>(a.i0);
  return a;
}

template <class T>
double trilinear(const T* data, const Dims3& d, double cx, double cy, double cz) {
  const LerpAxis ax = lerp_axis(cx, d.nx), ay = lerp_axis(cy, d.ny), az = lerp_axis(cz, d.nz);
  auto v = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    return static_cast<double>(data[d.index(x, y, z)]);
  };
  const double c00 = v(ax.i0, ay.i0, az.i0) * (1 - ax.f) + v(ax.i1, ay.i0, az.i0) * ax.f;
  const double c10 = v(ax.i0, ay.i1, az.i0) * (1 - ax.f) + v(ax.i1, ay.i1, az.i0) * ax.f;
  const double c01 = v(ax.i0, ay.i0, az.i1) * (1 - ax.f) + v(ax.i1, ay.i0, az.i1) * ax.f;
  const double c11 = v(ax.i0, ay.i1, az.i1) * (1 - ax.f) + v(ax.i1, ay.i1, az.i1) * ax.f;
  const double c0 = c00 * (1 - ay.f) + c10 * ay.f;
  const double c1 = c01 * (1 - ay.f) + c11 * ay.f;
  return c0 * (1 - az.f) + c1 * az.f;
}

/// Partial derivatives of the trilinear interpolant w.r.t. the three
/// fractional coordinates (zero along clamped axes).
template <class T>
std::array<double, 3> trilinear_gradient(const T* data, const Dims3& d, double cx, double cy,
                                         double cz) {
  const LerpAxis ax = lerp_axis(cx, d.nx), ay = lerp_axis(cy, d.ny), az = lerp_axis(cz, d.nz);
  auto v = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    return static_cast<double>(data[d.index(x, y, z)]);
  };
  const double v000 = v(ax.i0, ay.i0, az.i0), v100 = v(ax.i1, ay.i0, az.i0);
  const double v010 = v(ax.i0, ay.i1, az.i0), v110 = v(ax.i1, ay.i1, az.i0);
  const double v001 = v(ax.i0, ay.i0, az.i1), v101 = v(ax.i1, ay.i0, az.i1);
  const double v011 = v(ax.i0, ay.i1, az.i1), v111 = v(ax.i1, ay.i1, az.i1);
  std::array<double, 3> g{0.0, 0.0, 0.0};
  // an axis of length 1 has i0 == i1 and contributes nothing
  if (ax.inside && ax.i1 != ax.i0) {
    const double e0 = (v100 - v000) * (1 - ay.f) + (v110 - v010) * ay.f;
    const double e1 = (v101 - v001) * (1 - ay.f) + (v111 - v011) * ay.f;
    g[0] = e0 * (1 - az.f) + e1 * az.f;
  }
  if (ay.inside && ay.i1 != ay.i0) {
    const double e0 = (v010 - v000) * (1 - ax.f) + (v110 - v100) * ax.f;
    const double e1 = (v011 - v001) * (1 - ax.f) + (v111 - v101) * ax.f;
    g[1] = e0 * (1 - az.f) + e1 * az.f;
  }
  if (az.inside && az.i1 != az.i0) {
    const double e0 = (v001 - v000) * (1 - ax.f) + (v101 - v100) * ax.f;
    const double e1 = (v011 - v010) * (1 - ax.f) + (v111 - v110) * ax.f;
    g[2] = e0 * (1 - ay.f) + e1 * ay.f;
  }
  return g;
}

/// Nearest voxel index with ties broken toward the lower index.
inline std::int64_t nearest_index(double c, std::int64_t n) {
  const auto i = static_cast<std::int64_t>(std::ceil(c - 0.5));
  return std::clamp<std::int64_t>(i, 0, n - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Preprocessing

inline constexpr double kDefaultClipLow = -1000.0;
inline constexpr double kDefaultClipHigh = 1000.0;

/// Clamp to [lo, hi] HU and map linearly onto [0, 1].
template <class T>
VolumeT<T> clip_normalize(const VolumeT<T>& v, double lo = kDefaultClipLow,
                          double hi = kDefaultClipHigh) {
  if (!(lo < hi)) fail(ErrorCode::invalid_range, "clip range requires lo < hi");
  if (v.normalized())
    fail(ErrorCode::contract, "clip_normalize: volume is already normalized to [0,1]");
  std::vector<T> out(v.size());
  const double width = hi - lo;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = std::clamp(static_cast<double>(v[i]), lo, hi);
    out[i] = static_cast<T>((s - lo) / width);
  }
  return VolumeT<T>(v.grid(), std::move(out));
}

template <class T>
VolumeT<T> resample_trilinear(const VolumeT<T>& v, const Grid& target) {
  target.validate();
  if (target == v.grid()) return v;
  const IndexMap map(target, v.grid());
  const Dims3 td = target.dims;
  std::vector<T> out(target.voxel_count());
  const T* src = v.samples().data();
  parallel_for(0, td.nz, [&](std::int64_t z) {
    for (std::int64_t y = 0; y < td.ny; ++y)
      for (std::int64_t x = 0; x < td.nx; ++x)
        out[td.index(x, y, z)] = static_cast<T>(detail::trilinear(
            src, v.dims(), map.apply(0, x), map.apply(1, y), map.apply(2, z)));
  });
  return VolumeT<T>(target, std::move(out));
}

/// Grid with `dims` samples spanning the same physical extent as `src`
/// (first and last sample centres coincide).
inline Grid fit_grid(const Grid& src, const Dims3& dims) {
  Vec3 spacing;
  for (int a = 0; a < 3; ++a)
    spacing[a] = dims[a] > 1 ? src.spacing[a] * static_cast<double>(src.dims[a] - 1) / static_cast<double>(dims[a] - 1)
                             : src.spacing[a];
  for (double& s : spacing)
    if (!(s > 0)) s = 1.0;
  return Grid(dims, spacing, src.origin);
}

inline LabelMask resample_nearest(const LabelMask& m, const Grid& target) {
  target.validate();
  if (target == m.grid()) return m;
  const IndexMap map(target, m.grid());
  const Dims3 td = target.dims, sd = m.dims();
  std::vector<std::uint16_t> out(target.voxel_count());
  for (std::int64_t z = 0; z < td.nz; ++z) {
    const auto sz = detail::nearest_index(map.apply(2, z), sd.nz);
    for (std::int64_t y = 0; y < td.ny; ++y) {
      const auto sy = detail::nearest_index(map.apply(1, y), sd.ny);
      for (std::int64_t x = 0; x < td.nx; ++x) {
        const auto sx = detail::nearest_index(map.apply(0, x), sd.nx);
        out[td.index(x, y, z)] = m[sd.index(sx, sy, sz)];
      }
    }
  }
  return LabelMask(target, std::move(out), m.label_table());
}

/// Inclusive voxel bounds of a crop, recorded for provenance.
struct CropBox {
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};

  Dims3 dims() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
  bool operator==(const CropBox&) const = default;
};

inline Grid crop_grid(const Grid& g, const CropBox& box) {
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = g.origin[a] + static_cast<double>(box.lo[a]) * g.spacing[a];
  return Grid(box.dims(), g.spacing, origin);
}

inline CropBox bounding_box(const LabelMask& body, std::int64_t margin) {
  const Dims3 d = body.dims();
  Index3 lo{d.nx, d.ny, d.nz}, hi{-1, -1, -1};
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        if (body[d.index(x, y, z)] == 0) continue;
        const Index3 p{x, y, z};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a]);
        }
      }
  if (hi[0] < 0) fail(ErrorCode::empty_mask, "crop_to_mask: body mask is empty");
  CropBox box;
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = std::max<std::int64_t>(0, lo[a] - margin);
    box.hi[a] = std::min<std::int64_t>(d[a] - 1, hi[a] + margin);
  }
  return box;
}

template <class T>
VolumeT<T> crop(const VolumeT<T>& v, const CropBox& box) {
  const Grid g = crop_grid(v.grid(), box);
  const Dims3 cd = g.dims, sd = v.dims();
  std::vector<T> out(g.voxel_count());
  for (std::int64_t z = 0; z < cd.nz; ++z)
    for (std::int64_t y = 0; y < cd.ny; ++y)
      for (std::int64_t x = 0; x < cd.nx; ++x)
        out[cd.index(x, y, z)] = v[sd.index(x + box.lo[0], y + box.lo[1], z + box.lo[2])];
  return VolumeT<T>(g, std::move(out));
}

inline LabelMask crop(const LabelMask& m, const CropBox& box) {
  const Grid g = crop_grid(m.grid(), box);
  const Dims3 cd = g.dims, sd = m.dims();
  std::vector<std::uint16_t> out(g.voxel_count());
  for (std::int64_t z = 0; z < cd.nz; ++z)
    for (std::int64_t y = 0; y < cd.ny; ++y)
      for (std::int64_t x = 0; x < cd.nx; ++x)
        out[cd.index(x, y, z)] = m[sd.index(x + box.lo[0], y + box.lo[1], z + box.lo[2])];
  return LabelMask(g, std::move(out), m.label_table());
}

template <class T>
std::pair<VolumeT<T>, CropBox> crop_to_mask(const VolumeT<T>& v, const LabelMask& body,
                                             std::int64_t margin = 0) {
  require_same_grid(v.grid(), body.grid(), "crop_to_mask");
  if (margin < 0) fail(ErrorCode::contract, "crop margin must be >= 0");
  const CropBox box = bounding_box(body, margin);
  return {crop(v, box), box};
}

/// Writes `cropped` back into a copy of `original` at `box`.
template <class T>
VolumeT<T> paste_crop(const VolumeT<T>& original, const VolumeT<T>& cropped, const CropBox& box) {
  if (!(cropped.dims() == box.dims())) fail(ErrorCode::shape, "paste_crop: crop dims mismatch");
  std::vector<T> out = original.samples();
  const Dims3 cd = cropped.dims(), sd = original.dims();
  for (std::int64_t z = 0; z < cd.nz; ++z)
    for (std::int64_t y = 0; y < cd.ny; ++y)
      for (std::int64_t x = 0; x < cd.nx; ++x)
        out[sd.index(x + box.lo[0], y + box.lo[1], z + box.lo[2])] = cropped[cd.index(x, y, z)];
  return VolumeT<T>(original.grid(), std::move(out));
}

/// Working grids fed to the registration blocks must halve cleanly four times.
inline void require_divisible_by_16(const Dims3& d) {
  if (d.nx % 16 || d.ny % 16 || d.nz % 16)
    fail(ErrorCode::not_divisible,
         "grid " + to_string(d) +
             " is not divisible by 16 along every axis; the encoder halves the resolution four "
             "times (try e.g. 128,96,160 or 64,48,80)");
}

}  // namespace fdreg
