#pragma once

#include <span>

#include "volume.hpp"

namespace fdreg {

/// 12-dof affine map x -> A x + t on voxel indices of the working grid.
struct AffineParams {
  std::array<double, 9> linear{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major A
  Vec3 translation{0, 0, 0};

  static AffineParams identity() { return {}; }

  /// Residual form: A = I + dA (row-major), t = dt.
  static AffineParams from_residual(std::span<const double> p) {
    if (p.size() != 12) fail(ErrorCode::shape, "affine parameter vector must hold 12 reals");
    AffineParams a;
    for (int i = 0; i < 9; ++i) a.linear[i] += p[i];
    for (int i = 0; i < 3; ++i) a.translation[i] = p[9 + i];
    a.validate();
    return a;
  }

  double a(int row, int col) const { return linear[row * 3 + col]; }

  double determinant() const {
    return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
           a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
           a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
  }
  bool orientation_reversing() const { return determinant() <= 0.0; }

  void validate() const {
    for (double v : linear)
      if (!std::isfinite(v)) fail(ErrorCode::contract, "affine matrix entry is not finite");
    for (double v : translation)
      if (!std::isfinite(v)) fail(ErrorCode::contract, "affine translation is not finite");
  }
};

/// Per-voxel displacement in voxel units; stored component-major
/// (all x components, then y, then z).
template <class T>
class DisplacementFieldT {
 public:
  using value_type = T;

  DisplacementFieldT() = default;
  explicit DisplacementFieldT(Grid grid) : grid_(grid), u_(3 * grid.voxel_count(), T(0)) {
    grid_.validate();
  }
  DisplacementFieldT(Grid grid, std::vector<T> components) : grid_(grid), u_(std::move(components)) {
    grid_.validate();
    if (u_.size() != 3 * grid_.voxel_count())
      fail(ErrorCode::shape, "displacement field needs 3 components per voxel");
  }

  const Grid& grid() const { return grid_; }
  const Dims3& dims() const { return grid_.dims; }
  std::size_t voxel_count() const { return grid_.voxel_count(); }

  std::span<T> component(int c) { return {u_.data() + c * voxel_count(), voxel_count()}; }
  std::span<const T> component(int c) const { return {u_.data() + c * voxel_count(), voxel_count()}; }
  T& at(int c, std::size_t voxel) { return u_[c * voxel_count() + voxel]; }
  T at(int c, std::size_t voxel) const { return u_[c * voxel_count() + voxel]; }

  std::vector<T>& data() { return u_; }
  const std::vector<T>& data() const { return u_; }

  bool all_finite() const {
    return std::all_of(u_.begin(), u_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

  double max_norm() const {
    double m = 0.0;
    for (std::size_t i = 0; i < voxel_count(); ++i) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) s += static_cast<double>(at(c, i)) * at(c, i);
      m = std::max(m, std::sqrt(s));
    }
    return m;
  }

  DisplacementFieldT& operator+=(const DisplacementFieldT& o) {
    require_same_grid(grid_, o.grid_, "field addition");
    for (std::size_t i = 0; i < u_.size(); ++i) u_[i] += o.u_[i];
    return *this;
  }
  DisplacementFieldT& operator*=(T s) {
    for (auto& v : u_) v *= s;
    return *this;
  }

  template <class U>
  DisplacementFieldT<U> cast() const {
    return DisplacementFieldT<U>(grid_, std::vector<U>(u_.begin(), u_.end()));
  }

  bool operator==(const DisplacementFieldT& o) const { return grid_ == o.grid_ && u_ == o.u_; }

 private:
  Grid grid_;
  std::vector<T> u_;
};

using DisplacementField = DisplacementFieldT<float>;

struct JacobianMap {
  Grid grid;
  std::vector<double> det;
};

template <class T = float>
DisplacementFieldT<T> affine_to_field(const AffineParams& a, const Grid& grid) {
  a.validate();
  DisplacementFieldT<T> f(grid);
  const Dims3 d = grid.dims;
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const double p[3] = {double(x), double(y), double(z)};
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        for (int r = 0; r < 3; ++r) {
          const double mapped = a.a(r, 0) * p[0] + a.a(r, 1) * p[1] + a.a(r, 2) * p[2] + a.translation[r];
          f.at(r, i) = static_cast<T>(mapped - p[r]);
        }
      }
  return f;
}

/// Gradient of a scalar loss w.r.t. the 12 residual affine parameters, given
/// its gradient w.r.t. the densified field.
template <class T>
std::array<double, 12> affine_field_backward(const DisplacementFieldT<T>& grad) {
  std::array<double, 12> g{};
  const Dims3 d = grad.dims();
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const double p[3] = {double(x), double(y), double(z)};
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        for (int r = 0; r < 3; ++r) {
          const double gr = grad.at(r, i);
          for (int c = 0; c < 3; ++c) g[r * 3 + c] += gr * p[c];
          g[9 + r] += gr;
        }
      }
  return g;
}

/// I_W(x) = I_M(x + u(x)), trilinear with clamp-to-edge, output on field.grid().
template <class T, class F>
VolumeT<T> warp(const VolumeT<T>& moving, const DisplacementFieldT<F>& field) {
  const Grid& out = field.grid();
  const IndexMap map(out, moving.grid());
  const Dims3 d = out.dims;
  std::vector<T> w(out.voxel_count());
  const T* src = moving.samples().data();
  parallel_for(0, d.nz, [&](std::int64_t z) {
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        const double cx = map.apply(0, x + static_cast<double>(field.at(0, i)));
        const double cy = map.apply(1, y + static_cast<double>(field.at(1, i)));
        const double cz = map.apply(2, z + static_cast<double>(field.at(2, i)));
        w[i] = static_cast<T>(detail::trilinear(src, moving.dims(), cx, cy, cz));
      }
  });
  return VolumeT<T>(out, std::move(w));
}

template <class T, class F>
VolumeT<T> warp(const VolumeT<T>& moving, const DisplacementFieldT<F>& field, const Grid& output) {
  require_same_grid(output, field.grid(), "warp output grid");
  return warp(moving, field);
}

/// Adds dL/du to `grad_out` given dL/dI_W for I_W = warp(moving, field).
template <class T, class F>
void warp_backward(const VolumeT<T>& moving, const DisplacementFieldT<F>& field,
                   std::span<const double> upstream, DisplacementFieldT<F>& grad_out,
                   double scale = 1.0) {
  const Grid& out = field.grid();
  require_same_grid(out, grad_out.grid(), "warp_backward");
  if (upstream.size() != out.voxel_count()) fail(ErrorCode::shape, "warp_backward: upstream size");
  const IndexMap map(out, moving.grid());
  const Dims3 d = out.dims;
  const T* src = moving.samples().data();
  parallel_for(0, d.nz, [&](std::int64_t z) {
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        const double up = upstream[i] * scale;
        if (up == 0.0) continue;
        const double cx = map.apply(0, x + static_cast<double>(field.at(0, i)));
        const double cy = map.apply(1, y + static_cast<double>(field.at(1, i)));
        const double cz = map.apply(2, z + static_cast<double>(field.at(2, i)));
        const auto g = detail::trilinear_gradient(src, moving.dims(), cx, cy, cz);
        for (int c = 0; c < 3; ++c)
          grad_out.at(c, i) += static_cast<F>(up * g[c] * map.derivative(c));
      }
  });
}

/// Warps each soft label channel independently.
template <class T, class F>
std::vector<VolumeT<T>> warp_mask_soft(const std::vector<VolumeT<T>>& channels,
                                       const DisplacementFieldT<F>& field) {
  std::vector<VolumeT<T>> out;
  out.reserve(channels.size());
  for (const auto& ch : channels) {
    if (!ch.normalized()) fail(ErrorCode::contract, "soft mask channel must lie in [0,1]");
    out.push_back(warp(ch, field));
  }
  return out;
}

/// Label at x is the moving label at round(x + u(x)); labels are never mixed.
template <class F>
LabelMask warp_mask_nearest(const LabelMask& m, const DisplacementFieldT<F>& field) {
  const Grid& out = field.grid();
  const IndexMap map(out, m.grid());
  const Dims3 d = out.dims, sd = m.dims();
  std::vector<std::uint16_t> labels(out.voxel_count());
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        const auto sx = detail::nearest_index(map.apply(0, x + static_cast<double>(field.at(0, i))), sd.nx);
        const auto sy = detail::nearest_index(map.apply(1, y + static_cast<double>(field.at(1, i))), sd.ny);
        const auto sz = detail::nearest_index(map.apply(2, z + static_cast<double>(field.at(2, i))), sd.nz);
        labels[i] = m[sd.index(sx, sy, sz)];
      }
  return LabelMask(out, std::move(labels), m.label_table());
}

/// Ordered componentwise sum of fields sharing one grid.
template <class T>
DisplacementFieldT<T> accumulate(std::span<const DisplacementFieldT<T>> fields) {
  if (fields.empty()) fail(ErrorCode::contract, "accumulate: no fields");
  DisplacementFieldT<T> acc(fields.front().grid());
  for (const auto& f : fields) acc += f;
  return acc;
}

template <class T>
DisplacementFieldT<T> accumulate(const std::vector<DisplacementFieldT<T>>& fields) {
  return accumulate(std::span<const DisplacementFieldT<T>>(fields));
}

/// det(I + grad u) per voxel; central differences inside, one-sided at the
/// boundary so every voxel of the domain gets a value.
template <class T>
JacobianMap jacobian(const DisplacementFieldT<T>& field) {
  const Dims3 d = field.dims();
  if (d.nx < 3 || d.ny < 3 || d.nz < 3)
    fail(ErrorCode::too_small, "jacobian needs at least 3 voxels per axis, got " + to_string(d));
  JacobianMap jm{field.grid(), std::vector<double>(field.voxel_count())};
  const std::int64_t stride[3] = {1, d.nx, d.nx * d.ny};
  parallel_for(0, d.nz, [&](std::int64_t z) {
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const std::int64_t p[3] = {x, y, z};
        const auto i = d.index(x, y, z);
        double J[3][3];
        for (int axis = 0; axis < 3; ++axis) {
          std::int64_t lo = i, hi = i;
          double h = 2.0;
          if (p[axis] == 0) {
            hi = i + stride[axis];
            h = 1.0;
          } else if (p[axis] == d[axis] - 1) {
            lo = i - stride[axis];
            h = 1.0;
          } else {
            lo = i - stride[axis];
            hi = i + stride[axis];
          }
          for (int c = 0; c < 3; ++c) {
            const auto comp = field.component(c);
            J[c][axis] = (static_cast<double>(comp[hi]) - comp[lo]) / h + (c == axis ? 1.0 : 0.0);
          }
        }
        jm.det[i] = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                    J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                    J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
      }
  });
  return jm;
}

/// Fraction of voxels with det <= 0 (collapse counts as folding).
inline double folding_fraction(const JacobianMap& j) {
  if (j.det.empty()) return 0.0;
  const auto folded = std::count_if(j.det.begin(), j.det.end(), [](double v) { return v <= 0.0; });
  return static_cast<double>(folded) / static_cast<double>(j.det.size());
}

/// Same ratio restricted to voxels at least one step from every face.
inline double interior_folding_fraction(const JacobianMap& j) {
  const Dims3 d = j.grid.dims;
  std::size_t folded = 0, total = 0;
  for (std::int64_t z = 1; z + 1 < d.nz; ++z)
    for (std::int64_t y = 1; y + 1 < d.ny; ++y)
      for (std::int64_t x = 1; x + 1 < d.nx; ++x) {
        ++total;
        if (j.det[d.index(x, y, z)] <= 0.0) ++folded;
      }
  return total ? static_cast<double>(folded) / total : 0.0;
}

}  // namespace fdreg
