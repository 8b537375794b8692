#pragma once

#include <span>

#include <Eigen/Core>

#include "../core.hpp"

namespace fdreg::net {

/// Channel-first activation tensor: data[(c * nz + z) * ny + y) * nx + x].
template <class T>
struct Tensor {
  std::int64_t channels = 0;
  Dims3 dims;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::int64_t c, Dims3 d) : channels(c), dims(d), data(static_cast<std::size_t>(c * d.count()), T(0)) {}

  std::int64_t voxels() const { return dims.count(); }
  T* channel(std::int64_t c) { return data.data() + c * voxels(); }
  const T* channel(std::int64_t c) const { return data.data() + c * voxels(); }
  bool empty() const { return data.empty(); }
};

inline constexpr int kKernel = 3;
inline constexpr int kTaps = 27;
inline constexpr double kLeakySlope = 0.2;

/// Output extent of a kernel-3, padding-1 convolution.
inline std::int64_t conv_out_extent(std::int64_t n, int stride) { return (n - 1) / stride + 1; }

inline Dims3 conv_out_dims(const Dims3& d, int stride) {
  return {conv_out_extent(d.nx, stride), conv_out_extent(d.ny, stride), conv_out_extent(d.nz, stride)};
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

/// Geometry of a kernel-3/padding-1 convolution mapping a "large" grid onto
/// a "small" grid; the transposed convolution uses the same geometry in
/// reverse. Small voxel p reads large voxel stride * p + k - 1, k in {0,1,2}.
inline constexpr std::int64_t kChunkElements = std::int64_t(1) << 18;

struct ConvGeometry {
  Dims3 large, small;
  int stride = 1;

  /// Small-grid x-lines per im2col chunk so a column block stays cache sized.
  std::int64_t lines_per_chunk(std::int64_t rows) const {
    const std::int64_t budget = kChunkElements / std::max<std::int64_t>(rows, 1);
    return std::clamp<std::int64_t>(budget / small.nx, 1, small.ny * small.nz);
  }
  std::int64_t lines() const { return small.ny * small.nz; }
};

/// col[(c * 27 + k) * cols + j] for small voxels of x-lines [l0, l1), where
/// line l is (y, z) = (l % ny, l / ny).
template <class T>
void im2col(const ConvGeometry& g, const T* in, std::int64_t channels, std::int64_t l0, std::int64_t l1, T* col) {
  const Dims3& L = g.large;
  const Dims3& S = g.small;
  const std::int64_t cols = (l1 - l0) * S.nx;
  const std::int64_t lv = L.count();
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* src = in + c * lv;
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* dst = col + (c * kTaps + (kz * 3 + ky) * 3 + kx) * cols;
          for (std::int64_t l = l0; l < l1; ++l) {
            const std::int64_t lz = g.stride * (l / S.ny) + kz - 1;
            const std::int64_t ly = g.stride * (l % S.ny) + ky - 1;
            T* row = dst + (l - l0) * S.nx;
            if (lz < 0 || lz >= L.nz || ly < 0 || ly >= L.ny) {
              std::fill(row, row + S.nx, T(0));
              continue;
            }
            const T* line = src + (lz * L.ny + ly) * L.nx;
            if (g.stride == 1) {
              // interior copy plus the two padded ends
              const std::int64_t lo = kx == 0 ? 1 : 0, hi = kx == 2 ? S.nx - 1 : S.nx;
              if (lo) row[0] = T(0);
              std::copy(line + lo + kx - 1, line + hi + kx - 1, row + lo);
              if (hi < S.nx) row[S.nx - 1] = T(0);
            } else {
              for (std::int64_t x = 0; x < S.nx; ++x) {
                const std::int64_t lx = g.stride * x + kx - 1;
                row[x] = (lx >= 0 && lx < L.nx) ? line[lx] : T(0);
              }
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters columns back onto the large grid (+=).
template <class T>
void col2im(const ConvGeometry& g, const T* col, std::int64_t channels, std::int64_t l0, std::int64_t l1, T* out) {
  const Dims3& L = g.large;
  const Dims3& S = g.small;
  const std::int64_t cols = (l1 - l0) * S.nx;
  const std::int64_t lv = L.count();
  for (std::int64_t c = 0; c < channels; ++c) {
    T* dst = out + c * lv;
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = col + (c * kTaps + (kz * 3 + ky) * 3 + kx) * cols;
          for (std::int64_t l = l0; l < l1; ++l) {
            const std::int64_t lz = g.stride * (l / S.ny) + kz - 1;
            const std::int64_t ly = g.stride * (l % S.ny) + ky - 1;
            if (lz < 0 || lz >= L.nz || ly < 0 || ly >= L.ny) continue;
            const T* row = src + (l - l0) * S.nx;
            T* line = dst + (lz * L.ny + ly) * L.nx;
            if (g.stride == 1) {
              const std::int64_t lo = kx == 0 ? 1 : 0, hi = kx == 2 ? S.nx - 1 : S.nx;
              for (std::int64_t x = lo; x < hi; ++x) line[x + kx - 1] += row[x];
            } else {
              for (std::int64_t x = 0; x < S.nx; ++x) {
                const std::int64_t lx = g.stride * x + kx - 1;
                if (lx >= 0 && lx < L.nx) line[lx] += row[x];
              }
            }
          }
        }
  }
}

}  // namespace detail

/// Kernel-3/padding-1 convolution. weight is [out][in][27], bias [out].
template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                         std::int64_t out_channels, int stride) {
  const std::int64_t cin = in.channels;
  if (static_cast<std::int64_t>(weight.size()) != out_channels * cin * kTaps ||
      static_cast<std::int64_t>(bias.size()) != out_channels)
    fail(ErrorCode::shape, "conv3d: weight/bias shape does not match channels");
  const detail::ConvGeometry g{in.dims, conv_out_dims(in.dims, stride), stride};
  Tensor<T> out(out_channels, g.small);
  const std::int64_t rows = cin * kTaps, line = g.small.nx, ns = g.small.count();
  const std::int64_t step = g.lines_per_chunk(rows);
  std::vector<T> col(static_cast<std::size_t>(rows * step * line));
  const detail::MapC<T> W(weight.data(), out_channels, rows, Eigen::OuterStride<>(rows));
  for (std::int64_t l0 = 0; l0 < g.lines(); l0 += step) {
    const std::int64_t l1 = std::min(l0 + step, g.lines());
    const std::int64_t cols = (l1 - l0) * line;
    detail::im2col(g, in.data.data(), cin, l0, l1, col.data());
    const detail::MapC<T> C(col.data(), rows, cols, Eigen::OuterStride<>(cols));
    detail::MapM<T> O(out.data.data() + l0 * line, out_channels, cols, Eigen::OuterStride<>(ns));
    O.noalias() = W * C;
  }
  for (std::int64_t c = 0; c < out_channels; ++c) {
    T* o = out.channel(c);
    for (std::int64_t i = 0; i < ns; ++i) o[i] += bias[c];
  }
  return out;
}

/// Accumulates dW, db and (if non-null) dIn for conv3d_forward.
template <class T>
void conv3d_backward(const Tensor<T>& in, std::span<const T> weight, const Tensor<T>& grad_out, int stride,
                     std::span<T> grad_weight, std::span<T> grad_bias, Tensor<T>* grad_in) {
  const std::int64_t cin = in.channels, cout = grad_out.channels;
  const detail::ConvGeometry g{in.dims, grad_out.dims, stride};
  if (!(conv_out_dims(in.dims, stride) == grad_out.dims)) fail(ErrorCode::shape, "conv3d_backward: dims");
  const std::int64_t rows = cin * kTaps, line = g.small.nx, ns = g.small.count();
  const std::int64_t step = g.lines_per_chunk(rows);
  std::vector<T> col(static_cast<std::size_t>(rows * step * line));
  const detail::MapC<T> W(weight.data(), cout, rows, Eigen::OuterStride<>(rows));
  detail::MapM<T> dW(grad_weight.data(), cout, rows, Eigen::OuterStride<>(rows));
  if (grad_in) {
    if (grad_in->empty()) *grad_in = Tensor<T>(cin, in.dims);
  }
  for (std::int64_t l0 = 0; l0 < g.lines(); l0 += step) {
    const std::int64_t l1 = std::min(l0 + step, g.lines());
    const std::int64_t cols = (l1 - l0) * line;
    const detail::MapC<T> G(grad_out.data.data() + l0 * line, cout, cols, Eigen::OuterStride<>(ns));
    detail::im2col(g, in.data.data(), cin, l0, l1, col.data());
    {
      const detail::MapC<T> C(col.data(), rows, cols, Eigen::OuterStride<>(cols));
      dW.noalias() += G * C.transpose();
    }
    if (grad_in) {
      detail::MapM<T> D(col.data(), rows, cols, Eigen::OuterStride<>(cols));
      D.noalias() = W.transpose() * G;
      detail::col2im(g, col.data(), cin, l0, l1, grad_in->data.data());
    }
  }
  for (std::int64_t c = 0; c < cout; ++c) {
    const T* go = grad_out.channel(c);
    double s = 0;
    for (std::int64_t i = 0; i < ns; ++i) s += go[i];
    grad_bias[c] += static_cast<T>(s);
  }
}

/// Stride-2 transposed convolution (kernel 3, padding 1) onto `out_dims`,
/// which must halve back onto the input dims; for even extents this is the
/// output_padding = 1 convention that exactly doubles each dim.
/// weight is [in][out][27], bias [out].
template <class T>
Tensor<T> conv_transpose3d_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                                   std::int64_t out_channels, const Dims3& out_dims) {
  const std::int64_t cin = in.channels;
  if (!(conv_out_dims(out_dims, 2) == in.dims))
    fail(ErrorCode::shape, "conv_transpose3d: output dims " + to_string(out_dims) + " do not halve onto " +
                               to_string(in.dims));
  if (static_cast<std::int64_t>(weight.size()) != cin * out_channels * kTaps ||
      static_cast<std::int64_t>(bias.size()) != out_channels)
    fail(ErrorCode::shape, "conv_transpose3d: weight/bias shape does not match channels");
  const detail::ConvGeometry g{out_dims, in.dims, 2};
  Tensor<T> out(out_channels, out_dims);
  const std::int64_t rows = out_channels * kTaps, line = g.small.nx, ns = g.small.count();
  const std::int64_t step = g.lines_per_chunk(rows);
  std::vector<T> col(static_cast<std::size_t>(rows * step * line));
  const detail::MapC<T> W(weight.data(), cin, rows, Eigen::OuterStride<>(rows));
  for (std::int64_t l0 = 0; l0 < g.lines(); l0 += step) {
    const std::int64_t l1 = std::min(l0 + step, g.lines());
    const std::int64_t cols = (l1 - l0) * line;
    const detail::MapC<T> X(in.data.data() + l0 * line, cin, cols, Eigen::OuterStride<>(ns));
    detail::MapM<T> C(col.data(), rows, cols, Eigen::OuterStride<>(cols));
    C.noalias() = W.transpose() * X;
    detail::col2im(g, col.data(), out_channels, l0, l1, out.data.data());
  }
  const std::int64_t nl = out_dims.count();
  for (std::int64_t c = 0; c < out_channels; ++c) {
    T* o = out.channel(c);
    for (std::int64_t i = 0; i < nl; ++i) o[i] += bias[c];
  }
  return out;
}

template <class T>
void conv_transpose3d_backward(const Tensor<T>& in, std::span<const T> weight, const Tensor<T>& grad_out,
                               std::span<T> grad_weight, std::span<T> grad_bias, Tensor<T>* grad_in) {
  const std::int64_t cin = in.channels, cout = grad_out.channels;
  const detail::ConvGeometry g{grad_out.dims, in.dims, 2};
  const std::int64_t rows = cout * kTaps, line = g.small.nx, ns = g.small.count();
  const std::int64_t step = g.lines_per_chunk(rows);
  std::vector<T> col(static_cast<std::size_t>(rows * step * line));
  const detail::MapC<T> W(weight.data(), cin, rows, Eigen::OuterStride<>(rows));
  detail::MapM<T> dW(grad_weight.data(), cin, rows, Eigen::OuterStride<>(rows));
  if (grad_in && grad_in->empty()) *grad_in = Tensor<T>(cin, in.dims);
  for (std::int64_t l0 = 0; l0 < g.lines(); l0 += step) {
    const std::int64_t l1 = std::min(l0 + step, g.lines());
    const std::int64_t cols = (l1 - l0) * line;
    detail::im2col(g, grad_out.data.data(), cout, l0, l1, col.data());
    const detail::MapC<T> C(col.data(), rows, cols, Eigen::OuterStride<>(cols));
    const detail::MapC<T> X(in.data.data() + l0 * line, cin, cols, Eigen::OuterStride<>(ns));
    dW.noalias() += X * C.transpose();
    if (grad_in) {
      detail::MapM<T> D(grad_in->data.data() + l0 * line, cin, cols, Eigen::OuterStride<>(ns));
      D.noalias() += W * C;
    }
  }
  const std::int64_t nl = grad_out.dims.count();
  for (std::int64_t c = 0; c < cout; ++c) {
    const T* go = grad_out.channel(c);
    double s = 0;
    for (std::int64_t i = 0; i < nl; ++i) s += go[i];
    grad_bias[c] += static_cast<T>(s);
  }
}

template <class T>
void leaky_relu_inplace(Tensor<T>& t, T slope = T(kLeakySlope)) {
  for (auto& v : t.data)
    if (v < T(0)) v *= slope;
}

/// Backward of leaky ReLU from its *output*; valid because the slope is
/// positive, so sign(output) == sign(input).
template <class T>
void leaky_relu_backward_inplace(const Tensor<T>& out, Tensor<T>& grad, T slope = T(kLeakySlope)) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (out.data[i] < T(0)) grad.data[i] *= slope;
}

/// Channel concatenation [a; b] on a shared grid.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.dims == b.dims)) fail(ErrorCode::shape, "concat: grids differ");
  Tensor<T> out;
  out.channels = a.channels + b.channels;
  out.dims = a.dims;
  out.data.reserve(a.data.size() + b.data.size());
  out.data.insert(out.data.end(), a.data.begin(), a.data.end());
  out.data.insert(out.data.end(), b.data.begin(), b.data.end());
  return out;
}

/// Splits a concat gradient back into its two channel blocks.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, std::int64_t first) {
  Tensor<T> a(first, g.dims), b(g.channels - first, g.dims);
  const auto cut = g.data.begin() + first * g.voxels();
  std::copy(g.data.begin(), cut, a.data.begin());
  std::copy(cut, g.data.end(), b.data.begin());
  return {std::move(a), std::move(b)};
}

/// Global average pooling followed by one linear map. weight is [out][in].
template <class T>
std::vector<T> global_head_forward(const Tensor<T>& in, std::span<const T> weight, std::span<const T> bias,
                                   std::int64_t outputs, std::vector<T>* pooled_out = nullptr) {
  const std::int64_t cin = in.channels, n = in.voxels();
  std::vector<T> pooled(static_cast<std::size_t>(cin));
  for (std::int64_t c = 0; c < cin; ++c) {
    const T* p = in.channel(c);
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += p[i];
    pooled[c] = static_cast<T>(s / static_cast<double>(n));
  }
  std::vector<T> out(static_cast<std::size_t>(outputs));
  for (std::int64_t o = 0; o < outputs; ++o) {
    T s = bias[o];
    for (std::int64_t c = 0; c < cin; ++c) s += weight[o * cin + c] * pooled[c];
    out[o] = s;
  }
  if (pooled_out) *pooled_out = std::move(pooled);
  return out;
}

template <class T>
void global_head_backward(const Tensor<T>& in, std::span<const T> pooled, std::span<const T> weight,
                          std::span<const T> grad_out, std::span<T> grad_weight, std::span<T> grad_bias,
                          Tensor<T>* grad_in) {
  const std::int64_t cin = in.channels, n = in.voxels();
  const auto outputs = static_cast<std::int64_t>(grad_out.size());
  std::vector<T> gp(static_cast<std::size_t>(cin), T(0));
  for (std::int64_t o = 0; o < outputs; ++o) {
    grad_bias[o] += grad_out[o];
    for (std::int64_t c = 0; c < cin; ++c) {
      grad_weight[o * cin + c] += grad_out[o] * pooled[c];
      gp[c] += grad_out[o] * weight[o * cin + c];
    }
  }
  if (!grad_in) return;
  *grad_in = Tensor<T>(cin, in.dims);
  for (std::int64_t c = 0; c < cin; ++c) {
    const T v = gp[c] / static_cast<T>(n);
    std::fill(grad_in->channel(c), grad_in->channel(c) + n, v);
  }
}

}  // namespace fdreg::net
