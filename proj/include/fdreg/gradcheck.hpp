#pragma once

#include <functional>

#include <nlohmann/json.hpp>

#include "chain.hpp"
#include "losses.hpp"

namespace fdreg {

// Central finite differences at f64 against the analytic gradients. Layer
// outputs are reduced to a scalar with a fixed random projection r, so the
// analytic side is one backward pass with upstream r.

struct GradCheckResult {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double tolerance = 1e-4;
  std::size_t skipped_at_kinks = 0;  // coordinates whose stencil crosses a LeakyReLU kink
  bool passed() const { return coordinates > 0 && max_rel_error < tolerance; }

  nlohmann::json to_json() const {
    return {{"component", component},
            {"max_rel_error", max_rel_error},
            {"coordinates", coordinates},
            {"skipped_at_kinks", skipped_at_kinks},
            {"tolerance", tolerance},
            {"passed", passed()}};
  }
};

inline constexpr double kFdStep = 1e-4;

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"mi",     "dice",       "bending_energy", "warp",
                                              "conv",   "conv_stride2", "conv_transpose", "leaky_relu",
                                              "concat", "global_head", "affine_block",   "deformable_block"};
  return names;
}

namespace detail {

/// Accumulates |a - n| / max(|a|, |n|, floor); the floor is a small fraction
/// of the largest numeric derivative seen for the component, so entries that
/// are zero up to rounding do not dominate.
class RelErrorTracker {
 public:
  void add(double analytic, double numeric) { pairs_.emplace_back(analytic, numeric); }

  double max_rel_error() const {
    double scale = 0.0;
    for (auto [a, n] : pairs_) scale = std::max({scale, std::fabs(a), std::fabs(n)});
    const double floor = std::max(1e-3 * scale, 1e-12);
    double m = 0.0;
    for (auto [a, n] : pairs_)
      m = std::max(m, std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), floor}));
    return m;
  }
  std::size_t size() const { return pairs_.size(); }

 private:
  std::vector<std::pair<double, double>> pairs_;
};

/// Checks d f / d x[idx] for the sampled indices; `x` is perturbed in place
/// and restored.
inline void fd_check(std::vector<double>& x, const std::vector<std::size_t>& idx, const std::vector<double>& analytic,
                     const std::function<double()>& f, RelErrorTracker& tr) {
  for (std::size_t i : idx) {
    const double x0 = x[i];
    x[i] = x0 + kFdStep;
    const double fp = f();
    x[i] = x0 - kFdStep;
    const double fm = f();
    x[i] = x0;
    tr.add(analytic[i], (fp - fm) / (2.0 * kFdStep));
  }
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, SplitMix64& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  if (n <= k) return all;
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(k);
  return all;
}

inline std::vector<double> random_vector(std::size_t n, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Intensity in [0.02, 0.98] kept at least 0.05 bin widths from every bin
/// centre, where the hat kernels have kinks.
inline double off_center_intensity(SplitMix64& rng, int bins) {
  const double h = 1.0 / (bins - 1);
  for (;;) {
    const double v = rng.uniform(0.02, 0.98);
    const double f = v / h - std::floor(v / h);
    if (f > 0.05 && f < 0.95) return v;
  }
}

/// Sampling coordinate away from the integer lattice and from the clamped
/// border, where trilinear interpolation is not differentiable.
inline double off_lattice(SplitMix64& rng, std::int64_t n) {
  for (;;) {
    const double c = rng.uniform(0.1, static_cast<double>(n - 1) - 0.1);
    const double f = c - std::floor(c);
    if (f > 0.05 && f < 0.95) return c;
  }
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
  return h;
}

inline double dot(const std::vector<double>& a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

using Tensor64 = net::Tensor<double>;

inline Tensor64 random_tensor(std::int64_t c, Dims3 d, SplitMix64& rng, double margin = 0.0) {
  Tensor64 t(c, d);
  for (auto& v : t.data) {
    double x = rng.uniform(-1.0, 1.0);
    if (margin > 0 && std::fabs(x) < margin) x += x < 0 ? -margin : margin;
    v = x;
  }
  return t;
}

inline GradCheckResult check_mi(SplitMix64& rng, std::size_t samples) {
  const int bins = 8;
  const Grid g({5, 5, 5});
  std::vector<double> f(g.voxel_count()), w(g.voxel_count());
  for (auto& v : f) v = off_center_intensity(rng, bins);
  for (auto& v : w) v = off_center_intensity(rng, bins);
  const VolumeT<double> fixed(g, f);
  const auto an = mi_loss(fixed, VolumeT<double>(g, w), bins);
  RelErrorTracker tr;
  fd_check(w, sample_indices(w.size(), samples, rng), an.grad,
           [&] { return mi_loss(fixed, VolumeT<double>(g, w), bins, false).value; }, tr);
  return {"mi", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_dice(SplitMix64& rng, std::size_t samples) {
  const Grid g({5, 5, 5});
  const auto f = random_vector(g.voxel_count(), rng, 0.0, 1.0);
  auto w = random_vector(g.voxel_count(), rng, 0.0, 1.0);
  const VolumeT<double> fixed(g, f);
  const auto an = dice_loss(fixed, VolumeT<double>(g, w));
  RelErrorTracker tr;
  fd_check(w, sample_indices(w.size(), samples, rng), an.grad,
           [&] { return dice_loss(fixed, VolumeT<double>(g, w), false).value; }, tr);
  return {"dice", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_bending(SplitMix64& rng, std::size_t samples) {
  const Grid g({5, 5, 5});
  DisplacementFieldT<double> u(g, random_vector(3 * g.voxel_count(), rng));
  const auto an = bending_energy(u);
  RelErrorTracker tr;
  fd_check(u.data(), sample_indices(u.data().size(), samples, rng), an.grad.data(),
           [&] { return bending_energy(u, false).value; }, tr);
  return {"bending_energy", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_warp(SplitMix64& rng, std::size_t samples) {
  const Grid g({6, 5, 7});
  const VolumeT<double> moving(g, random_vector(g.voxel_count(), rng, 0.0, 1.0));
  DisplacementFieldT<double> u(g);
  const Dims3 d = g.dims;
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        u.at(0, i) = off_lattice(rng, d.nx) - x;
        u.at(1, i) = off_lattice(rng, d.ny) - y;
        u.at(2, i) = off_lattice(rng, d.nz) - z;
      }
  const auto r = random_vector(g.voxel_count(), rng);
  DisplacementFieldT<double> an(g);
  warp_backward(moving, u, std::span<const double>(r), an);
  RelErrorTracker tr;
  fd_check(u.data(), sample_indices(u.data().size(), samples, rng), an.data(),
           [&] { return dot(r, warp(moving, u).samples()); }, tr);
  return {"warp", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_conv(SplitMix64& rng, std::size_t samples, int stride) {
  const std::int64_t cin = 2, cout = 3;
  auto in = random_tensor(cin, {4, 4, 4}, rng);
  auto w = random_vector(static_cast<std::size_t>(cout * cin * net::kTaps), rng);
  auto b = random_vector(static_cast<std::size_t>(cout), rng);
  auto out = [&] { return net::conv3d_forward<double>(in, w, b, cout, stride); };
  const auto r = random_vector(out().data.size(), rng);
  Tensor64 go(cout, net::conv_out_dims(in.dims, stride));
  go.data = r;
  std::vector<double> gw(w.size()), gb(b.size());
  Tensor64 gin;
  net::conv3d_backward<double>(in, w, go, stride, gw, gb, &gin);
  auto f = [&] { return dot(r, out().data); };
  RelErrorTracker tr;
  fd_check(in.data, sample_indices(in.data.size(), samples, rng), gin.data, f, tr);
  fd_check(w, sample_indices(w.size(), samples, rng), gw, f, tr);
  fd_check(b, sample_indices(b.size(), samples, rng), gb, f, tr);
  return {stride == 1 ? "conv" : "conv_stride2", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_conv_transpose(SplitMix64& rng, std::size_t samples) {
  const std::int64_t cin = 3, cout = 2;
  RelErrorTracker tr;
  // even (exact doubling) and odd target extents
  for (const Dims3 target : {Dims3{4, 4, 4}, Dims3{3, 4, 5}}) {
    auto in = random_tensor(cin, net::conv_out_dims(target, 2), rng);
    auto w = random_vector(static_cast<std::size_t>(cin * cout * net::kTaps), rng);
    auto b = random_vector(static_cast<std::size_t>(cout), rng);
    auto out = [&] { return net::conv_transpose3d_forward<double>(in, w, b, cout, target); };
    const auto r = random_vector(out().data.size(), rng);
    Tensor64 go(cout, target);
    go.data = r;
    std::vector<double> gw(w.size()), gb(b.size());
    Tensor64 gin;
    net::conv_transpose3d_backward<double>(in, w, go, gw, gb, &gin);
    auto f = [&] { return dot(r, out().data); };
    fd_check(in.data, sample_indices(in.data.size(), samples, rng), gin.data, f, tr);
    fd_check(w, sample_indices(w.size(), samples, rng), gw, f, tr);
    fd_check(b, sample_indices(b.size(), samples, rng), gb, f, tr);
  }
  return {"conv_transpose", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_leaky_relu(SplitMix64& rng, std::size_t samples) {
  auto in = random_tensor(2, {3, 3, 3}, rng, 10 * kFdStep);
  const auto r = random_vector(in.data.size(), rng);
  auto out = [&] {
    auto t = in;
    net::leaky_relu_inplace(t);
    return t;
  };
  Tensor64 g(in.channels, in.dims);
  g.data = r;
  net::leaky_relu_backward_inplace(out(), g);
  RelErrorTracker tr;
  fd_check(in.data, sample_indices(in.data.size(), samples, rng), g.data, [&] { return dot(r, out().data); }, tr);
  return {"leaky_relu", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_concat(SplitMix64& rng, std::size_t samples) {
  auto a = random_tensor(2, {3, 3, 2}, rng);
  auto b = random_tensor(3, {3, 3, 2}, rng);
  const auto r = random_vector(static_cast<std::size_t>(5 * a.voxels()), rng);
  Tensor64 g(5, a.dims);
  g.data = r;
  auto [ga, gb] = net::split_channels(g, a.channels);
  auto f = [&] { return dot(r, net::concat(a, b).data); };
  RelErrorTracker tr;
  fd_check(a.data, sample_indices(a.data.size(), samples, rng), ga.data, f, tr);
  fd_check(b.data, sample_indices(b.data.size(), samples, rng), gb.data, f, tr);
  return {"concat", tr.max_rel_error(), tr.size()};
}

inline GradCheckResult check_global_head(SplitMix64& rng, std::size_t samples) {
  const std::int64_t cin = 4, outs = 12;
  auto in = random_tensor(cin, {3, 2, 4}, rng);
  auto w = random_vector(static_cast<std::size_t>(outs * cin), rng);
  auto b = random_vector(static_cast<std::size_t>(outs), rng);
  const auto r = random_vector(static_cast<std::size_t>(outs), rng);
  std::vector<double> pooled;
  net::global_head_forward<double>(in, w, b, outs, &pooled);
  std::vector<double> gw(w.size()), gb(b.size());
  Tensor64 gin;
  net::global_head_backward<double>(in, pooled, w, r, gw, gb, &gin);
  auto f = [&] { return dot(r, net::global_head_forward<double>(in, w, b, outs)); };
  RelErrorTracker tr;
  fd_check(in.data, sample_indices(in.data.size(), samples, rng), gin.data, f, tr);
  fd_check(w, sample_indices(w.size(), samples, rng), gw, f, tr);
  fd_check(b, sample_indices(b.size(), samples, rng), gb, f, tr);
  return {"global_head", tr.max_rel_error(), tr.size()};
}

/// Signs of every LeakyReLU input recorded on a block tape. Encoder stage
/// outputs and all decoder conv outputs but the last are activated.
template <class T>
std::vector<bool> kink_signature(const net::TapeContext<T>& tape, const net::Architecture& arch) {
  const std::size_t E = arch.encoder.size(), ups = arch.upsampling_stages();
  std::vector<std::size_t> activated;
  for (std::size_t i = 1; i <= E; ++i) activated.push_back(i);
  if (tape.kind == net::BlockKind::deformable) {
    for (std::size_t j = 0; j < ups; ++j) activated.push_back(E + 3 * j + 3);
    for (std::size_t k = E + 3 * ups + 1; k + 1 < tape.acts.size(); ++k) activated.push_back(k);
  }
  std::vector<bool> sig;
  for (std::size_t i : activated)
    for (T v : tape.acts[i].data) sig.push_back(v > T(0));
  return sig;
}

/// Full block on an 8x8x16 pair: every tensor gets random weights (the
/// zero-initialised output layer included) and a few entries of each are
/// perturbed. The block is piecewise smooth, so a coordinate counts only if
/// no LeakyReLU input changes sign between the two stencil points.
inline GradCheckResult check_block(SplitMix64& rng, std::size_t per_tensor, net::BlockKind kind) {
  const Grid g({8, 8, 16});
  const VolumeT<double> fixed(g, random_vector(g.voxel_count(), rng, 0.0, 1.0));
  const VolumeT<double> moving(g, random_vector(g.voxel_count(), rng, 0.0, 1.0));
  auto w = net::init_weights<double>(kind, rng.next());
  for (auto& t : w.tensors)
    if (std::all_of(t.data.begin(), t.data.end(), [](double v) { return v == 0.0; }))
      for (auto& v : t.data) v = rng.uniform(-0.05, 0.05);
  const auto r = random_vector(3 * g.voxel_count(), rng);
  auto probe = [&] {
    auto res = forward_block(w, fixed, moving, {false, true});
    return std::pair{dot(r, res.field.data()), kink_signature(res.tape, w.arch)};
  };
  auto res = forward_block(w, fixed, moving, {false, true});
  const auto grads = backward_block(w, res.tape, DisplacementFieldT<double>(g, r));
  RelErrorTracker tr;
  std::size_t skipped = 0;
  for (std::size_t k = 0; k < w.tensors.size(); ++k) {
    auto& x = w.tensors[k].data;
    std::size_t accepted = 0;
    for (std::size_t i : sample_indices(x.size(), 8 * per_tensor, rng)) {
      if (accepted == per_tensor) break;
      const double x0 = x[i];
      x[i] = x0 + kFdStep;
      const auto [fp, sp] = probe();
      x[i] = x0 - kFdStep;
      const auto [fm, sm] = probe();
      x[i] = x0;
      if (sp != sm) {
        ++skipped;
        continue;
      }
      tr.add(grads.tensors[k][i], (fp - fm) / (2.0 * kFdStep));
      ++accepted;
    }
  }
  GradCheckResult out{kind == net::BlockKind::affine ? "affine_block" : "deformable_block", tr.max_rel_error(),
                      tr.size()};
  out.skipped_at_kinks = skipped;
  return out;
}

}  // namespace detail

/// Runs the named check `trials` times with distinct random instances and
/// keeps the worst error.
inline GradCheckResult grad_check(const std::string& component, int trials = 1, double tolerance = 1e-4,
                                  std::uint64_t seed = 0) {
  const auto& names = gradcheck_components();
  if (std::find(names.begin(), names.end(), component) == names.end())
    fail(ErrorCode::config, "unknown gradcheck component '" + component + "'");
  GradCheckResult worst{component, 0.0, 0, tolerance};
  for (int t = 0; t < std::max(1, trials); ++t) {
    SplitMix64 rng(derive_seed(seed, detail::fnv1a(component) + static_cast<std::uint64_t>(t)));
    GradCheckResult r;
    if (component == "mi") r = detail::check_mi(rng, 60);
    else if (component == "dice") r = detail::check_dice(rng, 60);
    else if (component == "bending_energy") r = detail::check_bending(rng, 120);
    else if (component == "warp") r = detail::check_warp(rng, 120);
    else if (component == "conv") r = detail::check_conv(rng, 40, 1);
    else if (component == "conv_stride2") r = detail::check_conv(rng, 40, 2);
    else if (component == "conv_transpose") r = detail::check_conv_transpose(rng, 40);
    else if (component == "leaky_relu") r = detail::check_leaky_relu(rng, 54);
    else if (component == "concat") r = detail::check_concat(rng, 30);
    else if (component == "global_head") r = detail::check_global_head(rng, 40);
    else if (component == "affine_block") r = detail::check_block(rng, 3, net::BlockKind::affine);
    else r = detail::check_block(rng, 3, net::BlockKind::deformable);
    worst.coordinates += r.coordinates;
    worst.skipped_at_kinks += r.skipped_at_kinks;
    worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
  }
  return worst;
}

inline std::vector<GradCheckResult> grad_check_all(int trials = 1, double tolerance = 1e-4, std::uint64_t seed = 0) {
  std::vector<GradCheckResult> out;
  for (const auto& c : gradcheck_components()) out.push_back(grad_check(c, trials, tolerance, seed));
  return out;
}

}  // namespace fdreg
