#pragma once

#include <map>
#include <optional>

#include <nlohmann/json.hpp>

#include "transform.hpp"

namespace fdreg {

struct LossWeights {
  double alpha = 1.0;   // mutual information
  double lambda = 1.0;  // Dice
  double beta = 1.0;    // bending energy

  void validate() const {
    for (double w : {alpha, lambda, beta})
      if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorCode::config, "loss weights must be finite and >= 0");
  }
};

inline constexpr int kDefaultMiBins = 32;

/// Value of a scalar loss plus its gradient w.r.t. the differentiated input.
struct ScalarGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// Parzen-windowed joint intensity histogram on [0,1] with linear (hat)
/// kernels centred at b / (bins - 1).
struct JointHistogram {
  int bins = 0;
  std::vector<double> joint;  // joint[f * bins + m]
  std::vector<double> p_fixed;
  std::vector<double> p_moving;

  double at(int f, int m) const { return joint[static_cast<std::size_t>(f * bins + m)]; }
};

namespace detail {

struct HatWeights {
  int b0;
  double w0, w1;  // weights of bins b0 and b0 + 1
  double inv_h;   // d w1 / dv; d w0 / dv = -inv_h
};

inline HatWeights hat_weights(double v, int bins) {
  const double inv_h = static_cast<double>(bins - 1);
  const double pos = std::clamp(v, 0.0, 1.0) * inv_h;
  const int b0 = std::clamp(static_cast<int>(std::floor(pos)), 0, bins - 2);
  const double f = pos - b0;
  return {b0, 1.0 - f, f, inv_h};
}

inline void check_mi_inputs(bool fixed_norm, bool warped_norm, const Grid& a, const Grid& b, int bins) {
  require_same_grid(a, b, "mi_loss");
  if (!fixed_norm || !warped_norm) fail(ErrorCode::contract, "mi_loss: inputs must be normalized to [0,1]");
  if (bins < 2) fail(ErrorCode::contract, "mi_loss: needs at least 2 bins");
}

}  // namespace detail

template <class T>
JointHistogram joint_histogram(const VolumeT<T>& fixed, const VolumeT<T>& warped, int bins = kDefaultMiBins) {
  detail::check_mi_inputs(fixed.normalized(), warped.normalized(), fixed.grid(), warped.grid(), bins);
  JointHistogram h;
  h.bins = bins;
  h.joint.assign(static_cast<std::size_t>(bins * bins), 0.0);
  const double inv_n = 1.0 / static_cast<double>(fixed.size());
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    const auto f = detail::hat_weights(fixed[i], bins);
    const auto m = detail::hat_weights(warped[i], bins);
    double* row0 = &h.joint[static_cast<std::size_t>(f.b0 * bins)];
    double* row1 = row0 + bins;
    row0[m.b0] += f.w0 * m.w0 * inv_n;
    row0[m.b0 + 1] += f.w0 * m.w1 * inv_n;
    row1[m.b0] += f.w1 * m.w0 * inv_n;
    row1[m.b0 + 1] += f.w1 * m.w1 * inv_n;
  }
  h.p_fixed.assign(bins, 0.0);
  h.p_moving.assign(bins, 0.0);
  for (int f = 0; f < bins; ++f)
    for (int m = 0; m < bins; ++m) {
      h.p_fixed[f] += h.at(f, m);
      h.p_moving[m] += h.at(f, m);
    }
  return h;
}

/// Mutual information in bits.
inline double mutual_information(const JointHistogram& h) {
  double mi = 0.0;
  for (int f = 0; f < h.bins; ++f)
    for (int m = 0; m < h.bins; ++m) {
      const double p = h.at(f, m);
      if (p > 0.0) mi += p * std::log2(p / (h.p_fixed[f] * h.p_moving[m]));
    }
  return mi;
}

/// Negative mutual information and its gradient w.r.t. the warped samples.
/// The fixed marginal is treated as a constant.
template <class T>
ScalarGrad mi_loss(const VolumeT<T>& fixed, const VolumeT<T>& warped, int bins = kDefaultMiBins,
                   bool with_gradient = true) {
  const JointHistogram h = joint_histogram(fixed, warped, bins);
  ScalarGrad out;
  out.value = -mutual_information(h);
  if (!with_gradient) return out;

  // dL/dp(f,m) once p_M's dependence on p is folded in; the +1/-1 terms cancel.
  std::vector<double> dl_dp(h.joint.size(), 0.0);
  for (int f = 0; f < bins; ++f)
    for (int m = 0; m < bins; ++m) {
      const double p = h.at(f, m);
      if (p > 0.0)
        dl_dp[static_cast<std::size_t>(f * bins + m)] =
            -(std::log(p) - std::log(h.p_fixed[f]) - std::log(h.p_moving[m])) / std::log(2.0);
    }
  const double inv_n = 1.0 / static_cast<double>(fixed.size());
  out.grad.assign(fixed.size(), 0.0);
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    const auto fw = detail::hat_weights(fixed[i], bins);
    const double v = warped[i];
    if (v < 0.0 || v > 1.0) continue;
    const auto mw = detail::hat_weights(v, bins);
    const double* r0 = &dl_dp[static_cast<std::size_t>(fw.b0 * bins + mw.b0)];
    const double* r1 = r0 + bins;
    const double g0 = fw.w0 * (r0[1] - r0[0]) + fw.w1 * (r1[1] - r1[0]);
    out.grad[i] = g0 * mw.inv_h * inv_n;
  }
  return out;
}

/// 1 - 2 sum(F W) / (sum F + sum W) and its gradient w.r.t. W.
template <class T>
ScalarGrad dice_loss(const VolumeT<T>& fixed_soft, const VolumeT<T>& warped_soft, bool with_gradient = true) {
  require_same_grid(fixed_soft.grid(), warped_soft.grid(), "dice_loss");
  if (!fixed_soft.normalized() || !warped_soft.normalized())
    fail(ErrorCode::contract, "dice_loss: soft masks must lie in [0,1]");
  double inter = 0.0, sf = 0.0, sw = 0.0;
  for (std::size_t i = 0; i < fixed_soft.size(); ++i) {
    inter += static_cast<double>(fixed_soft[i]) * warped_soft[i];
    sf += fixed_soft[i];
    sw += warped_soft[i];
  }
  const double denom = sf + sw;
  if (denom == 0.0) fail(ErrorCode::undefined, "dice_loss: both masks are empty");
  ScalarGrad out;
  out.value = 1.0 - 2.0 * inter / denom;
  if (!with_gradient) return out;
  out.grad.resize(fixed_soft.size());
  const double inv2 = 1.0 / (denom * denom);
  for (std::size_t i = 0; i < fixed_soft.size(); ++i)
    out.grad[i] = -2.0 * (static_cast<double>(fixed_soft[i]) * denom - inter) * inv2;
  return out;
}

template <class T>
struct FieldLoss {
  double value = 0.0;
  DisplacementFieldT<T> grad;
};

/// Mean over the whole domain of the squared Frobenius norm of each
/// component's Hessian; the stencil is evaluated at interior voxels only.
template <class T>
FieldLoss<T> bending_energy(const DisplacementFieldT<T>& field, bool with_gradient = true) {
  const Dims3 d = field.dims();
  if (d.nx < 3 || d.ny < 3 || d.nz < 3)
    fail(ErrorCode::too_small, "bending_energy needs at least 3 voxels per axis, got " + to_string(d));
  const std::int64_t s[3] = {1, d.nx, d.nx * d.ny};
  const double inv_n = 1.0 / static_cast<double>(field.voxel_count());
  FieldLoss<T> out{0.0, DisplacementFieldT<T>(field.grid())};
  for (int c = 0; c < 3; ++c) {
    const auto u = field.component(c);
    auto g = out.grad.component(c);
    for (std::int64_t z = 1; z + 1 < d.nz; ++z)
      for (std::int64_t y = 1; y + 1 < d.ny; ++y)
        for (std::int64_t x = 1; x + 1 < d.nx; ++x) {
          const std::int64_t i = d.index(x, y, z);
          for (int a = 0; a < 3; ++a) {
            const double h = static_cast<double>(u[i + s[a]]) - 2.0 * u[i] + u[i - s[a]];
            out.value += h * h * inv_n;
            if (with_gradient) {
              const double k = 2.0 * h * inv_n;
              g[i + s[a]] += static_cast<T>(k);
              g[i] += static_cast<T>(-2.0 * k);
              g[i - s[a]] += static_cast<T>(k);
            }
            for (int b = a + 1; b < 3; ++b) {
              const double m = 0.25 * (static_cast<double>(u[i + s[a] + s[b]]) - u[i + s[a] - s[b]] -
                                       u[i - s[a] + s[b]] + u[i - s[a] - s[b]]);
              // off-diagonal entries appear twice in the Frobenius norm
              out.value += 2.0 * m * m * inv_n;
              if (with_gradient) {
                const double k = 4.0 * m * inv_n * 0.25;
                g[i + s[a] + s[b]] += static_cast<T>(k);
                g[i + s[a] - s[b]] += static_cast<T>(-k);
                g[i - s[a] + s[b]] += static_cast<T>(-k);
                g[i - s[a] - s[b]] += static_cast<T>(k);
              }
            }
          }
        }
  }
  return out;
}

/// Named soft (one-hot or fractional) organ channels on one grid.
template <class T>
struct SoftMasks {
  std::vector<std::string> names;
  std::vector<VolumeT<T>> channels;

  std::size_t size() const { return channels.size(); }
};

/// One-hot channels for `organs`, looked up by name in the mask's label table.
template <class T = float>
SoftMasks<T> one_hot(const LabelMask& m, const std::vector<std::string>& organs) {
  SoftMasks<T> out;
  for (const auto& name : organs) {
    const auto id = m.label_of(name);
    if (!id) fail(ErrorCode::missing, "organ '" + name + "' is not in the mask label table");
    std::vector<T> ch(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) ch[i] = m[i] == *id ? T(1) : T(0);
    out.names.push_back(name);
    out.channels.emplace_back(m.grid(), std::move(ch));
  }
  return out;
}

struct LossReport {
  double total = 0.0;
  double mi = 0.0;
  double dice = 0.0;
  std::optional<double> be;  // absent for the affine objective
  std::map<std::string, double> per_organ_dice;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["total"] = total;
    j["mi"] = mi;
    j["dice"] = dice;
    j["be"] = be ? nlohmann::json(*be) : nlohmann::json(nullptr);
    j["per_organ"] = per_organ_dice;
    return j;
  }
};

/// Loss report plus each term's gradient, ready for the backward pass.
template <class T>
struct LossEvaluation {
  LossReport report;
  std::vector<double> grad_warped;                 // d(alpha*MI)/dI_W
  std::vector<std::vector<double>> grad_masks;     // d(lambda*Dice)/dS_W per organ
  std::optional<DisplacementFieldT<T>> grad_field;  // d(beta*BE)/dPhi
};

namespace detail {

/// Indices of organs present in the fixed mask; Dice is averaged over these.
template <class T>
std::vector<std::size_t> present_organs(const SoftMasks<T>& fixed) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < fixed.size(); ++k) {
    const auto& s = fixed.channels[k].samples();
    if (std::any_of(s.begin(), s.end(), [](T v) { return v > T(0); })) idx.push_back(k);
  }
  return idx;
}

template <class T>
LossEvaluation<T> composite_loss(const VolumeT<T>& fixed, const VolumeT<T>& warped,
                                 const SoftMasks<T>& fixed_masks, const SoftMasks<T>& warped_masks,
                                 const DisplacementFieldT<T>* field, const LossWeights& w, int bins,
                                 bool with_gradient) {
  w.validate();
  if (fixed_masks.size() != warped_masks.size())
    fail(ErrorCode::shape, "fixed and warped mask channel counts differ");
  LossEvaluation<T> ev;
  const auto mi = mi_loss(fixed, warped, bins, with_gradient);
  ev.report.mi = mi.value;
  if (with_gradient) {
    ev.grad_warped = mi.grad;
    for (auto& g : ev.grad_warped) g *= w.alpha;
  }

  const auto present = present_organs(fixed_masks);
  ev.grad_masks.resize(fixed_masks.size());
  const double inv_k = present.empty() ? 0.0 : 1.0 / static_cast<double>(present.size());
  for (std::size_t k : present) {
    auto d = dice_loss(fixed_masks.channels[k], warped_masks.channels[k], with_gradient);
    ev.report.per_organ_dice[fixed_masks.names[k]] = d.value;
    ev.report.dice += d.value * inv_k;
    if (with_gradient) {
      for (auto& g : d.grad) g *= w.lambda * inv_k;
      ev.grad_masks[k] = std::move(d.grad);
    }
  }

  ev.report.total = w.alpha * ev.report.mi + w.lambda * ev.report.dice;
  if (field) {
    auto be = bending_energy(*field, with_gradient);
    ev.report.be = be.value;
    ev.report.total += w.beta * be.value;
    if (with_gradient) {
      be.grad *= static_cast<T>(w.beta);
      ev.grad_field = std::move(be.grad);
    }
  }
  return ev;
}

}  // namespace detail

/// alpha * MI + lambda * mean organ Dice + beta * bending energy.
template <class T>
LossEvaluation<T> deformable_loss(const VolumeT<T>& fixed, const VolumeT<T>& warped,
                                  const SoftMasks<T>& fixed_masks, const SoftMasks<T>& warped_masks,
                                  const DisplacementFieldT<T>& field, const LossWeights& w,
                                  int bins = kDefaultMiBins, bool with_gradient = true) {
  return detail::composite_loss(fixed, warped, fixed_masks, warped_masks, &field, w, bins, with_gradient);
}

/// The deformable objective without the smoothness penalty.
template <class T>
LossEvaluation<T> affine_loss(const VolumeT<T>& fixed, const VolumeT<T>& warped,
                              const SoftMasks<T>& fixed_masks, const SoftMasks<T>& warped_masks,
                              const LossWeights& w, int bins = kDefaultMiBins, bool with_gradient = true) {
  return detail::composite_loss<T>(fixed, warped, fixed_masks, warped_masks, nullptr, w, bins, with_gradient);
}

}  // namespace fdreg
