#pragma once

#include <atomic>
#include <optional>

#include "../random.hpp"
#include "../transform.hpp"
#include "layers.hpp"

namespace fdreg::net {

enum class BlockKind { affine, deformable };

inline std::string_view to_string(BlockKind k) { return k == BlockKind::affine ? "affine" : "deformable"; }

inline BlockKind block_kind_from_string(std::string_view s) {
  if (s == "affine") return BlockKind::affine;
  if (s == "deformable") return BlockKind::deformable;
  fail(ErrorCode::format, "unknown block architecture '" + std::string(s) + "'");
}

/// Channel plan of a registration block.
struct Architecture {
  std::int64_t in_channels = 2;
  std::vector<std::int64_t> encoder{16, 32, 32, 32, 32};
  std::vector<std::int64_t> decoder{32, 32, 32, 8, 8, 3};
  std::int64_t affine_outputs = 12;

  /// Decoder stages that upsample and take a skip connection; the rest run
  /// at full resolution.
  std::size_t upsampling_stages() const { return encoder.size() - 1; }

  void validate(BlockKind kind) const {
    if (encoder.size() < 2) fail(ErrorCode::shape, "architecture needs at least two encoder stages");
    if (kind == BlockKind::deformable) {
      if (decoder.size() < upsampling_stages() + 1)
        fail(ErrorCode::shape, "decoder must have at least one stage per upsampling plus an output stage");
      if (decoder.back() != 3) fail(ErrorCode::shape, "deformable blocks must emit 3 displacement channels");
    }
  }
  bool operator==(const Architecture&) const = default;
};

enum class LayerKind { conv, transposed_conv, concat, leaky_relu, global_head };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::transposed_conv: return "transposed-conv";
    case LayerKind::concat: return "concat";
    case LayerKind::leaky_relu: return "leaky-relu";
    case LayerKind::global_head: return "global-head";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int stride = 1;
  int kernel = kKernel;
  int padding = 1;
  double negative_slope = kLeakySlope;
  std::string name;
};

template <class T>
struct ParamTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  std::size_t size() const { return data.size(); }
};

/// Learnable tensors of one block, in a fixed order:
///   enc{i}.w [out][in][27], enc{i}.b
///   deformable: up{j}.w [in][out][27], up{j}.b, dec{j}.w, dec{j}.b, ...
///   affine:     head.w [12][C], head.b [12]
template <class T>
struct BlockWeightsT {
  BlockKind kind = BlockKind::deformable;
  Architecture arch;
  std::uint64_t seed = 0;
  std::vector<ParamTensor<T>> tensors;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <class U>
  BlockWeightsT<U> cast() const {
    BlockWeightsT<U> o{kind, arch, seed, {}};
    for (const auto& t : tensors) o.tensors.push_back({t.name, t.shape, std::vector<U>(t.data.begin(), t.data.end())});
    return o;
  }

  bool operator==(const BlockWeightsT& o) const {
    if (kind != o.kind || !(arch == o.arch) || seed != o.seed || tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name != o.tensors[i].name || tensors[i].shape != o.tensors[i].shape ||
          tensors[i].data != o.tensors[i].data)
        return false;
    return true;
  }
};

using BlockWeights = BlockWeightsT<float>;

/// Gradient buffers shaped like a block's tensors.
template <class T>
struct Gradients {
  std::vector<std::vector<T>> tensors;

  static Gradients zeros_like(const BlockWeightsT<T>& w) {
    Gradients g;
    for (const auto& t : w.tensors) g.tensors.emplace_back(t.size(), T(0));
    return g;
  }
  Gradients& operator+=(const Gradients& o) {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      for (std::size_t j = 0; j < tensors[i].size(); ++j) tensors[i][j] += o.tensors[i][j];
    return *this;
  }
};

// ---------------------------------------------------------------------------
// Layer plan and parameter layout

namespace detail {

struct StagePlan {
  std::int64_t in = 0, out = 0, skip = 0;
};

inline std::vector<StagePlan> encoder_plan(const Architecture& a) {
  std::vector<StagePlan> p;
  std::int64_t c = a.in_channels;
  for (auto e : a.encoder) {
    p.push_back({c, e, 0});
    c = e;
  }
  return p;
}

/// Per decoder stage: in = channels entering the upsampler (or conv for the
/// full-resolution stages), out = stage channels, skip = concatenated skip.
inline std::vector<StagePlan> decoder_plan(const Architecture& a) {
  std::vector<StagePlan> p;
  std::int64_t c = a.encoder.back();
  const std::size_t ups = a.upsampling_stages();
  for (std::size_t j = 0; j < a.decoder.size(); ++j) {
    const std::int64_t skip = j < ups ? a.encoder[ups - 1 - j] : 0;
    p.push_back({c, a.decoder[j], skip});
    c = a.decoder[j];
  }
  return p;
}

}  // namespace detail

inline std::vector<LayerSpec> layer_specs(BlockKind kind, const Architecture& a) {
  std::vector<LayerSpec> out;
  const auto enc = detail::encoder_plan(a);
  for (std::size_t i = 0; i < enc.size(); ++i) {
    out.push_back({LayerKind::conv, enc[i].in, enc[i].out, i == 0 ? 1 : 2, kKernel, 1, kLeakySlope,
                   "enc" + std::to_string(i)});
    out.push_back({LayerKind::leaky_relu, enc[i].out, enc[i].out, 1, kKernel, 1, kLeakySlope, ""});
  }
  if (kind == BlockKind::affine) {
    out.push_back({LayerKind::global_head, a.encoder.back(), a.affine_outputs, 1, kKernel, 1, kLeakySlope, "head"});
    return out;
  }
  const auto dec = detail::decoder_plan(a);
  for (std::size_t j = 0; j < dec.size(); ++j) {
    const bool last = j + 1 == dec.size();
    if (dec[j].skip) {
      out.push_back({LayerKind::transposed_conv, dec[j].in, dec[j].out, 2, kKernel, 1, kLeakySlope,
                     "up" + std::to_string(j)});
      out.push_back({LayerKind::concat, dec[j].out + dec[j].skip, dec[j].out + dec[j].skip, 1, kKernel, 1,
                     kLeakySlope, ""});
      out.push_back({LayerKind::conv, dec[j].out + dec[j].skip, dec[j].out, 1, kKernel, 1, kLeakySlope,
                     "dec" + std::to_string(j)});
    } else {
      out.push_back({LayerKind::conv, dec[j].in, dec[j].out, 1, kKernel, 1, kLeakySlope, "dec" + std::to_string(j)});
    }
    if (!last) out.push_back({LayerKind::leaky_relu, dec[j].out, dec[j].out, 1, kKernel, 1, kLeakySlope, ""});
  }
  return out;
}

/// Empty (zero) tensors with the right names and shapes.
template <class T>
BlockWeightsT<T> zero_weights(BlockKind kind, const Architecture& a = {}) {
  a.validate(kind);
  BlockWeightsT<T> w;
  w.kind = kind;
  w.arch = a;
  auto add = [&](std::string name, std::vector<std::int64_t> shape) {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    w.tensors.push_back({std::move(name), std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0))});
  };
  for (const auto& spec : layer_specs(kind, a)) {
    switch (spec.kind) {
      case LayerKind::conv:
        add(spec.name + ".w", {spec.out_channels, spec.in_channels, kTaps});
        add(spec.name + ".b", {spec.out_channels});
        break;
      case LayerKind::transposed_conv:
        add(spec.name + ".w", {spec.in_channels, spec.out_channels, kTaps});
        add(spec.name + ".b", {spec.out_channels});
        break;
      case LayerKind::global_head:
        add(spec.name + ".w", {spec.out_channels, spec.in_channels});
        add(spec.name + ".b", {spec.out_channels});
        break;
      default: break;
    }
  }
  return w;
}

/// Fan-in scaled uniform (He) initialisation with zero biases. The layer that
/// emits the block's output (final decoder conv or affine head) starts at
/// zero so an untrained block is the identity transform.
template <class T = float>
BlockWeightsT<T> init_weights(BlockKind kind, std::uint64_t seed, const Architecture& a = {}) {
  auto w = zero_weights<T>(kind, a);
  w.seed = seed;
  SplitMix64 rng(derive_seed(seed, kind == BlockKind::affine ? 1 : 2));
  const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  const std::size_t output_layer = w.tensors.size() - 2;
  for (std::size_t i = 0; i < w.tensors.size(); i += 2) {
    auto& t = w.tensors[i];
    if (i == output_layer) continue;
    // conv [out][in][27]: fan-in = in*27; transposed [in][out][27]: fan-in of
    // each output tap is in*27/8 on average, in*27 is used for simplicity
    const double fan_in = static_cast<double>(t.shape[1] * (t.shape.size() > 2 ? t.shape[2] : 1));
    const double fan = t.name.rfind("up", 0) == 0 ? static_cast<double>(t.shape[0] * kTaps) : fan_in;
    const double bound = gain * std::sqrt(3.0 / fan);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Tape

/// Activations recorded by one forward pass; backward may consume it once.
template <class T>
class TapeContext {
 public:
  TapeContext() = default;
  TapeContext(const TapeContext&) = delete;
  TapeContext& operator=(const TapeContext&) = delete;
  TapeContext(TapeContext&& o) noexcept { *this = std::move(o); }
  TapeContext& operator=(TapeContext&& o) noexcept {
    release();
    acts = std::move(o.acts);
    pooled = std::move(o.pooled);
    kind = o.kind;
    level_dims = std::move(o.level_dims);
    live_ = o.live_;
    consumed_ = o.consumed_;
    o.live_ = false;
    o.consumed_ = true;
    return *this;
  }
  ~TapeContext() { release(); }

  bool consumed() const { return consumed_; }

  /// Number of tapes currently holding activations (all scalar types).
  static int live() { return counter().load(); }
  static int peak() { return peak_counter().load(); }
  static void reset_peak() { peak_counter() = counter().load(); }

  // recorded state
  std::vector<Tensor<T>> acts;
  std::vector<T> pooled;
  BlockKind kind = BlockKind::deformable;
  std::vector<Dims3> level_dims;

  void start() {
    live_ = true;
    consumed_ = false;
    const int now = ++counter();
    int p = peak_counter().load();
    while (now > p && !peak_counter().compare_exchange_weak(p, now)) {
    }
  }
  void release() {
    acts.clear();
    acts.shrink_to_fit();
    pooled.clear();
    if (live_) --counter();
    live_ = false;
  }
  void consume() {
    consumed_ = true;
    release();
  }

 private:
  static std::atomic<int>& counter() {
    static std::atomic<int> c{0};
    return c;
  }
  static std::atomic<int>& peak_counter() {
    static std::atomic<int> p{0};
    return p;
  }
  bool live_ = false;
  bool consumed_ = true;
};

struct ForwardOptions {
  bool require_divisible_by_16 = true;
  bool record = true;  // keep activations for backward
};

namespace detail {

template <class T>
std::span<const T> cspan(const ParamTensor<T>& p) {
  return {p.data.data(), p.data.size()};
}

inline std::vector<Dims3> level_dims(const Dims3& d, std::size_t levels) {
  std::vector<Dims3> out{d};
  for (std::size_t i = 1; i < levels; ++i) out.push_back(conv_out_dims(out.back(), 2));
  return out;
}

template <class T>
Tensor<T> stack_inputs(const VolumeT<T>& fixed, const VolumeT<T>& moving, const ForwardOptions& opt) {
  require_same_grid(fixed.grid(), moving.grid(), "block input");
  if (!fixed.normalized() || !moving.normalized())
    fail(ErrorCode::contract, "block inputs must be normalized to [0,1]");
  if (opt.require_divisible_by_16) require_divisible_by_16(fixed.dims());
  Tensor<T> x(2, fixed.dims());
  std::copy(fixed.samples().begin(), fixed.samples().end(), x.channel(0));
  std::copy(moving.samples().begin(), moving.samples().end(), x.channel(1));
  return x;
}

/// Encoder: acts[0] = input, acts[1..E] = post-activation stage outputs.
template <class T>
void run_encoder(const BlockWeightsT<T>& w, Tensor<T> x, std::vector<Tensor<T>>& acts) {
  const auto plan = encoder_plan(w.arch);
  acts.push_back(std::move(x));
  for (std::size_t i = 0; i < plan.size(); ++i) {
    auto y = conv3d_forward<T>(acts.back(), cspan(w.tensors[2 * i]), cspan(w.tensors[2 * i + 1]), plan[i].out,
                               i == 0 ? 1 : 2);
    leaky_relu_inplace(y);
    acts.push_back(std::move(y));
  }
}

}  // namespace detail

/// Affine block output: the 12 residual parameters and the transform.
template <class T>
struct AffineOutput {
  std::array<double, 12> residual{};
  AffineParams params;
};

/// Deformable encoder-decoder. Tape layout after the encoder (acts[0..E]):
/// per upsampling stage j: up_j, cat_j, dec_j; per full-resolution stage: dec_j.
template <class T>
std::pair<DisplacementFieldT<T>, TapeContext<T>> deformable_forward(const BlockWeightsT<T>& w,
                                                                    const VolumeT<T>& fixed,
                                                                    const VolumeT<T>& moving_current,
                                                                    const ForwardOptions& opt = {}) {
  if (w.kind != BlockKind::deformable) fail(ErrorCode::contract, "deformable_forward needs deformable weights");
  TapeContext<T> tape;
  tape.kind = BlockKind::deformable;
  auto x = detail::stack_inputs(fixed, moving_current, opt);
  const std::size_t E = w.arch.encoder.size();
  tape.level_dims = detail::level_dims(fixed.dims(), E);
  std::vector<Tensor<T>> acts;
  detail::run_encoder(w, std::move(x), acts);

  const auto plan = detail::decoder_plan(w.arch);
  const std::size_t ups = w.arch.upsampling_stages();
  std::size_t t = 2 * E;
  Tensor<T> cur = acts.back();
  for (std::size_t j = 0; j < plan.size(); ++j) {
    const bool last = j + 1 == plan.size();
    if (j < ups) {
      const Dims3 target = tape.level_dims[ups - 1 - j];
      auto up = conv_transpose3d_forward<T>(cur, detail::cspan(w.tensors[t]), detail::cspan(w.tensors[t + 1]),
                                            plan[j].out, target);
      auto cat = concat(up, acts[ups - j]);  // skip from encoder stage at this resolution
      auto y = conv3d_forward<T>(cat, detail::cspan(w.tensors[t + 2]), detail::cspan(w.tensors[t + 3]), plan[j].out, 1);
      t += 4;
      if (!last) leaky_relu_inplace(y);
      if (opt.record) {
        acts.push_back(std::move(up));
        acts.push_back(std::move(cat));
        acts.push_back(y);
      } else if (j + 1 == ups) {
        acts.clear();  // skips no longer needed
      }
      cur = std::move(y);
    } else {
      auto y = conv3d_forward<T>(cur, detail::cspan(w.tensors[t]), detail::cspan(w.tensors[t + 1]), plan[j].out, 1);
      t += 2;
      if (!last) leaky_relu_inplace(y);
      if (opt.record) acts.push_back(y);
      cur = std::move(y);
    }
  }
  DisplacementFieldT<T> field(fixed.grid(), std::move(cur.data));
  if (opt.record) {
    tape.acts = std::move(acts);
    tape.start();
  }
  return {std::move(field), std::move(tape)};
}

template <class T>
std::pair<AffineOutput<T>, TapeContext<T>> affine_forward(const BlockWeightsT<T>& w, const VolumeT<T>& fixed,
                                                          const VolumeT<T>& moving, const ForwardOptions& opt = {}) {
  if (w.kind != BlockKind::affine) fail(ErrorCode::contract, "affine_forward needs affine weights");
  TapeContext<T> tape;
  tape.kind = BlockKind::affine;
  auto x = detail::stack_inputs(fixed, moving, opt);
  const std::size_t E = w.arch.encoder.size();
  tape.level_dims = detail::level_dims(fixed.dims(), E);
  std::vector<Tensor<T>> acts;
  detail::run_encoder(w, std::move(x), acts);
  std::vector<T> pooled;
  const auto raw = global_head_forward<T>(acts.back(), detail::cspan(w.tensors[2 * E]),
                                          detail::cspan(w.tensors[2 * E + 1]), w.arch.affine_outputs, &pooled);
  AffineOutput<T> out;
  for (std::size_t i = 0; i < 12; ++i) out.residual[i] = static_cast<double>(raw[i]);
  out.params = AffineParams::from_residual(out.residual);
  if (opt.record) {
    tape.acts = std::move(acts);
    tape.pooled = std::move(pooled);
    tape.start();
  }
  return {out, std::move(tape)};
}

namespace detail {

template <class T>
std::span<T> mspan(std::vector<T>& v) {
  return {v.data(), v.size()};
}

/// Backpropagates dL/d(encoder output) through the encoder; `skip_grads`
/// holds extra gradient arriving at each stage output via skip connections.
template <class T>
void encoder_backward(const BlockWeightsT<T>& w, const std::vector<Tensor<T>>& acts, Tensor<T> grad,
                      std::vector<Tensor<T>>& skip_grads, Gradients<T>& g) {
  const std::size_t E = w.arch.encoder.size();
  for (std::size_t i = E; i-- > 0;) {
    if (!skip_grads[i + 1].empty())
      for (std::size_t k = 0; k < grad.data.size(); ++k) grad.data[k] += skip_grads[i + 1].data[k];
    leaky_relu_backward_inplace(acts[i + 1], grad);
    Tensor<T> gin;
    conv3d_backward<T>(acts[i], cspan(w.tensors[2 * i]), grad, i == 0 ? 1 : 2, mspan(g.tensors[2 * i]),
                       mspan(g.tensors[2 * i + 1]), i == 0 ? nullptr : &gin);
    grad = std::move(gin);
  }
}

}  // namespace detail

/// Reverse pass for a recorded forward. `upstream` is dL/d(output): 3N field
/// components (component-major) for deformable blocks, or the 12 residual
/// parameters for the affine block. Consumes the tape.
template <class T>
Gradients<T> backward(const BlockWeightsT<T>& w, TapeContext<T>& tape, std::span<const T> upstream) {
  if (tape.consumed()) fail(ErrorCode::contract, "backward called twice on one tape");
  if (tape.kind != w.kind) fail(ErrorCode::contract, "tape and weights belong to different block kinds");
  Gradients<T> g = Gradients<T>::zeros_like(w);
  const auto& acts = tape.acts;
  const std::size_t E = w.arch.encoder.size();
  std::vector<Tensor<T>> skip_grads(E + 1);

  if (w.kind == BlockKind::affine) {
    if (upstream.size() != static_cast<std::size_t>(w.arch.affine_outputs))
      fail(ErrorCode::shape, "affine backward expects 12 upstream values");
    Tensor<T> grad;
    global_head_backward<T>(acts[E], tape.pooled, detail::cspan(w.tensors[2 * E]), upstream,
                            detail::mspan(g.tensors[2 * E]), detail::mspan(g.tensors[2 * E + 1]), &grad);
    detail::encoder_backward(w, acts, std::move(grad), skip_grads, g);
    tape.consume();
    return g;
  }

  const auto plan = detail::decoder_plan(w.arch);
  const std::size_t ups = w.arch.upsampling_stages();
  const Dims3 full = tape.level_dims.front();
  if (upstream.size() != static_cast<std::size_t>(3 * full.count()))
    fail(ErrorCode::shape, "deformable backward expects a 3-component field gradient");

  // tensor offsets and activation positions per decoder stage
  std::vector<std::size_t> toff(plan.size()), aoff(plan.size());
  std::size_t t = 2 * E, a = E + 1;
  for (std::size_t j = 0; j < plan.size(); ++j) {
    toff[j] = t;
    aoff[j] = a;
    t += j < ups ? 4 : 2;
    a += j < ups ? 3 : 1;
  }

  Tensor<T> grad(3, full);
  std::copy(upstream.begin(), upstream.end(), grad.data.begin());
  for (std::size_t j = plan.size(); j-- > 0;) {
    const bool last = j + 1 == plan.size();
    if (j >= ups) {
      const Tensor<T>& out = acts[aoff[j]];
      const Tensor<T>& in = acts[aoff[j] - 1];
      if (!last) leaky_relu_backward_inplace(out, grad);
      Tensor<T> gin;
      conv3d_backward<T>(in, detail::cspan(w.tensors[toff[j]]), grad, 1, detail::mspan(g.tensors[toff[j]]),
                         detail::mspan(g.tensors[toff[j] + 1]), &gin);
      grad = std::move(gin);
    } else {
      const Tensor<T>& up = acts[aoff[j]];
      const Tensor<T>& cat = acts[aoff[j] + 1];
      const Tensor<T>& out = acts[aoff[j] + 2];
      const Tensor<T>& prev = j == 0 ? acts[E] : acts[aoff[j - 1] + 2];
      if (!last) leaky_relu_backward_inplace(out, grad);
      Tensor<T> gcat;
      conv3d_backward<T>(cat, detail::cspan(w.tensors[toff[j] + 2]), grad, 1, detail::mspan(g.tensors[toff[j] + 2]),
                         detail::mspan(g.tensors[toff[j] + 3]), &gcat);
      auto [gup, gskip] = split_channels(gcat, up.channels);
      skip_grads[ups - j] = std::move(gskip);
      Tensor<T> gprev;
      conv_transpose3d_backward<T>(prev, detail::cspan(w.tensors[toff[j]]), gup, detail::mspan(g.tensors[toff[j]]),
                                   detail::mspan(g.tensors[toff[j] + 1]), &gprev);
      grad = std::move(gprev);
    }
  }
  detail::encoder_backward(w, acts, std::move(grad), skip_grads, g);
  tape.consume();
  return g;
}

}  // namespace fdreg::net
