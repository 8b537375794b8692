#pragma once

#include <nlohmann/json.hpp>

#include "io/binary.hpp"
#include "net/block.hpp"

namespace fdreg {

/// Bias-corrected Adam moments for one block's tensors.
template <class T>
struct AdamStateT {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;

  static AdamStateT for_weights(const net::BlockWeightsT<T>& w, double lr = 1e-4) {
    AdamStateT s;
    s.lr = lr;
    for (const auto& t : w.tensors) {
      s.m.emplace_back(t.size(), T(0));
      s.v.emplace_back(t.size(), T(0));
    }
    return s;
  }
};

using AdamState = AdamStateT<float>;

template <class T>
void adam_step(AdamStateT<T>& s, net::BlockWeightsT<T>& w, const net::Gradients<T>& g) {
  if (s.m.size() != w.tensors.size() || g.tensors.size() != w.tensors.size())
    fail(ErrorCode::shape, "adam_step: tensor count mismatch");
  for (std::size_t i = 0; i < w.tensors.size(); ++i)
    if (s.m[i].size() != w.tensors[i].size() || g.tensors[i].size() != w.tensors[i].size())
      fail(ErrorCode::shape, "adam_step: shape mismatch in tensor '" + w.tensors[i].name + "'");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    auto& p = w.tensors[i].data;
    auto& m = s.m[i];
    auto& v = s.v[i];
    const auto& gi = g.tensors[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = gi[j];
      const double mj = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
      const double vj = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - s.lr * (mj / c1) / (std::sqrt(vj / c2) + s.eps));
    }
  }
}

inline constexpr std::string_view kAdamMagic = "FDRGADM1";

/// Checkpoint blob: magic, u64 header length, JSON header, then m and v as f32le.
template <class T>
std::string encode_adam(const AdamStateT<T>& s) {
  nlohmann::json h{{"schema", "adam-1"}, {"lr", s.lr},     {"beta1", s.beta1},
                   {"beta2", s.beta2},   {"eps", s.eps},   {"step", s.step}};
  std::vector<std::size_t> counts;
  std::string blob;
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    counts.push_back(s.m[i].size());
    io::append_f32<T>(blob, s.m[i]);
    io::append_f32<T>(blob, s.v[i]);
  }
  h["counts"] = counts;
  const auto header = h.dump();
  std::string out(kAdamMagic);
  io::append_u64(out, header.size());
  return out + header + blob;
}

template <class T = float>
AdamStateT<T> decode_adam(std::string_view bytes) {
  if (bytes.substr(0, kAdamMagic.size()) != kAdamMagic) fail(ErrorCode::format, "not an Adam state blob");
  const auto hlen = io::read_u64(bytes, kAdamMagic.size());
  const std::size_t start = kAdamMagic.size() + 8;
  const auto h = nlohmann::json::parse(bytes.substr(start, hlen));
  AdamStateT<T> s;
  s.lr = h.at("lr");
  s.beta1 = h.at("beta1");
  s.beta2 = h.at("beta2");
  s.eps = h.at("eps");
  s.step = h.at("step");
  std::size_t off = start + hlen;
  for (std::size_t n : h.at("counts").get<std::vector<std::size_t>>()) {
    s.m.emplace_back(n);
    s.v.emplace_back(n);
    io::read_f32<T>(bytes, off, std::span<T>(s.m.back()));
    off += 4 * n;
    io::read_f32<T>(bytes, off, std::span<T>(s.v.back()));
    off += 4 * n;
  }
  return s;
}

}  // namespace fdreg
