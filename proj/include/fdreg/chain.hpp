#pragma once

#include "net/block.hpp"

namespace fdreg {

/// Output of any block expressed as a dense displacement field; the affine
/// block's parameters are densified onto the input grid.
template <class T>
struct BlockResult {
  DisplacementFieldT<T> field;
  net::TapeContext<T> tape;
  std::optional<AffineParams> affine;
};

template <class T>
BlockResult<T> forward_block(const net::BlockWeightsT<T>& w, const VolumeT<T>& fixed, const VolumeT<T>& moving_current,
                             const net::ForwardOptions& opt = {}) {
  if (w.kind == net::BlockKind::affine) {
    auto [out, tape] = net::affine_forward(w, fixed, moving_current, opt);
    return {affine_to_field<T>(out.params, fixed.grid()), std::move(tape), out.params};
  }
  auto [field, tape] = net::deformable_forward(w, fixed, moving_current, opt);
  return {std::move(field), std::move(tape), std::nullopt};
}

/// Reverse pass from dL/d(block field); consumes the tape.
template <class T>
net::Gradients<T> backward_block(const net::BlockWeightsT<T>& w, net::TapeContext<T>& tape,
                                 const DisplacementFieldT<T>& grad_field) {
  if (w.kind == net::BlockKind::affine) {
    const auto g12 = affine_field_backward(grad_field);
    std::vector<T> up(g12.begin(), g12.end());
    return net::backward<T>(w, tape, up);
  }
  return net::backward<T>(w, tape, std::span<const T>(grad_field.data()));
}

/// Sequential field decomposition: each block sees the fixed image and the
/// ORIGINAL moving image warped by everything accumulated so far; its field
/// is added to the running total. Returns the per-block component fields.
template <class T>
std::vector<DisplacementFieldT<T>> run_chain(std::span<const net::BlockWeightsT<T>* const> blocks,
                                             const VolumeT<T>& fixed, const VolumeT<T>& moving,
                                             const net::ForwardOptions& opt = {true, false}) {
  std::vector<DisplacementFieldT<T>> components;
  DisplacementFieldT<T> acc(fixed.grid());
  for (const auto* w : blocks) {
    const VolumeT<T> current = warp(moving, acc);
    auto r = forward_block(*w, fixed, current, opt);
    acc += r.field;
    components.push_back(std::move(r.field));
  }
  return components;
}

}  // namespace fdreg
