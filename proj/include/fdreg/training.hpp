#pragma once

#include <chrono>
#include <filesystem>
#include <ostream>

#include <nlohmann/json.hpp>

#include "chain.hpp"
#include "io/frv.hpp"
#include "losses.hpp"
#include "net/serialize.hpp"
#include "optim.hpp"

namespace fdreg {

// ---------------------------------------------------------------------------
// Data

struct PairEntry {
  std::filesystem::path fixed, moving, fixed_mask, moving_mask;
};

/// Pair list; with `both_directions` every entry is also used reversed.
struct PairManifest {
  std::vector<PairEntry> entries;
  bool both_directions = false;

  std::vector<PairEntry> expanded() const {
    std::vector<PairEntry> out;
    for (const auto& e : entries) {
      out.push_back(e);
      if (both_directions) out.push_back({e.moving, e.fixed, e.moving_mask, e.fixed_mask});
    }
    return out;
  }
};

inline PairManifest load_manifest(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(p));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, p.string() + ": " + e.what());
  }
  const auto base = p.parent_path();
  auto resolve = [&](const nlohmann::json& e, const char* key) -> std::filesystem::path {
    if (!e.contains(key) || e[key].is_null()) return {};
    std::filesystem::path q = e[key].get<std::string>();
    return q.is_absolute() ? q : base / q;
  };
  PairManifest m;
  m.both_directions = j.value("both_directions", false);
  for (const auto& e : j.at("pairs"))
    m.entries.push_back({resolve(e, "fixed"), resolve(e, "moving"), resolve(e, "fixed_mask"), resolve(e, "moving_mask")});
  return m;
}

inline void save_manifest(const PairManifest& m, const std::filesystem::path& p) {
  nlohmann::json j;
  j["both_directions"] = m.both_directions;
  j["pairs"] = nlohmann::json::array();
  const auto base = p.parent_path();
  auto rel = [&](const std::filesystem::path& q) {
    return q.empty() ? nlohmann::json(nullptr) : nlohmann::json(std::filesystem::relative(q, base).generic_string());
  };
  for (const auto& e : m.entries)
    j["pairs"].push_back({{"fixed", rel(e.fixed)}, {"moving", rel(e.moving)},
                          {"fixed_mask", rel(e.fixed_mask)}, {"moving_mask", rel(e.moving_mask)}});
  io::write_file(p, j.dump(2) + "\n");
}

/// One preprocessed training pair held in memory.
template <class T>
struct TrainingPair {
  VolumeT<T> fixed, moving;
  LabelMask fixed_mask, moving_mask;
};

template <class T = float>
std::vector<TrainingPair<T>> load_pairs(const PairManifest& m) {
  std::vector<TrainingPair<T>> out;
  for (const auto& e : m.expanded()) {
    if (e.fixed_mask.empty() || e.moving_mask.empty())
      fail(ErrorCode::missing, "training pairs need fixed and moving masks");
    TrainingPair<T> p{io::read_volume<T>(e.fixed), io::read_volume<T>(e.moving), io::read_labels(e.fixed_mask),
                      io::read_labels(e.moving_mask)};
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

enum class PassScheme {
  per_organ,  // one similarity pass plus one Dice pass per organ, one live tape at a time
  joint,      // single forward/backward of the full objective
};

struct TrainConfig {
  int epochs = 400;
  int pairs_per_epoch = 400;
  int batch_size = 1;
  LossWeights weights;
  double lr = 1e-4;
  int mi_bins = kDefaultMiBins;
  std::uint64_t seed = 0;
  PassScheme scheme = PassScheme::per_organ;
  int checkpoint_every = 0;  // epochs; 0 disables
  std::filesystem::path checkpoint_dir;
  bool require_divisible_by_16 = true;  // off only for tiny test grids

  net::ForwardOptions forward_options() const { return {require_divisible_by_16, true}; }

  void validate() const {
    if (epochs < 1 || pairs_per_epoch < 1) fail(ErrorCode::config, "epochs and pairs_per_epoch must be positive");
    if (batch_size != 1) fail(ErrorCode::config, "batch_size is fixed at 1");
    if (!(lr > 0.0)) fail(ErrorCode::config, "learning rate must be positive");
    if (mi_bins < 2) fail(ErrorCode::config, "mi_bins must be >= 2");
    weights.validate();
  }
};

struct TrainRecord {
  int epoch = 0;
  std::size_t pair_index = 0;
  LossReport loss;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"pair_index", pair_index},
            {"loss_total", loss.total},
            {"mi", loss.mi},
            {"dice", loss.dice},
            {"be", loss.be ? nlohmann::json(*loss.be) : nlohmann::json(nullptr)},
            {"seconds", seconds}};
  }
};

struct TrainLog {
  std::vector<TrainRecord> records;
};

// ---------------------------------------------------------------------------
// Per-pair gradients

/// Inputs of one optimisation step: the pair, the organ channels and the
/// frozen prefix field the block is stacked on.
template <class T>
struct StepInputs {
  const VolumeT<T>* fixed = nullptr;
  const VolumeT<T>* moving = nullptr;  // original moving image
  const SoftMasks<T>* fixed_masks = nullptr;
  const SoftMasks<T>* moving_masks = nullptr;
  const DisplacementFieldT<T>* prefix = nullptr;  // accumulated frozen field (zero if none)
  const VolumeT<T>* moving_current = nullptr;     // moving warped by prefix
};

template <class T>
struct StepResult {
  net::Gradients<T> grads;
  LossReport report;
};

namespace detail {

template <class T>
DisplacementFieldT<T> total_field(const DisplacementFieldT<T>& prefix, const DisplacementFieldT<T>& own) {
  DisplacementFieldT<T> t = prefix;
  t += own;
  return t;
}

template <class T>
std::vector<std::size_t> organs_in_fixed(const SoftMasks<T>& m) {
  return present_organs(m);
}

}  // namespace detail

/// Per-organ scheme: pass 0 backpropagates alpha*MI (+ beta*BE for deformable
/// blocks); pass k backpropagates lambda/K * Dice of organ k. Each pass runs
/// its own forward, so exactly one tape is alive at any time.
template <class T>
StepResult<T> per_organ_gradients(const net::BlockWeightsT<T>& w, const StepInputs<T>& in, const TrainConfig& cfg) {
  const bool deformable = w.kind == net::BlockKind::deformable;
  const auto& lw = cfg.weights;
  StepResult<T> res{net::Gradients<T>::zeros_like(w), {}};
  const Grid& grid = in.fixed->grid();

  {
    auto r = forward_block(w, *in.fixed, *in.moving_current, cfg.forward_options());
    const auto total = detail::total_field(*in.prefix, r.field);
    const auto warped = warp(*in.moving, total);
    const auto mi = mi_loss(*in.fixed, warped, cfg.mi_bins);
    res.report.mi = mi.value;
    DisplacementFieldT<T> g(grid);
    warp_backward(*in.moving, total, std::span<const double>(mi.grad), g, lw.alpha);
    if (deformable) {
      auto be = bending_energy(total);
      res.report.be = be.value;
      be.grad *= static_cast<T>(lw.beta);
      g += be.grad;
    }
    res.grads += backward_block(w, r.tape, g);
  }

  const auto present = detail::organs_in_fixed(*in.fixed_masks);
  const double inv_k = present.empty() ? 0.0 : 1.0 / static_cast<double>(present.size());
  for (std::size_t k : present) {
    auto r = forward_block(w, *in.fixed, *in.moving_current, cfg.forward_options());
    const auto total = detail::total_field(*in.prefix, r.field);
    const auto& mov_k = in.moving_masks->channels[k];
    const auto warped_k = warp(mov_k, total);
    const auto d = dice_loss(in.fixed_masks->channels[k], warped_k);
    res.report.per_organ_dice[in.fixed_masks->names[k]] = d.value;
    res.report.dice += d.value * inv_k;
    DisplacementFieldT<T> g(grid);
    warp_backward(mov_k, total, std::span<const double>(d.grad), g, lw.lambda * inv_k);
    res.grads += backward_block(w, r.tape, g);
  }
  res.report.total = lw.alpha * res.report.mi + lw.lambda * res.report.dice + (res.report.be ? lw.beta * *res.report.be : 0.0);
  return res;
}

/// Single forward and single backward of the whole objective.
template <class T>
StepResult<T> joint_gradients(const net::BlockWeightsT<T>& w, const StepInputs<T>& in, const TrainConfig& cfg) {
  const bool deformable = w.kind == net::BlockKind::deformable;
  auto r = forward_block(w, *in.fixed, *in.moving_current, cfg.forward_options());
  const auto total = detail::total_field(*in.prefix, r.field);
  const auto warped = warp(*in.moving, total);
  const auto warped_masks = SoftMasks<T>{in.moving_masks->names, warp_mask_soft(in.moving_masks->channels, total)};
  const auto ev = deformable
                      ? deformable_loss(*in.fixed, warped, *in.fixed_masks, warped_masks, total, cfg.weights, cfg.mi_bins)
                      : affine_loss(*in.fixed, warped, *in.fixed_masks, warped_masks, cfg.weights, cfg.mi_bins);
  DisplacementFieldT<T> g(total.grid());
  warp_backward(*in.moving, total, std::span<const double>(ev.grad_warped), g);
  for (std::size_t k = 0; k < ev.grad_masks.size(); ++k)
    if (!ev.grad_masks[k].empty())
      warp_backward(in.moving_masks->channels[k], total, std::span<const double>(ev.grad_masks[k]), g);
  if (ev.grad_field) g += *ev.grad_field;
  return {backward_block(w, r.tape, g), ev.report};
}

template <class T>
StepResult<T> step_gradients(const net::BlockWeightsT<T>& w, const StepInputs<T>& in, const TrainConfig& cfg) {
  return cfg.scheme == PassScheme::per_organ ? per_organ_gradients(w, in, cfg) : joint_gradients(w, in, cfg);
}

// ---------------------------------------------------------------------------
// Training loops

/// Indices for one epoch: uniform without replacement, reseeded per epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n_pairs, int pairs_per_epoch, std::uint64_t seed, int epoch) {
  SplitMix64 rng(derive_seed(seed, 0x5EED0000ull + static_cast<std::uint64_t>(epoch)));
  std::vector<std::size_t> out;
  while (out.size() < static_cast<std::size_t>(pairs_per_epoch)) {
    std::vector<std::size_t> perm(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) perm[i] = i;
    for (std::size_t i = n_pairs; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
    for (std::size_t i = 0; i < n_pairs && out.size() < static_cast<std::size_t>(pairs_per_epoch); ++i)
      out.push_back(perm[i]);
  }
  return out;
}

template <class T>
struct TrainOutcome {
  net::BlockWeightsT<T> weights;
  AdamStateT<T> adam;
  TrainLog log;
};

using RecordSink = std::function<void(const TrainRecord&)>;

/// Trains `block` on `organs`, stacked on the frozen `prefix` blocks (whose
/// accumulated field warps the original moving image). Prefix weights are
/// only read.
template <class T>
TrainOutcome<T> train_region_block(net::BlockWeightsT<T> block, const std::vector<std::string>& organs,
                                   const std::vector<TrainingPair<T>>& pairs, const TrainConfig& cfg,
                                   std::span<const net::BlockWeightsT<T>* const> prefix = {},
                                   const RecordSink& sink = {}) {
  cfg.validate();
  if (pairs.empty()) fail(ErrorCode::config, "no training pairs");
  if (organs.empty()) fail(ErrorCode::config, "no organs to train on");
  for (const auto& p : pairs) {
    if (!p.fixed.normalized() || !p.moving.normalized())
      fail(ErrorCode::contract, "training volumes must be preprocessed and normalized");
    for (const auto& o : organs)
      if (!p.fixed_mask.label_of(o) || !p.moving_mask.label_of(o))
        fail(ErrorCode::missing, "organ '" + o + "' missing from a pair's label table");
  }

  TrainOutcome<T> out{std::move(block), {}, {}};
  out.adam = AdamStateT<T>::for_weights(out.weights, cfg.lr);

  // Frozen prefix outputs never change, so they are computed once per pair.
  struct Cached {
    SoftMasks<T> fixed_masks, moving_masks;
    DisplacementFieldT<T> prefix;
    VolumeT<T> moving_current;
  };
  std::vector<std::optional<Cached>> cache(pairs.size());
  auto prepared = [&](std::size_t i) -> const Cached& {
    if (!cache[i]) {
      const auto& p = pairs[i];
      Cached c{one_hot<T>(p.fixed_mask, organs), one_hot<T>(p.moving_mask, organs), DisplacementFieldT<T>(p.fixed.grid()),
               p.moving};
      if (!prefix.empty()) {
        for (const auto& f : run_chain<T>(prefix, p.fixed, p.moving, {cfg.require_divisible_by_16, false})) c.prefix += f;
        c.moving_current = warp(p.moving, c.prefix);
      } else {
        c.moving_current = warp(p.moving, c.prefix);
      }
      cache[i] = std::move(c);
    }
    return *cache[i];
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t idx : epoch_order(pairs.size(), cfg.pairs_per_epoch, cfg.seed, epoch)) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto& c = prepared(idx);
      const StepInputs<T> in{&pairs[idx].fixed, &pairs[idx].moving, &c.fixed_masks, &c.moving_masks, &c.prefix,
                             &c.moving_current};
      auto step = step_gradients(out.weights, in, cfg);
      adam_step(out.adam, out.weights, step.grads);
      TrainRecord rec{epoch, idx, std::move(step.report),
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      if (sink) sink(rec);
      out.log.records.push_back(std::move(rec));
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty()) {
      const auto stem = cfg.checkpoint_dir / ("epoch" + std::to_string(epoch + 1));
      net::save_weights(out.weights, stem.string() + ".trw");
      io::write_file(stem.string() + ".adam", encode_adam(out.adam));
    }
  }
  return out;
}

/// Trains the whole-body block on inputs warped by the four frozen
/// predecessors (affine, bone, thorax, abdomen), over all organs.
template <class T>
TrainOutcome<T> train_wholebody(net::BlockWeightsT<T> block,
                                std::span<const net::BlockWeightsT<T>* const> predecessors,
                                const std::vector<std::string>& all_organs, const std::vector<TrainingPair<T>>& pairs,
                                const TrainConfig& cfg, const RecordSink& sink = {}) {
  if (predecessors.size() != 4 || std::any_of(predecessors.begin(), predecessors.end(), [](auto* p) { return !p; }))
    fail(ErrorCode::missing, "whole-body training needs the affine, bone, thorax and abdomen blocks");
  if (predecessors[0]->kind != net::BlockKind::affine)
    fail(ErrorCode::contract, "the first predecessor must be the affine block");
  return train_region_block(std::move(block), all_organs, pairs, cfg, predecessors, sink);
}

// ---------------------------------------------------------------------------
// Instance optimisation (feasibility oracle): optimise a raw displacement
// field for one pair under the same objective, no network involved.

struct InstanceConfig {
  int iterations = 200;
  double lr = 0.2;  // voxels
  LossWeights weights;
  int mi_bins = kDefaultMiBins;
};

template <class T>
DisplacementFieldT<T> instance_optimize(const TrainingPair<T>& p, const std::vector<std::string>& organs,
                                        const InstanceConfig& cfg) {
  const auto fm = one_hot<T>(p.fixed_mask, organs);
  const auto mm = one_hot<T>(p.moving_mask, organs);
  DisplacementFieldT<T> u(p.fixed.grid());
  std::vector<double> m(u.data().size(), 0.0), v(u.data().size(), 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= cfg.iterations; ++it) {
    const auto warped = warp(p.moving, u);
    const SoftMasks<T> wm{mm.names, warp_mask_soft(mm.channels, u)};
    const auto ev = deformable_loss(p.fixed, warped, fm, wm, u, cfg.weights, cfg.mi_bins);
    DisplacementFieldT<T> g(u.grid());
    warp_backward(p.moving, u, std::span<const double>(ev.grad_warped), g);
    for (std::size_t k = 0; k < mm.size(); ++k)
      if (!ev.grad_masks[k].empty()) warp_backward(mm.channels[k], u, std::span<const double>(ev.grad_masks[k]), g);
    g += *ev.grad_field;
    const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
    auto& d = u.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double gi = g.data()[i];
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      d[i] = static_cast<T>(d[i] - cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
  return u;
}

}  // namespace fdreg
