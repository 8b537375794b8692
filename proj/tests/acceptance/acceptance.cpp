// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   fdreg_acceptance [--criteria 1,2,...] [--cache-dir DIR] [--report FILE]
//
// Criteria 6 and 7 train the full pipeline on the phantom suite. Trained
// bundles are cached per block under --cache-dir, keyed by a hash of the
// training configuration; evaluation always runs fresh.

#include <bit>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "fdreg/fdreg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fdreg::acceptance {
namespace {

struct Outcome {
  bool pass = false;
  json detail = json::object();
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Grid grid(std::int64_t nx, std::int64_t ny, std::int64_t nz) { return Grid(Dims3{nx, ny, nz}); }

template <class T = float>
VolumeT<T> random_volume(const Grid& g, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<T> s(g.voxel_count());
  for (auto& v : s) v = static_cast<T>(rng.uniform(0, 1));
  return VolumeT<T>(g, std::move(s));
}

template <class T, class F>
DisplacementFieldT<T> field_from(const Grid& g, F&& f) {
  DisplacementFieldT<T> u(g);
  const Dims3 d = g.dims;
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(d.index(x, y, z));
        const Vec3 v = f(x, y, z);
        for (int c = 0; c < 3; ++c) u.at(c, i) = static_cast<T>(v[c]);
      }
  return u;
}

/// Initialised model whose output layers are small and nonzero, so every
/// block does real work.
PipelineModel active_model(const Grid& g, std::uint64_t seed, const RegionSpec& regions = RegionSpec::canonical()) {
  auto m = initial_model(g, seed, regions);
  SplitMix64 rng(seed);
  for (auto& b : m.blocks) {
    auto& out_w = b->tensors[b->tensors.size() - 2];
    for (auto& v : out_w.data) v = static_cast<float>(rng.uniform(-0.01, 0.01));
  }
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = grad_check_all(1, 1e-4, 0);
  const double secs = seconds_since(t0);
  Outcome o{secs < 300.0, {{"seconds", secs}}};
  for (const auto& r : results) {
    o.pass &= r.passed();
    o.detail["max_rel_error"][r.component] = r.max_rel_error;
  }
  return o;
}

Outcome per_organ_equivalence() {
  PhantomSpec s;
  s.grid = grid(16, 16, 32);
  s.background = 0.4;
  s.noise_sigma = 0.0;
  s.organs = {{"lung", "thorax", {8, 8, 24}, {4, 4, 5}, 0.1},
              {"liver", "abdomen", {7, 8, 14}, {4, 4, 4}, 0.7},
              {"pelvis", "bone", {8, 8, 5}, {5, 3, 3}, 0.9}};
  DeformationSpec d;
  d.amplitude = 2;
  d.sigma = 3;
  d.seed = 5;
  const auto p = make_pair(s, d, 5);
  const std::vector<std::string> organs{"lung", "liver", "pelvis"};
  const TrainingPair<double> pair{p.fixed.cast<double>(), p.moving.cast<double>(), p.fixed_mask, p.moving_mask};
  const auto fm = one_hot<double>(pair.fixed_mask, organs), mm = one_hot<double>(pair.moving_mask, organs);
  DisplacementFieldT<double> prefix(s.grid);
  SplitMix64 rng(5);
  for (auto& v : prefix.data()) v = rng.uniform(-0.3, 0.3);
  const auto current = warp(pair.moving, prefix);
  const StepInputs<double> in{&pair.fixed, &pair.moving, &fm, &mm, &prefix, &current};

  TrainConfig cfg;
  cfg.require_divisible_by_16 = false;
  cfg.weights = {0.8, 1.2, 0.5};
  Outcome o{true};
  for (auto kind : {net::BlockKind::deformable, net::BlockKind::affine}) {
    auto w = net::init_weights<double>(kind, 7);
    for (auto& t : w.tensors)
      if (std::all_of(t.data.begin(), t.data.end(), [](double v) { return v == 0.0; }))
        for (auto& v : t.data) v = rng.uniform(-0.05, 0.05);
    net::TapeContext<double>::reset_peak();
    const int base = net::TapeContext<double>::live();
    const auto per = per_organ_gradients(w, in, cfg);
    const int peak = net::TapeContext<double>::peak() - base;
    const auto joint = joint_gradients(w, in, cfg);
    double scale = 0, worst = 0;
    for (const auto& t : joint.grads.tensors)
      for (double v : t) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < joint.grads.tensors.size(); ++i)
      for (std::size_t j = 0; j < joint.grads.tensors[i].size(); ++j)
        worst = std::max(worst, std::abs(per.grads.tensors[i][j] - joint.grads.tensors[i][j]) / scale);
    const std::string name = kind == net::BlockKind::affine ? "affine" : "deformable";
    o.detail[name] = {{"max_rel_diff", worst}, {"peak_live_tapes", peak}};
    o.pass &= worst < 1e-6 && peak <= 1;
  }
  return o;
}

Outcome identity_pipeline() {
  DeformationSpec d;
  d.amplitude = 6;
  d.sigma = 10;
  d.seed = 3;
  const auto p = make_pair(default_phantom_spec(), d, 3);
  const auto model = zero_model(p.fixed.grid());
  const auto r = register_pair(model, p.fixed, p.moving);
  bool zero = true;
  for (float v : r.total.data()) zero &= std::bit_cast<std::uint32_t>(v) == 0u;
  const double fold = folding_fraction(jacobian(r.total));
  std::vector<std::string> organs;
  for (const auto& [id, n] : p.fixed_mask.label_table()) organs.push_back(n);
  const auto row = evaluate_pair(model, p.fixed, p.fixed_mask, p.moving, p.moving_mask, organs);
  bool same = true;
  for (const auto& o : organs) same &= row.dsc.at(o) == organ_dsc(p.fixed_mask, p.moving_mask, o);
  return {zero && r.warped == p.moving && fold == 0.0 && same,
          {{"bitwise_zero_field", zero}, {"warped_equals_moving", r.warped == p.moving}, {"folding", fold},
           {"dsc_equals_unregistered", same}}};
}

Outcome jacobian_anchors() {
  const Grid g = grid(8, 8, 8);
  const auto stretch = jacobian(field_from<double>(g, [](auto x, auto, auto) { return Vec3{0.5 * x, 0, 0}; }));
  const auto flip = jacobian(field_from<double>(g, [](auto x, auto, auto) { return Vec3{-2.0 * x, 0, 0}; }));
  double e_stretch = 0, e_flip = 0;
  for (std::int64_t z = 1; z < 7; ++z)
    for (std::int64_t y = 1; y < 7; ++y)
      for (std::int64_t x = 1; x < 7; ++x) {
        const auto i = static_cast<std::size_t>(g.dims.index(x, y, z));
        e_stretch = std::max(e_stretch, std::abs(stretch.det[i] - 1.5));
        e_flip = std::max(e_flip, std::abs(flip.det[i] + 1.0));
      }
  const double fold = interior_folding_fraction(flip);
  double be = 0;
  SplitMix64 rng(11);
  for (int t = 0; t < 5; ++t) {
    AffineParams a;
    for (auto& v : a.linear) v = rng.uniform(-1, 1);
    for (auto& v : a.translation) v = rng.uniform(-3, 3);
    be = std::max(be, std::abs(bending_energy(affine_to_field<double>(a, g)).value));
  }
  return {e_stretch < 1e-6 && e_flip < 1e-6 && fold == 1.0 && be < 1e-9,
          {{"det_1_5_error", e_stretch}, {"det_minus_1_error", e_flip}, {"interior_folding", fold},
           {"affine_bending_energy", be}}};
}

Outcome mi_anchors() {
  const Grid g = grid(6, 5, 4);
  const double constant = mi_loss(Volume(g, 0.5f), random_volume(g, 1), 32).value;
  const Grid hg = grid(4, 2, 2);
  std::vector<float> half(hg.voxel_count());
  for (std::size_t i = 0; i < half.size(); ++i) half[i] = i < half.size() / 2 ? 0.0f : 1.0f;
  const Volume hh(hg, half);
  const double one_bit = -mi_loss(hh, hh, 2).value;
  int ordered = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto v = random_volume<double>(grid(8, 8, 8), 100 + seed);
    auto s = v.samples();
    std::mt19937_64 rng(seed);
    std::shuffle(s.begin(), s.end(), rng);
    ordered += mi_loss(v, v).value <= mi_loss(v, VolumeT<double>(v.grid(), s)).value;
  }
  return {std::abs(constant) < 1e-9 && std::abs(one_bit - 1.0) < 1e-9 && ordered == 20,
          {{"constant_fixed_loss", constant}, {"half_half_bits", one_bit}, {"self_beats_permuted", ordered}}};
}

Outcome shape_anchors() {
  const Grid g = grid(128, 96, 160);
  const auto a = random_volume(g, 1), b = random_volume(g, 2);
  auto [field, tape] = net::deformable_forward(net::init_weights<float>(net::BlockKind::deformable, 1), a, b,
                                               {true, false});
  const auto coarsest = net::detail::level_dims(g.dims, 5).back();
  auto [affine, atape] = net::affine_forward(net::init_weights<float>(net::BlockKind::affine, 1), a, b, {true, false});
  const bool ok = field.grid() == g && field.data().size() == 3 * g.voxel_count() && coarsest == Dims3{8, 6, 10} &&
                  affine.residual.size() == 12;
  return {ok,
          {{"field_dims", to_string(field.dims())},
           {"coarsest", to_string(coarsest)},
           {"affine_parameters", affine.residual.size()}}};
}

Outcome inference_runtime() {
  const unsigned before = threads();
  set_threads(1);
  const Grid g = grid(128, 96, 160);
  const auto model = active_model(g, 3);
  const auto f = random_volume(g, 4), m = random_volume(g, 5);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = register_pair(model, f, m);
  const double secs = seconds_since(t0);
  set_threads(before);
  return {secs < 60.0 && r.components.size() == 5, {{"seconds", secs}, {"threads", 1}}};
}

std::string read_bytes(const fs::path& p) { return io::read_file(p); }

std::map<std::string, std::string> read_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = read_bytes(e.path());
  return out;
}

Outcome round_trips(const fs::path& scratch) {
  fs::remove_all(scratch);
  DeformationSpec d;
  d.amplitude = 3;
  d.sigma = 6;
  d.seed = 2;
  const auto p = make_pair(default_phantom_spec(), d, 2);
  io::write_volume(scratch / "a" / "v.frv", p.moving);
  io::write_labels(scratch / "a" / "m.frv", p.moving_mask);
  io::write_field(scratch / "a" / "u.frv", p.truth);
  io::write_volume(scratch / "b" / "v.frv", io::read_volume(scratch / "a" / "v.frv"));
  io::write_labels(scratch / "b" / "m.frv", io::read_labels(scratch / "a" / "m.frv"));
  io::write_field(scratch / "b" / "u.frv", io::read_field(scratch / "a" / "u.frv"));
  const bool frv = read_dir(scratch / "a") == read_dir(scratch / "b");

  export_model(active_model(grid(32, 32, 32), 4), scratch / "m1");
  export_model(import_model(scratch / "m1"), scratch / "m2");
  const bool bundle = read_dir(scratch / "m1") == read_dir(scratch / "m2");

  auto man = json::parse(io::read_file(scratch / "m2" / "manifest.json"));
  man["blocks"][2]["crc32"] = "deadbeef";
  io::write_file(scratch / "m2" / "manifest.json", man.dump(2));
  bool tamper_rejected = false;
  try {
    import_model(scratch / "m2");
  } catch (const Error& e) {
    tamper_rejected = e.code() == ErrorCode::checksum;
  }
  fs::remove_all(scratch);
  return {frv && bundle && tamper_rejected,
          {{"frv_byte_stable", frv}, {"bundle_byte_stable", bundle}, {"tampered_checksum_rejected", tamper_rejected}}};
}

// ---------------------------------------------------------------------------
// Phantom experiment (criteria 6 and 7)

struct Experiment {
  PhantomSpec phantom = default_phantom_spec();
  DeformationSpec deformation;
  RegionSpec regions{{{"bone", {"pelvis", "vertebrae"}}, {"thorax", {"lung", "heart"}}, {"abdomen", {"liver", "kidney"}}}};
  int pairs = 10;
  std::uint64_t suite_seed = 1, heldout_seed = 2, model_seed = 1;
  TrainConfig train;
  InstanceConfig oracle;

  Experiment() {
    deformation.amplitude = 8;
    deformation.sigma = 10;
    train.epochs = 50;
    train.pairs_per_epoch = 10;
    train.lr = 1e-3;
    train.seed = 1;
  }

  json training_json() const {
    return {{"phantom", to_json(phantom)},
            {"deformation", to_json(deformation)},
            {"regions", regions.to_json()},
            {"pairs", pairs},
            {"suite_seed", suite_seed},
            {"model_seed", model_seed},
            {"epochs", train.epochs},
            {"pairs_per_epoch", train.pairs_per_epoch},
            {"lr", train.lr},
            {"seed", train.seed},
            {"weights", {train.weights.alpha, train.weights.lambda, train.weights.beta}},
            {"mi_bins", train.mi_bins},
            {"version", std::string(kModelVersion)}};
  }

  std::string key() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a(training_json().dump())));
    return buf;
  }

  std::vector<std::string> organs() const { return regions.organs_for("wholebody"); }
};

struct PairScore {
  double mean = 0, folding = 0;
  std::map<std::string, double> region;
};

std::vector<PairScore> score(const Experiment& ex, const std::vector<PhantomPair>& suite,
                             const std::function<EvalRow(const PhantomPair&)>& eval) {
  std::vector<PairScore> out;
  const auto organs = ex.organs();
  for (const auto& p : suite) {
    const auto row = eval(p);
    PairScore s;
    for (const auto& o : organs) s.mean += row.dsc.at(o) / static_cast<double>(organs.size());
    for (const auto& [r, list] : ex.regions.regions)
      for (const auto& o : list) s.region[r] += row.dsc.at(o) / static_cast<double>(list.size());
    s.folding = row.folding;
    out.push_back(s);
  }
  return out;
}

json summary(const std::vector<PairScore>& s) {
  double mean = 0, fold = 0;
  std::map<std::string, double> region;
  int good = 0;
  for (const auto& p : s) {
    mean += p.mean / static_cast<double>(s.size());
    fold += p.folding / static_cast<double>(s.size());
    for (const auto& [r, v] : p.region) region[r] += v / static_cast<double>(s.size());
    good += p.mean > 0.85 && p.folding < 0.01;
  }
  return {{"mean_dsc", mean}, {"mean_folding", fold}, {"region_dsc", region}, {"pairs_above_0_85_fold_below_1pct", good}};
}

std::vector<TrainingPair<float>> training_pairs(const std::vector<PhantomPair>& suite) {
  std::vector<TrainingPair<float>> out;
  for (const auto& p : suite) out.push_back({p.fixed, p.moving, p.fixed_mask, p.moving_mask});
  return out;
}

/// Trains the pipeline block by block, resuming from the cache. Returns the
/// model and the total training seconds (summed over cached stages).
std::pair<PipelineModel, double> trained_model(const Experiment& ex, const std::vector<PhantomPair>& suite,
                                               const fs::path& cache) {
  const fs::path dir = cache / ex.key();
  const fs::path progress_path = dir / "progress.json";
  PipelineModel model = initial_model(ex.phantom.grid, ex.model_seed, ex.regions);
  json progress{{"config", ex.training_json()}, {"blocks_done", 0}, {"train_seconds", json::object()}};
  if (fs::exists(progress_path)) {
    progress = json::parse(io::read_file(progress_path));
    if (progress["blocks_done"].get<int>() > 0) model = import_model(dir / "model");
  }
  const auto pairs = training_pairs(suite);
  const auto all = ex.organs();
  for (std::size_t i = progress["blocks_done"].get<std::size_t>(); i < kBlockOrder.size(); ++i) {
    const std::string name(kBlockOrder[i]);
    std::cerr << "training " << name << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    auto sink = [&](const TrainRecord& r) {
      if (r.pair_index == 0 && r.epoch % 10 == 0) std::cerr << r.to_json().dump() << "\n";
    };
    TrainOutcome<float> out;
    if (i == 0) {
      out = train_region_block<float>(model.block(name), all, pairs, ex.train, {}, sink);
    } else if (name == "wholebody") {
      std::vector<const net::BlockWeights*> preds;
      for (std::size_t k = 0; k < 4; ++k) preds.push_back(&model.block(kBlockOrder[k]));
      out = train_wholebody<float>(model.block(name), preds, all, pairs, ex.train, sink);
    } else {
      std::vector<const net::BlockWeights*> prefix{&model.block("affine")};
      out = train_region_block<float>(model.block(name), ex.regions.organs_for(name), pairs, ex.train, prefix, sink);
    }
    model.set_block(name, std::move(out.weights));
    progress["train_seconds"][name] = seconds_since(t0);
    progress["blocks_done"] = i + 1;
    export_model(model, dir / "model");
    io::write_file(progress_path, progress.dump(2) + "\n");
  }
  double total = 0;
  for (const auto& [k, v] : progress["train_seconds"].items()) total += v.get<double>();
  return {model, total};
}

struct PhantomResults {
  Outcome c6, c7;
};

PhantomResults phantom_experiment(const fs::path& cache) {
  const Experiment ex;
  const auto suite = make_suite(ex.phantom, ex.deformation, ex.pairs, ex.suite_seed);
  const auto organs = ex.organs();
  PhantomResults res;
  auto& c6 = res.c6.detail;

  const auto unreg = score(ex, suite, [&](const PhantomPair& p) {
    return evaluate_field(p.fixed_mask, p.moving_mask, DisplacementField(p.fixed.grid()), organs);
  });
  c6["unregistered"] = summary(unreg);
  const double unreg_mean = c6["unregistered"]["mean_dsc"];
  const bool suite_ok = unreg_mean >= 0.55 && unreg_mean <= 0.70;

  // feasibility oracle: raw field per pair, same losses
  auto t0 = std::chrono::steady_clock::now();
  const auto oracle = score(ex, suite, [&](const PhantomPair& p) {
    const TrainingPair<float> tp{p.fixed, p.moving, p.fixed_mask, p.moving_mask};
    return evaluate_field(p.fixed_mask, p.moving_mask, instance_optimize(tp, organs, ex.oracle), organs);
  });
  c6["oracle"] = summary(oracle);
  c6["oracle"]["seconds"] = seconds_since(t0);
  const bool oracle_ok = c6["oracle"]["mean_dsc"].get<double>() > 0.90;

  const auto [model, train_seconds] = trained_model(ex, suite, cache);
  c6["train_seconds"] = train_seconds;
  c6["cache_key"] = ex.key();
  auto eval_with = [&](const PipelineModel& m, std::string_view upto) {
    return [&m, upto, &organs](const PhantomPair& p) {
      return evaluate_pair(m, p.fixed, p.fixed_mask, p.moving, p.moving_mask, organs, upto);
    };
  };
  const auto full = score(ex, suite, eval_with(model, "wholebody"));
  c6["model"] = summary(full);
  const auto held = make_suite(ex.phantom, ex.deformation, ex.pairs, ex.heldout_seed);
  c6["model_heldout"] = summary(score(ex, held, eval_with(model, "wholebody")));
  const int good = c6["model"]["pairs_above_0_85_fold_below_1pct"];
  res.c6.pass = suite_ok && oracle_ok && good >= 8 && train_seconds <= 4 * 3600.0;

  // ablation: affine alone versus affine plus one region block
  auto base = model;
  for (std::size_t i = 1; i < kBlockOrder.size(); ++i)
    base.blocks[i] = net::zero_weights<float>(block_kind_at(i));
  const auto affine_only = summary(score(ex, suite, eval_with(base, "wholebody")));
  res.c7.detail["affine_only"] = affine_only["region_dsc"];
  res.c7.pass = true;
  for (const std::string name : {"bone", "thorax", "abdomen"}) {
    auto solo = base;
    solo.blocks[block_position(name)] = model.block(name);
    const auto s = summary(score(ex, suite, eval_with(solo, "wholebody")));
    json gains;
    for (const auto& [r, v] : s["region_dsc"].items()) gains[r] = v.get<double>() - affine_only["region_dsc"][r].get<double>();
    for (const auto& [r, g] : gains.items())
      if (r != name) res.c7.pass &= gains[name].get<double>() > g.get<double>();
    res.c7.detail["gain_" + name] = gains;
  }
  return res;
}

}  // namespace
}  // namespace fdreg::acceptance

int main(int argc, char** argv) {
  using namespace fdreg::acceptance;
  CLI::App app{"fdreg acceptance checks"};
  std::vector<int> selected{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::string cache = "acceptance_cache", report;
  app.add_option("--criteria", selected, "Criteria to run")->delimiter(',');
  app.add_option("--cache-dir", cache, "Cache for trained phantom models")->capture_default_str();
  app.add_option("--report", report, "Write all details as JSON");
  CLI11_PARSE(app, argc, argv);

  const std::map<int, std::string> names{{1, "gradient suite"},          {2, "per-organ backward equivalence"},
                                         {3, "identity pipeline"},       {4, "Jacobian and bending-energy anchors"},
                                         {5, "MI anchors"},              {6, "phantom registration end-to-end"},
                                         {7, "ablation: region blocks"}, {8, "shape anchors"},
                                         {9, "inference runtime"},       {10, "round-trips"}};
  std::map<int, std::function<Outcome()>> checks{{1, gradient_suite},
                                                 {2, per_organ_equivalence},
                                                 {3, identity_pipeline},
                                                 {4, jacobian_anchors},
                                                 {5, mi_anchors},
                                                 {8, shape_anchors},
                                                 {9, inference_runtime},
                                                 {10, [&] { return round_trips(fs::path(cache) / "scratch"); }}};
  std::optional<PhantomResults> phantom;
  auto phantom_check = [&](int which) {
    if (!phantom) phantom = phantom_experiment(cache);
    return which == 6 ? phantom->c6 : phantom->c7;
  };
  checks[6] = [&] { return phantom_check(6); };
  checks[7] = [&] { return phantom_check(7); };

  std::sort(selected.begin(), selected.end());
  json all = json::object();
  bool ok = true;
  for (int c : selected) {
    if (!checks.count(c)) {
      std::cerr << "unknown criterion " << c << "\n";
      return 64;
    }
    Outcome o;
    try {
      o = checks[c]();
    } catch (const std::exception& e) {
      o = {false, {{"exception", e.what()}}};
    }
    ok &= o.pass;
    all[std::to_string(c)] = o.detail;
    std::cout << "criterion " << c << " (" << names.at(c) << "): " << (o.pass ? "PASS" : "FAIL") << "  "
              << o.detail.dump() << std::endl;
  }
  if (!report.empty()) fdreg::io::write_file(report, all.dump(2) + "\n");
  return ok ? 0 : 1;
}
