#include "helpers.hpp"

namespace fdreg {
namespace {

using net::BlockKind;

net::BlockWeightsT<double> tiny_random_block(BlockKind kind, std::uint64_t seed) {
  auto w = net::init_weights<double>(kind, seed);
  SplitMix64 rng(seed + 1);
  for (auto& t : w.tensors)
    if (std::all_of(t.data.begin(), t.data.end(), [](double v) { return v == 0.0; }))
      for (auto& v : t.data) v = rng.uniform(-0.05, 0.05);
  return w;
}

TrainConfig small_config() {
  TrainConfig c;
  c.require_divisible_by_16 = false;
  c.seed = 3;
  return c;
}

TEST(Adam, ZeroGradientsLeaveWeightsButCountStep) {
  auto w = net::init_weights<float>(BlockKind::affine, 1);
  const auto before = w;
  auto s = AdamState::for_weights(w, 1e-3);
  adam_step(s, w, net::Gradients<float>::zeros_like(w));
  EXPECT_EQ(w, before);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  auto w = net::zero_weights<double>(BlockKind::affine);
  auto s = AdamStateT<double>::for_weights(w, 1e-3);
  auto g = net::Gradients<double>::zeros_like(w);
  for (auto& v : g.tensors[0]) v = 0.37;
  for (auto& v : g.tensors[1]) v = -2.5;
  adam_step(s, w, g);
  for (double v : w.tensors[0].data) EXPECT_NEAR(v, -1e-3 * 0.37 / (0.37 + 1e-8), 1e-12);
  for (double v : w.tensors[1].data) EXPECT_NEAR(v, 1e-3 * 2.5 / (2.5 + 1e-8), 1e-12);
  for (std::size_t i = 2; i < w.tensors.size(); ++i)
    for (double v : w.tensors[i].data) EXPECT_EQ(v, 0.0);
}

TEST(Adam, ShapeMismatchRejected) {
  auto w = net::zero_weights<float>(BlockKind::affine);
  auto s = AdamState::for_weights(w);
  auto g = net::Gradients<float>::zeros_like(w);
  g.tensors[0].pop_back();
  EXPECT_EQ(test::error_code_of([&] { adam_step(s, w, g); }), ErrorCode::shape);
}

TEST(Adam, StateRoundTrip) {
  auto w = net::init_weights<float>(BlockKind::affine, 2);
  auto s = AdamState::for_weights(w, 3e-4);
  auto g = net::Gradients<float>::zeros_like(w);
  for (auto& t : g.tensors)
    for (auto& v : t) v = 0.1f;
  adam_step(s, w, g);
  const auto bytes = encode_adam(s);
  const auto back = decode_adam<float>(bytes);
  EXPECT_EQ(back.step, s.step);
  EXPECT_EQ(back.m, s.m);
  EXPECT_EQ(back.v, s.v);
  EXPECT_EQ(encode_adam(back), bytes);
}

struct StepFixture {
  TrainingPair<double> pair;
  SoftMasks<double> fm, mm;
  DisplacementFieldT<double> prefix;
  VolumeT<double> current;
  StepInputs<double> inputs() const { return {&pair.fixed, &pair.moving, &fm, &mm, &prefix, &current}; }
};

StepFixture fixture(std::uint64_t seed) {
  auto p = test::small_pair<double>(seed, 2.0);
  const std::vector<std::string> organs{"lung", "liver", "pelvis"};
  StepFixture f{p, one_hot<double>(p.fixed_mask, organs), one_hot<double>(p.moving_mask, organs),
                DisplacementFieldT<double>(p.fixed.grid()), p.moving};
  SplitMix64 rng(seed);
  for (auto& v : f.prefix.data()) v = rng.uniform(-0.3, 0.3);
  f.current = warp(f.pair.moving, f.prefix);
  return f;
}

double max_rel_diff(const net::Gradients<double>& a, const net::Gradients<double>& b) {
  double scale = 0, worst = 0;
  for (const auto& t : b.tensors)
    for (double v : t) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    for (std::size_t j = 0; j < a.tensors[i].size(); ++j)
      worst = std::max(worst, std::abs(a.tensors[i][j] - b.tensors[i][j]) / scale);
  return worst;
}

TEST(PerOrganPasses, EquivalentToJointBackward) {
  const auto f = fixture(5);
  auto cfg = small_config();
  cfg.weights = {0.8, 1.2, 0.5};
  for (auto kind : {BlockKind::deformable, BlockKind::affine}) {
    const auto w = tiny_random_block(kind, 7);
    net::TapeContext<double>::reset_peak();
    const int base = net::TapeContext<double>::live();
    const auto per = per_organ_gradients(w, f.inputs(), cfg);
    EXPECT_EQ(net::TapeContext<double>::peak(), base + 1);
    const auto joint = joint_gradients(w, f.inputs(), cfg);
    EXPECT_LT(max_rel_diff(per.grads, joint.grads), 1e-6);
    EXPECT_NEAR(per.report.total, joint.report.total, 1e-9);
    EXPECT_EQ(per.report.per_organ_dice.size(), 3u);
  }
}

TEST(PerOrganPasses, SelfPairHasZeroDice) {
  auto p = test::small_pair<float>(2);
  p.moving = p.fixed;
  p.moving_mask = p.fixed_mask;
  const std::vector<std::string> organs{"lung", "liver", "pelvis"};
  const auto fm = one_hot<float>(p.fixed_mask, organs);
  const DisplacementField zero(p.fixed.grid());
  const StepInputs<float> in{&p.fixed, &p.moving, &fm, &fm, &zero, &p.moving};
  const auto r = per_organ_gradients(net::init_weights<float>(BlockKind::deformable, 1), in, small_config());
  EXPECT_EQ(r.report.dice, 0.0);
  for (const auto& [name, d] : r.report.per_organ_dice) EXPECT_EQ(d, 0.0) << name;
}

TEST(EpochOrder, UniformWithoutReplacementAndReseeded) {
  const auto a = epoch_order(10, 10, 4, 0);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(epoch_order(10, 10, 4, 0), a);
  EXPECT_NE(epoch_order(10, 10, 4, 1), a);
  const auto b = epoch_order(3, 7, 4, 2);
  EXPECT_EQ(b.size(), 7u);
  std::vector<int> counts(3, 0);
  for (auto i : b) ++counts[i];
  for (int c : counts) EXPECT_GE(c, 2);
}

std::vector<TrainingPair<float>> small_pairs(int n) {
  std::vector<TrainingPair<float>> out;
  for (int i = 0; i < n; ++i) out.push_back(test::small_pair<float>(40 + i));
  return out;
}

TEST(TrainRegionBlock, EpochBookkeeping) {
  const auto pairs = small_pairs(3);
  auto cfg = small_config();
  cfg.epochs = 2;
  cfg.pairs_per_epoch = 2;
  std::vector<TrainRecord> seen;
  const auto out = train_region_block(net::init_weights<float>(BlockKind::deformable, 1), {"lung"}, pairs, cfg, {},
                                      [&](const TrainRecord& r) { seen.push_back(r); });
  ASSERT_EQ(out.log.records.size(), 4u);
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(out.log.records[1].epoch, 0);
  EXPECT_EQ(out.log.records[2].epoch, 1);
  EXPECT_EQ(out.adam.step, 4u);
  const auto j = out.log.records[0].to_json();
  for (auto key : {"epoch", "pair_index", "loss_total", "mi", "dice", "be", "seconds"}) EXPECT_TRUE(j.contains(key)) << key;
}

TEST(TrainRegionBlock, ReproducibleForSameSeed) {
  const auto pairs = small_pairs(2);
  auto cfg = small_config();
  cfg.epochs = 2;
  cfg.pairs_per_epoch = 2;
  cfg.lr = 1e-3;
  auto run = [&] {
    return train_region_block(net::init_weights<float>(BlockKind::deformable, 1), {"liver", "pelvis"}, pairs, cfg).weights;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == net::init_weights<float>(BlockKind::deformable, 1));
}

TEST(TrainRegionBlock, Preconditions) {
  const auto pairs = small_pairs(1);
  const auto w = net::init_weights<float>(BlockKind::deformable, 1);
  auto cfg = small_config();
  EXPECT_EQ(test::error_code_of([&] { train_region_block(w, {"spleen"}, pairs, cfg); }), ErrorCode::missing);
  auto raw = pairs;
  raw[0].fixed = Volume(raw[0].fixed.grid(), 500.0f);
  EXPECT_EQ(test::error_code_of([&] { train_region_block(w, {"lung"}, raw, cfg); }), ErrorCode::contract);
  cfg.batch_size = 2;
  EXPECT_EQ(test::error_code_of([&] { train_region_block(w, {"lung"}, pairs, cfg); }), ErrorCode::config);
}

TEST(TrainRegionBlock, WritesCheckpoints) {
  test::TempDir dir("ckpt");
  auto cfg = small_config();
  cfg.epochs = 2;
  cfg.pairs_per_epoch = 1;
  cfg.checkpoint_every = 1;
  cfg.checkpoint_dir = dir.path;
  const auto out = train_region_block(net::init_weights<float>(BlockKind::deformable, 1), {"lung"}, small_pairs(1), cfg);
  EXPECT_EQ(net::load_weights<float>(dir / "epoch2.trw"), out.weights);
  EXPECT_EQ(decode_adam<float>(io::read_file(dir / "epoch2.adam")).step, 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch1.trw"));
}

TEST(TrainWholebody, PredecessorsStayBitwiseFrozen) {
  const auto pairs = small_pairs(2);
  std::vector<net::BlockWeights> pre{tiny_random_block(BlockKind::affine, 1).cast<float>(),
                                     tiny_random_block(BlockKind::deformable, 2).cast<float>(),
                                     tiny_random_block(BlockKind::deformable, 3).cast<float>(),
                                     tiny_random_block(BlockKind::deformable, 4).cast<float>()};
  for (auto& t : pre[0].tensors.back().data) t *= 0.01f;  // keep the affine prefix mild
  const auto copies = pre;
  const net::BlockWeights* ptrs[4] = {&pre[0], &pre[1], &pre[2], &pre[3]};
  auto cfg = small_config();
  cfg.epochs = 1;
  cfg.pairs_per_epoch = 2;
  cfg.lr = 1e-3;
  const auto out = train_wholebody(net::init_weights<float>(BlockKind::deformable, 5),
                                   std::span<const net::BlockWeights* const>(ptrs, 4), {"lung", "liver", "pelvis"}, pairs, cfg);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(pre[i], copies[i]) << i;
  EXPECT_EQ(out.log.records.size(), 2u);
}

TEST(TrainWholebody, MissingPredecessorRejected) {
  const auto w = net::init_weights<float>(BlockKind::deformable, 1);
  const net::BlockWeights* ptrs[4] = {&w, &w, nullptr, &w};
  EXPECT_EQ(test::error_code_of([&] {
              train_wholebody(w, std::span<const net::BlockWeights* const>(ptrs, 4), {"lung"}, small_pairs(1), small_config());
            }),
            ErrorCode::missing);
}

TEST(TrainWholebody, LossDecreasesOverFirstStepsForMostSeeds) {
  int non_increasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::vector<TrainingPair<float>> pairs{test::small_pair<float>(100 + seed, 2.5)};
    std::vector<net::BlockWeights> pre;
    for (std::size_t i = 0; i < 4; ++i) pre.push_back(net::init_weights<float>(block_kind_at(i), seed * 10 + i));
    const net::BlockWeights* ptrs[4] = {&pre[0], &pre[1], &pre[2], &pre[3]};
    auto cfg = small_config();
    cfg.epochs = 10;
    cfg.pairs_per_epoch = 1;
    cfg.lr = 1e-3;
    cfg.seed = seed;
    const auto out = train_wholebody(net::init_weights<float>(BlockKind::deformable, seed),
                                     std::span<const net::BlockWeights* const>(ptrs, 4), {"lung", "liver", "pelvis"},
                                     pairs, cfg);
    const auto& r = out.log.records;
    non_increasing += r.back().loss.total <= r.front().loss.total;
  }
  EXPECT_GE(non_increasing, 8);
}

TEST(Manifest, RoundTripWithRelativePaths) {
  test::TempDir dir("manifest");
  PairManifest m;
  m.both_directions = true;
  m.entries.push_back({dir / "a.frv", dir / "b.frv", dir / "am.frv", dir / "bm.frv"});
  save_manifest(m, dir / "manifest.json");
  const auto j = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  EXPECT_EQ(j["pairs"][0]["fixed"], "a.frv");
  const auto back = load_manifest(dir / "manifest.json");
  ASSERT_EQ(back.entries.size(), 1u);
  EXPECT_EQ(back.entries[0].moving_mask, dir / "bm.frv");
  const auto both = back.expanded();
  ASSERT_EQ(both.size(), 2u);
  EXPECT_EQ(both[1].fixed, dir / "b.frv");
  EXPECT_EQ(both[1].moving_mask, dir / "am.frv");
}

TEST(InstanceOptimize, ImprovesOverlap) {
  const auto p = test::small_pair<float>(8, 2.5);
  const std::vector<std::string> organs{"lung", "liver", "pelvis"};
  InstanceConfig ic;
  ic.iterations = 40;
  const auto u = instance_optimize(p, organs, ic);
  const auto before = evaluate_field(p.fixed_mask, p.moving_mask, DisplacementField(p.fixed.grid()), organs);
  const auto after = evaluate_field(p.fixed_mask, p.moving_mask, u, organs);
  double b = 0, a = 0;
  for (const auto& o : organs) {
    b += before.dsc.at(o);
    a += after.dsc.at(o);
  }
  EXPECT_GT(a, b);
}

}  // namespace
}  // namespace fdreg
