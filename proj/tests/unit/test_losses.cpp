#include "helpers.hpp"

namespace fdreg {
namespace {

using test::grid;

Volume half_half(const Grid& g) {
  return test::volume_from(g, [&](auto x, auto, auto) { return x < g.dims.nx / 2 ? 0.0 : 1.0; });
}

TEST(MiLoss, ConstantFixedGivesZero) {
  const Grid g = grid(6, 5, 4);
  const auto r = mi_loss(Volume(g, 0.5f), test::random_volume(g, 1), 32);
  EXPECT_NEAR(r.value, 0.0, 1e-9);
  for (double v : r.grad) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(MiLoss, HalfHalfSelfPairIsOneBit) {
  const auto v = half_half(grid(4, 2, 2));
  EXPECT_NEAR(mi_loss(v, v, 2).value, -1.0, 1e-9);
}

TEST(MiLoss, Preconditions) {
  const auto v = test::random_volume(grid(3, 3, 3), 1);
  EXPECT_EQ(test::error_code_of([&] { mi_loss(v, test::random_volume(grid(3, 3, 4), 1), 8); }), ErrorCode::grid_mismatch);
  EXPECT_THROW(mi_loss(v, Volume(v.grid(), 2.0f), 8), Error);
  EXPECT_THROW(mi_loss(v, v, 1), Error);
}

TEST(JointHistogram, SumsToOneWithConsistentMarginals) {
  const auto a = test::random_volume(grid(5, 5, 5), 2), b = test::random_volume(grid(5, 5, 5), 3);
  const auto h = joint_histogram(a, b, 16);
  double total = 0;
  for (double p : h.joint) total += p;
  EXPECT_NEAR(total, 1.0, 1e-9);
  for (int f = 0; f < 16; ++f) {
    double row = 0;
    for (int m = 0; m < 16; ++m) row += h.at(f, m);
    EXPECT_NEAR(row, h.p_fixed[f], 1e-12);
  }
  for (int m = 0; m < 16; ++m) {
    double col = 0;
    for (int f = 0; f < 16; ++f) col += h.at(f, m);
    EXPECT_NEAR(col, h.p_moving[m], 1e-12);
  }
  EXPECT_GE(mutual_information(h), -1e-9);
}

TEST(MiLoss, SelfPairBeatsPermutation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto v = test::random_volume<double>(grid(8, 8, 8), 100 + seed);
    auto s = v.samples();
    std::mt19937_64 rng(seed);
    std::shuffle(s.begin(), s.end(), rng);
    const VolumeT<double> p(v.grid(), s);
    EXPECT_LE(mi_loss(v, v).value, mi_loss(v, p).value) << "seed " << seed;
  }
}

TEST(DiceLoss, Examples) {
  const Grid g = grid(8, 1, 1);
  const Volume a(g, std::vector<float>{1, 1, 1, 1, 0, 0, 0, 0});
  const Volume b(g, std::vector<float>{0, 0, 1, 1, 1, 1, 0, 0});
  const Volume c(g, std::vector<float>{0, 0, 0, 0, 0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(dice_loss(a, a).value, 0.0);
  EXPECT_DOUBLE_EQ(dice_loss(a, c).value, 1.0);
  EXPECT_DOUBLE_EQ(dice_loss(a, b).value, 0.5);
  EXPECT_DOUBLE_EQ(dice_loss(b, a).value, dice_loss(a, b).value);
  EXPECT_EQ(test::error_code_of([&] { dice_loss(Volume(g, 0.f), Volume(g, 0.f)); }), ErrorCode::undefined);
}

TEST(DiceLoss, SoftValuesStayInUnitInterval) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto d = dice_loss(test::random_volume(grid(4, 4, 4), s), test::random_volume(grid(4, 4, 4), s + 50)).value;
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(BendingEnergy, ZeroAndAffineFieldsVanish) {
  const Grid g = grid(6, 5, 7);
  EXPECT_EQ(bending_energy(DisplacementFieldT<double>(g)).value, 0.0);
  AffineParams a;
  a.linear = {1.2, 0.1, -0.3, 0.0, 0.8, 0.2, 0.4, 0.0, 1.1};
  a.translation = {3, -2, 1};
  EXPECT_NEAR(bending_energy(affine_to_field<double>(a, g)).value, 0.0, 1e-9);
}

TEST(BendingEnergy, QuadraticLine) {
  // u_x = x^2 along x on a 7x3x3 grid: d2u/dx2 = 2 at the 5 interior x positions
  // of the single interior (y,z) line, contributing 4 each.
  const Grid g = grid(7, 3, 3);
  const auto u = test::field_from<double>(g, [](auto x, auto, auto) { return Vec3{double(x * x), 0, 0}; });
  EXPECT_NEAR(bending_energy(u).value, 4.0 * 5.0 / 63.0, 1e-12);
}

TEST(BendingEnergy, InvariantUnderAddedAffine) {
  const Grid g = grid(6, 6, 6);
  SplitMix64 rng(3);
  DisplacementFieldT<double> f(g);
  for (auto& v : f.data()) v = rng.uniform(-1, 1);
  AffineParams a;
  a.linear = {0.9, 0.2, 0, 0, 1.1, -0.2, 0.1, 0, 1};
  a.translation = {1, 2, 3};
  auto g2 = f;
  g2 += affine_to_field<double>(a, g);
  EXPECT_NEAR(bending_energy(f).value, bending_energy(g2).value, 1e-9);
}

TEST(BendingEnergy, TooSmallRejected) {
  EXPECT_EQ(test::error_code_of([] { bending_energy(DisplacementField(grid(7, 2, 3))); }), ErrorCode::too_small);
}

struct Instance {
  VolumeT<double> fixed, warped;
  SoftMasks<double> fm, wm;
  DisplacementFieldT<double> field;
};

Instance instance(std::uint64_t seed) {
  const Grid g = grid(5, 5, 5);
  SplitMix64 rng(seed);
  Instance in{test::random_volume<double>(g, seed), test::random_volume<double>(g, seed + 1), {}, {}, DisplacementFieldT<double>(g)};
  for (int k = 0; k < 2; ++k) {
    in.fm.names.push_back("o" + std::to_string(k));
    in.wm.names.push_back("o" + std::to_string(k));
    in.fm.channels.push_back(test::random_volume<double>(g, seed + 10 + k));
    in.wm.channels.push_back(test::random_volume<double>(g, seed + 20 + k));
  }
  for (auto& v : in.field.data()) v = rng.uniform(-1, 1);
  return in;
}

TEST(DeformableLoss, DecomposesIntoTerms) {
  const auto in = instance(4);
  const LossWeights w{0.7, 1.3, 0.4};
  const auto ev = deformable_loss(in.fixed, in.warped, in.fm, in.wm, in.field, w);
  const double mi = mi_loss(in.fixed, in.warped).value;
  const double d = 0.5 * (dice_loss(in.fm.channels[0], in.wm.channels[0]).value +
                          dice_loss(in.fm.channels[1], in.wm.channels[1]).value);
  const double be = bending_energy(in.field).value;
  EXPECT_NEAR(ev.report.mi, mi, 1e-12);
  EXPECT_NEAR(ev.report.dice, d, 1e-12);
  EXPECT_NEAR(*ev.report.be, be, 1e-12);
  EXPECT_NEAR(ev.report.total, 0.7 * mi + 1.3 * d + 0.4 * be, 1e-9);
  EXPECT_EQ(ev.report.per_organ_dice.size(), 2u);
}

TEST(DeformableLoss, ZeroWeightsAndAlignedPair) {
  const auto in = instance(5);
  EXPECT_EQ(deformable_loss(in.fixed, in.warped, in.fm, in.wm, in.field, {0, 0, 0}).report.total, 0.0);
  const auto aligned = deformable_loss(in.fixed, in.fixed, in.fm, in.fm, DisplacementFieldT<double>(in.fixed.grid()), {});
  const double self_dice = 0.5 * (dice_loss(in.fm.channels[0], in.fm.channels[0]).value +
                                  dice_loss(in.fm.channels[1], in.fm.channels[1]).value);
  EXPECT_NEAR(aligned.report.total, mi_loss(in.fixed, in.fixed).value + self_dice, 1e-12);
}

TEST(AffineLoss, MatchesDeformableWithoutPenalty) {
  const auto in = instance(6);
  const LossWeights w{1.0, 0.5, 3.0};
  const auto a = affine_loss(in.fixed, in.warped, in.fm, in.wm, w);
  const auto d = deformable_loss(in.fixed, in.warped, in.fm, in.wm, in.field, {1.0, 0.5, 0.0});
  EXPECT_FALSE(a.report.be);
  EXPECT_NEAR(a.report.total, d.report.total, 1e-12);
  const auto pure = affine_loss(in.fixed, in.warped, in.fm, in.wm, {1.0, 0.0, 0.0});
  EXPECT_NEAR(pure.report.total, mi_loss(in.fixed, in.warped).value, 1e-12);
}

TEST(LossReport, JsonShape) {
  LossReport r;
  r.total = 1;
  r.per_organ_dice["liver"] = 0.25;
  const auto j = r.to_json();
  EXPECT_TRUE(j["be"].is_null());
  EXPECT_EQ(j["per_organ"]["liver"], 0.25);
  for (auto key : {"total", "mi", "dice"}) EXPECT_TRUE(j.contains(key));
}

TEST(LossWeights, RejectNegative) {
  EXPECT_THROW((LossWeights{-1, 1, 1}.validate()), Error);
  EXPECT_THROW((LossWeights{1, NAN, 1}.validate()), Error);
}

}  // namespace
}  // namespace fdreg
