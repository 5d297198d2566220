#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "stq/stq.hpp"

using namespace stq;

namespace {

Real ct_oracle(const Tensor& x) {
  const std::size_t T = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Real total = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Real e = 0;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const Real d = x[(((t + 1) * C + c) * H + h) * W + w] - x[((t * C + c) * H + h) * W + w];
          e += d * d;
        }
    total += e / static_cast<Real>(C * H * W);
  }
  return total / static_cast<Real>(T - 1);
}

Real cs_oracle(const Tensor& x) {
  const std::size_t T = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Real total = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      Real mean = 0, var = 0;
      for (std::size_t i = 0; i < HW; ++i) mean += x[(t * C + c) * HW + i];
      mean /= static_cast<Real>(HW);
      for (std::size_t i = 0; i < HW; ++i) {
        const Real d = x[(t * C + c) * HW + i] - mean;
        var += d * d;
      }
      total += std::sqrt(var / static_cast<Real>(HW));
    }
  return total / static_cast<Real>(T * C);
}

std::vector<ComplexityRecord> records_from(const std::vector<Real>& ct, const std::vector<Real>& cs,
                                           std::size_t layer = 0) {
  std::vector<ComplexityRecord> out;
  for (std::size_t i = 0; i < ct.size(); ++i) out.push_back({layer, i, ct[i], cs[i]});
  return out;
}

// One linear 4 -> 4 layer, so the whole model is a single QLayer.
ToyBackbone single_linear(std::uint64_t seed) {
  ToyBackbone bb;
  bb.layers = {LayerDef::linear(4, 4)};
  Rng r(seed);
  bb.layers[0].weight = r.uniform_tensor({4, 4}, -0.5, 0.5);
  bb.layers[0].bias = r.uniform_tensor({4}, -0.5, 0.5);
  return bb;
}

CalibSet small_calib(const ToyBackbone& bb, std::uint64_t seed, std::size_t videos) {
  return capture_calib(bb, random_videos(seed, videos, 0x100), VideoShape{3, 4, 6, 6}, 4, 1, seed);
}

QuantModel ready_model(const ToyBackbone& bb, const CalibSet& calib, int bits, std::size_t rank) {
  QuantConfig qc;
  qc.bits_w = qc.bits_a = bits;
  qc.seed = 9;
  QuantModel m(bb, qc);
  for (auto i : m.quantized_indices())
    svd_init(m.layer(i), std::min(rank, std::min(m.layer(i).in_features(), m.layer(i).out_features())));
  calibrate_activations(m, calib, false);
  return m;
}

}  // namespace

TEST(ComplexityTest, TemporalExamples) {
  EXPECT_EQ(temporal_complexity(Tensor({4, 2, 3, 3}, 1.7)), 0.0);
  Tensor x({2, 3, 4, 4}, 0.0);
  for (std::size_t i = x.numel() / 2; i < x.numel(); ++i) x[i] = 1.0;
  EXPECT_DOUBLE_EQ(temporal_complexity(x), 1.0);
  EXPECT_THROW(temporal_complexity(Tensor({1, 2, 3, 3})), ArgumentError);
}

TEST(ComplexityTest, SpatialExamples) {
  EXPECT_EQ(spatial_complexity(Tensor({3, 2, 4, 4}, -2.0)), 0.0);
  const Tensor x({1, 1, 2, 2}, std::vector<Real>{0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(spatial_complexity(x), 0.5);
}

TEST(ComplexityTest, MatchesLoopOracles) {
  Rng r(60);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = r.normal_tensor({5, 4, 8, 8});
    EXPECT_NEAR(temporal_complexity(x), ct_oracle(x), 1e-12);
    EXPECT_NEAR(spatial_complexity(x), cs_oracle(x), 1e-12);
  }
}

TEST(ComplexityTest, ScaleCovariance) {
  Rng r(61);
  const Tensor x = r.normal_tensor({4, 3, 5, 5});
  for (Real a : {0.5, 2.0, 7.0}) {
    const Tensor y = scaled(x, a);
    EXPECT_NEAR(temporal_complexity(y), a * a * temporal_complexity(x), 1e-12 * a * a);
    EXPECT_NEAR(spatial_complexity(y), a * spatial_complexity(x), 1e-12 * a);
  }
}

TEST(ThresholdTest, Examples) {
  const RankPolicy p;
  const Thresholds th = compute_thresholds(records_from({1, 2, 3, 4}, {4, 3, 2, 1}), p);
  EXPECT_EQ(th.l_t, 1);
  EXPECT_EQ(th.u_t, 3);
  EXPECT_EQ(th.l_s, 1);
  EXPECT_EQ(th.u_s, 3);
  const Thresholds flat = compute_thresholds(records_from({2, 2, 2, 2, 2}, {5, 5, 5, 5, 5}), p);
  EXPECT_EQ(flat.l_t, flat.u_t);
  EXPECT_EQ(flat.l_s, flat.u_s);
  EXPECT_THROW(compute_thresholds(records_from({1, 2, 3}, {1, 2, 3}), p), ArgumentError);
}

TEST(ThresholdTest, PerLayerIsolation) {
  const RankPolicy p;
  auto a = records_from({1, 2, 3, 4}, {1, 2, 3, 4}, 0);
  const auto b = records_from({100, 200, 300, 400}, {10, 20, 30, 40}, 1);
  auto both = a;
  both.insert(both.end(), b.begin(), b.end());
  const auto per = compute_thresholds_per_layer(both, p);
  const Thresholds alone = compute_thresholds(a, p);
  EXPECT_EQ(per.at(0).u_t, alone.u_t);
  EXPECT_EQ(per.at(0).l_s, alone.l_s);
  EXPECT_EQ(per.at(1).u_t, 300);
}

TEST(RankTest, Examples) {
  RankPolicy p;
  const Thresholds th{1, 3, 1, 3};
  // All neutral.
  EXPECT_EQ(allocate_rank(records_from({2, 2, 2, 2}, {2, 2, 2, 2}), th, p), 16u);
  // 100 records above both upper thresholds.
  EXPECT_EQ(allocate_rank(records_from(std::vector<Real>(100, 9), std::vector<Real>(100, 9)), th, p), 64u);
  // Net drift +6 and +4.
  auto drift = [&](int up, int down) {
    std::vector<Real> ct, cs;
    for (int i = 0; i < up; ++i) ct.push_back(9), cs.push_back(9);
    for (int i = 0; i < down; ++i) ct.push_back(0), cs.push_back(0);
    return records_from(ct, cs);
  };
  EXPECT_EQ(rank_drift(drift(6, 0), th), 6);
  EXPECT_EQ(allocate_rank(drift(6, 0), th, p), 24u);
  EXPECT_EQ(allocate_rank(drift(4, 0), th, p), 24u);
  EXPECT_EQ(allocate_rank(drift(3, 0), th, p), 16u);
  EXPECT_EQ(allocate_rank(drift(0, 30), th, p), 16u);
  // One axis above, the other not: no vote.
  EXPECT_EQ(rank_drift(records_from({9, 9}, {2, 0}), th), 0);
}

TEST(RankTest, OutputsStayOnTheGrid) {
  Rng r(62);
  const RankPolicy p;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 4 + r.next_u64() % 200;
    std::vector<Real> ct, cs;
    const Real corr = r.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      const Real base = r.normal();
      ct.push_back(corr * base + (1 - corr) * r.normal());
      cs.push_back(corr * base + (1 - corr) * r.normal());
    }
    const auto recs = records_from(ct, cs);
    const std::size_t rank = allocate_rank(recs, compute_thresholds(recs, p), p);
    EXPECT_GE(rank, 16u);
    EXPECT_LE(rank, 64u);
    EXPECT_EQ(rank % 8, 0u);
  }
}

TEST(RankTest, PermutationInvariant) {
  Rng r(63);
  const RankPolicy p;
  std::vector<Real> ct, cs;
  for (int i = 0; i < 120; ++i) {
    const Real b = r.normal();
    ct.push_back(b + 0.1 * r.normal());
    cs.push_back(b + 0.1 * r.normal());
  }
  auto recs = records_from(ct, cs);
  const std::size_t want = allocate_rank(recs, compute_thresholds(recs, p), p);
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(recs.begin(), recs.end(), g);
    EXPECT_EQ(allocate_rank(recs, compute_thresholds(recs, p), p), want);
  }
}

TEST(RankPolicyTest, Validation) {
  RankPolicy p;
  EXPECT_NO_THROW(p.validate());
  p.r_init = 12;
  EXPECT_THROW(p.validate(), ConfigError);
  p = RankPolicy{};
  p.r_min = 72;
  EXPECT_THROW(p.validate(), ConfigError);
  p = RankPolicy{};
  p.upper_pct = 10;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(SvdInitTest, LowRankWeightHasZeroResidual) {
  Rng r(64);
  LayerDef d = LayerDef::linear(8, 8);
  d.weight = matmul(r.normal_tensor({8, 3}), r.normal_tensor({3, 8}));
  QLayer q(d, 1, 4, 4);
  svd_init(q, 3);
  EXPECT_LE(frobenius_norm(q.residual()), 1e-10);
  EXPECT_TRUE(q.weight_quant_ready());
}

TEST(SvdInitTest, IdempotentAndOptimal) {
  Rng r(65);
  LayerDef d = LayerDef::conv2d(4, 8, 3, 1);
  d.weight = r.normal_tensor({8, 36});
  QLayer q(d, 1, 4, 4);
  svd_init(q, 3);
  const Tensor l1 = q.l1(), l2 = q.l2();
  const QuantParams wq = q.weight_quant();
  svd_init(q, 3);
  EXPECT_EQ(q.l1(), l1);
  EXPECT_EQ(q.l2(), l2);
  EXPECT_EQ(q.weight_quant(), wq);
  const auto sv = singular_values(d.weight);
  Real discarded = 0;
  for (std::size_t i = 3; i < sv.size(); ++i) discarded += sv[i] * sv[i];
  EXPECT_NEAR(frobenius_norm(q.residual()), std::sqrt(discarded), 1e-8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = add(l1, r.normal_tensor(l1.shape(), 0.05));
    const Tensor b = add(l2, r.normal_tensor(l2.shape(), 0.05));
    EXPECT_LE(frobenius_norm(q.residual()), frobenius_norm(sub(d.weight, matmul(a, b))));
  }
  EXPECT_THROW(svd_init(q, 9), ArgumentError);
}

TEST(MeasureTest, UsesFpLayerInputs) {
  const ToyBackbone bb = ToyBackbone::make(3);
  const CalibSet calib = small_calib(bb, 3, 2);
  QuantConfig qc;
  const QuantModel m(bb, qc);
  const auto recs = measure_complexity(m, calib);
  ASSERT_EQ(recs.size(), calib.size() * 4);
  for (const auto& rec : recs) {
    const Tensor in = m.trace(calib.pairs[rec.sample_id].input, ForwardMode::fp_exact).inputs[rec.layer_id];
    EXPECT_DOUBLE_EQ(rec.c_t, temporal_complexity(in));
    EXPECT_DOUBLE_EQ(rec.c_s, spatial_complexity(in));
  }
}

TEST(RefineTest, SingleLinearLossDecreases) {
  const ToyBackbone bb = single_linear(70);
  const CalibSet calib = small_calib(bb, 70, 5);
  ASSERT_EQ(calib.size(), 20u);
  QuantModel m = ready_model(bb, calib, 4, 2);
  // Start away from the SVD factors so there is something to learn.
  QLayer& q = m.layer(0);
  Rng pr(700);
  q.set_low_rank(add(q.l1(), pr.normal_tensor(q.l1().shape(), 0.1)), add(q.l2(), pr.normal_tensor(q.l2().shape(), 0.1)));
  q.calibrate_weight_quant();
  const TrainLog log = refine(m, calib, RefineConfig{});
  EXPECT_LT(log.final_loss, log.initial_loss);
  EXPECT_EQ(log.epoch_loss.size(), 2u);
  EXPECT_EQ(log.step_loss.size(), 40u);
  EXPECT_NEAR(detail::mean_output_mse(m, calib), log.final_loss, 1e-15);
}

TEST(RefineTest, NeverWorseThanSvdInit) {
  for (std::uint64_t seed : {80u, 81u, 82u}) {
    const ToyBackbone bb = single_linear(seed);
    const CalibSet calib = small_calib(bb, seed, 5);
    QuantModel m = ready_model(bb, calib, 4, 1);
    const TrainLog log = refine(m, calib, RefineConfig{});
    EXPECT_LE(log.final_loss, log.initial_loss);
  }
}

TEST(RefineTest, ZeroLearningRateChangesNothing) {
  const ToyBackbone bb = single_linear(71);
  const CalibSet calib = small_calib(bb, 71, 2);
  QuantModel m = ready_model(bb, calib, 4, 2);
  const Tensor l1 = m.layer(0).l1(), l2 = m.layer(0).l2();
  const QuantParams wq = m.layer(0).weight_quant();
  RefineConfig cfg;
  cfg.lr_schedule = {0, 0};
  refine(m, calib, cfg);
  EXPECT_EQ(m.layer(0).l1(), l1);
  EXPECT_EQ(m.layer(0).l2(), l2);
  EXPECT_EQ(m.layer(0).weight_quant(), wq);
}

TEST(RefineTest, FullPrecisionStaysPut) {
  const ToyBackbone bb = single_linear(72);
  const CalibSet calib = small_calib(bb, 72, 2);
  QuantModel m = ready_model(bb, calib, 32, 2);
  const Tensor l1 = m.layer(0).l1(), l2 = m.layer(0).l2();
  const TrainLog log = refine(m, calib, RefineConfig{});
  EXPECT_LE(log.initial_loss, 1e-20);
  EXPECT_LE(frobenius_norm(sub(m.layer(0).l1(), l1)), 1e-6);
  EXPECT_LE(frobenius_norm(sub(m.layer(0).l2(), l2)), 1e-6);
}

TEST(RefineTest, ConfigAndInputErrors) {
  const ToyBackbone bb = single_linear(73);
  const CalibSet calib = small_calib(bb, 73, 1);
  QuantModel m = ready_model(bb, calib, 4, 1);
  RefineConfig cfg;
  cfg.lr_schedule = {1e-3};
  EXPECT_THROW(refine(m, calib, cfg), ConfigError);
  cfg.lr_schedule = {1e-3, -1};
  EXPECT_THROW(refine(m, calib, cfg), ConfigError);
  EXPECT_THROW(refine(m, CalibSet{}, RefineConfig{}), ArgumentError);
}

TEST(RefineTest, EpochLossNeverRises) {
  const ToyBackbone bb = ToyBackbone::make(74);
  const CalibSet calib = small_calib(bb, 74, 3);
  QuantModel m = ready_model(bb, calib, 4, 2);
  const TrainLog log = refine(m, calib, RefineConfig{});
  ASSERT_EQ(log.epoch_end_loss.size(), 2u);
  EXPECT_LE(log.epoch_end_loss[0], log.initial_loss);
  EXPECT_LE(log.epoch_end_loss[1], log.epoch_end_loss[0]);
  EXPECT_LE(log.final_loss, log.initial_loss);
}

TEST(RefineTest, PerLayerLossMode) {
  const ToyBackbone bb = ToyBackbone::make(75);
  const CalibSet calib = small_calib(bb, 75, 2);
  QuantModel m = ready_model(bb, calib, 4, 2);
  RefineConfig cfg;
  cfg.per_layer_loss = true;
  const TrainLog log = refine(m, calib, cfg);
  EXPECT_LE(log.final_loss, log.initial_loss);
}

TEST(RefineTest, DeterministicForSameInputs) {
  const ToyBackbone bb = single_linear(76);
  const CalibSet calib = small_calib(bb, 76, 2);
  QuantModel a = ready_model(bb, calib, 4, 1), b = ready_model(bb, calib, 4, 1);
  refine(a, calib, RefineConfig{});
  refine(b, calib, RefineConfig{});
  EXPECT_EQ(a.layer(0).l1(), b.layer(0).l1());
  EXPECT_EQ(a.layer(0).l2(), b.layer(0).l2());
}
