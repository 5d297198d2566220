#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "stq/stq.hpp"

using namespace stq;

namespace {

LayerDef with_weights(LayerDef d, std::uint64_t seed, bool bias = true) {
  Rng r(seed);
  d.weight = r.uniform_tensor({d.out_features(), d.in_features()}, -0.5, 0.5);
  if (bias) d.bias = r.uniform_tensor({d.out_features()}, -0.5, 0.5);
  return d;
}

// A layer with SVD factors of rank r and calibrated quantizers.
QLayer ready_layer(const LayerDef& d, std::size_t r, int bits, const std::vector<Tensor>& inputs) {
  QLayer q(d, 1234, bits, bits);
  if (r > 0) {
    const auto f = svd_truncated(d.weight, r);
    q.set_low_rank(f.l1, f.l2);
  }
  q.calibrate_weight_quant();
  q.calibrate_act_quant(inputs);
  return q;
}

std::vector<LayerDef> all_kinds() {
  return {with_weights(LayerDef::linear(16, 8), 1), with_weights(LayerDef::conv2d(4, 8, 3, 1), 2),
          with_weights(LayerDef::conv3d(8, 4, 3, 1), 3, false)};
}

Tensor input_for(const LayerDef& d, Rng& r) { return r.normal_tensor({4, d.geom.in_channels, 6, 6}); }

Real relative_diff(const Tensor& a, const Tensor& b) {
  Real num = 0, den = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / std::max(den, Real{1e-300});
}

}  // namespace

TEST(QLayerTest, DenseForwardMatchesConvOracle) {
  Rng r(40);
  const LayerDef d = with_weights(LayerDef::conv3d(4, 3, 3, 1), 4);
  const Tensor x = r.normal_tensor({5, 4, 6, 7});
  Tensor w5 = unflatten_conv_weight(d.weight, d.geom);
  Tensor want = oracle::conv(x, w5, {1, 1, 1}, {1, 1, 1});
  const std::size_t hw = 6 * 7;
  for (std::size_t i = 0; i < want.numel(); ++i) want[i] += d.bias[(i / hw) % 3];
  EXPECT_LE(max_abs_diff(dense_forward(d, x), want), 1e-12);
}

TEST(QLayerTest, FpExactEqualsReference) {
  Rng r(41);
  for (const auto& d : all_kinds())
    for (std::size_t rank : {0u, 1u, 3u}) {
      const Tensor x = input_for(d, r);
      const QLayer q = ready_layer(d, rank, 4, {x});
      EXPECT_LE(max_abs_diff(q.forward(x, ForwardMode::fp_exact), dense_forward(d, x)), 1e-10);
    }
}

TEST(QLayerTest, ExactLowRankWeightLeavesOnlyFpBranch) {
  Rng r(42);
  LayerDef d = LayerDef::linear(8, 8);
  d.weight = matmul(r.normal_tensor({8, 2}), r.normal_tensor({2, 8}));
  d.bias = r.normal_tensor({8});
  const Tensor x = r.normal_tensor({3, 8, 4, 4});
  const QLayer q = ready_layer(d, 2, 4, {x});
  // With R = 0 the symmetric weight quantizer returns exact zeros.
  Tensor want = dense_forward(d, x);
  EXPECT_LE(max_abs_diff(q.forward(x, ForwardMode::fake_quant), want), 1e-10);
}

TEST(QLayerTest, IntPathMatchesFakeQuant) {
  Rng r(43);
  for (int bits : {4, 6, 8})
    for (const auto& d : all_kinds()) {
      const Tensor x = input_for(d, r);
      QLayer q = ready_layer(d, 2, bits, {x});
      q.set_a_bias(r.normal_tensor({d.out_features()}, 0.1));
      EXPECT_LE(relative_diff(q.forward(x, ForwardMode::int_path), q.forward(x, ForwardMode::fake_quant)), 1e-6)
          << to_string(d.kind) << " W" << bits;
    }
}

TEST(QLayerTest, IntPathSixteenWideLinear) {
  Rng r(44);
  const LayerDef d = with_weights(LayerDef::linear(16, 16), 44);
  const Tensor x = r.normal_tensor({5, 16, 4, 4});
  const QLayer q = ready_layer(d, 0, 4, {x});
  EXPECT_LE(relative_diff(q.forward(x, ForwardMode::int_path), q.forward(x, ForwardMode::fake_quant)), 1e-6);
}

TEST(QLayerTest, QuantizedModesNeedCalibration) {
  Rng r(45);
  const LayerDef d = with_weights(LayerDef::linear(8, 8), 5);
  QLayer q(d, 1, 4, 4);
  const Tensor x = r.normal_tensor({2, 8, 4, 4});
  EXPECT_NO_THROW(q.forward(x, ForwardMode::fp_exact));
  EXPECT_THROW(q.forward(x, ForwardMode::fake_quant), StateError);
  EXPECT_THROW(q.forward(x, ForwardMode::int_path), StateError);
  q.calibrate_weight_quant();
  EXPECT_THROW(q.forward(x, ForwardMode::fake_quant), StateError);
  q.calibrate_act_quant(std::vector<Tensor>{x});
  EXPECT_NO_THROW(q.forward(x, ForwardMode::int_path));
}

TEST(QLayerTest, ShapeErrors) {
  const LayerDef d = with_weights(LayerDef::linear(8, 4), 6);
  const QLayer q(d, 1, 32, 32);
  EXPECT_THROW(q.forward(Tensor({2, 6, 4, 4}), ForwardMode::fp_exact), DimensionError);
  QLayer m(d, 1, 4, 4);
  EXPECT_THROW(m.set_low_rank(Tensor({4, 2}), Tensor({3, 8})), DimensionError);
  EXPECT_THROW(m.set_low_rank(Tensor({4, 2}), Tensor()), ArgumentError);
  EXPECT_THROW(m.set_a_bias(Tensor({3})), DimensionError);
  LayerDef bad = d;
  bad.weight = Tensor({4, 7});
  EXPECT_THROW(QLayer(bad, 1, 4, 4), DimensionError);
  EXPECT_THROW(QLayer(with_weights(LayerDef::linear(12, 4), 1), 1, 4, 4), UnsupportedDimension);
  EXPECT_THROW(QLayer(d, 1, 5, 4), ArgumentError);
}

TEST(QLayerTest, ResidualFollowsFactors) {
  Rng r(46);
  const LayerDef d = with_weights(LayerDef::conv2d(4, 8, 3, 1), 7);
  QLayer q(d, 1, 4, 4);
  const Tensor l1 = r.normal_tensor({8, 3}), l2 = r.normal_tensor({3, 36});
  q.set_low_rank(l1, l2);
  EXPECT_EQ(q.rank(), 3u);
  EXPECT_LE(max_abs_diff(add(q.residual(), matmul(l1, l2)), d.weight), 1e-14);
  q.set_low_rank(Tensor(), Tensor());
  EXPECT_EQ(q.rank(), 0u);
  EXPECT_EQ(q.residual(), d.weight);
}

TEST(RotationTest, RoundTripAndProductInvariance) {
  Rng r(47);
  for (const auto& d : all_kinds()) {
    const QLayer q(d, 99, 4, 4);
    const Tensor cols = im2col(input_for(d, r), d.geom);
    EXPECT_LE(max_abs_diff(q.unrotate(q.rotate(cols)), cols), 1e-12);
    const Tensor rw = r.normal_tensor({d.out_features(), d.in_features()});
    EXPECT_LE(max_abs_diff(matmul_nt(q.rotate(cols), q.rotate_weights(rw)), matmul_nt(cols, rw)), 1e-10);
  }
}

TEST(RotationTest, EightByEightOperands) {
  Rng r(48);
  const QLayer q(with_weights(LayerDef::linear(8, 8), 8), 3, 4, 4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = r.normal_tensor({8, 8}), rw = r.normal_tensor({8, 8});
    EXPECT_LE(max_abs_diff(matmul_nt(q.rotate(x), q.rotate_weights(rw)), oracle::matmul(x, oracle::transpose(rw))), 1e-10);
  }
}

TEST(RotationTest, ConvBlocksArePerTap) {
  const LayerDef d = with_weights(LayerDef::conv2d(4, 4, 3, 1), 9);
  const QLayer q(d, 5, 4, 4);
  EXPECT_EQ(q.rotation_block(), 4u);
  Tensor row({1, d.in_features()}, 0.0);
  row[4 * 4] = 2.0;  // spike in tap 4, channel 0
  const Tensor y = q.rotate(row);
  for (std::size_t k = 0; k < d.in_features(); ++k) {
    const bool in_block = k / 4 == 4;
    EXPECT_NEAR(std::abs(y[k]), in_block ? 1.0 : 0.0, 1e-14);
  }
}

TEST(RotationTest, SmoothsOutliers) {
  Rng r(49);
  const std::size_t d = 16;
  Tensor x = r.normal_tensor({256, d});
  Real sd = 0;
  for (std::size_t i = 0; i < 256; ++i) sd += x.at(i, 3) * x.at(i, 3);
  sd = std::sqrt(sd / 256);
  x.at(17, 3) = 50 * sd;
  const auto signs = hadamard_signs(d, 7);
  auto fq = [](const Tensor& v) {
    return fake_quant(v, calibrate(v, 4, Scheme::asymmetric, Granularity::per_tensor));
  };
  const Real plain_err = mean_squared_diff(fq(x), x);
  // Error of the rotated branch, measured back in the original basis.
  const Real rotated_err = mean_squared_diff(block_fwht_inverse(fq(block_fwht(x, signs)), signs), x);
  EXPECT_LT(rotated_err, plain_err);
}

TEST(QLayerTest, FakeQuantGradientsMatchFiniteDifferences) {
  Rng r(50);
  for (const auto& d : all_kinds()) {
    const Tensor x = input_for(d, r);
    const Tensor target = r.normal_tensor({4, d.out_features(), 6, 6});
    QLayer q = ready_layer(d, 2, 4, {x});
    q.set_a_bias(r.normal_tensor({d.out_features()}, 0.1));

    RoundingFreeze fz;
    auto loss_at = [&](const Tensor& l1, const Tensor& l2, const Tensor& ab) {
      ad::Tape t;
      t.rounding_freeze = &fz;
      QLayer::Vars v{t.constant(l1), t.constant(l2), t.constant(ab)};
      return ad::mean_square(ad::sub(q.forward(t, t.constant(x), v, ForwardMode::fake_quant), t.constant(target)))
          .value()[0];
    };

    ad::Tape t;
    t.rounding_freeze = &fz;
    const QLayer::Vars v = q.make_vars(t, true, true);
    t.backward(ad::mean_square(ad::sub(q.forward(t, t.constant(x), v, ForwardMode::fake_quant), t.constant(target))));
    fz.start_replay();

    std::vector<Tensor> params{q.l1(), q.l2(), q.a_bias()};
    const std::vector<Tensor> grads{v.l1.grad(), v.l2.grad(), v.a_bias.grad()};
    const Real h = 1e-4;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < params[k].numel(); ++i) {
        const Real p0 = params[k][i];
        params[k][i] = p0 + h;
        fz.cursor = 0;
        const Real up = loss_at(params[0], params[1], params[2]);
        params[k][i] = p0 - h;
        fz.cursor = 0;
        const Real dn = loss_at(params[0], params[1], params[2]);
        params[k][i] = p0;
        const Real fd = (up - dn) / (2 * h);
        const Real g = grads[k][i];
        EXPECT_LE(std::abs(fd - g), 1e-3 * std::max(std::abs(fd), 1e-8)) << to_string(d.kind) << " param " << k;
      }
  }
}

TEST(CompressionTest, Square256LinearExample) {
  LayerDef d = LayerDef::linear(256, 256);
  d.weight = Tensor({256, 256}, 0.01);
  QLayer q(d, 1, 4, 4);
  q.set_low_rank(Tensor({256, 16}, 0.1), Tensor({16, 256}, 0.1));
  const auto s = q.compression_stats(4, 4);
  EXPECT_EQ(s.params_bits, 65536u * 4 + 8192u * 32);
  EXPECT_EQ(s.params_bits, 524288u);
  EXPECT_EQ(s.baseline_params_bits, 2097152u);
  EXPECT_DOUBLE_EQ(1.0 - static_cast<double>(s.params_bits) / s.baseline_params_bits, 0.75);
  EXPECT_DOUBLE_EQ(s.fp_branch_ratio, 0.125);
  EXPECT_EQ(s.ops_count, 65536u + 16u * 512 + 256u * 8);
}

TEST(CompressionTest, FullPrecisionRankZero) {
  const LayerDef d = with_weights(LayerDef::linear(16, 16), 3);
  const QLayer q(d, 1, 32, 32);
  const auto s = q.compression_stats(32, 32, 10);
  EXPECT_EQ(s.params_bits, s.baseline_params_bits);
  EXPECT_EQ(s.ops_count, s.baseline_ops);
  EXPECT_EQ(s.fp_branch_ratio, 0.0);
}

TEST(LbaFusionTest, FuseCreatesBias) {
  Rng r(51);
  const LayerDef d = with_weights(LayerDef::linear(8, 4), 10, false);
  const Tensor x = r.normal_tensor({2, 8, 4, 4});
  QLayer q = ready_layer(d, 1, 4, {x});
  EXPECT_FALSE(q.has_bias());
  const Tensor ab = r.normal_tensor({4});
  q.set_a_bias(ab);
  const Tensor before = q.forward(x, ForwardMode::fake_quant);
  q.fuse_bias();
  EXPECT_TRUE(q.has_bias());
  EXPECT_EQ(q.bias(), ab);
  EXPECT_EQ(max_abs(q.a_bias().data()), 0.0);
  EXPECT_LE(max_abs_diff(q.forward(x, ForwardMode::fake_quant), before), 1e-12);
}
