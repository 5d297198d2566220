#include <gtest/gtest.h>

#include <cmath>

#include "stq/stq.hpp"

using namespace stq;

namespace {

QuantParams sym4(Real s) {
  QuantParams qp;
  qp.bits = 4;
  qp.scheme = Scheme::symmetric;
  qp.scale = {s};
  qp.zero_point = {0};
  std::tie(qp.lo, qp.hi) = QuantParams::clip_range(4, Scheme::symmetric);
  return qp;
}

std::int32_t q1(Real x, const QuantParams& qp) { return quantize(Tensor::scalar(x), qp)[0]; }

// Scalar oracle: round half to even by hand, then offset and clip.
std::int32_t reference_quant(Real x, Real s, int z, int lo, int hi) {
  const Real v = x / s;
  Real r = std::floor(v);
  const Real frac = v - r;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(r, 2.0) != 0)) r += 1;
  return std::clamp(static_cast<int>(r) + z, lo, hi);
}

}  // namespace

TEST(CalibrateTest, SymmetricFourBit) {
  const QuantParams qp = calibrate(Tensor::matrix(1, 3, {-7, 2, 5}), 4, Scheme::symmetric, Granularity::per_tensor);
  EXPECT_DOUBLE_EQ(qp.scale[0], 1.0);
  EXPECT_EQ(qp.zero_point[0], 0);
  EXPECT_EQ(qp.lo, -8);
  EXPECT_EQ(qp.hi, 7);
}

TEST(CalibrateTest, AsymmetricFourBit) {
  const QuantParams qp = calibrate(Tensor::matrix(1, 3, {-1, 0.5, 3}), 4, Scheme::asymmetric, Granularity::per_tensor);
  EXPECT_DOUBLE_EQ(qp.scale[0], 4.0 / 15.0);
  EXPECT_EQ(qp.zero_point[0], 4);
  EXPECT_EQ(qp.lo, 0);
  EXPECT_EQ(qp.hi, 15);
}

TEST(CalibrateTest, ConstantRoundTrips) {
  for (Real c : {5.0, -3.25, 0.0})
    for (auto scheme : {Scheme::symmetric, Scheme::asymmetric})
      for (int bits : {4, 6, 8}) {
        const Tensor x({2, 3}, c);
        const QuantParams qp = calibrate(x, bits, scheme, Granularity::per_tensor);
        const Tensor back = dequantize(quantize(x, qp), qp);
        for (auto v : back.data()) EXPECT_EQ(v, c);
      }
}

TEST(CalibrateTest, Errors) {
  EXPECT_THROW(calibrate(Tensor(), 4, Scheme::symmetric, Granularity::per_tensor), ArgumentError);
  EXPECT_THROW(calibrate(Tensor({2}, 1.0), 5, Scheme::symmetric, Granularity::per_tensor), ArgumentError);
}

TEST(CalibrateTest, ParamsSatisfyInvariants) {
  Rng r(31);
  for (int bits : {4, 6, 8})
    for (auto scheme : {Scheme::symmetric, Scheme::asymmetric})
      for (auto gran : {Granularity::per_tensor, Granularity::per_channel}) {
        const QuantParams qp = calibrate(r.normal_tensor({6, 10}), bits, scheme, gran);
        EXPECT_NO_THROW(qp.validate());
        EXPECT_EQ(qp.channels(), gran == Granularity::per_channel ? 6u : 1u);
        if (scheme == Scheme::symmetric) {
          EXPECT_EQ(qp.lo, -(1 << (bits - 1)));
          EXPECT_EQ(qp.hi, (1 << (bits - 1)) - 1);
        } else {
          EXPECT_EQ(qp.lo, 0);
          EXPECT_EQ(qp.hi, (1 << bits) - 1);
        }
      }
}

TEST(QuantizeTest, Examples) {
  const QuantParams qp = sym4(1);
  EXPECT_EQ(q1(0, qp), 0);
  EXPECT_EQ(q1(2.4, qp), 2);
  EXPECT_EQ(q1(100, qp), 7);
  EXPECT_EQ(q1(-100, qp), -8);
}

TEST(QuantizeTest, TiesToEven) {
  const QuantParams qp = sym4(1);
  EXPECT_EQ(q1(0.5, qp), 0);
  EXPECT_EQ(q1(1.5, qp), 2);
  EXPECT_EQ(q1(2.5, qp), 2);
  EXPECT_EQ(q1(-2.5, qp), -2);
}

TEST(QuantizeTest, MatchesScalarOracle) {
  Rng r(32);
  for (int trial = 0; trial < 20; ++trial) {
    const QuantParams qp = calibrate(r.normal_tensor({1, 16}), 6, Scheme::asymmetric, Granularity::per_tensor);
    const Tensor x = r.normal_tensor({1, 64}, 1.5);
    const IntTensor xi = quantize(x, qp);
    for (std::size_t i = 0; i < x.numel(); ++i)
      EXPECT_EQ(xi[i], reference_quant(x[i], qp.scale[0], qp.zero_point[0], qp.lo, qp.hi));
  }
}

TEST(DequantizeTest, Examples) {
  EXPECT_EQ(dequantize(IntTensor({1}, 0), sym4(1))[0], 0.0);
  QuantParams qp = calibrate(Tensor::matrix(1, 2, {-1, 3}), 4, Scheme::asymmetric, Granularity::per_tensor);
  EXPECT_EQ(dequantize(IntTensor({1}, 4), qp)[0], 0.0);
  EXPECT_THROW(dequantize(IntTensor({1}, 16), qp), InvariantViolation);
  EXPECT_THROW(dequantize(IntTensor({1}, -1), qp), InvariantViolation);
}

TEST(QuantizerProperty, RoundTripWithinHalfStep) {
  Rng r(33);
  for (int bits : {4, 6, 8}) {
    const Tensor x = r.normal_tensor({4, 50});
    for (auto scheme : {Scheme::symmetric, Scheme::asymmetric}) {
      const QuantParams qp = calibrate(x, bits, scheme, Granularity::per_tensor);
      const Tensor back = dequantize(quantize(x, qp), qp);
      for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_LE(std::abs(x[i] - back[i]), qp.scale[0] / 2 * (1 + 1e-12));
    }
  }
}

TEST(QuantizerProperty, PerChannelRoundTrip) {
  Rng r(34);
  Tensor w = r.normal_tensor({8, 12});
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t k = 0; k < 12; ++k) w.at(c, k) *= static_cast<Real>(c + 1);
  const QuantParams qp = calibrate(w, 4, Scheme::symmetric, Granularity::per_channel);
  const Tensor back = fake_quant(w, qp);
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t k = 0; k < 12; ++k) EXPECT_LE(std::abs(w.at(c, k) - back.at(c, k)), qp.scale[c] / 2 * (1 + 1e-12));
}

TEST(QuantizerProperty, Monotone) {
  Rng r(35);
  const QuantParams qp = calibrate(r.normal_tensor({1, 32}), 4, Scheme::asymmetric, Granularity::per_tensor);
  std::vector<Real> xs;
  for (int i = 0; i < 400; ++i) xs.push_back(-4 + 0.02 * i);
  const IntTensor xi = quantize(Tensor({xs.size()}, xs), qp);
  for (std::size_t i = 1; i < xs.size(); ++i) EXPECT_LE(xi[i - 1], xi[i]);
}

TEST(QuantizerProperty, Idempotent) {
  Rng r(36);
  for (int bits : {4, 6, 8}) {
    const Tensor x = r.normal_tensor({3, 40}, 2);
    const QuantParams qp = calibrate(x, bits, Scheme::asymmetric, Granularity::per_tensor);
    const Tensor once = fake_quant(x, qp);
    EXPECT_EQ(fake_quant(once, qp), once);
  }
}

TEST(QuantizerProperty, FullPrecisionIsIdentity) {
  Rng r(37);
  const Tensor x = r.normal_tensor({3, 7});
  const QuantParams qp = calibrate(x, 32, Scheme::asymmetric, Granularity::per_tensor);
  EXPECT_FALSE(qp.enabled());
  EXPECT_EQ(fake_quant(x, qp), x);
  EXPECT_THROW(quantize(x, qp), StateError);
}

TEST(FakeQuantTest, SteMultipliers) {
  const QuantParams qp = sym4(1);
  ad::Tape t;
  const ad::Var x = t.parameter(Tensor::matrix(1, 3, {2.4, 100, -3.0}));
  const ad::Var y = ad::fake_quant(x, qp);
  t.backward(ad::mean_square(y));
  // d mean(y^2) / dy = 2 y / 3, passed where the element was not clipped.
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 2.0 / 3);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 2 * -3.0 / 3);
}

TEST(FakeQuantTest, ScalarStraightThroughExample) {
  ad::Tape t;
  const ad::Var x = t.parameter(Tensor::scalar(2.4));
  t.backward(ad::mean_square(ad::fake_quant(x, sym4(1))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
}

TEST(FakeQuantTest, MaskMatchesClipIndicator) {
  Rng r(38);
  const Tensor x = r.normal_tensor({4, 25}, 3);
  const QuantParams qp = calibrate(r.normal_tensor({1, 10}), 4, Scheme::asymmetric, Granularity::per_tensor);
  const Tensor up = r.normal_tensor(x.shape());
  ad::Tape t;
  const ad::Var xv = t.parameter(x);
  const ad::Var y = ad::fake_quant(xv, qp);
  t.backward(ad::mean_square(ad::mul(y, t.constant(up))));
  const Tensor g = xv.grad();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const Real v = std::nearbyint(x[i] / qp.scale[0]) + qp.zero_point[0];
    const bool inside = v >= qp.lo && v <= qp.hi;
    const Real expected = inside ? 2 * y.value()[i] * up[i] * up[i] / static_cast<Real>(x.numel()) : 0.0;
    EXPECT_DOUBLE_EQ(g[i], expected);
  }
}
