#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stq/autodiff.hpp"
#include "stq/tensor.hpp"

namespace stq {

enum class Scheme { symmetric, asymmetric };
enum class Granularity { per_tensor, per_channel };

inline const char* to_string(Scheme s) { return s == Scheme::symmetric ? "symmetric" : "asymmetric"; }
inline const char* to_string(Granularity g) {
  return g == Granularity::per_tensor ? "per_tensor" : "per_channel";
}

// Bit-width that means "not quantized": quantizers built with it pass values
// through unchanged.
inline constexpr int kFullPrecisionBits = 32;

inline bool valid_bits(int bits) {
  return bits == 4 || bits == 6 || bits == 8 || bits == kFullPrecisionBits;
}

// Uniform affine quantizer state. Per-channel parameters index the leading
// axis of the tensor they are applied to.
struct QuantParams {
  int bits = kFullPrecisionBits;
  Scheme scheme = Scheme::symmetric;
  Granularity granularity = Granularity::per_tensor;
  std::vector<Real> scale{1.0};
  std::vector<std::int32_t> zero_point{0};
  std::int32_t lo = 0;
  std::int32_t hi = 0;

  bool enabled() const { return bits != kFullPrecisionBits; }
  std::size_t channels() const { return scale.size(); }

  static QuantParams passthrough() { return QuantParams{}; }

  static std::pair<std::int32_t, std::int32_t> clip_range(int bits, Scheme scheme) {
    if (scheme == Scheme::symmetric) return {-(1 << (bits - 1)), (1 << (bits - 1)) - 1};
    return {0, (1 << bits) - 1};
  }

  void validate() const {
    if (!valid_bits(bits)) throw ArgumentError("quantizer: unsupported bit-width " + std::to_string(bits));
    if (!enabled()) return;
    if (scale.empty() || scale.size() != zero_point.size())
      throw InvariantViolation("quantizer: scale / zero-point count mismatch");
    if (granularity == Granularity::per_tensor && scale.size() != 1)
      throw InvariantViolation("quantizer: per-tensor params must have one channel");
    const auto [l, u] = clip_range(bits, scheme);
    if (lo != l || hi != u) throw InvariantViolation("quantizer: clip range does not match scheme");
    for (std::size_t c = 0; c < scale.size(); ++c) {
      if (!(scale[c] > 0) || !std::isfinite(scale[c]))
        throw InvariantViolation("quantizer: scale must be positive");
      if (scheme == Scheme::symmetric && zero_point[c] != 0)
        throw InvariantViolation("quantizer: symmetric zero-point must be 0");
      if (zero_point[c] < lo || zero_point[c] > hi)
        throw InvariantViolation("quantizer: zero-point outside clip range");
    }
  }

  bool operator==(const QuantParams&) const = default;
};

namespace detail {

// Channel index of flat element i for a tensor whose leading axis carries
// `channels` channels.
inline std::size_t channel_of(std::size_t i, std::size_t numel, std::size_t channels) {
  return channels == 1 ? 0 : i / (numel / channels);
}

inline void check_channels(const QuantParams& qp, std::size_t numel, std::size_t leading) {
  if (qp.channels() == 1) return;
  if (leading != qp.channels() || numel % qp.channels() != 0)
    throw DimensionError("quantizer: tensor leading axis " + std::to_string(leading) +
                         " does not match " + std::to_string(qp.channels()) + " channels");
}

inline std::int32_t quantize_scalar(Real x, Real s, std::int32_t z, std::int32_t lo, std::int32_t hi) {
  // nearbyint honours the default round-to-nearest-even mode.
  const Real v = std::nearbyint(x / s) + static_cast<Real>(z);
  return static_cast<std::int32_t>(std::clamp(v, static_cast<Real>(lo), static_cast<Real>(hi)));
}

}  // namespace detail

// Fits (s, z) to a sample. Symmetric: s = max|x| / (2^(b-1) - 1), z = 0.
// Asymmetric: s = (max - min) / (2^b - 1), z = clip(round(-min / s)).
// A degenerate range uses s = |c| (1 when c = 0) with z chosen so the
// constant round-trips exactly.
inline QuantParams calibrate(const Tensor& sample, int bits, Scheme scheme, Granularity granularity) {
  if (sample.empty()) throw ArgumentError("calibrate: empty sample");
  if (!valid_bits(bits)) throw ArgumentError("calibrate: unsupported bit-width " + std::to_string(bits));
  QuantParams qp;
  qp.bits = bits;
  qp.scheme = scheme;
  qp.granularity = granularity;
  if (bits == kFullPrecisionBits) return qp;
  std::tie(qp.lo, qp.hi) = QuantParams::clip_range(bits, scheme);

  const std::size_t channels = granularity == Granularity::per_channel ? sample.dim(0) : 1;
  const std::size_t per = sample.numel() / channels;
  qp.scale.assign(channels, 1.0);
  qp.zero_point.assign(channels, 0);
  for (std::size_t c = 0; c < channels; ++c) {
    Real mn = sample[c * per], mx = sample[c * per];
    for (std::size_t i = c * per; i < (c + 1) * per; ++i) {
      mn = std::min(mn, sample[i]);
      mx = std::max(mx, sample[i]);
    }
    if (scheme == Scheme::symmetric) {
      const Real amax = std::max(std::abs(mn), std::abs(mx));
      qp.scale[c] = amax > 0 ? amax / static_cast<Real>(qp.hi) : 1.0;
      qp.zero_point[c] = 0;
    } else if (mx > mn) {
      qp.scale[c] = (mx - mn) / static_cast<Real>(qp.hi - qp.lo);
      const Real z = std::nearbyint(-mn / qp.scale[c]);
      qp.zero_point[c] = static_cast<std::int32_t>(std::clamp(z, Real(qp.lo), Real(qp.hi)));
    } else {
      // x == c everywhere: c / |c| = +-1 lands on an integer grid point.
      qp.scale[c] = mn != 0 ? std::abs(mn) : 1.0;
      qp.zero_point[c] = mn < 0 ? 1 : 0;
    }
  }
  qp.validate();
  return qp;
}

inline IntTensor quantize(const Tensor& x, const QuantParams& qp) {
  qp.validate();
  if (!qp.enabled()) throw StateError("quantize: full-precision params have no integer grid");
  detail::check_channels(qp, x.numel(), x.empty() ? 0 : x.dim(0));
  IntTensor out(x.shape());
  const std::size_t n = x.numel(), ch = qp.channels();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = detail::channel_of(i, n, ch);
    out[i] = detail::quantize_scalar(x[i], qp.scale[c], qp.zero_point[c], qp.lo, qp.hi);
  }
  return out;
}

inline Tensor dequantize(const IntTensor& xi, const QuantParams& qp) {
  qp.validate();
  if (!qp.enabled()) throw StateError("dequantize: full-precision params have no integer grid");
  detail::check_channels(qp, xi.numel(), xi.empty() ? 0 : xi.dim(0));
  Tensor out(xi.shape());
  const std::size_t n = xi.numel(), ch = qp.channels();
  for (std::size_t i = 0; i < n; ++i) {
    if (xi[i] < qp.lo || xi[i] > qp.hi)
      throw InvariantViolation("dequantize: integer " + std::to_string(xi[i]) + " outside [" +
                               std::to_string(qp.lo) + ", " + std::to_string(qp.hi) + "]");
    const std::size_t c = detail::channel_of(i, n, ch);
    out[i] = qp.scale[c] * static_cast<Real>(xi[i] - qp.zero_point[c]);
  }
  return out;
}

struct FakeQuantResult {
  Tensor value;
  std::vector<std::uint8_t> mask;  // 1 where the element was not clipped
};

STQ_HOT inline FakeQuantResult fake_quant_with_mask(const Tensor& x, const QuantParams& qp) {
  qp.validate();
  FakeQuantResult r{x, std::vector<std::uint8_t>(x.numel(), 1)};
  if (!qp.enabled()) return r;
  detail::check_channels(qp, x.numel(), x.empty() ? 0 : x.dim(0));
  const std::size_t n = x.numel(), ch = qp.channels();
  if (ch == 1) {
    const Real s = qp.scale[0], z = static_cast<Real>(qp.zero_point[0]);
    const Real lo = qp.lo, hi = qp.hi;
    for (std::size_t i = 0; i < n; ++i) {
      const Real v = std::nearbyint(x[i] / s) + z;
      const Real q = std::clamp(v, lo, hi);
      r.mask[i] = (v == q);
      r.value[i] = s * (q - z);
    }
    return r;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = detail::channel_of(i, n, ch);
    const Real s = qp.scale[c];
    const Real v = std::nearbyint(x[i] / s) + static_cast<Real>(qp.zero_point[c]);
    const Real q = std::clamp(v, Real(qp.lo), Real(qp.hi));
    r.mask[i] = (v == q);
    r.value[i] = s * (q - static_cast<Real>(qp.zero_point[c]));
  }
  return r;
}

inline Tensor fake_quant(const Tensor& x, const QuantParams& qp) { return fake_quant_with_mask(x, qp).value; }

// Freezes the rounding residuals of every fake-quant op on a tape. In
// `record` mode each op stores (output - input) and its clip mask; in
// `replay` mode it returns input + stored residual (stored output where
// clipped). The replayed function is smooth, its derivative is exactly the
// straight-through rule, and it coincides with the real forward at the
// recorded point. Gradient checks use it for finite differences.
struct RoundingFreeze {
  enum class Mode { record, replay };

  Mode mode = Mode::record;
  std::vector<Tensor> residual;
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t cursor = 0;

  void start_replay() {
    mode = Mode::replay;
    cursor = 0;
  }
};

namespace ad {

// Fake quantization with the straight-through gradient: upstream gradients
// pass where the element was not clipped, zero elsewhere.
inline Var fake_quant(const Var& x, const QuantParams& qp) {
  Tape& t = *x.tape();
  FakeQuantResult r;
  if (RoundingFreeze* fz = t.rounding_freeze) {
    if (fz->mode == RoundingFreeze::Mode::record) {
      r = fake_quant_with_mask(x.value(), qp);
      Tensor res = r.value;
      for (std::size_t i = 0; i < res.numel(); ++i)
        if (r.mask[i]) res[i] -= x.value()[i];
      fz->residual.push_back(std::move(res));
      fz->masks.push_back(r.mask);
    } else {
      if (fz->cursor >= fz->residual.size()) throw StateError("fake_quant: replay ran past recording");
      const Tensor& res = fz->residual[fz->cursor];
      r.mask = fz->masks[fz->cursor];
      ++fz->cursor;
      require_same_shape(res, x.value(), "fake_quant replay");
      r.value = res;
      for (std::size_t i = 0; i < res.numel(); ++i)
        if (r.mask[i]) r.value[i] += x.value()[i];
    }
  } else {
    r = fake_quant_with_mask(x.value(), qp);
  }
  return t.record(std::move(r.value), {x}, [x, mask = std::move(r.mask)](Tape& t, const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.numel(); ++i)
      if (!mask[i]) gx[i] = 0;
    t.accumulate(x, gx);
  });
}

}  // namespace ad

}  // namespace stq
