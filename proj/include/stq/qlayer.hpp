#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stq/autodiff.hpp"
#include "stq/linalg.hpp"
#include "stq/quantizer.hpp"

namespace stq {

enum class LayerKind { linear, conv2d, conv3d };
enum class ForwardMode { fp_exact, fake_quant, int_path };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv3d: return "conv3d";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "linear") return LayerKind::linear;
  if (s == "conv2d") return LayerKind::conv2d;
  if (s == "conv3d") return LayerKind::conv3d;
  throw ConfigError("unknown layer kind '" + s + "'");
}

// A full-precision Linear / Conv2d / Conv3d layer. Every kind is expressed
// as a convolution over T x C x H x W activations: linear is a 1x1x1 kernel
// mixing channels at each position, conv2d has a temporal extent of 1.
// `weight` is the flattened out x in matrix in im2col column order.
struct LayerDef {
  LayerKind kind = LayerKind::linear;
  ConvGeometry geom;
  Tensor weight;  // N x K
  Tensor bias;    // N, or empty

  std::size_t out_features() const { return geom.out_channels; }
  std::size_t in_features() const { return geom.patch(); }

  static LayerDef linear(std::size_t in, std::size_t out) {
    LayerDef d;
    d.kind = LayerKind::linear;
    d.geom.in_channels = in;
    d.geom.out_channels = out;
    return d;
  }

  static LayerDef conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t pad) {
    LayerDef d;
    d.kind = LayerKind::conv2d;
    d.geom.in_channels = in;
    d.geom.out_channels = out;
    d.geom.kernel = {1, k, k};
    d.geom.pad = {0, pad, pad};
    return d;
  }

  static LayerDef conv3d(std::size_t in, std::size_t out, std::size_t k, std::size_t pad) {
    LayerDef d;
    d.kind = LayerKind::conv3d;
    d.geom.in_channels = in;
    d.geom.out_channels = out;
    d.geom.kernel = {k, k, k};
    d.geom.pad = {pad, pad, pad};
    return d;
  }
};

// Reference full-precision forward: im2col(x) * W^T + bias.
inline Tensor dense_forward(const LayerDef& layer, const Tensor& x) {
  check_conv_input(x, layer.geom, "layer forward");
  const auto [to, ho, wo] = layer.geom.output_extents(x.dim(0), x.dim(2), x.dim(3));
  Tensor rows = matmul_nt(im2col(x, layer.geom), layer.weight);
  if (!layer.bias.empty()) {
    const std::size_t n = rows.cols();
    for (std::size_t i = 0; i < rows.numel(); ++i) rows[i] += layer.bias[i % n];
  }
  return rows_to_frames(rows, to, ho, wo);
}

struct CompressionStats {
  std::uint64_t params_bits = 0;
  std::uint64_t baseline_params_bits = 0;
  std::uint64_t ops_count = 0;        // MACs of both branches plus rotation
  std::uint64_t baseline_ops = 0;     // MACs of the full-precision layer
  double equivalent_ops = 0;          // low-bit MACs weighted by (bits_w * bits_a) / 32^2
  double fp_branch_ratio = 0;         // r (m + n) / (m n)
};

// Composite layer: out = X L1 L2 + Q_A(X H) Q_W(H^T R) + bias + a_bias,
// with R = W - L1 L2. Matrices use the out x in orientation of LayerDef,
// so L1 is N x r and L2 is r x K. Rotation runs along the contraction axis
// in blocks of C_in (one block per kernel tap).
class QLayer {
 public:
  QLayer(const LayerDef& def, std::uint64_t hadamard_seed, int bits_w, int bits_a)
      : def_(def), hadamard_seed_(hadamard_seed), bits_w_(bits_w), bits_a_(bits_a) {
    if (!valid_bits(bits_w) || !valid_bits(bits_a))
      throw ArgumentError("qlayer: unsupported bit-width");
    if (def_.weight.shape() != Shape{def_.out_features(), def_.in_features()})
      throw DimensionError("qlayer: weight " + shape_str(def_.weight.shape()) + " does not match geometry");
    if (!def_.bias.empty() && def_.bias.numel() != def_.out_features())
      throw DimensionError("qlayer: bias length mismatch");
    signs_ = hadamard_signs(rotation_block(), hadamard_seed_);
    a_bias_ = Tensor({def_.out_features()}, 0.0);
    residual_ = def_.weight;
    wq_ = QuantParams::passthrough();
    aq_ = QuantParams::passthrough();
  }

  LayerKind kind() const { return def_.kind; }
  const LayerDef& def() const { return def_; }
  const ConvGeometry& geometry() const { return def_.geom; }
  const Tensor& weight() const { return def_.weight; }
  const Tensor& bias() const { return def_.bias; }
  bool has_bias() const { return !def_.bias.empty(); }
  std::size_t out_features() const { return def_.out_features(); }
  std::size_t in_features() const { return def_.in_features(); }
  std::size_t rank() const { return rank_; }
  std::uint64_t hadamard_seed() const { return hadamard_seed_; }
  const std::vector<Real>& signs() const { return signs_; }
  int bits_w() const { return bits_w_; }
  int bits_a() const { return bits_a_; }

  std::size_t rotation_block() const {
    return def_.kind == LayerKind::linear ? def_.in_features() : def_.geom.in_channels;
  }

  const Tensor& l1() const { return l1_; }
  const Tensor& l2() const { return l2_; }
  const Tensor& residual() const { return residual_; }

  // Installs new low-rank factors and recomputes R = W - L1 L2. Empty
  // factors mean rank 0 (no full-precision branch).
  void set_low_rank(Tensor l1, Tensor l2) {
    if (l1.empty() != l2.empty()) throw ArgumentError("qlayer: both factors must be set or both empty");
    if (l1.empty()) {
      l1_ = Tensor();
      l2_ = Tensor();
      rank_ = 0;
      residual_ = def_.weight;
      return;
    }
    if (l1.rank() != 2 || l2.rank() != 2 || l1.rows() != out_features() || l2.cols() != in_features() ||
        l1.cols() != l2.rows())
      throw DimensionError("qlayer: low-rank factors " + shape_str(l1.shape()) + " x " +
                           shape_str(l2.shape()) + " do not fit " + shape_str(def_.weight.shape()));
    rank_ = l1.cols();
    l1_ = std::move(l1);
    l2_ = std::move(l2);
    residual_ = sub(def_.weight, matmul(l1_, l2_));
  }

  const QuantParams& weight_quant() const { return wq_; }
  const QuantParams& act_quant() const { return aq_; }
  bool weight_quant_ready() const { return wq_ready_ || bits_w_ == kFullPrecisionBits; }
  bool act_quant_ready() const { return aq_ready_ || bits_a_ == kFullPrecisionBits; }

  void set_weight_quant(QuantParams qp) {
    qp.validate();
    wq_ = std::move(qp);
    wq_ready_ = true;
  }
  void set_act_quant(QuantParams qp) {
    qp.validate();
    aq_ = std::move(qp);
    aq_ready_ = true;
  }

  // Symmetric per-output-channel fit on the rotated residual.
  void calibrate_weight_quant() {
    set_weight_quant(calibrate(rotate_weights(residual_), bits_w_, Scheme::symmetric,
                               Granularity::per_channel));
  }

  // Asymmetric per-tensor fit over a set of layer inputs (T x C x H x W).
  void calibrate_act_quant(std::span<const Tensor> inputs) {
    if (inputs.empty()) throw ArgumentError("calibrate_act_quant: no inputs");
    Real mn = 0, mx = 0;
    bool first = true;
    for (const auto& x : inputs) {
      const Tensor r = rotate(im2col(x, def_.geom));
      for (auto v : r.data()) {
        if (first) mn = mx = v, first = false;
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
    }
    const Tensor range = Tensor::matrix(1, 2, {mn, mx});
    set_act_quant(calibrate(range, bits_a_, Scheme::asymmetric, Granularity::per_tensor));
  }

  const Tensor& a_bias() const { return a_bias_; }
  void set_a_bias(Tensor v) {
    if (v.numel() != out_features()) throw DimensionError("qlayer: a_bias length mismatch");
    a_bias_ = std::move(v).reshaped({out_features()});
  }

  // bias + a_bias, the vector actually added to the output.
  Tensor effective_bias() const {
    Tensor b = a_bias_;
    if (has_bias())
      for (std::size_t i = 0; i < b.numel(); ++i) b[i] = def_.bias[i] + a_bias_[i];
    return b;
  }

  // Folds a_bias into the layer bias (creating one if absent).
  void fuse_bias() {
    def_.bias = effective_bias();
    a_bias_ = Tensor({out_features()}, 0.0);
  }

  // X H on an im2col matrix (rows are positions).
  Tensor rotate(const Tensor& cols) const { return block_fwht(cols, signs_); }
  // H^T R, expressed on the out x in residual: each row is rotated.
  Tensor rotate_weights(const Tensor& r) const { return block_fwht(r, signs_); }
  Tensor unrotate(const Tensor& cols) const { return block_fwht_inverse(cols, signs_); }

  // Parameters of one graph evaluation. Callers decide which of them are
  // trainable by creating them as tape parameters or constants.
  struct Vars {
    ad::Var l1, l2, a_bias;
  };

  Vars make_vars(ad::Tape& t, bool train_low_rank, bool train_bias) const {
    Vars v;
    if (rank_ > 0) {
      v.l1 = train_low_rank ? t.parameter(l1_) : t.constant(l1_);
      v.l2 = train_low_rank ? t.parameter(l2_) : t.constant(l2_);
    }
    v.a_bias = train_bias ? t.parameter(a_bias_) : t.constant(a_bias_);
    return v;
  }

  ad::Var forward(ad::Tape& t, const ad::Var& x, const Vars& p, ForwardMode mode) const {
    if (mode == ForwardMode::int_path) throw ArgumentError("qlayer: int_path has no graph form");
    require_quant_ready(mode);
    check_conv_input(x.value(), def_.geom, "qlayer forward");
    const auto [to, ho, wo] = def_.geom.output_extents(x.value().dim(0), x.value().dim(2), x.value().dim(3));
    const ad::Var cols = ad::im2col(x, def_.geom);
    const ad::Var w = t.constant(def_.weight);

    ad::Var r = w;
    ad::Var out;
    bool have_out = false;
    if (rank_ > 0) {
      out = ad::matmul_nt(ad::matmul_nt(cols, p.l2), p.l1);
      have_out = true;
      r = ad::sub(w, ad::matmul(p.l1, p.l2));
    }
    ad::Var low;
    if (mode == ForwardMode::fp_exact) {
      low = ad::matmul_nt(cols, r);
    } else {
      const ad::Var xq = ad::fake_quant(ad::block_fwht(cols, signs_), aq_);
      const ad::Var wq = ad::fake_quant(ad::block_fwht(r, signs_), wq_);
      low = ad::matmul_nt(xq, wq);
    }
    out = have_out ? ad::add(out, low) : low;
    const ad::Var b = has_bias() ? ad::add(t.constant(def_.bias), p.a_bias) : p.a_bias;
    return ad::rows_to_frames(ad::add_row(out, b), to, ho, wo);
  }

  Tensor forward(const Tensor& x, ForwardMode mode) const {
    if (mode == ForwardMode::int_path) return forward_int(x);
    ad::Tape t;
    const Vars p = make_vars(t, false, false);
    return forward(t, t.constant(x), p, mode).value();
  }

  // Integer path: both operands quantized, products accumulated in int64,
  // zero-point corrections applied before rescaling by s_a * s_w.
  Tensor forward_int(const Tensor& x) const {
    require_quant_ready(ForwardMode::int_path);
    if (!wq_.enabled() || !aq_.enabled())
      throw StateError("qlayer: int_path needs low-bit weight and activation quantizers");
    check_conv_input(x, def_.geom, "qlayer forward");
    const auto [to, ho, wo] = def_.geom.output_extents(x.dim(0), x.dim(2), x.dim(3));
    const Tensor cols = im2col(x, def_.geom);
    const IntTensor xi = quantize(rotate(cols), aq_);
    const IntTensor wi = quantize(rotate_weights(residual_), wq_);
    const std::size_t P = cols.rows(), K = cols.cols(), N = out_features();
    const std::int64_t za = aq_.zero_point[0];

    std::vector<std::int64_t> wsum(N, 0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) wsum[n] += wi[n * K + k];

    Tensor rows({P, N});
    for (std::size_t p = 0; p < P; ++p) {
      const std::int32_t* xr = xi.data().data() + p * K;
      std::int64_t xsum = 0;
      for (std::size_t k = 0; k < K; ++k) xsum += xr[k];
      for (std::size_t n = 0; n < N; ++n) {
        const std::int32_t* wr = wi.data().data() + n * K;
        std::int64_t acc = 0;
        for (std::size_t k = 0; k < K; ++k) acc += static_cast<std::int64_t>(xr[k]) * wr[k];
        const std::int64_t zw = wq_.zero_point[wq_.channels() == 1 ? 0 : n];
        acc += -za * wsum[n] - zw * xsum + static_cast<std::int64_t>(K) * za * zw;
        const Real sw = wq_.scale[wq_.channels() == 1 ? 0 : n];
        rows.at(p, n) = aq_.scale[0] * sw * static_cast<Real>(acc);
      }
    }
    if (rank_ > 0) rows = add(matmul_nt(matmul_nt(cols, l2_), l1_), rows);
    const Tensor b = effective_bias();
    for (std::size_t i = 0; i < rows.numel(); ++i) rows[i] += b[i % N];
    return rows_to_frames(rows, to, ho, wo);
  }

  // Storage and MAC accounting for `positions` output positions.
  CompressionStats compression_stats(int bits_w, int bits_a, std::uint64_t positions = 1) const {
    const std::uint64_t m = in_features(), n = out_features(), r = rank_;
    const bool bias_stored = has_bias() || max_abs(a_bias_.data()) > 0;
    CompressionStats s;
    s.params_bits = m * n * static_cast<std::uint64_t>(bits_w) + r * (m + n) * 32 + (bias_stored ? n * 32 : 0);
    s.baseline_params_bits = m * n * 32 + (has_bias() ? n * 32 : 0);
    const bool rotated = bits_w != kFullPrecisionBits || bits_a != kFullPrecisionBits;
    const std::uint64_t d = rotation_block();
    const std::uint64_t rotation = rotated ? m * static_cast<std::uint64_t>(std::countr_zero(d)) : 0;
    s.ops_count = positions * (m * n + r * (m + n) + rotation);
    s.baseline_ops = positions * m * n;
    s.equivalent_ops = static_cast<double>(positions) *
                       (static_cast<double>(m * n) * bits_w * bits_a / (32.0 * 32.0) +
                        static_cast<double>(r * (m + n) + rotation));
    s.fp_branch_ratio = static_cast<double>(r * (m + n)) / static_cast<double>(m * n);
    return s;
  }

 private:
  void require_quant_ready(ForwardMode mode) const {
    if (mode == ForwardMode::fp_exact) return;
    if (!weight_quant_ready() || !act_quant_ready())
      throw StateError("qlayer: quantizers not calibrated for quantized forward");
  }

  LayerDef def_;
  std::uint64_t hadamard_seed_;
  int bits_w_;
  int bits_a_;
  std::vector<Real> signs_;
  std::size_t rank_ = 0;
  Tensor l1_, l2_, residual_;
  QuantParams wq_, aq_;
  bool wq_ready_ = false;
  bool aq_ready_ = false;
  Tensor a_bias_;
};

}  // namespace stq
