#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stq/qlayer.hpp"
#include "stq/rng.hpp"

namespace stq {

// Deterministic spatio-temporal denoiser used in place of a real UNet:
//   conv2d 4->16 (3x3) > SiLU > conv3d 16->16 (3x3x3) > SiLU >
//   linear 16->16 > SiLU > conv2d 16->4 (3x3)
// Input and output are T x 4 x H x W.
struct ToyBackbone {
  std::vector<LayerDef> layers;

  static constexpr std::size_t kChannels = 4;
  static constexpr std::size_t kHidden = 16;

  // Weights and biases uniform in +-1/sqrt(fan_in).
  static ToyBackbone make(std::uint64_t seed) {
    ToyBackbone b;
    b.layers = {LayerDef::conv2d(kChannels, kHidden, 3, 1), LayerDef::conv3d(kHidden, kHidden, 3, 1),
                LayerDef::linear(kHidden, kHidden), LayerDef::conv2d(kHidden, kChannels, 3, 1)};
    Rng rng(derive_seed(seed, 0xb0b));
    for (auto& l : b.layers) {
      const Real bound = 1 / std::sqrt(static_cast<Real>(l.in_features()));
      l.weight = rng.uniform_tensor({l.out_features(), l.in_features()}, -bound, bound);
      l.bias = rng.uniform_tensor({l.out_features()}, -bound, bound);
    }
    return b;
  }

  // Every layer but the last is followed by SiLU.
  bool activated(std::size_t i) const { return i + 1 < layers.size(); }

  void check_input(const Tensor& x) const {
    require_rank(x, 4, "backbone");
    if (x.dim(1) != kChannels || x.dim(2) < 4 || x.dim(3) < 4)
      throw DimensionError("backbone: expected T x 4 x H x W with H, W >= 4, got " + shape_str(x.shape()));
  }

  Tensor forward(const Tensor& x) const {
    check_input(x);
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = dense_forward(layers[i], h);
      if (activated(i)) h = ad::silu(h);
    }
    return h;
  }
};

// Which layers to replace and at what precision.
struct QuantConfig {
  int bits_w = 4;
  int bits_a = 4;
  std::set<LayerKind> kinds{LayerKind::linear, LayerKind::conv2d, LayerKind::conv3d};
  std::uint64_t seed = 0;  // source of the per-layer Hadamard seeds

  static std::set<LayerKind> parse_kinds(const std::vector<std::string>& names) {
    std::set<LayerKind> out;
    for (const auto& n : names) out.insert(layer_kind_from_string(n));
    return out;
  }
};

// Per-layer activations of one forward pass. Outputs are pre-activation.
struct ModelTrace {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
  Tensor result;
};

// A backbone whose matching layers are replaced by QLayers sharing the
// original weights and biases.
class QuantModel {
 public:
  QuantModel() = default;

  QuantModel(const ToyBackbone& backbone, const QuantConfig& cfg) : fp_(backbone) {
    if (!valid_bits(cfg.bits_w) || !valid_bits(cfg.bits_a))
      throw ConfigError("quant config: bit-widths must be one of 4, 6, 8, 32");
    for (std::size_t i = 0; i < fp_.layers.size(); ++i) {
      const auto& def = fp_.layers[i];
      if (cfg.kinds.count(def.kind))
        q_.emplace_back(QLayer(def, derive_seed(cfg.seed, 0x4ad0 + i), cfg.bits_w, cfg.bits_a));
      else
        q_.emplace_back(std::nullopt);
    }
  }

  std::size_t size() const { return q_.size(); }
  const ToyBackbone& backbone() const { return fp_; }
  bool quantized(std::size_t i) const { return q_.at(i).has_value(); }
  QLayer& layer(std::size_t i) {
    if (!q_.at(i)) throw ArgumentError("model: layer " + std::to_string(i) + " is not quantized");
    return *q_[i];
  }
  const QLayer& layer(std::size_t i) const {
    if (!q_.at(i)) throw ArgumentError("model: layer " + std::to_string(i) + " is not quantized");
    return *q_[i];
  }
  std::vector<std::size_t> quantized_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < q_.size(); ++i)
      if (q_[i]) idx.push_back(i);
    return idx;
  }

  Tensor layer_forward(std::size_t i, const Tensor& x, ForwardMode mode) const {
    return q_[i] ? q_[i]->forward(x, mode) : dense_forward(fp_.layers[i], x);
  }

  Tensor forward(const Tensor& x, ForwardMode mode) const { return trace(x, mode, false).result; }

  ModelTrace trace(const Tensor& x, ForwardMode mode, bool keep = true) const {
    fp_.check_input(x);
    ModelTrace tr;
    Tensor h = x;
    for (std::size_t i = 0; i < q_.size(); ++i) {
      if (keep) tr.inputs.push_back(h);
      Tensor y = layer_forward(i, h, mode);
      if (keep) tr.outputs.push_back(y);
      h = fp_.activated(i) ? ad::silu(y) : std::move(y);
    }
    tr.result = std::move(h);
    return tr;
  }

  // Graph forward. `vars` receives one entry per layer (empty Vars for
  // unquantized layers).
  ad::Var forward(ad::Tape& t, const ad::Var& x, ForwardMode mode, bool train_low_rank, bool train_bias,
                  std::vector<QLayer::Vars>& vars) const {
    fp_.check_input(x.value());
    vars.assign(q_.size(), QLayer::Vars{});
    ad::Var h = x;
    for (std::size_t i = 0; i < q_.size(); ++i) {
      ad::Var y;
      if (q_[i]) {
        vars[i] = q_[i]->make_vars(t, train_low_rank, train_bias);
        y = q_[i]->forward(t, h, vars[i], mode);
      } else {
        const auto& def = fp_.layers[i];
        const auto [to, ho, wo] = def.geom.output_extents(h.value().dim(0), h.value().dim(2), h.value().dim(3));
        ad::Var rows = ad::matmul_nt(ad::im2col(h, def.geom), t.constant(def.weight));
        if (!def.bias.empty()) rows = ad::add_row(rows, t.constant(def.bias));
        y = ad::rows_to_frames(rows, to, ho, wo);
      }
      h = fp_.activated(i) ? ad::silu(y) : y;
    }
    return h;
  }

 private:
  ToyBackbone fp_;
  std::vector<std::optional<QLayer>> q_;
};

}  // namespace stq
