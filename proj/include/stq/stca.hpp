#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "stq/calib.hpp"
#include "stq/linalg.hpp"
#include "stq/model.hpp"
#include "stq/optim.hpp"

namespace stq {

// Mean per-element energy of consecutive-frame differences of a
// T x C x H x W tensor.
inline Real temporal_complexity(const Tensor& x) {
  require_rank(x, 4, "temporal_complexity");
  const std::size_t T = x.dim(0);
  if (T < 2) throw ArgumentError("temporal_complexity: need at least 2 frames");
  const std::size_t frame = x.numel() / T;
  Real total = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Real e = 0;
    for (std::size_t i = 0; i < frame; ++i) {
      const Real d = x[(t + 1) * frame + i] - x[t * frame + i];
      e += d * d;
    }
    total += e / static_cast<Real>(frame);
  }
  return total / static_cast<Real>(T - 1);
}

// Mean over (t, c) of the population standard deviation over H x W.
inline Real spatial_complexity(const Tensor& x) {
  require_rank(x, 4, "spatial_complexity");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Real total = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* v = x.data().data() + p * hw;
    Real mean = 0;
    for (std::size_t i = 0; i < hw; ++i) mean += v[i];
    mean /= static_cast<Real>(hw);
    Real var = 0;
    for (std::size_t i = 0; i < hw; ++i) var += (v[i] - mean) * (v[i] - mean);
    total += std::sqrt(var / static_cast<Real>(hw));
  }
  return total / static_cast<Real>(planes);
}

struct ComplexityRecord {
  std::size_t layer_id = 0;
  std::size_t sample_id = 0;
  Real c_t = 0;
  Real c_s = 0;
};

struct RankPolicy {
  std::size_t r_min = 16;
  std::size_t r_max = 64;
  Real lower_pct = 25;
  Real upper_pct = 75;
  std::size_t r_init = 16;
  std::size_t multiple = 8;

  void validate() const {
    if (multiple == 0) throw ConfigError("rank policy: multiple must be positive");
    if (r_min > r_init || r_init > r_max) throw ConfigError("rank policy: need r_min <= r_init <= r_max");
    if (r_min % multiple || r_max % multiple || r_init % multiple)
      throw ConfigError("rank policy: r_min, r_max and r_init must be multiples of " + std::to_string(multiple));
    if (!(0 <= lower_pct && lower_pct <= upper_pct && upper_pct <= 100))
      throw ConfigError("rank policy: need 0 <= lower_pct <= upper_pct <= 100");
  }
};

struct Thresholds {
  Real l_t = 0, u_t = 0, l_s = 0, u_s = 0;
};

// Percentile thresholds of one layer's records.
inline Thresholds compute_thresholds(const std::vector<ComplexityRecord>& records, const RankPolicy& policy) {
  if (records.size() < 4) throw ArgumentError("compute_thresholds: need at least 4 records per layer");
  std::vector<Real> ct, cs;
  for (const auto& r : records) {
    ct.push_back(r.c_t);
    cs.push_back(r.c_s);
  }
  return {percentile(ct, policy.lower_pct), percentile(ct, policy.upper_pct), percentile(cs, policy.lower_pct),
          percentile(cs, policy.upper_pct)};
}

// Records grouped by layer_id; thresholds are computed per group.
inline std::map<std::size_t, Thresholds> compute_thresholds_per_layer(const std::vector<ComplexityRecord>& records,
                                                                      const RankPolicy& policy) {
  std::map<std::size_t, std::vector<ComplexityRecord>> by_layer;
  for (const auto& r : records) by_layer[r.layer_id].push_back(r);
  std::map<std::size_t, Thresholds> out;
  for (const auto& [id, recs] : by_layer) out[id] = compute_thresholds(recs, policy);
  return out;
}

// Net +-1 votes: +1 when a record is above both upper thresholds, -1 when
// below both lower ones.
inline long rank_drift(const std::vector<ComplexityRecord>& records, const Thresholds& th) {
  long drift = 0;
  for (const auto& r : records) {
    if (r.c_t > th.u_t && r.c_s > th.u_s)
      ++drift;
    else if (r.c_t < th.l_t && r.c_s < th.l_s)
      --drift;
  }
  return drift;
}

// r_init + drift, clamped to [r_min, r_max], then rounded to the nearest
// multiple (ties up).
inline std::size_t allocate_rank(const std::vector<ComplexityRecord>& records, const Thresholds& th,
                                 const RankPolicy& policy) {
  policy.validate();
  const long raw = static_cast<long>(policy.r_init) + rank_drift(records, th);
  const long clamped = std::clamp(raw, static_cast<long>(policy.r_min), static_cast<long>(policy.r_max));
  const long m = static_cast<long>(policy.multiple);
  return static_cast<std::size_t>((clamped + m / 2) / m * m);
}

// Complexity of every quantized layer's input, measured on the FP model.
inline std::vector<ComplexityRecord> measure_complexity(const QuantModel& model, const CalibSet& calib) {
  if (calib.empty()) throw ArgumentError("measure_complexity: empty calibration set");
  std::vector<ComplexityRecord> out;
  const auto idx = model.quantized_indices();
  for (std::size_t s = 0; s < calib.size(); ++s) {
    const ModelTrace tr = model.trace(calib.pairs[s].input, ForwardMode::fp_exact);
    for (auto i : idx) out.push_back({i, s, temporal_complexity(tr.inputs[i]), spatial_complexity(tr.inputs[i])});
  }
  return out;
}

// L1 L2 = best rank-r approximation of W; R and the weight quantizer follow.
// r = 0 removes the full-precision branch.
inline void svd_init(QLayer& layer, std::size_t r) {
  if (r == 0) {
    layer.set_low_rank(Tensor(), Tensor());
  } else {
    auto f = svd_truncated(layer.weight(), r);
    layer.set_low_rank(std::move(f.l1), std::move(f.l2));
  }
  layer.calibrate_weight_quant();
}

// Fits every quantized layer's activation quantizer. With `progressive`,
// layer i sees inputs produced by the already-quantized layers before it;
// otherwise all layers see FP activations.
inline void calibrate_activations(QuantModel& model, const CalibSet& calib, bool progressive) {
  if (calib.empty()) throw ArgumentError("calibrate_activations: empty calibration set");
  std::vector<Tensor> h = calib.inputs();
  const auto& bb = model.backbone();
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (model.quantized(i)) model.layer(i).calibrate_act_quant(h);
    for (auto& x : h) {
      Tensor y = progressive ? model.layer_forward(i, x, ForwardMode::fake_quant)
                             : dense_forward(bb.layers[i], x);
      x = bb.activated(i) ? ad::silu(y) : std::move(y);
    }
  }
}

struct RefineConfig {
  std::size_t epochs = 2;
  std::vector<Real> lr_schedule{1e-3, 2e-4};  // one per epoch
  AdamConfig adam;
  bool freeze_wq = false;       // keep the post-init weight quantizer
  bool per_layer_loss = false;  // layer reconstruction instead of output MSE

  void validate() const {
    if (lr_schedule.size() != epochs) throw ConfigError("refine: need one learning rate per epoch");
    for (auto lr : lr_schedule)
      if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("refine: learning rates must be >= 0");
  }
};

struct TrainLog {
  Real initial_loss = 0;             // set loss before any update
  Real final_loss = 0;               // set loss of the returned parameters
  std::vector<Real> epoch_loss;      // running mean of per-step losses
  std::vector<Real> epoch_end_loss;  // set loss after each epoch's selection
  std::vector<bool> epoch_kept;      // false where the epoch was rolled back
  std::vector<Real> step_loss;
};

namespace detail {

inline Real output_mse(const QuantModel& m, const CalibPair& p) {
  return mean_squared_diff(m.forward(p.input, ForwardMode::fake_quant), p.fp_output);
}

inline Real mean_output_mse(const QuantModel& m, const CalibSet& calib) {
  Real s = 0;
  for (const auto& p : calib.pairs) s += output_mse(m, p);
  return s / static_cast<Real>(calib.size());
}

}  // namespace detail

// Stage 2: trains every quantized layer's L1 and L2 through the fake-quant
// model, one calibration pair per step, with all else frozen.
inline TrainLog refine(QuantModel& model, const CalibSet& calib, const RefineConfig& cfg) {
  if (calib.empty()) throw ArgumentError("refine: empty calibration set");
  cfg.validate();
  const auto idx = model.quantized_indices();
  std::map<std::size_t, std::pair<Adam, Adam>> opt;
  for (auto i : idx)
    if (model.layer(i).rank() > 0)
      opt[i] = {Adam(model.layer(i).l1().shape(), cfg.adam), Adam(model.layer(i).l2().shape(), cfg.adam)};

  // Per-layer mode trains against FP layer inputs and outputs.
  std::vector<ModelTrace> fp;
  if (cfg.per_layer_loss)
    for (const auto& p : calib.pairs) fp.push_back(model.trace(p.input, ForwardMode::fp_exact));

  auto loss_of = [&](std::size_t s) {
    if (!cfg.per_layer_loss) return detail::output_mse(model, calib.pairs[s]);
    Real l = 0;
    for (auto i : idx)
      l += mean_squared_diff(model.layer(i).forward(fp[s].inputs[i], ForwardMode::fake_quant), fp[s].outputs[i]);
    return l;
  };
  auto mean_loss = [&] {
    Real l = 0;
    for (std::size_t s = 0; s < calib.size(); ++s) l += loss_of(s);
    return l / static_cast<Real>(calib.size());
  };

  // The parameters with the lowest set loss seen at an epoch boundary are
  // what refine returns; an epoch that does not improve is rolled back.
  struct Snapshot {
    Tensor l1, l2;
    QuantParams wq;
  };
  auto snapshot = [&] {
    std::map<std::size_t, Snapshot> snap;
    for (auto& [i, ab] : opt) snap[i] = {model.layer(i).l1(), model.layer(i).l2(), model.layer(i).weight_quant()};
    return snap;
  };

  TrainLog log;
  log.initial_loss = mean_loss();
  Real best_loss = log.initial_loss;
  auto best = snapshot();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const Real lr = cfg.lr_schedule[e];
    Real sum = 0;
    for (std::size_t s = 0; s < calib.size(); ++s) {
      ad::Tape t;
      std::map<std::size_t, QLayer::Vars> vars;
      ad::Var loss;
      if (cfg.per_layer_loss) {
        bool first = true;
        for (auto i : idx) {
          const QLayer& q = model.layer(i);
          vars[i] = q.make_vars(t, true, false);
          const ad::Var y = q.forward(t, t.constant(fp[s].inputs[i]), vars[i], ForwardMode::fake_quant);
          const ad::Var l = ad::mean_square(ad::sub(y, t.constant(fp[s].outputs[i])));
          loss = first ? l : ad::add(loss, l);
          first = false;
        }
      } else {
        std::vector<QLayer::Vars> all;
        const ad::Var y = model.forward(t, t.constant(calib.pairs[s].input), ForwardMode::fake_quant, true, false, all);
        loss = ad::mean_square(ad::sub(y, t.constant(calib.pairs[s].fp_output)));
        for (auto i : idx) vars[i] = all[i];
      }
      t.backward(loss);
      const Real lv = loss.value()[0];
      log.step_loss.push_back(lv);
      sum += lv;
      for (auto& [i, ab] : opt) {
        QLayer& q = model.layer(i);
        Tensor l1 = q.l1(), l2 = q.l2();
        ab.first.step(l1, vars[i].l1.grad(), lr);
        ab.second.step(l2, vars[i].l2.grad(), lr);
        if (lr == 0) continue;
        q.set_low_rank(std::move(l1), std::move(l2));
        if (!cfg.freeze_wq) q.calibrate_weight_quant();
      }
    }
    log.epoch_loss.push_back(sum / static_cast<Real>(calib.size()));
    const Real end = mean_loss();
    const bool kept = end < best_loss;
    if (kept) {
      best_loss = end;
      best = snapshot();
    } else {
      for (auto& [i, b] : best) {
        model.layer(i).set_low_rank(b.l1, b.l2);
        model.layer(i).set_weight_quant(b.wq);
      }
    }
    log.epoch_end_loss.push_back(best_loss);
    log.epoch_kept.push_back(kept);
  }
  log.final_loss = best_loss;
  return log;
}

}  // namespace stq
