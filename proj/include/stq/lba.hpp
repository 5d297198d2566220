#pragma once

#include <map>
#include <vector>

#include "stq/calib.hpp"
#include "stq/model.hpp"
#include "stq/optim.hpp"
#include "stq/stca.hpp"

namespace stq {

struct BiasIdentity {
  Tensor lhs;  // mean(W_hat x_hat - W x)
  Tensor rhs;  // dW mean(x_hat) + W mean(dx)
};

// Decomposition of the mean output error of a quantized matrix product.
// W is N x K; each row of `x_batch` is one K-dimensional input.
inline BiasIdentity bias_identity_check(const Tensor& w, const Tensor& x_batch, const QuantParams& wq,
                                        const QuantParams& aq) {
  require_rank(w, 2, "bias_identity_check");
  require_rank(x_batch, 2, "bias_identity_check");
  if (x_batch.cols() != w.cols()) throw DimensionError("bias_identity_check: input width mismatch");
  const std::size_t B = x_batch.rows(), K = w.cols(), N = w.rows();
  const Tensor w_hat = fake_quant(w, wq);
  const Tensor x_hat = fake_quant(x_batch, aq);

  const Tensor prod_q = matmul_nt(x_hat, w_hat);
  const Tensor prod = matmul_nt(x_batch, w);
  BiasIdentity r{Tensor({N}, 0.0), Tensor({N}, 0.0)};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) r.lhs[n] += prod_q.at(b, n) - prod.at(b, n);
  for (auto& v : r.lhs.data()) v /= static_cast<Real>(B);

  Tensor mean_xh({1, K}, 0.0), mean_dx({1, K}, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      mean_xh[k] += x_hat.at(b, k);
      mean_dx[k] += x_hat.at(b, k) - x_batch.at(b, k);
    }
  for (std::size_t k = 0; k < K; ++k) {
    mean_xh[k] /= static_cast<Real>(B);
    mean_dx[k] /= static_cast<Real>(B);
  }
  const Tensor a = matmul_nt(mean_xh, sub(w_hat, w));
  const Tensor c = matmul_nt(mean_dx, w);
  for (std::size_t n = 0; n < N; ++n) r.rhs[n] = a[n] + c[n];
  return r;
}

struct BiasEstimate {
  std::size_t layer_id = 0;
  Tensor mean_fp_out;
  Tensor mean_q_out;
  Tensor delta;  // mean_q_out - mean_fp_out
};

// Per-channel mean of a T x C x H x W tensor, accumulated into `acc`.
inline void accumulate_channel_sums(const Tensor& y, std::vector<Real>& acc, std::size_t& count) {
  require_rank(y, 4, "channel mean");
  const std::size_t T = y.dim(0), C = y.dim(1), hw = y.dim(2) * y.dim(3);
  if (acc.empty()) acc.assign(C, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) acc[c] += y[(t * C + c) * hw + i];
  count += T * hw;
}

// Closed-form seed for A_bias. Layers are visited in order; each one sees
// inputs from the quantized model (earlier layers already corrected) and is
// compared against the FP model's output for that layer. A_bias is the
// per-channel mean of (FP - quantized) with A_bias = 0.
inline std::vector<BiasEstimate> estimate_bias_closed_form(QuantModel& model, const CalibSet& calib) {
  if (calib.empty()) throw ArgumentError("estimate_bias_closed_form: empty calibration set");
  const auto& bb = model.backbone();
  std::vector<Tensor> h = calib.inputs();   // student activations
  std::vector<Tensor> fp = calib.inputs();  // teacher activations
  std::vector<BiasEstimate> out;
  for (std::size_t i = 0; i < model.size(); ++i) {
    std::vector<Tensor> fp_out;
    fp_out.reserve(fp.size());
    for (const auto& x : fp) fp_out.push_back(dense_forward(bb.layers[i], x));

    if (model.quantized(i)) {
      QLayer& q = model.layer(i);
      q.set_a_bias(Tensor({q.out_features()}, 0.0));
      std::vector<Real> sum_fp, sum_q;
      std::size_t n_fp = 0, n_q = 0;
      std::vector<Tensor> q_out;
      q_out.reserve(h.size());
      for (std::size_t s = 0; s < h.size(); ++s) {
        accumulate_channel_sums(fp_out[s], sum_fp, n_fp);
        q_out.push_back(q.forward(h[s], ForwardMode::fake_quant));
        accumulate_channel_sums(q_out.back(), sum_q, n_q);
      }
      BiasEstimate e;
      e.layer_id = i;
      e.mean_fp_out = Tensor({sum_fp.size()}, 0.0);
      e.mean_q_out = Tensor({sum_q.size()}, 0.0);
      e.delta = Tensor({sum_q.size()}, 0.0);
      for (std::size_t c = 0; c < sum_fp.size(); ++c) {
        e.mean_fp_out[c] = sum_fp[c] / static_cast<Real>(n_fp);
        e.mean_q_out[c] = sum_q[c] / static_cast<Real>(n_q);
        e.delta[c] = e.mean_q_out[c] - e.mean_fp_out[c];
      }
      q.set_a_bias(scaled(e.delta, -1));
      // The new bias only shifts each channel, so reuse the outputs.
      for (auto& y : q_out) {
        const std::size_t C = y.dim(1), hw = y.dim(2) * y.dim(3);
        for (std::size_t j = 0; j < y.numel(); ++j) y[j] -= e.delta[(j / hw) % C];
      }
      for (std::size_t s = 0; s < h.size(); ++s) h[s] = std::move(q_out[s]);
      out.push_back(std::move(e));
    } else {
      for (std::size_t s = 0; s < h.size(); ++s) h[s] = model.layer_forward(i, h[s], ForwardMode::fake_quant);
    }

    for (std::size_t s = 0; s < h.size(); ++s) {
      if (bb.activated(i)) h[s] = ad::silu(h[s]);
      fp[s] = bb.activated(i) ? ad::silu(fp_out[s]) : std::move(fp_out[s]);
    }
  }
  return out;
}

struct LbaConfig {
  std::size_t epochs = 1;
  Real lr = 2e-4;
  AdamConfig adam;
};

// Stage 3: trains only the A_bias vectors against the end-to-end output MSE.
inline TrainLog train_lba(QuantModel& model, const CalibSet& calib, const LbaConfig& cfg) {
  if (calib.empty()) throw ArgumentError("train_lba: empty calibration set");
  if (!(cfg.lr >= 0)) throw ConfigError("train_lba: learning rate must be >= 0");
  const auto idx = model.quantized_indices();
  std::map<std::size_t, Adam> opt;
  for (auto i : idx) opt[i] = Adam({model.layer(i).out_features()}, cfg.adam);

  auto snapshot = [&] {
    std::map<std::size_t, Tensor> snap;
    for (auto i : idx) snap[i] = model.layer(i).a_bias();
    return snap;
  };

  // As in refine, an epoch that does not lower the set loss is rolled back.
  TrainLog log;
  log.initial_loss = detail::mean_output_mse(model, calib);
  Real best_loss = log.initial_loss;
  auto best = snapshot();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Real sum = 0;
    for (const auto& p : calib.pairs) {
      ad::Tape t;
      std::vector<QLayer::Vars> vars;
      const ad::Var y = model.forward(t, t.constant(p.input), ForwardMode::fake_quant, false, true, vars);
      const ad::Var loss = ad::mean_square(ad::sub(y, t.constant(p.fp_output)));
      t.backward(loss);
      log.step_loss.push_back(loss.value()[0]);
      sum += loss.value()[0];
      for (auto& [i, adam] : opt) {
        Tensor b = model.layer(i).a_bias();
        adam.step(b, vars[i].a_bias.grad(), cfg.lr);
        model.layer(i).set_a_bias(std::move(b));
      }
    }
    log.epoch_loss.push_back(sum / static_cast<Real>(calib.size()));
    const Real end = detail::mean_output_mse(model, calib);
    const bool kept = end < best_loss;
    if (kept) {
      best_loss = end;
      best = snapshot();
    } else {
      for (auto& [i, b] : best) model.layer(i).set_a_bias(b);
    }
    log.epoch_end_loss.push_back(best_loss);
    log.epoch_kept.push_back(kept);
  }
  log.final_loss = best_loss;
  return log;
}

// Folds every A_bias into its layer bias.
inline void fuse(QuantModel& model) {
  for (auto i : model.quantized_indices()) model.layer(i).fuse_bias();
}

}  // namespace stq
