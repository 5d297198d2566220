#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "stq/calib.hpp"
#include "stq/container.hpp"
#include "stq/lba.hpp"
#include "stq/model.hpp"
#include "stq/stca.hpp"

namespace stq {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Variant { full, sc, naive };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::sc: return "sc";
    case Variant::naive: return "naive";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "sc") return Variant::sc;
  if (s == "naive") return Variant::naive;
  throw ConfigError("unknown variant '" + s + "' (expected full, sc or naive)");
}

// Ranks are allocated in reference units (RankPolicy defaults, fixed-rank
// baseline 32) and divided by `rank_divisor` before use, rounding halves up.
// The default divisor 16 maps the reference range 16..64 onto 1..4 for the
// 16-channel toy backbone, whose narrowest layer has 4 output channels.
inline constexpr std::size_t kReferenceScRank = 32;
inline constexpr std::size_t kDeskRankDivisor = 16;

inline std::size_t scale_rank(std::size_t r, std::size_t divisor) {
  if (divisor == 0) throw ConfigError("rank_divisor must be positive");
  return (2 * r + divisor) / (2 * divisor);
}

struct PipelineConfig {
  int bits_w = 4;
  int bits_a = 4;
  std::uint64_t seed = 0;
  Variant variant = Variant::full;
  std::vector<std::string> quantize{"linear", "conv2d", "conv3d"};

  RankPolicy policy;
  std::size_t sc_rank = kReferenceScRank;  // fixed rank of the `sc` variant
  std::size_t rank_divisor = kDeskRankDivisor;

  RefineConfig refine;
  LbaConfig lba;
  bool lba_closed_form = true;

  std::size_t calib_videos = 36;
  std::size_t calib_steps = 10;
  std::size_t calib_sample_every = 2;
  std::size_t eval_videos = 8;
  VideoShape video;

  std::string calib_path;  // empty: <out_dir>/calib.stqc
  std::string out_dir = "stq_out";

  QuantConfig quant_config() const {
    QuantConfig q;
    q.bits_w = bits_w;
    q.bits_a = bits_a;
    q.seed = seed;
    q.kinds = QuantConfig::parse_kinds(quantize);
    return q;
  }

  std::filesystem::path calib_file() const {
    return calib_path.empty() ? std::filesystem::path(out_dir) / "calib.stqc" : std::filesystem::path(calib_path);
  }

  void validate() const {
    if (!valid_bits(bits_w) || !valid_bits(bits_a)) throw ConfigError("bits must be one of 4, 6, 8, 32");
    QuantConfig::parse_kinds(quantize);
    policy.validate();
    if (rank_divisor == 0) throw ConfigError("rank_divisor must be positive");
    refine.validate();
    if (!(lba.lr >= 0)) throw ConfigError("lba_lr must be >= 0");
    if (calib_videos < 1 || eval_videos < 1) throw ConfigError("calib_videos and eval_videos must be >= 1");
    if (calib_sample_every < 1 || calib_sample_every > calib_steps)
      throw ConfigError("calib_sample_every must lie in [1, calib_steps]");
    if (video.frames < 2 || video.height < 4 || video.width < 4)
      throw ConfigError("video needs frames >= 2 and height, width >= 4");
    if (video.channels != ToyBackbone::kChannels) throw ConfigError("video channels must be 4");
  }

  json to_json() const {
    return {{"bits_w", bits_w},
            {"bits_a", bits_a},
            {"seed", seed},
            {"variant", to_string(variant)},
            {"quantize", quantize},
            {"r_min", policy.r_min},
            {"r_max", policy.r_max},
            {"r_init", policy.r_init},
            {"rank_multiple", policy.multiple},
            {"lower_pct", policy.lower_pct},
            {"upper_pct", policy.upper_pct},
            {"sc_rank", sc_rank},
            {"rank_divisor", rank_divisor},
            {"refine_epochs", refine.epochs},
            {"refine_lr", refine.lr_schedule},
            {"freeze_wq", refine.freeze_wq},
            {"per_layer_loss", refine.per_layer_loss},
            {"lba_epochs", lba.epochs},
            {"lba_lr", lba.lr},
            {"lba_closed_form", lba_closed_form},
            {"calib_videos", calib_videos},
            {"calib_steps", calib_steps},
            {"calib_sample_every", calib_sample_every},
            {"eval_videos", eval_videos},
            {"frames", video.frames},
            {"height", video.height},
            {"width", video.width},
            {"calib_path", calib_path},
            {"out_dir", out_dir}};
  }

  // Applies one flat key. Unknown keys and ill-typed values are config errors.
  void set(const std::string& key, const json& v) {
    try {
      if (key == "bits_w") bits_w = v.get<int>();
      else if (key == "bits_a") bits_a = v.get<int>();
      else if (key == "bits") bits_w = bits_a = v.get<int>();
      else if (key == "seed") seed = v.get<std::uint64_t>();
      else if (key == "variant") variant = variant_from_string(v.get<std::string>());
      else if (key == "quantize") quantize = v.get<std::vector<std::string>>();
      else if (key == "r_min") policy.r_min = v.get<std::size_t>();
      else if (key == "r_max") policy.r_max = v.get<std::size_t>();
      else if (key == "r_init") policy.r_init = v.get<std::size_t>();
      else if (key == "rank_multiple") policy.multiple = v.get<std::size_t>();
      else if (key == "lower_pct") policy.lower_pct = v.get<Real>();
      else if (key == "upper_pct") policy.upper_pct = v.get<Real>();
      else if (key == "sc_rank") sc_rank = v.get<std::size_t>();
      else if (key == "rank_divisor") rank_divisor = v.get<std::size_t>();
      else if (key == "refine_epochs") refine.epochs = v.get<std::size_t>();
      else if (key == "refine_lr") refine.lr_schedule = v.get<std::vector<Real>>();
      else if (key == "freeze_wq") refine.freeze_wq = v.get<bool>();
      else if (key == "per_layer_loss") refine.per_layer_loss = v.get<bool>();
      else if (key == "lba_epochs") lba.epochs = v.get<std::size_t>();
      else if (key == "lba_lr") lba.lr = v.get<Real>();
      else if (key == "lba_closed_form") lba_closed_form = v.get<bool>();
      else if (key == "calib_videos") calib_videos = v.get<std::size_t>();
      else if (key == "calib_steps") calib_steps = v.get<std::size_t>();
      else if (key == "calib_sample_every") calib_sample_every = v.get<std::size_t>();
      else if (key == "eval_videos") eval_videos = v.get<std::size_t>();
      else if (key == "frames") video.frames = v.get<std::size_t>();
      else if (key == "height") video.height = v.get<std::size_t>();
      else if (key == "width") video.width = v.get<std::size_t>();
      else if (key == "calib_path") calib_path = v.get<std::string>();
      else if (key == "out_dir") out_dir = v.get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }

  void merge(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) set(it.key(), it.value());
  }

  // "key=value"; the value is parsed as JSON when it can be, else taken as
  // a string.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    set(key, v);
  }

  static PipelineConfig from_json(const json& j) {
    PipelineConfig c;
    c.merge(j);
    return c;
  }
};

// Keys that define the model; later stages refuse to change them.
inline const std::vector<std::string>& model_defining_keys() {
  static const std::vector<std::string> keys{"bits_w", "bits_a", "seed", "variant", "quantize", "r_min",
                                             "r_max", "r_init", "rank_multiple", "lower_pct", "upper_pct",
                                             "sc_rank", "rank_divisor", "frames", "height", "width"};
  return keys;
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kCalibSalt = 0x100;
inline constexpr std::uint64_t kEvalSalt = 0x5e7a1000000ULL;

inline CalibSet make_calib(const PipelineConfig& cfg, const ToyBackbone& bb) {
  return capture_calib(bb, random_videos(cfg.seed, cfg.calib_videos, kCalibSalt), cfg.video, cfg.calib_steps,
                       cfg.calib_sample_every, cfg.seed);
}

// Held-out pairs from videos whose seeds never occur in the calibration set.
inline CalibSet make_eval_set(const PipelineConfig& cfg, const ToyBackbone& bb) {
  const auto calib = random_videos(cfg.seed, cfg.calib_videos, kCalibSalt);
  const auto eval = random_videos(cfg.seed, cfg.eval_videos, kEvalSalt);
  for (const auto& e : eval)
    for (const auto& c : calib)
      if (e.seed == c.seed) throw InvariantViolation("eval video seed collides with calibration");
  return capture_calib(bb, eval, cfg.video, cfg.calib_steps, cfg.calib_sample_every, cfg.seed);
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct LayerAllocation {
  std::size_t layer_id = 0;
  Thresholds thresholds;
  long drift = 0;
  std::size_t policy_rank = 0;  // reference units
  std::size_t rank = 0;         // divided by rank_divisor, capped at min(m, n)
  Real c_t_p25 = 0, c_t_p50 = 0, c_t_p75 = 0;
  Real c_s_p25 = 0, c_s_p50 = 0, c_s_p75 = 0;
};

inline json to_json(const LayerAllocation& a) {
  return {{"layer", a.layer_id},
          {"thresholds", {{"l_t", a.thresholds.l_t}, {"u_t", a.thresholds.u_t}, {"l_s", a.thresholds.l_s},
                          {"u_s", a.thresholds.u_s}}},
          {"drift", a.drift},
          {"policy_rank", a.policy_rank},
          {"rank", a.rank},
          {"c_t", {{"p25", a.c_t_p25}, {"p50", a.c_t_p50}, {"p75", a.c_t_p75}}},
          {"c_s", {{"p25", a.c_s_p25}, {"p50", a.c_s_p50}, {"p75", a.c_s_p75}}}};
}

inline LayerAllocation layer_allocation_from_json(const json& j) {
  LayerAllocation a;
  a.layer_id = j.at("layer");
  const auto& t = j.at("thresholds");
  a.thresholds = {t.at("l_t"), t.at("u_t"), t.at("l_s"), t.at("u_s")};
  a.drift = j.at("drift");
  a.policy_rank = j.at("policy_rank");
  a.rank = j.at("rank");
  a.c_t_p25 = j.at("c_t").at("p25");
  a.c_t_p50 = j.at("c_t").at("p50");
  a.c_t_p75 = j.at("c_t").at("p75");
  a.c_s_p25 = j.at("c_s").at("p25");
  a.c_s_p50 = j.at("c_s").at("p50");
  a.c_s_p75 = j.at("c_s").at("p75");
  return a;
}

inline json to_json(const TrainLog& l) {
  return {{"initial_loss", l.initial_loss},
          {"final_loss", l.final_loss},
          {"epoch_loss", l.epoch_loss},
          {"epoch_end_loss", l.epoch_end_loss},
          {"epoch_kept", l.epoch_kept},
          {"steps", l.step_loss.size()}};
}

enum class Stage { none = 0, allocate = 1, refine = 2, lba = 3 };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::none: return "none";
    case Stage::allocate: return "allocate-ranks";
    case Stage::refine: return "refine";
    case Stage::lba: return "train-lba";
  }
  return "?";
}

inline Stage stage_from_name(const std::string& s) {
  for (Stage st : {Stage::none, Stage::allocate, Stage::refine, Stage::lba})
    if (s == stage_name(st)) return st;
  throw FormatError(FormatError::Kind::malformed_header, "unknown stage '" + s + "'");
}

struct PipelineState {
  PipelineConfig config;
  QuantModel model;
  Stage stage = Stage::none;
  std::vector<LayerAllocation> allocation;
  json log = json::object();  // per-stage training logs (no timings)
};

// Stage 1: complexity statistics, rank allocation, SVD initialisation and
// weight / activation quantizer calibration.
inline PipelineState stage_allocate(const PipelineConfig& cfg, const ToyBackbone& bb, const CalibSet& calib) {
  cfg.validate();
  if (calib.empty()) throw ArgumentError("allocate-ranks: empty calibration set");
  PipelineState st;
  st.config = cfg;
  st.model = QuantModel(bb, cfg.quant_config());
  const auto idx = st.model.quantized_indices();

  std::vector<ComplexityRecord> records;
  if (cfg.variant == Variant::full) records = measure_complexity(st.model, calib);

  for (auto i : idx) {
    QLayer& q = st.model.layer(i);
    const std::size_t full_rank = std::min(q.out_features(), q.in_features());
    LayerAllocation a;
    a.layer_id = i;
    if (cfg.variant == Variant::full) {
      std::vector<ComplexityRecord> mine;
      std::vector<Real> ct, cs;
      for (const auto& r : records)
        if (r.layer_id == i) {
          mine.push_back(r);
          ct.push_back(r.c_t);
          cs.push_back(r.c_s);
        }
      a.thresholds = compute_thresholds(mine, cfg.policy);
      a.drift = rank_drift(mine, a.thresholds);
      a.policy_rank = allocate_rank(mine, a.thresholds, cfg.policy);
      a.c_t_p25 = percentile(ct, 25), a.c_t_p50 = percentile(ct, 50), a.c_t_p75 = percentile(ct, 75);
      a.c_s_p25 = percentile(cs, 25), a.c_s_p50 = percentile(cs, 50), a.c_s_p75 = percentile(cs, 75);
    } else {
      a.policy_rank = cfg.variant == Variant::sc ? cfg.sc_rank : 0;
    }
    a.rank = std::min(scale_rank(a.policy_rank, cfg.rank_divisor), full_rank);
    svd_init(q, a.rank);
    st.allocation.push_back(a);
  }
  calibrate_activations(st.model, calib, false);
  st.stage = Stage::allocate;
  return st;
}

inline void require_stage(const PipelineState& st, Stage expected, const char* running) {
  if (st.stage != expected)
    throw StateError(std::string(running) + ": expected a checkpoint from '" + stage_name(expected) +
                     "', found '" + stage_name(st.stage) + "'");
}

// Stage 2: joint refinement of both branches, then one progressive refit of
// the activation quantizers. Baseline variants skip training.
inline void stage_refine(PipelineState& st, const CalibSet& calib) {
  require_stage(st, Stage::allocate, "refine");
  if (st.config.variant == Variant::full) {
    const TrainLog log = refine(st.model, calib, st.config.refine);
    calibrate_activations(st.model, calib, true);
    st.log["refine"] = to_json(log);
  } else {
    st.log["refine"] = {{"skipped", true}};
  }
  st.stage = Stage::refine;
}

// Stage 3: closed-form A_bias seed, then gradient training of A_bias only.
inline void stage_lba(PipelineState& st, const CalibSet& calib) {
  require_stage(st, Stage::refine, "train-lba");
  if (st.config.variant == Variant::full) {
    json entry = json::object();
    Real before = 0;
    if (st.config.lba_closed_form) {
      before = detail::mean_output_mse(st.model, calib);
      estimate_bias_closed_form(st.model, calib);
    }
    const TrainLog log = train_lba(st.model, calib, st.config.lba);
    if (st.config.lba_closed_form) entry["closed_form"] = {{"loss_before", before}, {"loss_after", log.initial_loss}};
    entry["training"] = to_json(log);
    st.log["lba"] = entry;
  } else {
    st.log["lba"] = {{"skipped", true}};
  }
  st.stage = Stage::lba;
}

inline PipelineState run_pipeline(const PipelineConfig& cfg, const ToyBackbone& bb, const CalibSet& calib) {
  PipelineState st = stage_allocate(cfg, bb, calib);
  stage_refine(st, calib);
  stage_lba(st, calib);
  return st;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
  Real mse = 0;
  Real psnr = std::numeric_limits<Real>::infinity();
  Real mean_bias_norm = 0;
  Real temporal_gap = 0;
  std::size_t samples = 0;
};

// Fidelity of quantized outputs against FP outputs (T x C x H x W each).
// PSNR uses the peak-to-peak range of the FP outputs.
inline EvalMetrics evaluate_outputs(const std::vector<Tensor>& fp, const std::vector<Tensor>& q) {
  if (fp.empty()) throw ArgumentError("evaluate: empty evaluation set");
  if (fp.size() != q.size()) throw DimensionError("evaluate: output count mismatch");
  EvalMetrics m;
  m.samples = fp.size();
  Real lo = fp[0][0], hi = fp[0][0];
  std::vector<Real> bias;
  std::size_t count = 0;
  for (std::size_t s = 0; s < fp.size(); ++s) {
    require_same_shape(fp[s], q[s], "evaluate");
    m.mse += mean_squared_diff(fp[s], q[s]);
    for (auto v : fp[s].data()) lo = std::min(lo, v), hi = std::max(hi, v);
    accumulate_channel_sums(sub(fp[s], q[s]), bias, count);
    m.temporal_gap += std::abs(temporal_complexity(fp[s]) - temporal_complexity(q[s]));
  }
  const Real n = static_cast<Real>(fp.size());
  m.mse /= n;
  m.temporal_gap /= n;
  Real b2 = 0;
  for (auto b : bias) b2 += (b / static_cast<Real>(count)) * (b / static_cast<Real>(count));
  m.mean_bias_norm = std::sqrt(b2);
  if (m.mse > 0) m.psnr = 10 * std::log10((hi - lo) * (hi - lo) / m.mse);
  return m;
}

inline EvalMetrics evaluate(const QuantModel& model, const CalibSet& eval, ForwardMode mode = ForwardMode::fake_quant) {
  if (eval.empty()) throw ArgumentError("evaluate: empty evaluation set");
  std::vector<Tensor> fp, q;
  for (const auto& p : eval.pairs) {
    fp.push_back(p.fp_output);
    q.push_back(model.forward(p.input, mode));
  }
  return evaluate_outputs(fp, q);
}

inline json to_json(const EvalMetrics& m) {
  return {{"mse", m.mse},
          {"psnr_db", std::isinf(m.psnr) ? json("+inf") : json(m.psnr)},
          {"mean_bias_norm", m.mean_bias_norm},
          {"temporal_gap", m.temporal_gap},
          {"samples", m.samples},
          {"reference", "full-precision model outputs"}};
}

// ---------------------------------------------------------------------------
// Compression accounting
// ---------------------------------------------------------------------------

struct LayerCompression {
  std::size_t layer_id = 0;
  bool quantized = false;
  std::size_t rank = 0;
  CompressionStats stats;
};

struct CompressionReport {
  std::vector<LayerCompression> layers;
  CompressionStats total;
  double params_reduction = 0;  // 1 - params_bits / baseline_params_bits
  double ops_reduction = 0;     // 1 - equivalent_ops / baseline_ops
};

// Full-precision accounting of a layer that stays unquantized.
inline CompressionStats dense_stats(const LayerDef& d, std::uint64_t positions) {
  CompressionStats s;
  const std::uint64_t m = d.in_features(), n = d.out_features();
  s.params_bits = s.baseline_params_bits = m * n * 32 + (d.bias.empty() ? 0 : n * 32);
  s.ops_count = s.baseline_ops = positions * m * n;
  s.equivalent_ops = static_cast<double>(s.ops_count);
  return s;
}

inline CompressionReport compression_report(const QuantModel& model, const Shape& input_shape) {
  if (input_shape.size() != 4) throw DimensionError("compression_report: input shape must be T x C x H x W");
  CompressionReport rep;
  std::size_t t = input_shape[0], h = input_shape[2], w = input_shape[3];
  for (std::size_t i = 0; i < model.size(); ++i) {
    const LayerDef& d = model.backbone().layers[i];
    const auto [to, ho, wo] = d.geom.output_extents(t, h, w);
    const std::uint64_t positions = to * ho * wo;
    LayerCompression lc;
    lc.layer_id = i;
    lc.quantized = model.quantized(i);
    if (lc.quantized) {
      const QLayer& q = model.layer(i);
      lc.rank = q.rank();
      lc.stats = q.compression_stats(q.bits_w(), q.bits_a(), positions);
    } else {
      lc.stats = dense_stats(d, positions);
    }
    rep.total.params_bits += lc.stats.params_bits;
    rep.total.baseline_params_bits += lc.stats.baseline_params_bits;
    rep.total.ops_count += lc.stats.ops_count;
    rep.total.baseline_ops += lc.stats.baseline_ops;
    rep.total.equivalent_ops += lc.stats.equivalent_ops;
    rep.layers.push_back(lc);
    t = to, h = ho, w = wo;
  }
  rep.params_reduction = 1.0 - static_cast<double>(rep.total.params_bits) /
                                   static_cast<double>(rep.total.baseline_params_bits);
  rep.ops_reduction = 1.0 - rep.total.equivalent_ops / static_cast<double>(rep.total.baseline_ops);
  return rep;
}

inline json to_json(const CompressionStats& s) {
  return {{"params_bits", s.params_bits},       {"baseline_params_bits", s.baseline_params_bits},
          {"ops_count", s.ops_count},           {"baseline_ops", s.baseline_ops},
          {"equivalent_ops", s.equivalent_ops}, {"fp_branch_ratio", s.fp_branch_ratio}};
}

inline json to_json(const CompressionReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    json j = to_json(l.stats);
    j["layer"] = l.layer_id;
    j["quantized"] = l.quantized;
    j["rank"] = l.rank;
    layers.push_back(j);
  }
  json total = to_json(r.total);
  total.erase("fp_branch_ratio");
  return {{"layers", layers},
          {"total", total},
          {"params_reduction", r.params_reduction},
          {"ops_reduction", r.ops_reduction}};
}

// ---------------------------------------------------------------------------
// STQK checkpoint
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = "STQK";

namespace detail {

struct TensorIndex {
  Container c;
  json entries = json::object();

  void put(const std::string& name, const Tensor& t) {
    entries[name] = {{"offset", c.payload.size()}, {"shape", t.shape()}};
    c.append(t);
  }
};

inline json quant_to_json(const QuantParams& q) {
  return {{"bits", q.bits},
          {"scheme", to_string(q.scheme)},
          {"granularity", to_string(q.granularity)},
          {"zero_point", q.zero_point},
          {"lo", q.lo},
          {"hi", q.hi}};
}

inline QuantParams quant_from_json(const json& j, const Tensor& scale) {
  QuantParams q;
  q.bits = j.at("bits");
  q.scheme = j.at("scheme") == "symmetric" ? Scheme::symmetric : Scheme::asymmetric;
  q.granularity = j.at("granularity") == "per_tensor" ? Granularity::per_tensor : Granularity::per_channel;
  q.zero_point = j.at("zero_point").get<std::vector<std::int32_t>>();
  q.lo = j.at("lo");
  q.hi = j.at("hi");
  q.scale = scale.vec();
  return q;
}

}  // namespace detail

// Holds every layer's weights, factors, A_bias and quantizer state, so a
// checkpoint fully determines the model without regenerating anything.
inline void save_checkpoint(const PipelineState& st, const std::filesystem::path& path) {
  detail::TensorIndex idx;
  json layers = json::array();
  const auto& bb = st.model.backbone();
  for (std::size_t i = 0; i < st.model.size(); ++i) {
    const LayerDef& d = bb.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    json lj = {{"index", i},
               {"kind", to_string(d.kind)},
               {"in_channels", d.geom.in_channels},
               {"out_channels", d.geom.out_channels},
               {"kernel", d.geom.kernel},
               {"stride", d.geom.stride},
               {"pad", d.geom.pad},
               {"quantized", st.model.quantized(i)}};
    idx.put(p + "weight", d.weight);
    if (!d.bias.empty()) idx.put(p + "bias", d.bias);
    if (st.model.quantized(i)) {
      const QLayer& q = st.model.layer(i);
      lj["rank"] = q.rank();
      lj["hadamard_seed"] = q.hadamard_seed();
      lj["bits_w"] = q.bits_w();
      lj["bits_a"] = q.bits_a();
      lj["wq_ready"] = q.weight_quant_ready();
      lj["aq_ready"] = q.act_quant_ready();
      lj["wq"] = detail::quant_to_json(q.weight_quant());
      lj["aq"] = detail::quant_to_json(q.act_quant());
      if (q.has_bias()) idx.put(p + "qbias", q.bias());
      if (q.rank() > 0) {
        idx.put(p + "l1", q.l1());
        idx.put(p + "l2", q.l2());
      }
      idx.put(p + "a_bias", q.a_bias());
      idx.put(p + "wq_scale", Tensor({q.weight_quant().scale.size()}, q.weight_quant().scale));
      idx.put(p + "aq_scale", Tensor({q.act_quant().scale.size()}, q.act_quant().scale));
    }
    layers.push_back(lj);
  }
  json alloc = json::array();
  for (const auto& a : st.allocation) alloc.push_back(to_json(a));
  idx.c.header = {{"format", "stq-checkpoint"},
                  {"stage", stage_name(st.stage)},
                  {"config", st.config.to_json()},
                  {"layers", layers},
                  {"allocation", alloc},
                  {"log", st.log},
                  {"tensors", idx.entries},
                  {"payload_bytes", idx.c.payload.size()}};
  write_container(path, kCheckpointMagic, idx.c);
}

inline PipelineState load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path, kCheckpointMagic, [](const json& h) {
    if (h.at("format") != "stq-checkpoint")
      throw FormatError(FormatError::Kind::malformed_header, "not a checkpoint");
    return PayloadLayout{h.at("payload_bytes").get<std::size_t>(), 8};
  });
  try {
    const json& h = c.header;
    const json& tensors = h.at("tensors");
    auto get = [&](const std::string& name) {
      const json& e = tensors.at(name);
      return c.tensor_at(e.at("offset").get<std::size_t>(), e.at("shape").get<Shape>());
    };
    PipelineState st;
    st.config = PipelineConfig::from_json(h.at("config"));
    st.stage = stage_from_name(h.at("stage"));
    st.log = h.at("log");
    for (const auto& a : h.at("allocation")) st.allocation.push_back(layer_allocation_from_json(a));

    ToyBackbone bb;
    const auto& layers = h.at("layers");
    for (const auto& lj : layers) {
      LayerDef d;
      d.kind = layer_kind_from_string(lj.at("kind"));
      d.geom.in_channels = lj.at("in_channels");
      d.geom.out_channels = lj.at("out_channels");
      d.geom.kernel = lj.at("kernel");
      d.geom.stride = lj.at("stride");
      d.geom.pad = lj.at("pad");
      const std::string p = "layer" + std::to_string(lj.at("index").get<std::size_t>()) + ".";
      d.weight = get(p + "weight");
      if (tensors.contains(p + "bias")) d.bias = get(p + "bias");
      bb.layers.push_back(std::move(d));
    }
    st.model = QuantModel(bb, st.config.quant_config());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const json& lj = layers[i];
      if (lj.at("quantized").get<bool>() != st.model.quantized(i))
        throw FormatError(FormatError::Kind::integrity, "layer " + std::to_string(i) + " quantization flag mismatch");
      if (!st.model.quantized(i)) continue;
      QLayer& q = st.model.layer(i);
      const std::string p = "layer" + std::to_string(i) + ".";
      if (lj.at("hadamard_seed").get<std::uint64_t>() != q.hadamard_seed())
        throw FormatError(FormatError::Kind::integrity, "layer " + std::to_string(i) + " Hadamard seed mismatch");
      if (tensors.contains(p + "qbias")) {
        // A fused export carries its bias on the quantized layer only.
        LayerDef d = q.def();
        d.bias = get(p + "qbias");
        q = QLayer(d, q.hadamard_seed(), q.bits_w(), q.bits_a());
      }
      if (lj.at("rank").get<std::size_t>() > 0) q.set_low_rank(get(p + "l1"), get(p + "l2"));
      if (lj.at("wq_ready").get<bool>()) q.set_weight_quant(detail::quant_from_json(lj.at("wq"), get(p + "wq_scale")));
      if (lj.at("aq_ready").get<bool>()) q.set_act_quant(detail::quant_from_json(lj.at("aq"), get(p + "aq_scale")));
      q.set_a_bias(get(p + "a_bias"));
    }
    return st;
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, path.string() + ": " + e.what());
  } catch (const Error& e) {
    if (dynamic_cast<const FormatError*>(&e)) throw;
    throw FormatError(FormatError::Kind::integrity, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

inline json build_report(const PipelineState& st, const EvalMetrics& eval, const json& timings) {
  const CompressionReport comp = compression_report(st.model, st.config.video.shape());
  json layers = json::array();
  for (std::size_t i = 0; i < st.model.size(); ++i) {
    json j = {{"layer", i},
              {"kind", to_string(st.model.backbone().layers[i].kind)},
              {"quantized", st.model.quantized(i)}};
    j["compression"] = to_json(comp.layers[i].stats);
    for (const auto& a : st.allocation)
      if (a.layer_id == i) j["allocation"] = to_json(a);
    if (st.model.quantized(i)) j["rank"] = st.model.layer(i).rank();
    layers.push_back(j);
  }
  return {{"stage", stage_name(st.stage)},
          {"config", st.config.to_json()},
          {"layers", layers},
          {"compression", to_json(comp)},
          {"eval", to_json(eval)},
          {"training", st.log},
          {"timings_s", timings}};
}

}  // namespace stq
