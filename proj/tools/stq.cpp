#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stq/stq.hpp"

namespace fs = std::filesystem;
using stq::json;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kState = 4 };

struct Options {
  std::string config_path;
  std::optional<int> bits, bits_w, bits_a;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string calib;
  std::vector<std::string> overrides;
};

const char* kStageFiles[] = {"", "stage1.stqk", "stage2.stqk", "stage3.stqk"};

fs::path stage_file(const fs::path& dir, stq::Stage s) { return dir / kStageFiles[static_cast<int>(s)]; }

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw stq::ConfigError("cannot read config file '" + p.string() + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw stq::ConfigError("config file '" + p.string() + "' is not valid JSON");
  if (!j.is_object()) throw stq::ConfigError("config file must hold a JSON object");
  return j;
}

void write_json_file(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << j.dump(2) << "\n";
  if (!out) throw stq::Error("cannot write '" + p.string() + "'");
}

// Every key the user set explicitly, in precedence order: file, then
// overrides, then dedicated flags. "bits" is expanded so that the result
// only holds canonical keys.
json explicit_keys(const Options& o) {
  json u = json::object();
  auto put = [&](const std::string& k, const json& v) {
    if (k == "bits") {
      u["bits_w"] = v;
      u["bits_a"] = v;
    } else {
      u[k] = v;
    }
  };
  if (!o.config_path.empty()) {
    const json f = read_json_file(o.config_path);
    for (auto it = f.begin(); it != f.end(); ++it) put(it.key(), it.value());
  }
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw stq::ConfigError("override '" + kv + "' is not key=value");
    const std::string raw = kv.substr(eq + 1);
    json v = json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    put(kv.substr(0, eq), v);
  }
  if (o.bits) put("bits", *o.bits);
  if (o.bits_w) put("bits_w", *o.bits_w);
  if (o.bits_a) put("bits_a", *o.bits_a);
  if (o.seed) put("seed", *o.seed);
  if (!o.out.empty()) put("out_dir", o.out);
  if (!o.calib.empty()) put("calib_path", o.calib);
  return u;
}

stq::PipelineConfig fresh_config(const Options& o) {
  stq::PipelineConfig c;
  c.merge(explicit_keys(o));
  c.validate();
  return c;
}

// Later stages take the configuration stored in the predecessor checkpoint.
// Training and path keys may still be changed; model-defining keys may not.
void apply_to_checkpoint(stq::PipelineConfig& stored, const Options& o, const std::string& out_dir) {
  const json user = explicit_keys(o);
  const json before = stored.to_json();
  const auto& fixed = stq::model_defining_keys();
  for (auto it = user.begin(); it != user.end(); ++it) {
    const bool defining = std::find(fixed.begin(), fixed.end(), it.key()) != fixed.end();
    if (defining) {
      stq::PipelineConfig probe;
      probe.set(it.key(), it.value());
      if (probe.to_json().at(it.key()) != before.at(it.key()))
        throw stq::ConfigError("'" + it.key() + "' differs from the checkpoint; rerun from allocate-ranks");
      continue;
    }
    stored.set(it.key(), it.value());
  }
  stored.out_dir = out_dir;
  stored.validate();
}

std::string out_dir_of(const Options& o) {
  if (!o.out.empty()) return o.out;
  stq::PipelineConfig c;
  try {
    c.merge(explicit_keys(o));
  } catch (const stq::Error&) {
  }
  return c.out_dir;
}

stq::CalibSet load_matching_calib(const stq::PipelineConfig& cfg, const char* running) {
  const fs::path p = cfg.calib_file();
  if (!fs::exists(p))
    throw stq::StateError(std::string(running) + ": calibration file '" + p.string() +
                          "' not found; run 'calibrate' first");
  stq::CalibSet calib = stq::load_calib(p);
  if (calib.seed != cfg.seed)
    throw stq::ConfigError("calibration file was captured with seed " + std::to_string(calib.seed) +
                           ", config seed is " + std::to_string(cfg.seed));
  if (calib.shape != cfg.video.shape()) throw stq::ConfigError("calibration shape does not match the config");
  return calib;
}

stq::PipelineState load_stage(const fs::path& dir, stq::Stage expected, const char* running) {
  const fs::path p = stage_file(dir, expected);
  if (!fs::exists(p))
    throw stq::StateError(std::string(running) + ": no '" + stq::stage_name(expected) + "' checkpoint in '" +
                          dir.string() + "'; run '" + stq::stage_name(expected) + "' first");
  stq::PipelineState st = stq::load_checkpoint(p);
  stq::require_stage(st, expected, running);
  return st;
}

// Most advanced checkpoint in the directory.
stq::PipelineState load_latest(const fs::path& dir, const char* running) {
  for (stq::Stage s : {stq::Stage::lba, stq::Stage::refine, stq::Stage::allocate})
    if (fs::exists(stage_file(dir, s))) return stq::load_checkpoint(stage_file(dir, s));
  throw stq::StateError(std::string(running) + ": no checkpoint in '" + dir.string() +
                        "'; run 'allocate-ranks' first");
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_stage_log(const fs::path& dir, const std::string& stage, double seconds, const json& body) {
  json j = {{"stage", stage}, {"seconds", seconds}};
  j["log"] = body;
  write_json_file(dir / "logs" / (stage + ".json"), j);
  std::printf("%-15s %8.2fs\n", stage.c_str(), seconds);
}

void cmd_calibrate(const Options& o) {
  Timer t;
  const auto cfg = fresh_config(o);
  const auto bb = stq::ToyBackbone::make(cfg.seed);
  const stq::CalibSet calib = stq::make_calib(cfg, bb);
  const fs::path p = cfg.calib_file();
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  stq::save_calib(calib, p);
  write_stage_log(cfg.out_dir, "calibrate", t.seconds(),
                  {{"pairs", calib.size()}, {"path", p.string()}, {"schedule", calib.schedule}});
}

void cmd_allocate(const Options& o) {
  Timer t;
  const auto cfg = fresh_config(o);
  const auto calib = load_matching_calib(cfg, "allocate-ranks");
  const auto st = stq::stage_allocate(cfg, stq::ToyBackbone::make(cfg.seed), calib);
  fs::create_directories(cfg.out_dir);
  stq::save_checkpoint(st, stage_file(cfg.out_dir, stq::Stage::allocate));
  json ranks = json::array();
  for (const auto& a : st.allocation) ranks.push_back(stq::to_json(a));
  write_stage_log(cfg.out_dir, "allocate-ranks", t.seconds(), {{"allocation", ranks}});
}

void cmd_refine(const Options& o) {
  Timer t;
  const std::string dir = out_dir_of(o);
  auto st = load_stage(dir, stq::Stage::allocate, "refine");
  apply_to_checkpoint(st.config, o, dir);
  const auto calib = load_matching_calib(st.config, "refine");
  stq::stage_refine(st, calib);
  stq::save_checkpoint(st, stage_file(dir, stq::Stage::refine));
  write_stage_log(dir, "refine", t.seconds(), st.log.at("refine"));
}

void cmd_lba(const Options& o) {
  Timer t;
  const std::string dir = out_dir_of(o);
  auto st = load_stage(dir, stq::Stage::refine, "train-lba");
  apply_to_checkpoint(st.config, o, dir);
  const auto calib = load_matching_calib(st.config, "train-lba");
  stq::stage_lba(st, calib);
  stq::save_checkpoint(st, stage_file(dir, stq::Stage::lba));
  write_stage_log(dir, "train-lba", t.seconds(), st.log.at("lba"));
}

stq::EvalMetrics eval_model(const stq::PipelineState& st) {
  const auto bb = stq::ToyBackbone::make(st.config.seed);
  return stq::evaluate(st.model, stq::make_eval_set(st.config, bb));
}

void cmd_evaluate(const Options& o) {
  Timer t;
  const std::string dir = out_dir_of(o);
  auto st = load_latest(dir, "evaluate");
  apply_to_checkpoint(st.config, o, dir);
  const auto m = eval_model(st);
  json j = stq::to_json(m);
  j["stage"] = stq::stage_name(st.stage);
  write_json_file(fs::path(dir) / "eval.json", j);
  write_stage_log(dir, "evaluate", t.seconds(), j);
  std::printf("mse %.6g  psnr %s\n", m.mse, j.at("psnr_db").dump().c_str());
}

json collect_timings(const fs::path& dir) {
  json t = json::object();
  for (const char* s : {"calibrate", "allocate-ranks", "refine", "train-lba", "evaluate"}) {
    const fs::path p = dir / "logs" / (std::string(s) + ".json");
    if (!fs::exists(p)) continue;
    std::ifstream in(p);
    const json j = json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.contains("seconds")) t[s] = j.at("seconds");
  }
  return t;
}

void cmd_report(const Options& o) {
  Timer t;
  const std::string dir = out_dir_of(o);
  auto st = load_latest(dir, "report");
  apply_to_checkpoint(st.config, o, dir);
  stq::fuse(st.model);
  stq::save_checkpoint(st, fs::path(dir) / "model_fused.stqk");
  const auto m = eval_model(st);
  json timings = collect_timings(dir);
  timings["report"] = t.seconds();
  write_json_file(fs::path(dir) / "report.json", stq::build_report(st, m, timings));
  std::printf("report %s\n", (fs::path(dir) / "report.json").string().c_str());
}

void cmd_run_all(const Options& o) {
  cmd_calibrate(o);
  cmd_allocate(o);
  cmd_refine(o);
  cmd_lba(o);
  cmd_evaluate(o);
  cmd_report(o);
}

void write_error(const std::string& dir, const std::string& command, const char* category, int code,
                 const std::string& message, bool echo = true) {
  json j = {{"error", {{"command", command}, {"category", category}, {"exit_code", code}, {"message", message}}}};
  if (echo) std::cerr << "error: " << message << "\n";
  try {
    fs::create_directories(dir);
    std::ofstream(fs::path(dir) / "error.json") << j.dump() << "\n";
  } catch (const std::exception&) {
  }
}

int exit_code_for(const stq::Error& e) {
  if (dynamic_cast<const stq::ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const stq::FormatError*>(&e)) return kData;
  if (dynamic_cast<const stq::StateError*>(&e)) return kState;
  return kOther;
}

}  // namespace

int main(int argc, char** argv) {
  // Large tensors are allocated and freed every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 28);
  mallopt(M_TRIM_THRESHOLD, 1 << 29);

  Options o;
  CLI::App app{"Spatial-temporal quantization pipeline for a toy video backbone"};
  app.require_subcommand(1);
  app.add_option("--config", o.config_path, "JSON config file (flat keys)");
  app.add_option("--bits", o.bits, "Weight and activation bit width (4, 6, 8, 32)");
  app.add_option("--bits-w", o.bits_w, "Weight bit width");
  app.add_option("--bits-a", o.bits_a, "Activation bit width");
  app.add_option("--seed", o.seed, "Seed for backbone, data and rotations");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--calib", o.calib, "Calibration file path");
  app.add_option("--stage-override", o.overrides, "key=value config override (repeatable)");

  std::string command;
  const std::vector<std::pair<std::string, void (*)(const Options&)>> commands{
      {"calibrate", cmd_calibrate},   {"allocate-ranks", cmd_allocate}, {"refine", cmd_refine},
      {"train-lba", cmd_lba},         {"evaluate", cmd_evaluate},       {"report", cmd_report},
      {"run-all", cmd_run_all}};
  const std::vector<std::string> help{"Capture calibration pairs",
                                      "Stage 1: complexity statistics and rank allocation",
                                      "Stage 2: joint low-rank / quantizer refinement",
                                      "Stage 3: learnable bias alignment",
                                      "Evaluate the latest checkpoint against the FP model",
                                      "Fuse biases, export the model and write report.json",
                                      "Run every stage in order"};
  for (std::size_t i = 0; i < commands.size(); ++i)
    app.add_subcommand(commands[i].first, help[i])->fallthrough()->callback([&, i] { command = commands[i].first; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return kOk;
    write_error(out_dir_of(o), command, "config", kConfig, e.what(), false);
    return kConfig;
  }

  try {
    for (const auto& [name, fn] : commands)
      if (name == command) fn(o);
    return kOk;
  } catch (const stq::Error& e) {
    const int code = exit_code_for(e);
    write_error(out_dir_of(o), command, e.category(), code, e.what());
    return code;
  } catch (const std::exception& e) {
    write_error(out_dir_of(o), command, "error", kOther, e.what());
    return kOther;
  }
}
