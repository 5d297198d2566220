#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <vector>

#include "stq/container.hpp"
#include "stq/model.hpp"
#include "stq/rng.hpp"

namespace stq {

// Synthetic video: a translating 2-D sinusoid riding on a linear ramp, plus
// per-frame texture noise. `speed` (pixels / frame) drives temporal
// complexity, `noise` drives spatial complexity.
struct VideoSpec {
  Real speed = 0;
  Real noise = 0;
  Real frequency = 2;  // cycles across the frame width
  Real angle = 0;      // direction of motion, radians
  std::uint64_t seed = 0;

  // Bimodal draw: half the videos are calm, half are busy.
  static VideoSpec random(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x51de));
    VideoSpec v;
    v.seed = seed;
    const bool busy = rng.uniform() < 0.5;
    v.speed = busy ? rng.uniform(2.0, 4.0) : rng.uniform(0.0, 0.3);
    v.noise = busy ? rng.uniform(0.3, 0.6) : rng.uniform(0.0, 0.05);
    v.frequency = rng.uniform(1.0, 3.0);
    v.angle = rng.uniform(0.0, 2 * std::numbers::pi);
    return v;
  }
};

struct VideoShape {
  std::size_t frames = 5;
  std::size_t channels = 4;
  std::size_t height = 16;
  std::size_t width = 16;

  Shape shape() const { return {frames, channels, height, width}; }
};

inline Tensor make_video(const VideoSpec& spec, const VideoShape& vs) {
  Rng rng(derive_seed(spec.seed, 0x7e40));
  Tensor x(vs.shape());
  std::vector<Real> phase(vs.channels), ramp(vs.channels), amp(vs.channels);
  for (std::size_t c = 0; c < vs.channels; ++c) {
    phase[c] = rng.uniform(0.0, 2 * std::numbers::pi);
    ramp[c] = rng.uniform(-0.5, 0.5);
    amp[c] = rng.uniform(0.5, 1.0);
  }
  const Real ca = std::cos(spec.angle), sa = std::sin(spec.angle);
  const Real k = 2 * std::numbers::pi * spec.frequency / static_cast<Real>(vs.width);
  for (std::size_t t = 0; t < vs.frames; ++t)
    for (std::size_t c = 0; c < vs.channels; ++c)
      for (std::size_t h = 0; h < vs.height; ++h)
        for (std::size_t w = 0; w < vs.width; ++w) {
          const Real u = static_cast<Real>(w) * ca + static_cast<Real>(h) * sa - spec.speed * static_cast<Real>(t);
          const Real base = amp[c] * std::sin(k * u + phase[c]) +
                            ramp[c] * (static_cast<Real>(w) / static_cast<Real>(vs.width) - 0.5);
          x[((t * vs.channels + c) * vs.height + h) * vs.width + w] = base + spec.noise * rng.normal();
        }
  return x;
}

// Residual refinement x_{k+1} = x_k - backbone(x_k) / steps. Returns
// x_0 .. x_steps.
inline std::vector<Tensor> run_refinement(const ToyBackbone& backbone, const Tensor& x0, std::size_t steps) {
  if (steps < 1) throw ArgumentError("run_refinement: steps must be >= 1");
  std::vector<Tensor> traj{x0};
  const Real h = 1 / static_cast<Real>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const Tensor d = backbone.forward(traj.back());
    Tensor next = traj.back();
    for (std::size_t i = 0; i < next.numel(); ++i) next[i] -= d[i] * h;
    traj.push_back(std::move(next));
  }
  return traj;
}

struct CalibPair {
  Tensor input;
  Tensor fp_output;
  std::size_t step_index = 0;  // refinement step (1-based) that evaluated the backbone
  std::size_t video_index = 0;
};

struct CalibSet {
  std::vector<CalibPair> pairs;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::size_t sample_every = 0;
  std::vector<std::size_t> schedule;
  Shape shape;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  std::vector<Tensor> inputs() const {
    std::vector<Tensor> v;
    v.reserve(pairs.size());
    for (const auto& p : pairs) v.push_back(p.input);
    return v;
  }
};

inline std::vector<std::size_t> sample_schedule(std::size_t steps, std::size_t sample_every) {
  if (sample_every < 1 || sample_every > steps)
    throw ArgumentError("capture: sample_every must lie in [1, steps]");
  std::vector<std::size_t> s;
  for (std::size_t k = sample_every; k <= steps; k += sample_every) s.push_back(k);
  return s;
}

// Runs the refinement loop on each video and records the backbone's
// (input, output) at steps sample_every, 2 * sample_every, ...
inline CalibSet capture_calib(const ToyBackbone& backbone, const std::vector<VideoSpec>& videos,
                              const VideoShape& shape, std::size_t steps, std::size_t sample_every,
                              std::uint64_t seed = 0) {
  if (videos.empty()) throw ArgumentError("capture_calib: no videos");
  CalibSet set;
  set.seed = seed;
  set.steps = steps;
  set.sample_every = sample_every;
  set.schedule = sample_schedule(steps, sample_every);
  set.shape = shape.shape();
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const auto traj = run_refinement(backbone, make_video(videos[v], shape), steps);
    for (auto k : set.schedule) {
      CalibPair p;
      p.input = traj[k - 1];
      p.fp_output = backbone.forward(p.input);
      p.step_index = k;
      p.video_index = v;
      set.pairs.push_back(std::move(p));
    }
  }
  return set;
}

inline std::vector<VideoSpec> random_videos(std::uint64_t seed, std::size_t count, std::uint64_t salt) {
  std::vector<VideoSpec> v;
  for (std::size_t i = 0; i < count; ++i) v.push_back(VideoSpec::random(derive_seed(seed, salt + i)));
  return v;
}

// ---------------------------------------------------------------------------
// STQC file format
// ---------------------------------------------------------------------------

inline constexpr char kCalibMagic[5] = "STQC";

inline void save_calib(const CalibSet& set, const std::filesystem::path& path) {
  if (set.empty()) throw ArgumentError("save_calib: empty set");
  Container c;
  std::vector<std::size_t> steps, videos;
  for (const auto& p : set.pairs) {
    if (p.input.shape() != set.shape || p.fp_output.shape() != set.shape)
      throw DimensionError("save_calib: pair shape differs from set shape");
    steps.push_back(p.step_index);
    videos.push_back(p.video_index);
  }
  c.header = {{"count", set.size()},
              {"shape", set.shape},
              {"dtype", "f64"},
              {"seed", set.seed},
              {"schedule", set.schedule},
              {"steps", set.steps},
              {"sample_every", set.sample_every},
              {"step_index", steps},
              {"video_index", videos}};
  for (const auto& p : set.pairs) {
    c.append(p.input);
    c.append(p.fp_output);
  }
  write_container(path, kCalibMagic, c);
}

inline CalibSet load_calib(const std::filesystem::path& path) {
  const Container c = read_container(path, kCalibMagic, [](const nlohmann::json& h) {
    if (h.at("dtype").get<std::string>() != "f64")
      throw FormatError(FormatError::Kind::malformed_header, "unsupported dtype");
    const auto shape = h.at("shape").get<Shape>();
    if (shape.size() != 4 || shape_numel(shape) == 0)
      throw FormatError(FormatError::Kind::malformed_header, "calibration shape must be T x C x H x W");
    const std::size_t pair_bytes = 2 * shape_numel(shape) * 8;
    return PayloadLayout{h.at("count").get<std::size_t>() * pair_bytes, pair_bytes};
  });
  CalibSet set;
  const auto& h = c.header;
  set.shape = h.at("shape").get<Shape>();
  set.seed = h.at("seed").get<std::uint64_t>();
  set.schedule = h.at("schedule").get<std::vector<std::size_t>>();
  set.steps = h.value("steps", std::size_t{0});
  set.sample_every = h.value("sample_every", std::size_t{0});
  const auto count = h.at("count").get<std::size_t>();
  if (count == 0) throw FormatError(FormatError::Kind::malformed_header, "calibration set is empty");
  const auto steps = h.value("step_index", std::vector<std::size_t>(count, 0));
  const auto videos = h.value("video_index", std::vector<std::size_t>(count, 0));
  if (steps.size() != count || videos.size() != count)
    throw FormatError(FormatError::Kind::malformed_header, "index arrays do not match count");
  const std::size_t tensor_bytes = shape_numel(set.shape) * 8;
  for (std::size_t i = 0; i < count; ++i) {
    CalibPair p;
    p.input = c.tensor_at(2 * i * tensor_bytes, set.shape);
    p.fp_output = c.tensor_at((2 * i + 1) * tensor_bytes, set.shape);
    p.step_index = steps[i];
    p.video_index = videos[i];
    set.pairs.push_back(std::move(p));
  }
  return set;
}

}  // namespace stq
