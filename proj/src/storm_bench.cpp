#include "onda/storm_bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace onda {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::array<std::array<double, 3>, kSceneClasses> kBaseColor{{
    {0.55, 0.75, 0.95},  // sky
    {0.45, 0.40, 0.35},  // ground
    {0.75, 0.30, 0.25},  // block
    {0.90, 0.80, 0.20},  // disk
    {0.25, 0.25, 0.30},  // pole
}};

constexpr Index kHorizonMin = 14;
constexpr Index kHorizonMax = 30;

int rand_int(std::mt19937_64& rng, Index lo, Index hi) {
  return static_cast<int>(std::uniform_int_distribution<Index>(lo, hi)(rng));
}

}  // namespace

std::string to_string(CorruptionKind kind) { return kind == CorruptionKind::Rain ? "rain" : "fog"; }

CorruptionKind corruption_from_string(const std::string& name) {
  if (name == "rain") return CorruptionKind::Rain;
  if (name == "fog") return CorruptionKind::Fog;
  throw ConfigError("unknown corruption '" + name + "'");
}

void BenchConfig::validate() const {
  if (height < 24 || width < 24) throw ConfigError("benchmark images must be at least 24x24");
  if (source_train <= 0 || val_per_level <= 0 || stream_batch <= 0 || offline_per_level <= 0) {
    throw ConfigError("benchmark set sizes must be positive");
  }
}

Index scene_horizon(std::uint64_t seed, const BenchConfig& cfg) {
  std::mt19937_64 rng(splitmix64(seed));
  const Index lo = kHorizonMin * cfg.height / 48, hi = kHorizonMax * cfg.height / 48;
  return rand_int(rng, lo, hi);
}

SceneSample render(std::uint64_t seed, const BenchConfig& cfg) {
  const Index h = cfg.height, w = cfg.width;
  std::mt19937_64 rng(splitmix64(seed));
  const Index horizon = rand_int(rng, kHorizonMin * h / 48, kHorizonMax * h / 48);

  std::vector<int> labels(static_cast<std::size_t>(h * w));
  auto set = [&](Index y, Index x, SceneClass c) { labels[static_cast<std::size_t>(y * w + x)] = static_cast<int>(c); };
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) set(y, x, y < horizon ? SceneClass::Sky : SceneClass::Ground);
  }

  // Shapes stay inside rows [2, h-2) so the top rows remain sky and the bottom
  // rows ground (apart from the pole).
  const int blocks = rand_int(rng, 1, 3);
  for (int b = 0; b < blocks; ++b) {
    const Index bw = rand_int(rng, 8, 20), bh = rand_int(rng, 6, 16);
    const Index x0 = rand_int(rng, 0, w - bw);
    const Index y0 = rand_int(rng, std::max<Index>(2, horizon - bh + 2), h - 2 - bh);
    for (Index y = y0; y < y0 + bh; ++y) {
      for (Index x = x0; x < x0 + bw; ++x) set(y, x, SceneClass::Block);
    }
  }
  const int disks = rand_int(rng, 0, 2);
  for (int d = 0; d < disks; ++d) {
    const Index r = rand_int(rng, 4, 7);
    const Index cx = rand_int(rng, r, w - 1 - r), cy = rand_int(rng, 2 + r, h - 3 - r);
    for (Index y = cy - r; y <= cy + r; ++y) {
      for (Index x = cx - r; x <= cx + r; ++x) {
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) set(y, x, SceneClass::Disk);
      }
    }
  }
  const Index px = rand_int(rng, 0, w - 2);
  for (Index y = horizon; y < h; ++y) {
    set(y, px, SceneClass::Pole);
    set(y, px + 1, SceneClass::Pole);
  }

  SceneSample s;
  s.scene_seed = seed;
  s.labels = std::move(labels);
  s.image = Tensor(Shape{3, h, w});
  std::normal_distribution<double> texture(0.0, cfg.texture_std);
  for (Index ch = 0; ch < 3; ++ch) {
    for (Index j = 0; j < h * w; ++j) {
      const double base = kBaseColor[static_cast<std::size_t>(s.labels[static_cast<std::size_t>(j)])][static_cast<std::size_t>(ch)];
      s.image[ch * h * w + j] = std::clamp(base + texture(rng), 0.0, 1.0);
    }
  }
  return s;
}

CorruptionParts rain_parts(const Tensor& image, double phi, std::uint64_t seed) {
  if (!(phi >= 0.0 && phi <= 1.0)) throw ConfigError("corrupt: phi must lie in [0, 1]");
  expect_shape(image.shape(), {3, -1, -1}, "corrupt");
  const Index h = image.dim(1), w = image.dim(2);
  std::mt19937_64 rng(splitmix64(seed ^ 0x5bd1e995ULL));

  CorruptionParts parts;
  parts.contrast = Tensor(image.shape(), (1.0 - 0.5 * phi) * image.data() + 0.25 * phi);
  parts.streaks = Tensor(image.shape(), 0.0);
  const long count = std::lround(20.0 * phi);
  for (long i = 0; i < count; ++i) {
    const Index len = rand_int(rng, 6, 14);
    const Index x0 = rand_int(rng, 0, w - 1), y0 = rand_int(rng, 0, h - 1);
    for (Index k = 0; k < len; ++k) {
      const Index x = x0 + k, y = y0 + k;
      if (x >= w || y >= h) break;
      for (Index ch = 0; ch < 3; ++ch) parts.streaks[(ch * h + y) * w + x] += 0.4 * phi;
    }
  }
  parts.noise = Tensor(image.shape(), 0.0);
  if (phi > 0.0) {
    std::normal_distribution<double> gauss(0.0, 0.1 * phi);
    for (Index i = 0; i < parts.noise.numel(); ++i) parts.noise[i] = gauss(rng);
  }
  return parts;
}

Tensor corrupt(const Tensor& image, double phi, std::uint64_t seed, CorruptionKind kind) {
  if (!(phi >= 0.0 && phi <= 1.0)) throw ConfigError("corrupt: phi must lie in [0, 1]");
  if (phi == 0.0) return image;
  if (kind == CorruptionKind::Fog) {
    return Tensor(image.shape(), ((1.0 - 0.6 * phi) * image.data() + 0.6 * phi).min(1.0).max(0.0));
  }
  const CorruptionParts p = rain_parts(image, phi, seed);
  return Tensor(image.shape(), (p.contrast.data() + p.streaks.data() + p.noise.data()).min(1.0).max(0.0));
}

void DomainSchedule::validate() const {
  if (levels.empty()) throw ConfigError("schedule '" + name + "' has no levels");
  for (double phi : levels) {
    if (!(phi >= 0.0 && phi <= 1.0)) throw ConfigError("schedule level outside [0, 1]");
  }
  if (segments.empty()) throw ConfigError("schedule '" + name + "' has no segments");
  for (const Segment& s : segments) {
    if (s.batches <= 0) throw ConfigError("schedule segment with non-positive length");
    if (s.level < 0 || s.level >= static_cast<int>(levels.size())) throw ConfigError("schedule segment level out of range");
  }
}

long DomainSchedule::total_batches() const {
  long total = 0;
  for (const Segment& s : segments) total += s.batches;
  return total;
}

std::size_t DomainSchedule::segment_at(long batch) const {
  long end = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    end += segments[i].batches;
    if (batch < end) return i;
  }
  throw ConfigError("batch index " + std::to_string(batch) + " beyond schedule end");
}

std::vector<long> DomainSchedule::segment_starts() const {
  std::vector<long> starts;
  long pos = 0;
  for (const Segment& s : segments) {
    starts.push_back(pos);
    pos += s.batches;
  }
  return starts;
}

namespace {

DomainSchedule cycle(std::string name, long len, int top) {
  DomainSchedule s;
  s.name = std::move(name);
  for (int l = 0; l <= top; ++l) s.segments.push_back({l, len});
  for (int l = top - 1; l >= 0; --l) s.segments.push_back({l, len});
  return s;
}

}  // namespace

DomainSchedule schedule_preset(const std::string& name) {
  if (name == "increasing_storm") return cycle(name, 375, 5);
  if (name == "one_pass") return cycle(name, 125, 5);
  if (name == "storm_a") {
    DomainSchedule s;
    s.name = name;
    s.segments = {{0, 150}, {2, 200}, {4, 200}, {2, 200}, {5, 200}, {3, 200}, {5, 200}, {1, 200}, {0, 150}};
    return s;
  }
  if (name == "storm_b") {
    DomainSchedule s;
    s.name = name;
    s.segments = {{0, 150}, {3, 150}, {5, 400}, {4, 200}, {2, 200}, {0, 200}};
    return s;
  }
  if (name == "storm_c") {
    DomainSchedule s;
    s.name = name;
    s.segments = {{5, 375}, {2, 200}, {5, 200}, {1, 200}, {4, 200}, {0, 200}};
    return s;
  }
  if (name == "fog") {
    DomainSchedule s = cycle(name, 375, 4);
    s.levels = {0.0, 0.25, 0.5, 0.7, 0.9};
    s.corruption = CorruptionKind::Fog;
    return s;
  }
  if (name == "stationary") {
    DomainSchedule s;
    s.name = name;
    s.segments = {{0, 2000}};
    return s;
  }
  throw ConfigError("unknown schedule preset '" + name + "'");
}

std::vector<std::string> schedule_preset_names() {
  return {"increasing_storm", "one_pass", "storm_a", "storm_b", "storm_c", "fog", "stationary"};
}

std::string schedule_to_json(const DomainSchedule& s) {
  nlohmann::json j;
  j["name"] = s.name;
  j["levels"] = s.levels;
  j["corruption"] = to_string(s.corruption);
  nlohmann::json segs = nlohmann::json::array();
  for (const Segment& seg : s.segments) segs.push_back({seg.level, seg.batches});
  j["segments"] = segs;
  return j.dump(2);
}

DomainSchedule schedule_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("schedule JSON: ") + e.what());
  }
  DomainSchedule s;
  s.name = j.value("name", std::string("custom"));
  if (j.contains("levels")) s.levels = j.at("levels").get<std::vector<double>>();
  if (j.contains("corruption")) s.corruption = corruption_from_string(j.at("corruption").get<std::string>());
  if (!j.contains("segments")) throw FormatError("schedule JSON: missing segments");
  for (const auto& seg : j.at("segments")) {
    if (!seg.is_array() || seg.size() != 2) throw FormatError("schedule JSON: segments must be [level, batches] pairs");
    s.segments.push_back({seg[0].get<int>(), seg[1].get<long>()});
  }
  s.validate();
  return s;
}

DomainSchedule load_schedule(const std::string& name_or_path) {
  if (std::filesystem::exists(name_or_path)) {
    std::ifstream in(name_or_path);
    std::stringstream ss;
    ss << in.rdbuf();
    return schedule_from_json(ss.str());
  }
  return schedule_preset(name_or_path);
}

Tensor stack_images(std::span<const SceneSample* const> samples) {
  if (samples.empty()) throw ShapeError("stack: no samples", 0);
  const Shape& s0 = samples.front()->image.shape();
  const Index per = samples.front()->image.numel();
  Tensor out(Shape{static_cast<Index>(samples.size()), s0[0], s0[1], s0[2]});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    expect_shape(samples[i]->image.shape(), s0, "stack");
    out.data().segment(static_cast<Index>(i) * per, per) = samples[i]->image.data();
  }
  return out;
}

LabeledBatch stack(std::span<const SceneSample* const> samples) {
  LabeledBatch b;
  b.images = stack_images(samples);
  for (const SceneSample* s : samples) b.labels.insert(b.labels.end(), s->labels.begin(), s->labels.end());
  return b;
}

std::uint64_t scene_seed(std::uint64_t split_seed, SeedRegion region, std::uint64_t index) {
  if (index >= (std::uint64_t{1} << 36)) throw ConfigError("scene index too large");
  return ((split_seed & 0xFFFFFFULL) << 40) | (static_cast<std::uint64_t>(region) << 36) | index;
}

std::uint64_t noise_seed(std::uint64_t scene, int level) {
  return splitmix64(scene ^ (static_cast<std::uint64_t>(level + 1) * 0x9e3779b97f4a7c15ULL));
}

TargetStream::TargetStream(DomainSchedule schedule, std::uint64_t split_seed, BenchConfig cfg)
    : schedule_(std::move(schedule)), split_seed_(split_seed), cfg_(cfg) {
  schedule_.validate();
  total_ = schedule_.total_batches();
}

std::optional<TargetStream::Batch> TargetStream::next() {
  if (step_ >= total_) return std::nullopt;
  const int level = schedule_.segments[schedule_.segment_at(step_)].level;
  const double phi = schedule_.levels[static_cast<std::size_t>(level)];
  Batch b;
  b.step = step_;
  b.images = Tensor(Shape{cfg_.stream_batch, 3, cfg_.height, cfg_.width});
  const Index per = 3 * cfg_.height * cfg_.width;
  for (Index i = 0; i < cfg_.stream_batch; ++i) {
    const std::uint64_t frame = static_cast<std::uint64_t>(step_ * cfg_.stream_batch + i);
    const std::uint64_t seed = scene_seed(split_seed_, SeedRegion::Stream, frame);
    const SceneSample scene = render(seed, cfg_);
    b.images.data().segment(i * per, per) = corrupt(scene.image, phi, noise_seed(seed, level), schedule_.corruption).data();
  }
  ++step_;
  return b;
}

std::vector<SceneSample> Benchmark::offline_set(int level) const {
  const double phi = schedule.levels.at(static_cast<std::size_t>(level));
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(cfg.offline_per_level));
  for (Index i = 0; i < cfg.offline_per_level; ++i) {
    const std::uint64_t seed =
        scene_seed(split_seed, SeedRegion::Offline, static_cast<std::uint64_t>(level * cfg.offline_per_level + i));
    SceneSample s = render(seed, cfg);
    s.image = corrupt(s.image, phi, noise_seed(seed, level), schedule.corruption);
    s.phi = phi;
    out.push_back(std::move(s));
  }
  return out;
}

Benchmark make_streams(const DomainSchedule& schedule, std::uint64_t split_seed, const BenchConfig& cfg) {
  cfg.validate();
  schedule.validate();
  Benchmark b;
  b.cfg = cfg;
  b.schedule = schedule;
  b.split_seed = split_seed;
  b.source_train.reserve(static_cast<std::size_t>(cfg.source_train));
  for (Index i = 0; i < cfg.source_train; ++i) {
    b.source_train.push_back(render(scene_seed(split_seed, SeedRegion::SourceTrain, static_cast<std::uint64_t>(i)), cfg));
  }
  b.validation.resize(schedule.levels.size());
  for (std::size_t l = 0; l < schedule.levels.size(); ++l) {
    const double phi = schedule.levels[l];
    for (Index i = 0; i < cfg.val_per_level; ++i) {
      const std::uint64_t seed = scene_seed(split_seed, SeedRegion::Validation, static_cast<std::uint64_t>(i));
      SceneSample s = render(seed, cfg);
      s.image = corrupt(s.image, phi, noise_seed(seed, static_cast<int>(l)), schedule.corruption);
      s.phi = phi;
      b.validation[l].push_back(std::move(s));
    }
  }
  return b;
}

}  // namespace onda
