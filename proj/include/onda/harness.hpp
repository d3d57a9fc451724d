#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "onda/metrics.hpp"
#include "onda/proto_bank.hpp"
#include "onda/replay_buffer.hpp"
#include "onda/segnet.hpp"
#include "onda/self_training.hpp"
#include "onda/shift_detector.hpp"
#include "onda/storm_bench.hpp"
#include "onda/switch_policy.hpp"

namespace onda {

/// Receives progress lines; silent by default.
std::function<void(const std::string&)>& progress_sink();

/// Keeps large tensor buffers on the heap between steps (glibc only, no-op elsewhere).
void retain_heap();

enum class RunMode { Pretrain, OnDA, BNAdapt, EntropyMin, Offline, Supervised, EvalOnly };

std::string to_string(RunMode mode);
RunMode run_mode_from_string(const std::string& name);

struct PretrainConfig {
  int epochs = 20;
  double lr = 0.01;
  int decay_epoch = 15;
  Index batch = 8;
  Index calibration_batches = 300;
  double calibration_percentile = 5.0;
  double scs_gap = 0.05;
  double hs_gap = 0.08;
};

struct OfflineConfig {
  int epochs = 10;
  double lr = 1e-3;
  double supervised_lr = 0.01;
  int decay_epoch = 8;
  std::vector<int> levels;  // empty: levels 1.. for offline, all levels for supervised
};

struct RunConfig {
  std::string name;  // method label; derived from mode and policy when empty
  RunMode mode = RunMode::OnDA;
  ArchConfig arch;
  BenchConfig bench;
  Hyperparams hp;
  PolicyConfig policy;
  DetectorConfig detector;
  bool detector_enabled = true;
  bool calibrate_thresholds = true;  // take thresholds from the pretrained calibration
  Index buffer_capacity = 500;
  std::string schedule = "increasing_storm";
  std::uint64_t model_seed = 1;
  std::uint64_t data_seed = 1;
  std::uint64_t buffer_seed = 1;
  bool entropy_replay = false;  // EntropyMin + replay buffer
  long eval_interval = 0;       // extra evaluations every n batches, 0 = segment ends only
  PretrainConfig pretrain;
  OfflineConfig offline;

  void validate() const;
  std::string method_name() const;
};

std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::string& path);

/// Thresholds derived from static-model confidence on a clear stream.
struct Calibration {
  double t_c = 0.0;
  std::vector<double> source_mu;
};

void apply_calibration(PolicyConfig& policy, const Calibration& cal, const PretrainConfig& pc);

struct Pretrained {
  ModelCheckpoint model;
  PrototypeBank bank;
  double source_miou = 0.0;
  Calibration calibration;
};

/// Supervised source training plus prototype initialization and threshold
/// calibration.
Pretrained pretrain(const RunConfig& cfg, const Benchmark& bench);

/// Prototype bank from static features of labeled samples.
PrototypeBank init_bank(const ModelCheckpoint& model, std::span<const SceneSample> samples, double lambda);

Calibration calibrate(const RunConfig& cfg, const ModelCheckpoint& static_model);

Confusion evaluate(const ModelCheckpoint& model, std::span<const SceneSample> samples);

/// mIoU of every validation level after one pass over each.
struct Evaluation {
  std::vector<Confusion> confusions;  // per level
  std::vector<double> miou;           // per level, in [0,1]
};

Evaluation evaluate_levels(const ModelCheckpoint& model, const Benchmark& bench);

enum class Pass { Forward, Backward };
std::string to_string(Pass p);

/// Evaluation taken at the end of a schedule segment (or at an interval).
struct EvalRecord {
  long step = 0;  // batches consumed
  int segment = -1;
  int level = -1;  // level of the segment just finished, -1 for interval evals
  Pass pass = Pass::Forward;
  Evaluation eval;
};

/// Forward segments run up to and including the first segment at the
/// schedule's highest level; later segments are backward.
std::vector<Pass> segment_passes(const DomainSchedule& schedule);

struct RunResult {
  std::string method;
  std::vector<EvalRecord> evals;
  std::vector<StepReport> steps;
  std::vector<SwitchEvent> events;
  std::vector<double> objective;  // entropy for EntropyMin, total loss otherwise
  std::optional<AdaptState> final_state;
};

/// Online adaptation of `start` on the schedule stream.
RunResult run_onda(const RunConfig& cfg, const Benchmark& bench, const AdaptState& start);

RunResult run_baseline(const RunConfig& cfg, const Benchmark& bench, const ModelCheckpoint& static_model);

/// Offline adaptation over the full target set of the chosen levels.
/// Prototypes come from static pseudo-labels of the target set; a class never
/// predicted there keeps its source centroid.
RunResult run_offline(const RunConfig& cfg, const Benchmark& bench, const ModelCheckpoint& static_model,
                      const PrototypeBank& source_bank);

/// Supervised training on labeled target frames of the chosen levels,
/// starting from the static model.
RunResult run_supervised(const RunConfig& cfg, const Benchmark& bench, const ModelCheckpoint& static_model);

/// Static model evaluated once; every segment reports the same values.
RunResult run_eval_only(const Benchmark& bench, const ModelCheckpoint& model, const std::string& method);

/// One table row: mIoU (percent) per level in column order.
struct TableRow {
  std::string method;
  std::vector<int> levels;
  std::vector<double> values;
  double hmean = 0.0;
  bool hmean_zero = false;
};

/// Forward row: mIoU on each forward segment's level right after that
/// segment. Backward row: same for backward segments. Offline and supervised
/// runs report their single final evaluation on every level.
TableRow forward_row(const RunResult& r, const DomainSchedule& schedule);
TableRow backward_row(const RunResult& r, const DomainSchedule& schedule);

/// mIoU on `level` of the evaluation taken after segment `segment`.
double miou_after_segment(const RunResult& r, int segment, int level);
/// Final evaluation.
const Evaluation& final_eval(const RunResult& r);

/// Writes config.json, results.csv, evals.csv, steps.jsonl, events.jsonl and
/// one confusion CSV per evaluation and level.
void write_run(const std::string& dir, const RunConfig& cfg, const RunResult& r, const Benchmark& bench);

/// Consolidated tables over run directories: CSV and aligned text with the
/// column maxima marked **bold**.
struct Report {
  std::string forward_csv;
  std::string backward_csv;
  std::string series_csv;  // method,step,level,miou for every evaluation
  std::string text;
};
Report report(const std::vector<std::string>& run_dirs);

}  // namespace onda
