#include "onda/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace onda {

void retain_heap() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::function<void(const std::string&)>& progress_sink() {
  static std::function<void(const std::string&)> sink;
  return sink;
}

namespace {

void progress(const std::string& line) {
  if (progress_sink()) progress_sink()(line);
}

constexpr Index kEvalChunk = 25;

std::vector<const SceneSample*> pointers(std::span<const SceneSample> samples, std::span<const Index> order,
                                         std::size_t begin, std::size_t end) {
  std::vector<const SceneSample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[static_cast<std::size_t>(order[i])]);
  return out;
}

std::vector<Index> shuffled(Index n, std::uint64_t seed) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double lr_at(double base, int epoch, int decay_epoch) { return epoch >= decay_epoch ? base * 0.1 : base; }

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ConfigError("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Runs supervised cross-entropy epochs over `samples`.
void train_supervised(ModelCheckpoint& model, std::span<const SceneSample> samples, int epochs, double lr,
                      int decay_epoch, Index batch, std::uint64_t seed, const std::string& tag) {
  model.set_requires_grad(true);
  const std::vector<Tensor*> params = model.parameters();
  for (int e = 0; e < epochs; ++e) {
    const double rate = lr_at(lr, e, decay_epoch);
    const std::vector<Index> order = shuffled(static_cast<Index>(samples.size()), seed * 1000003ULL + e);
    double loss_sum = 0.0;
    long batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch)) {
      const auto ptrs = pointers(samples, order, b, std::min(order.size(), b + static_cast<std::size_t>(batch)));
      const LabeledBatch lb = stack(ptrs);
      Graph g;
      const ForwardVars fv = forward(g, model, lb.images, BNMode::TrainUpdate);
      Var loss = loss_task(fv.probs, lb.labels);
      loss_sum += loss.value().item();
      ++batches;
      g.backward(loss);
      sgd_step(params, rate);
    }
    progress(tag + " epoch " + std::to_string(e + 1) + "/" + std::to_string(epochs) +
             " loss " + std::to_string(loss_sum / static_cast<double>(batches)));
  }
  model.set_requires_grad(false);
}

std::vector<SceneSample> target_set(const Benchmark& bench, const std::vector<int>& levels) {
  std::vector<SceneSample> out;
  for (int l : levels) {
    std::vector<SceneSample> part = bench.offline_set(l);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

class Evaluator {
 public:
  Evaluator(const RunConfig& cfg, const Benchmark& bench)
      : bench_(bench), passes_(segment_passes(bench.schedule)), interval_(cfg.eval_interval) {
    long end = 0;
    for (const Segment& s : bench.schedule.segments) ends_.push_back(end += s.batches);
  }

  /// Call after `consumed` batches.
  void after(long consumed, const ModelCheckpoint& model, std::vector<EvalRecord>& out) {
    const auto it = std::find(ends_.begin(), ends_.end(), consumed);
    if (it != ends_.end()) {
      const auto seg = static_cast<std::size_t>(it - ends_.begin());
      EvalRecord r;
      r.step = consumed;
      r.segment = static_cast<int>(seg);
      r.level = bench_.schedule.segments[seg].level;
      r.pass = passes_[seg];
      r.eval = evaluate_levels(model, bench_);
      std::string line = "  segment " + std::to_string(seg) + " (L" + std::to_string(r.level) + ") done at " +
                         std::to_string(consumed) + ":";
      for (double m : r.eval.miou) line += " " + std::to_string(100.0 * m).substr(0, 5);
      progress(line);
      out.push_back(std::move(r));
    } else if (interval_ > 0 && consumed % interval_ == 0) {
      EvalRecord r;
      r.step = consumed;
      const std::size_t seg = bench_.schedule.segment_at(consumed - 1);
      r.pass = passes_[seg];
      r.eval = evaluate_levels(model, bench_);
      out.push_back(std::move(r));
    }
  }

 private:
  const Benchmark& bench_;
  std::vector<Pass> passes_;
  std::vector<long> ends_;
  long interval_;
};

}  // namespace

void apply_calibration(PolicyConfig& policy, const Calibration& cal, const PretrainConfig& pc) {
  policy.t_c = cal.t_c;
  policy.t_s = cal.t_c;
  policy.t_d = cal.t_c - pc.scs_gap;
  policy.t_ca = cal.t_c;
  policy.t_cb = cal.t_c - pc.hs_gap;
}

PrototypeBank init_bank(const ModelCheckpoint& model, std::span<const SceneSample> samples, double lambda) {
  PrototypeAccumulator acc(model.arch.num_classes, model.arch.feature_dim);
  std::vector<Index> order(samples.size());
  std::iota(order.begin(), order.end(), Index{0});
  for (std::size_t b = 0; b < samples.size(); b += kEvalChunk) {
    const LabeledBatch lb = stack(pointers(samples, order, b, std::min(samples.size(), b + kEvalChunk)));
    acc.add(forward(model, lb.images).features, lb.labels);
  }
  return acc.finish(lambda);
}

Calibration calibrate(const RunConfig& cfg, const ModelCheckpoint& static_model) {
  ShiftDetector det(cfg.detector);
  Calibration cal;
  const Index per = cfg.bench.stream_batch;
  for (Index b = 0; b < cfg.pretrain.calibration_batches; ++b) {
    std::vector<SceneSample> scenes;
    for (Index i = 0; i < per; ++i) {
      scenes.push_back(render(scene_seed(cfg.data_seed, SeedRegion::Calibration, static_cast<std::uint64_t>(b * per + i)),
                              cfg.bench));
    }
    std::vector<const SceneSample*> ptrs;
    for (const SceneSample& s : scenes) ptrs.push_back(&s);
    const DetectorOutput out = det.push(batch_confidence(forward(static_model, stack_images(ptrs)).probs));
    if (out.warm) cal.source_mu.push_back(out.mu);
  }
  cal.t_c = percentile(cal.source_mu, cfg.pretrain.calibration_percentile);
  return cal;
}

Pretrained pretrain(const RunConfig& cfg, const Benchmark& bench) {
  cfg.validate();
  Pretrained out;
  out.model = init_model(cfg.arch, cfg.model_seed);
  train_supervised(out.model, bench.source_train, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.pretrain.decay_epoch,
                   cfg.pretrain.batch, cfg.model_seed, "pretrain");
  out.model.role = ModelRole::Static;
  out.bank = init_bank(out.model, bench.source_train, cfg.hp.proto_lambda);
  out.source_miou = miou(evaluate(out.model, bench.validation.at(0))).miou;
  out.calibration = calibrate(cfg, out.model);
  progress("pretrain: source mIoU " + std::to_string(out.source_miou) + ", T_c " + std::to_string(out.calibration.t_c));
  return out;
}

Confusion evaluate(const ModelCheckpoint& model, std::span<const SceneSample> samples) {
  Confusion cm = make_confusion(static_cast<int>(model.arch.num_classes));
  std::vector<Index> order(samples.size());
  std::iota(order.begin(), order.end(), Index{0});
  for (std::size_t b = 0; b < samples.size(); b += kEvalChunk) {
    const LabeledBatch lb = stack(pointers(samples, order, b, std::min(samples.size(), b + kEvalChunk)));
    accumulate(cm, lb.labels, argmax_labels(forward(model, lb.images).probs));
  }
  return cm;
}

Evaluation evaluate_levels(const ModelCheckpoint& model, const Benchmark& bench) {
  Evaluation e;
  for (const auto& level : bench.validation) {
    e.confusions.push_back(evaluate(model, level));
    e.miou.push_back(miou(e.confusions.back()).miou);
  }
  return e;
}

std::string to_string(Pass p) { return p == Pass::Forward ? "forward" : "backward"; }

std::vector<Pass> segment_passes(const DomainSchedule& schedule) {
  int top = -1;
  for (const Segment& s : schedule.segments) top = std::max(top, s.level);
  std::vector<Pass> out;
  bool after_peak = false;
  for (const Segment& s : schedule.segments) {
    out.push_back(after_peak ? Pass::Backward : Pass::Forward);
    if (s.level == top) after_peak = true;
  }
  return out;
}

RunResult run_onda(const RunConfig& cfg, const Benchmark& bench, const AdaptState& start) {
  cfg.validate();
  RunResult r;
  r.method = cfg.method_name();
  AdaptState state = start;
  const ReplayBuffer rb = ReplayBuffer::build(bench.source_train, cfg.buffer_capacity, cfg.buffer_seed);
  ShiftDetector det(cfg.detector);
  SwitchPolicy policy(cfg.policy);
  Evaluator evaluator(cfg, bench);
  TargetStream stream = bench.stream();
  progress(r.method + ": " + std::to_string(stream.schedule().total_batches()) + " batches");

  while (auto batch = stream.next()) {
    const Prediction stat = forward(state.static_model, batch->images);
    const DetectorOutput d = det.push(batch_confidence(stat.probs));
    int indicator = 0;
    if (d.event && cfg.detector_enabled) {
      on_event(*d.event, state.live, state.dynamic, r.events);
      indicator = d.event->sign();
    }
    const double delta = policy.update(d.mu, indicator);
    std::optional<LabeledBatch> replay;
    if (!rb.empty()) replay = rb.sample_batch(cfg.hp.batch_replay, batch->step);
    StepReport rep = adapt_step(state, batch->images, replay ? &*replay : nullptr, delta, cfg.hp, &stat.probs);
    rep.step = batch->step;
    rep.domain_truth = stream.schedule().segments[stream.schedule().segment_at(batch->step)].level;
    rep.mu = d.mu;
    rep.indicator = indicator;
    r.objective.push_back(rep.loss_task + rep.loss_pseudo + rep.loss_reg);
    r.steps.push_back(rep);
    evaluator.after(batch->step + 1, state.live, r.evals);
  }
  r.final_state = std::move(state);
  return r;
}

RunResult run_baseline(const RunConfig& cfg, const Benchmark& bench, const ModelCheckpoint& static_model) {
  cfg.validate();
  if (cfg.mode != RunMode::BNAdapt && cfg.mode != RunMode::EntropyMin) {
    throw ConfigError("run_baseline: mode must be bn_adapt or entropy_min");
  }
  RunResult r;
  r.method = cfg.method_name();
  ModelCheckpoint model = static_model;
  model.role = ModelRole::Live;
  model.set_requires_grad(false);
  std::vector<Tensor*> affine;
  if (cfg.mode == RunMode::EntropyMin) {
    affine = model.bn_affine_parameters();
    for (Tensor* t : affine) t->set_requires_grad(true);
  }
  std::optional<ReplayBuffer> rb;
  if (cfg.mode == RunMode::EntropyMin && cfg.entropy_replay && cfg.buffer_capacity > 0) {
    rb = ReplayBuffer::build(bench.source_train, cfg.buffer_capacity, cfg.buffer_seed);
  }
  Evaluator evaluator(cfg, bench);
  TargetStream stream = bench.stream();
  progress(r.method + ": " + std::to_string(stream.schedule().total_batches()) + " batches");

  while (auto batch = stream.next()) {
    Graph g;
    const ForwardVars fv = forward(g, model, batch->images, BNMode::TrainUpdate);
    StepReport rep;
    rep.step = batch->step;
    rep.domain_truth = stream.schedule().segments[stream.schedule().segment_at(batch->step)].level;
    rep.delta = 1.0;
    rep.z = batch_confidence(fv.probs.value());
    if (cfg.mode == RunMode::EntropyMin) {
      Var ent = loss_entropy(fv.probs, cfg.hp.prob_floor);
      Var total = ent;
      rep.loss_pseudo = ent.value().item();
      r.objective.push_back(rep.loss_pseudo);
      if (rb) {
        const LabeledBatch lb = rb->sample_batch(cfg.hp.batch_replay, batch->step);
        const ForwardVars rv = forward(g, model, lb.images, BNMode::TrainFrozen);
        Var task = loss_task(rv.probs, lb.labels, cfg.hp.prob_floor);
        rep.loss_task = task.value().item();
        total = ops::add(total, task);
      }
      g.backward(total);
      sgd_step(affine, cfg.hp.lr_online);
    }
    r.steps.push_back(rep);
    evaluator.after(batch->step + 1, model, r.evals);
  }
  model.set_requires_grad(false);
  AdaptState fin;
  fin.live = std::move(model);
  r.final_state = std::move(fin);
  return r;
}

RunResult run_offline(const RunConfig& cfg, const Benchmark& bench, const ModelCheckpoint& static_model,
                      const PrototypeBank& source_bank) {
  cfg.validate();
  std::vector<int> levels = cfg.offline.levels;
  if (levels.empty()) {
    for (int l = 1; l < static_cast<int>(bench.schedule.levels.size()); ++l) levels.push_back(l);
  }
  RunResult r;
  r.method = cfg.method_name();
  const std::vector<SceneSample> data = target_set(bench, levels);

  // Prototypes and variance from the pseudo-labeled target features of the
  // momentum model, which starts as the static model.
  PrototypeAccumulator acc(cfg.arch.num_classes, cfg.arch.feature_dim);
  std::vector<Index> all(data.size());
  std::iota(all.begin(), all.end(), Index{0});
  for (std::size_t b = 0; b < data.size(); b += kEvalChunk) {
    const Tensor images = stack_images(pointers(data, all, b, std::min(data.size(), b + kEvalChunk)));
    const Prediction p = forward(static_model, images);
    acc.add(p.features, argmax_labels(p.probs));
  }
  const PrototypeBank bank = acc.finish(cfg.hp.proto_lambda, &source_bank);
  AdaptState state = AdaptState::from_static(static_model, bank);
  const ReplayBuffer rb = ReplayBuffer::build(bench.source_train, cfg.buffer_capacity, cfg.buffer_seed);
  Hyperparams hp = cfg.hp;
  long step = 0;
  const Index batch = cfg.hp.batch_target;
  for (int e = 0; e < cfg.offline.epochs; ++e) {
    hp.lr_online = lr_at(cfg.offline.lr, e, cfg.offline.decay_epoch);
    const std::vector<Index> order = shuffled(static_cast<Index>(data.size()), cfg.model_seed * 7919ULL + e);
    double loss = 0.0;
    long n = 0;
    for (std::size_t b = 0; b + static_cast<std::size_t>(batch) <= order.size(); b += static_cast<std::size_t>(batch)) {
      const Tensor images = stack_images(pointers(data, order, b, b + static_cast<std::size_t>(batch)));
      std::optional<LabeledBatch> replay;
      if (!rb.empty()) replay = rb.sample_batch(cfg.hp.batch_replay, step);
      StepReport rep = adapt_step(state, images, replay ? &*replay : nullptr, 1.0, hp);
      rep.step = step++;
      loss += rep.loss_task + rep.loss_pseudo + rep.loss_reg;
      ++n;
      r.objective.push_back(rep.loss_task + rep.loss_pseudo + rep.loss_reg);
      r.steps.push_back(rep);
    }
    progress(r.method + " epoch " + std::to_string(e + 1) + "/" + std::to_string(cfg.offline.epochs) + " loss " +
             std::to_string(loss / static_cast<double>(n)));
  }
  EvalRecord rec;
  rec.step = step;
  rec.eval = evaluate_levels(state.live, bench);
  r.evals.push_back(std::move(rec));
  r.final_state = std::move(state);
  return r;
}

RunResult run_supervised(const RunConfig& cfg, const Benchmark& bench, const ModelCheckpoint& static_model) {
  cfg.validate();
  std::vector<int> levels = cfg.offline.levels;
  if (levels.empty()) {
    for (int l = 0; l < static_cast<int>(bench.schedule.levels.size()); ++l) levels.push_back(l);
  }
  RunResult r;
  r.method = cfg.method_name();
  const std::vector<SceneSample> data = target_set(bench, levels);
  ModelCheckpoint model = static_model;
  model.role = ModelRole::Live;
  train_supervised(model, data, cfg.offline.epochs, cfg.offline.supervised_lr, cfg.offline.decay_epoch,
                   cfg.pretrain.batch, cfg.model_seed + 17, r.method);
  EvalRecord rec;
  rec.eval = evaluate_levels(model, bench);
  r.evals.push_back(std::move(rec));
  AdaptState fin;
  fin.live = std::move(model);
  r.final_state = std::move(fin);
  return r;
}

RunResult run_eval_only(const Benchmark& bench, const ModelCheckpoint& model, const std::string& method) {
  RunResult r;
  r.method = method;
  EvalRecord rec;
  rec.eval = evaluate_levels(model, bench);
  r.evals.push_back(std::move(rec));
  return r;
}

const Evaluation& final_eval(const RunResult& r) {
  if (r.evals.empty()) throw ConfigError("run has no evaluation");
  return r.evals.back().eval;
}

double miou_after_segment(const RunResult& r, int segment, int level) {
  for (const EvalRecord& e : r.evals) {
    if (e.segment == segment) return e.eval.miou.at(static_cast<std::size_t>(level));
  }
  // single-evaluation runs report their final model everywhere
  if (std::none_of(r.evals.begin(), r.evals.end(), [](const EvalRecord& e) { return e.segment >= 0; })) {
    return final_eval(r).miou.at(static_cast<std::size_t>(level));
  }
  throw ConfigError("no evaluation after segment " + std::to_string(segment));
}

namespace {

TableRow pass_row(const RunResult& r, const DomainSchedule& schedule, Pass pass) {
  TableRow row;
  row.method = r.method;
  const std::vector<Pass> passes = segment_passes(schedule);
  for (std::size_t s = 0; s < schedule.segments.size(); ++s) {
    if (passes[s] != pass) continue;
    const int level = schedule.segments[s].level;
    row.levels.push_back(level);
    row.values.push_back(100.0 * miou_after_segment(r, static_cast<int>(s), level));
  }
  if (!row.values.empty()) {
    const HMean h = hmean(row.values);
    row.hmean = h.value;
    row.hmean_zero = h.had_zero;
  }
  return row;
}

}  // namespace

TableRow forward_row(const RunResult& r, const DomainSchedule& schedule) {
  return pass_row(r, schedule, Pass::Forward);
}

TableRow backward_row(const RunResult& r, const DomainSchedule& schedule) {
  return pass_row(r, schedule, Pass::Backward);
}

}  // namespace onda
