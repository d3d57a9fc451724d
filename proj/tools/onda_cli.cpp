#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "onda/checkpoint_io.hpp"
#include "onda/harness.hpp"

namespace fs = std::filesystem;
using namespace onda;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/out";
  std::optional<std::string> policy;
  std::optional<Index> buffer;
  std::optional<std::string> schedule;
  std::string static_dir = "runs/pretrain";
  std::string name;
  std::string save_state;
  std::string from_state;
  std::vector<int> levels;
  bool entropy_replay = false;
  bool bn_adapt = false;
  bool quiet = false;
};

RunConfig make_config(const Options& o, RunMode mode) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  cfg.mode = mode;
  if (o.seed) cfg.model_seed = cfg.data_seed = cfg.buffer_seed = *o.seed;
  if (o.policy) cfg.policy.kind = policy_from_string(*o.policy);
  if (o.buffer) cfg.buffer_capacity = *o.buffer;
  if (o.schedule) cfg.schedule = *o.schedule;
  if (!o.name.empty()) cfg.name = o.name;
  if (!o.levels.empty()) cfg.offline.levels = o.levels;
  if (mode == RunMode::EntropyMin) cfg.entropy_replay = o.entropy_replay;
  cfg.validate();
  return cfg;
}

struct Loaded {
  ModelCheckpoint model;
  PrototypeBank bank;
  Calibration calibration;
};

Loaded load_static(const Options& o, const RunConfig& cfg) {
  const fs::path dir(o.static_dir);
  CheckpointFile f = load_checkpoint((dir / "static.onda").string(), &cfg.arch);
  if (!f.bank) throw FormatError("static checkpoint lacks a prototype bank");
  Loaded l{std::move(f.model), std::move(*f.bank), {}};
  std::ifstream in(dir / "calibration.json");
  if (!in) throw ConfigError("missing calibration.json in " + dir.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  l.calibration.t_c = j.at("t_c").get<double>();
  return l;
}

// live.onda carries the prototype bank; the static model always comes from --static.
void save_state(const fs::path& dir, const AdaptState& s) {
  fs::create_directories(dir);
  save_checkpoint((dir / "live.onda").string(), s.live, &s.bank);
  save_checkpoint((dir / "momentum.onda").string(), s.momentum);
  save_checkpoint((dir / "dynamic.onda").string(), s.dynamic);
}

AdaptState load_state(const fs::path& dir, const ModelCheckpoint& static_model, const ArchConfig& arch) {
  CheckpointFile live = load_checkpoint((dir / "live.onda").string(), &arch);
  if (!live.bank) throw FormatError("adapted state lacks a prototype bank");
  AdaptState s;
  s.live = std::move(live.model);
  s.bank = std::move(*live.bank);
  s.momentum = load_checkpoint((dir / "momentum.onda").string(), &arch).model;
  s.dynamic = load_checkpoint((dir / "dynamic.onda").string(), &arch).model;
  s.static_model = static_model;
  return s;
}

void print_rows(const RunResult& r, const DomainSchedule& schedule) {
  for (const TableRow& row : {forward_row(r, schedule), backward_row(r, schedule)}) {
    if (row.values.empty()) continue;
    std::cout << row.method;
    for (std::size_t i = 0; i < row.values.size(); ++i) std::cout << "  L" << row.levels[i] << " " << row.values[i];
    std::cout << "  h-mean " << row.hmean << "\n";
  }
}

int run(const std::string& cmd, const Options& o) {
  if (!o.quiet) progress_sink() = [](const std::string& s) { std::cerr << s << "\n"; };

  if (cmd == "report") {
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(o.out)) {
      if (e.is_directory() && fs::exists(e.path() / "results_forward.csv")) dirs.push_back(e.path().string());
    }
    std::sort(dirs.begin(), dirs.end());
    const Report rep = report(dirs);
    std::ofstream(fs::path(o.out) / "report_forward.csv") << rep.forward_csv;
    std::ofstream(fs::path(o.out) / "report_backward.csv") << rep.backward_csv;
    std::ofstream(fs::path(o.out) / "series.csv") << rep.series_csv;
    std::ofstream(fs::path(o.out) / "report.txt") << rep.text;
    std::cout << rep.text;
    return 0;
  }

  const RunMode mode = cmd == "pretrain"     ? RunMode::Pretrain
                       : cmd == "adapt"      ? RunMode::OnDA
                       : cmd == "offline"    ? RunMode::Offline
                       : cmd == "supervised" ? RunMode::Supervised
                       : cmd == "source"     ? RunMode::EvalOnly
                       : o.bn_adapt          ? RunMode::BNAdapt
                                             : RunMode::EntropyMin;
  RunConfig cfg = make_config(o, mode);
  const Benchmark bench = make_streams(load_schedule(cfg.schedule), cfg.data_seed, cfg.bench);
  fs::create_directories(o.out);

  if (mode == RunMode::Pretrain) {
    const Pretrained p = pretrain(cfg, bench);
    save_checkpoint((fs::path(o.out) / "static.onda").string(), p.model, &p.bank);
    nlohmann::json j{{"t_c", p.calibration.t_c}, {"source_miou", p.source_miou}, {"source_mu", p.calibration.source_mu}};
    std::ofstream(fs::path(o.out) / "calibration.json") << j.dump(2) << "\n";
    std::ofstream(fs::path(o.out) / "config.json") << config_to_json(cfg) << "\n";
    std::cout << "source mIoU " << 100.0 * p.source_miou << "  T_c " << p.calibration.t_c << "\n";
    return 0;
  }

  const Loaded st = load_static(o, cfg);
  if (cfg.calibrate_thresholds) apply_calibration(cfg.policy, st.calibration, cfg.pretrain);
  RunResult r;
  switch (mode) {
    case RunMode::OnDA:
      r = run_onda(cfg, bench,
                   o.from_state.empty() ? AdaptState::from_static(st.model, st.bank)
                                        : load_state(o.from_state, st.model, cfg.arch));
      if (!o.save_state.empty()) save_state(o.save_state, *r.final_state);
      break;
    case RunMode::BNAdapt:
    case RunMode::EntropyMin: r = run_baseline(cfg, bench, st.model); break;
    case RunMode::Offline: r = run_offline(cfg, bench, st.model, st.bank); break;
    case RunMode::Supervised: r = run_supervised(cfg, bench, st.model); break;
    case RunMode::EvalOnly: r = run_eval_only(bench, st.model, cfg.method_name()); break;
    case RunMode::Pretrain: break;
  }
  write_run(o.out, cfg, r, bench);
  print_rows(r, bench.schedule);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  onda::retain_heap();
  CLI::App app{"Online domain adaptation experiments on a procedural storm benchmark"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Model, data and buffer seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--schedule", o.schedule, "Schedule preset or JSON file");
    sub->add_option("--name", o.name, "Method label in result tables");
    sub->add_flag("--quiet", o.quiet, "No progress output");
  };
  auto uses_static = [&](CLI::App* sub) {
    sub->add_option("--static", o.static_dir, "Directory written by pretrain");
    sub->add_option("--buffer", o.buffer, "Replay buffer capacity");
  };
  CLI::App* pre = app.add_subcommand("pretrain", "Train the source model, prototypes and thresholds");
  common(pre);
  CLI::App* adapt = app.add_subcommand("adapt", "Online adaptation on a schedule");
  common(adapt);
  uses_static(adapt);
  adapt->add_option("--policy", o.policy, "cs, scs, cds, hs, static or dynamic")
      ->check(CLI::IsMember({"cs", "scs", "cds", "hs", "static", "dynamic"}));
  adapt->add_option("--save-state", o.save_state, "Write the final adapted models to this directory");
  adapt->add_option("--from-state", o.from_state, "Start from a directory written by --save-state")
      ->check(CLI::ExistingDirectory);
  CLI::App* base = app.add_subcommand("baseline", "BN adaptation or entropy minimization");
  common(base);
  uses_static(base);
  base->add_flag("--bn-adapt", o.bn_adapt, "Update BN statistics only");
  base->add_flag("--replay", o.entropy_replay, "Add the replay task loss to entropy minimization");
  CLI::App* off = app.add_subcommand("offline", "Offline adaptation on full target sets");
  common(off);
  uses_static(off);
  off->add_option("--levels", o.levels, "Target levels (default 1..)");
  CLI::App* sup = app.add_subcommand("supervised", "Supervised training on labeled target sets");
  common(sup);
  uses_static(sup);
  sup->add_option("--levels", o.levels, "Target levels (default all)");
  CLI::App* src = app.add_subcommand("source", "Evaluate the static model");
  common(src);
  uses_static(src);
  CLI::App* rep = app.add_subcommand("report", "Aggregate run directories below --out");
  rep->add_option("--out", o.out, "Directory holding run directories")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    return run(app.get_subcommands().front()->get_name(), o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
