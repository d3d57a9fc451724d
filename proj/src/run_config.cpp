#include <fstream>
#include <sstream>

#include <json.hpp>

#include "onda/harness.hpp"

namespace onda {

NLOHMANN_JSON_SERIALIZE_ENUM(RunMode, {{RunMode::Pretrain, "pretrain"},
                                       {RunMode::OnDA, "onda"},
                                       {RunMode::BNAdapt, "bn_adapt"},
                                       {RunMode::EntropyMin, "entropy_min"},
                                       {RunMode::Offline, "offline"},
                                       {RunMode::Supervised, "supervised"},
                                       {RunMode::EvalOnly, "eval_only"}})

NLOHMANN_JSON_SERIALIZE_ENUM(PolicyKind, {{PolicyKind::CS, "cs"},
                                          {PolicyKind::SCS, "scs"},
                                          {PolicyKind::CDS, "cds"},
                                          {PolicyKind::HS, "hs"},
                                          {PolicyKind::StaticOnly, "static"},
                                          {PolicyKind::DynamicOnly, "dynamic"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ArchConfig, in_channels, hidden_channels, feature_dim, num_classes,
                                                height, width, kernel_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BenchConfig, height, width, texture_std, source_train, val_per_level,
                                                stream_batch, offline_per_level)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Hyperparams, alpha, beta, gamma, lr_online, batch_target, batch_replay,
                                                ema_momentum, proto_lambda, prob_floor, reverse_label_floor,
                                                update_proto_variance)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PolicyConfig, kind, t_c, t_s, t_d, t_ca, t_cb)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DetectorConfig, window, threshold, debounce, cooldown, normalized,
                                                history_cap)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainConfig, epochs, lr, decay_epoch, batch, calibration_batches,
                                                calibration_percentile, scs_gap, hs_gap)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OfflineConfig, epochs, lr, supervised_lr, decay_epoch, levels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, name, mode, arch, bench, hp, policy, detector,
                                                detector_enabled, calibrate_thresholds, buffer_capacity, schedule,
                                                model_seed, data_seed, buffer_seed, entropy_replay, eval_interval,
                                                pretrain, offline)

std::string to_string(RunMode mode) { return nlohmann::json(mode).get<std::string>(); }

RunMode run_mode_from_string(const std::string& name) {
  for (RunMode m : {RunMode::Pretrain, RunMode::OnDA, RunMode::BNAdapt, RunMode::EntropyMin, RunMode::Offline,
                    RunMode::Supervised, RunMode::EvalOnly}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown run mode '" + name + "'");
}

void RunConfig::validate() const {
  arch.validate();
  bench.validate();
  hp.validate();
  policy.validate();
  detector.validate();
  if (arch.height != bench.height || arch.width != bench.width) throw ConfigError("arch and benchmark image sizes differ");
  if (arch.num_classes != kSceneClasses) throw ConfigError("arch num_classes must match the benchmark");
  if (buffer_capacity < 0) throw ConfigError("buffer capacity must be non-negative");
  if (hp.batch_target != bench.stream_batch) throw ConfigError("batch_target must equal the stream batch size");
  if (pretrain.epochs <= 0 || pretrain.batch <= 0 || pretrain.lr < 0) throw ConfigError("invalid pretrain settings");
  if (pretrain.calibration_batches <= detector.window) throw ConfigError("calibration stream shorter than the window");
  if (offline.epochs <= 0 || offline.lr < 0 || offline.supervised_lr < 0) throw ConfigError("invalid offline settings");
  if (eval_interval < 0) throw ConfigError("eval_interval must be non-negative");
}

std::string RunConfig::method_name() const {
  if (!name.empty()) return name;
  switch (mode) {
    case RunMode::OnDA: {
      std::string s = "OnDA-";
      switch (policy.kind) {
        case PolicyKind::CS: s += "CS"; break;
        case PolicyKind::SCS: s += "SCS"; break;
        case PolicyKind::CDS: s += "CDS"; break;
        case PolicyKind::HS: s += "HS"; break;
        case PolicyKind::StaticOnly: s += "Static"; break;
        case PolicyKind::DynamicOnly: s += "Dynamic"; break;
      }
      if (buffer_capacity != 500) s += "-RB" + std::to_string(buffer_capacity);
      if (schedule == "one_pass") s += "-OnePass";
      return s;
    }
    case RunMode::BNAdapt: return "BN-Adapt";
    case RunMode::EntropyMin: return entropy_replay ? "EntropyMin+RB" : "EntropyMin";
    case RunMode::Offline: return "Offline";
    case RunMode::Supervised: return "Supervised";
    case RunMode::EvalOnly: return "Source";
    case RunMode::Pretrain: return "Pretrain";
  }
  return "run";
}

std::string config_to_json(const RunConfig& cfg) { return nlohmann::json(cfg).dump(2); }

RunConfig config_from_json(const std::string& text) {
  try {
    RunConfig cfg = nlohmann::json::parse(text).get<RunConfig>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("run config: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace onda
