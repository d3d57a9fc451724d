#include "onda/switch_policy.hpp"

#include <algorithm>

#include "onda/error.hpp"

namespace onda {

std::string to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::CS: return "cs";
    case PolicyKind::SCS: return "scs";
    case PolicyKind::CDS: return "cds";
    case PolicyKind::HS: return "hs";
    case PolicyKind::StaticOnly: return "static";
    case PolicyKind::DynamicOnly: return "dynamic";
  }
  return "unknown";
}

PolicyKind policy_from_string(const std::string& name) {
  for (PolicyKind k : {PolicyKind::CS, PolicyKind::SCS, PolicyKind::CDS, PolicyKind::HS, PolicyKind::StaticOnly,
                       PolicyKind::DynamicOnly}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown policy '" + name + "'");
}

void PolicyConfig::validate() const {
  if (kind == PolicyKind::SCS && !(t_s > t_d)) throw ConfigError("SCS requires T_s > T_d");
  if (kind == PolicyKind::HS && !(t_ca > t_cb)) throw ConfigError("HS requires T_cA > T_cB");
}

double delta_cs(double mu, const PolicyConfig& cfg) { return mu > cfg.t_c ? 1.0 : 0.0; }

double delta_scs(double mu, const PolicyConfig& cfg) {
  if (!(cfg.t_s > cfg.t_d)) throw ConfigError("SCS requires T_s > T_d");
  return std::clamp((mu - cfg.t_d) / (cfg.t_s - cfg.t_d), 0.0, 1.0);
}

double delta_cds(int indicator, PolicyState& state) {
  if (indicator > 0) state.cds_prev = 1.0;
  if (indicator < 0) state.cds_prev = 0.0;
  return state.cds_prev;
}

double delta_hs(double mu, int indicator, PolicyState& state, const PolicyConfig& cfg) {
  if (!(cfg.t_ca > cfg.t_cb)) throw ConfigError("HS requires T_cA > T_cB");
  const double cds = delta_cds(indicator, state);
  if (mu > cfg.t_ca) return 1.0;
  if (mu < cfg.t_cb) return 0.0;
  return cds;
}

SwitchPolicy::SwitchPolicy(PolicyConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double SwitchPolicy::update(double mu, int indicator) {
  double delta = 1.0;
  switch (cfg_.kind) {
    case PolicyKind::CS: delta = delta_cs(mu, cfg_); break;
    case PolicyKind::SCS: delta = delta_scs(mu, cfg_); break;
    case PolicyKind::CDS: delta = delta_cds(indicator, state_); break;
    case PolicyKind::HS: delta = delta_hs(mu, indicator, state_, cfg_); break;
    case PolicyKind::StaticOnly: delta = 1.0; break;
    case PolicyKind::DynamicOnly: delta = 0.0; break;
  }
  state_.delta_prev = delta;
  return delta;
}

void on_event(const SwitchEvent& event, const ModelCheckpoint& live, ModelCheckpoint& dynamic,
              std::vector<SwitchEvent>& log) {
  promote_dynamic(dynamic, live);
  log.push_back(event);
}

}  // namespace onda
