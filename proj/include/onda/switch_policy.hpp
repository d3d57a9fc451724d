#pragma once

#include <string>
#include <vector>

#include "onda/segnet.hpp"
#include "onda/shift_detector.hpp"

namespace onda {

enum class PolicyKind { CS, SCS, CDS, HS, StaticOnly, DynamicOnly };

std::string to_string(PolicyKind kind);
PolicyKind policy_from_string(const std::string& name);

struct PolicyConfig {
  PolicyKind kind = PolicyKind::HS;
  double t_c = 0.5;    // CS
  double t_s = 0.5;    // SCS, static-only above
  double t_d = 0.45;   // SCS, dynamic-only below
  double t_ca = 0.5;   // HS upper
  double t_cb = 0.42;  // HS lower

  void validate() const;
};

struct PolicyState {
  double delta_prev = 1.0;
  double cds_prev = 1.0;
};

/// 1 if mu > T_c else 0.
double delta_cs(double mu, const PolicyConfig& cfg);
/// clamp((mu - T_d) / (T_s - T_d), 0, 1).
double delta_scs(double mu, const PolicyConfig& cfg);
/// 1 on I > 0, 0 on I < 0, previous value on I = 0. Updates state.cds_prev.
double delta_cds(int indicator, PolicyState& state);
/// 1 above T_cA, 0 below T_cB, CDS inside the band. The CDS recursion is
/// advanced on every call.
double delta_hs(double mu, int indicator, PolicyState& state, const PolicyConfig& cfg);

/// Stateful delta_t for any policy kind. `indicator` is the validated event
/// sign of this batch (0 when no event fired).
class SwitchPolicy {
 public:
  explicit SwitchPolicy(PolicyConfig cfg);

  double update(double mu, int indicator);

  const PolicyConfig& config() const { return cfg_; }
  const PolicyState& state() const { return state_; }

 private:
  PolicyConfig cfg_;
  PolicyState state_;
};

/// Promotes the live model to the dynamic checkpoint and logs the event.
void on_event(const SwitchEvent& event, const ModelCheckpoint& live, ModelCheckpoint& dynamic,
              std::vector<SwitchEvent>& log);

}  // namespace onda
