#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace onda {

struct DetectorConfig {
  int window = 140;           // n
  double threshold = 3.5e-5;  // T_cd
  int debounce = 15;          // consecutive identical raw indicators per event
  int cooldown = -1;          // batches without events after one fires; -1 means `window`
  bool normalized = false;    // divide by sum(w) instead of n
  std::size_t history_cap = 100000;

  void validate() const;
  int effective_cooldown() const { return cooldown < 0 ? window : cooldown; }
};

enum class Direction { Forward, Backward };

std::string to_string(Direction d);

/// Validated domain change. Forward: towards harder domains (confidence
/// falling, raw indicator -1); Backward: towards the source (+1).
struct SwitchEvent {
  long t = 0;
  Direction direction = Direction::Forward;
  double mu = 0.0;
  double z = 0.0;

  int sign() const { return direction == Direction::Forward ? -1 : 1; }
};

struct DetectorSample {
  long t;
  double z;
  double mu;
  int indicator;
};

struct DetectorOutput {
  int indicator = 0;  // raw I_t
  double mu = 0.0;
  bool warm = false;  // window filled
  std::optional<SwitchEvent> event;
};

/// w[i] = 0.54 - 0.46 cos(2 pi i / (n - 1)).
std::vector<double> hamming_window(int n);

/// Streaming change detector over per-batch static-model confidences.
///
/// mu_t = (1/n) sum_i w[i] z_{t-i} over a ring of the last n values. Before
/// the window is full the partial sum is rescaled by sum(w)/sum(w_used) so mu
/// keeps the full-window scale. The raw indicator compares mu_t - mu_{t-1}
/// with +-T_cd and is forced to 0 for t <= n + 1. An event fires when a run
/// of identical nonzero raw indicators reaches `debounce`; the run counter
/// then resets and no further event fires for `cooldown` batches. A run that
/// reaches `debounce` inside the cooldown is dropped, so one monotone drift
/// yields one event.
class ShiftDetector {
 public:
  explicit ShiftDetector(DetectorConfig cfg = {});

  DetectorOutput push(double z);

  long t() const { return t_; }
  const DetectorConfig& config() const { return cfg_; }
  const std::deque<DetectorSample>& history() const { return history_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  double window_mean() const;

  DetectorConfig cfg_;
  std::vector<double> weights_;
  double weight_sum_ = 0.0;
  std::deque<double> window_;  // front = most recent
  long t_ = 0;
  double mu_prev_ = 0.0;
  int run_sign_ = 0;
  int run_len_ = 0;
  long quiet_until_ = 0;
  std::deque<DetectorSample> history_;
};

}  // namespace onda
