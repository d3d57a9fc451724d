#include "onda/shift_detector.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "onda/error.hpp"

namespace onda {

void DetectorConfig::validate() const {
  if (window < 2) throw ConfigError("detector window must be at least 2");
  if (!(threshold >= 0.0)) throw ConfigError("detector threshold must be non-negative");
  if (debounce < 1) throw ConfigError("detector debounce must be at least 1");
}

std::string to_string(Direction d) { return d == Direction::Forward ? "forward" : "backward"; }

std::vector<double> hamming_window(int n) {
  if (n < 2) throw ConfigError("hamming window needs n >= 2");
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  }
  return w;
}

ShiftDetector::ShiftDetector(DetectorConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  weights_ = hamming_window(cfg_.window);
  weight_sum_ = std::accumulate(weights_.begin(), weights_.end(), 0.0);
}

double ShiftDetector::window_mean() const {
  double acc = 0.0, used = 0.0;
  for (std::size_t i = 0; i < window_.size(); ++i) {
    acc += weights_[i] * window_[i];
    used += weights_[i];
  }
  const double full = cfg_.normalized ? acc / used : acc / cfg_.window;
  if (cfg_.normalized || window_.size() == weights_.size()) return full;
  return full * weight_sum_ / used;
}

DetectorOutput ShiftDetector::push(double z) {
  if (!std::isfinite(z)) throw NonFiniteError("detector: non-finite confidence");
  ++t_;
  window_.push_front(z);
  if (window_.size() > weights_.size()) window_.pop_back();

  DetectorOutput out;
  out.mu = window_mean();
  out.warm = window_.size() == weights_.size();
  if (t_ > cfg_.window + 1) {
    const double d = out.mu - mu_prev_;
    out.indicator = d > cfg_.threshold ? 1 : (d < -cfg_.threshold ? -1 : 0);
  }
  mu_prev_ = out.mu;

  if (out.indicator == 0) {
    run_sign_ = 0;
    run_len_ = 0;
  } else if (out.indicator == run_sign_) {
    ++run_len_;
  } else {
    run_sign_ = out.indicator;
    run_len_ = 1;
  }

  if (run_len_ == cfg_.debounce && t_ >= quiet_until_) {
    SwitchEvent ev;
    ev.t = t_;
    ev.direction = run_sign_ < 0 ? Direction::Forward : Direction::Backward;
    ev.mu = out.mu;
    ev.z = z;
    out.event = ev;
    run_sign_ = 0;
    run_len_ = 0;
    quiet_until_ = t_ + cfg_.effective_cooldown() + 1;
  }

  history_.push_back({t_, z, out.mu, out.indicator});
  if (history_.size() > cfg_.history_cap) history_.pop_front();
  return out;
}

}  // namespace onda
