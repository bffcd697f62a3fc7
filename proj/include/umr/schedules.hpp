#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "umr/errors.hpp"
#include "umr/losses.hpp"

namespace umr {

namespace detail {
inline void require_progress(const char* who, double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) {
    throw ContractError(std::string(who) + ": progress " + std::to_string(progress) + " outside [0, 1]");
  }
}
}  // namespace detail

/// tau_hard decays as tau0 * exp(-lambda * progress); tau_norm stays at tau0.
struct TemperatureSchedule {
  double tau0 = 0.05;
  double lambda = 0.2;
  MacMode mode = MacMode::mac;

  void validate() const {
    if (!(tau0 > 0.0)) throw ConfigurationError("tau0 must be positive");
    if (!(lambda >= 0.0)) throw ConfigurationError("lambda must be non-negative");
  }

  double tau_norm() const { return tau0; }
};

/// Rounded to three decimals, half away from zero. `progress` is current_epoch / total_epochs.
inline double tau_hard_at(const TemperatureSchedule& schedule, double progress) {
  detail::require_progress("tau_hard_at", progress);
  schedule.validate();
  return std::round(schedule.tau0 * std::exp(-schedule.lambda * progress) * 1000.0) / 1000.0;
}

enum class AlphaMode : std::uint8_t { fixed, dynamic, reverse };

inline std::string_view to_string(AlphaMode m) {
  switch (m) {
    case AlphaMode::fixed: return "fixed";
    case AlphaMode::dynamic: return "dynamic";
    case AlphaMode::reverse: return "reverse";
  }
  return "?";
}

inline AlphaMode parse_alpha_mode(std::string_view s) {
  if (s == "fixed") return AlphaMode::fixed;
  if (s == "dynamic") return AlphaMode::dynamic;
  if (s == "reverse") return AlphaMode::reverse;
  throw ConfigurationError("unknown alpha mode '" + std::string(s) + "' (expected fixed, dynamic or reverse)");
}

struct AlphaPair {
  double contrastive = 0.9;
  double distill = 0.1;
};

/// Contrastive/distill weights interpolated linearly between two endpoint pairs.
struct AlphaSchedule {
  AlphaMode mode = AlphaMode::fixed;
  AlphaPair start{0.9, 0.1};
  AlphaPair end{0.9, 0.1};

  static AlphaSchedule fixed(AlphaPair p = {0.9, 0.1}) { return {AlphaMode::fixed, p, p}; }
  static AlphaSchedule dynamic() { return {AlphaMode::dynamic, {0.5, 0.5}, {0.9, 0.1}}; }
  static AlphaSchedule reverse() { return {AlphaMode::reverse, {0.5, 0.5}, {0.1, 0.9}}; }

  static AlphaSchedule of(AlphaMode m) {
    switch (m) {
      case AlphaMode::dynamic: return dynamic();
      case AlphaMode::reverse: return reverse();
      default: return fixed();
    }
  }
};

inline AlphaPair alpha_at(const AlphaSchedule& schedule, double progress) {
  detail::require_progress("alpha_at", progress);
  if (schedule.mode == AlphaMode::fixed) return schedule.start;
  const double a1 = schedule.start.contrastive + (schedule.end.contrastive - schedule.start.contrastive) * progress;
  return {a1, 1.0 - a1};
}

}  // namespace umr
