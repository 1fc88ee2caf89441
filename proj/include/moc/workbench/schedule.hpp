#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "moc/errors.hpp"

namespace moc::workbench {

struct ScheduleStep {
  std::size_t chunk_target_size = 0;
  std::size_t k = 0;
  friend bool operator==(const ScheduleStep&, const ScheduleStep&) = default;
};

/// Progressive chunk-size schedule; sizes must strictly decrease.
struct Schedule {
  std::string preset;
  std::vector<ScheduleStep> steps;

  void validate() const {
    require(!steps.empty(), ErrorCode::InvalidArgument, "schedule has no steps");
    for (std::size_t n = 0; n < steps.size(); ++n) {
      require(steps[n].chunk_target_size >= 1 && steps[n].k >= 1, ErrorCode::InvalidArgument,
              "schedule step " + std::to_string(n) + " needs positive chunk size and k");
      require(n == 0 || steps[n].chunk_target_size < steps[n - 1].chunk_target_size, ErrorCode::InvalidArgument,
              "schedule chunk sizes must strictly decrease");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json steps_json = nlohmann::json::array();
    for (const ScheduleStep& s : steps) steps_json.push_back({{"chunk_target_size", s.chunk_target_size}, {"k", s.k}});
    return {{"preset", preset}, {"steps", steps_json}};
  }
};

/// Presets: "paper-multishot" (10240 -> 1280 halving, k = 5),
/// "paper-singleshot" (256, k = 3), and "custom" built from the given sizes
/// and k.
inline Schedule make_schedule(const std::string& preset, const std::vector<std::size_t>& custom_sizes = {},
                              std::size_t custom_k = 5) {
  Schedule s{preset, {}};
  if (preset == "paper-multishot") {
    s.steps = {{10240, 5}, {5120, 5}, {2560, 5}, {1280, 5}};
  } else if (preset == "paper-singleshot") {
    s.steps = {{256, 3}};
  } else if (preset == "custom") {
    for (std::size_t size : custom_sizes) s.steps.push_back({size, custom_k});
  } else {
    fail(ErrorCode::UnknownPreset, "unknown schedule preset '" + preset + "'");
  }
  s.validate();
  return s;
}

}  // namespace moc::workbench
