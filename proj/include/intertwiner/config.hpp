#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "intertwiner/assign.hpp"
#include "intertwiner/harness.hpp"

namespace intertwiner::config {

// Experiment document with sections {sinkhorn, loss, buffer, assignment,
// harness}. Unknown keys are rejected; every violation is reported in one
// pass. Defaults follow the fixed-budget presets (epsilon 0.1, 10 iterations,
// a0 4, base 224, l2 factor 1, equal-weight detached buffer).
struct ExperimentConfig {
  ot::SinkhornConfig sinkhorn = ot::SinkhornConfig::fixed_budget();
  loss::LossConfig loss{loss::Metric::kL2, 1.0, /*mean_reduction=*/true};
  buffer::BufferConfig buffer{};
  assign::AssignmentConfig assignment{};
  harness::SyntheticDatasetSpec dataset{};
  harness::TrainConfig harness{};
  bool sweep_input_sources = false;  // harness.input_source: "sweep"

  static ExperimentConfig from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

}  // namespace intertwiner::config
