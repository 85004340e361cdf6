#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "intertwiner/buffer.hpp"
#include "intertwiner/loss.hpp"
#include "intertwiner/ot.hpp"

namespace intertwiner::harness {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Two Gaussian cluster families per class: a tight reliable set at the class
// mean and a less reliable set displaced toward the origin (signal
// attenuation) with wider spread.
struct SyntheticDatasetSpec {
  int n_classes = 10;
  int dim = 32;
  int reliable_per_class = 100;
  int less_reliable_per_class = 100;
  double reliable_stddev = 0.1;
  double less_reliable_stddev = 0.5;
  double offset_magnitude = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticDataset {
  SyntheticDatasetSpec spec;
  Matrix class_means;  // n_classes x dim
  std::vector<buffer::LabeledFeature> reliable;
  std::vector<buffer::LabeledFeature> less_reliable;

  Matrix reliable_features() const;
  Matrix less_reliable_features() const;
  std::vector<int> reliable_labels() const;
  std::vector<int> less_reliable_labels() const;
};

SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec);

// features CSV plus a labels sidecar with class_id,level rows.
void export_dataset(const SyntheticDataset& data,
                    const std::filesystem::path& features_reliable,
                    const std::filesystem::path& labels_reliable,
                    const std::filesystem::path& features_less,
                    const std::filesystem::path& labels_less);

enum class InputSource { kUseCurrent, kUseHigher, kUpsample, kUpsampleWithOt };

InputSource input_source_from_name(const std::string& name);
const char* input_source_name(InputSource m);

struct TrainConfig {
  int steps = 400;
  double learning_rate = 0.1;  // zero allowed: parameters stay frozen
  loss::LossConfig loss{loss::Metric::kL2, 1.0, /*mean_reduction=*/true};
  bool ot_enabled = true;
  ot::SinkhornConfig sinkhorn = ot::SinkhornConfig::fixed_budget();
  InputSource input_source = InputSource::kUpsampleWithOt;
  loss::FusionMode fusion = loss::FusionMode::kLinear;
  buffer::BufferConfig buffer{};
  bool intertwiner_enabled = true;   // control switch for the no-training baseline
  bool surrogate_loss = false;       // optional nearest-centroid classification anchor
  double surrogate_weight = 1.0;
  int critic_dim = 64;
  int ot_feature_dim = 8;
  int ot_panel = 48;    // per-step transport panel (training)
  int eval_panel = 64;  // fixed panel for the reported transport metric

  void validate() const;
};

struct CompactionMetrics {
  double intra_class_variance = 0.0;
  double centroid_gap = 0.0;
  double nearest_centroid_accuracy = 0.0;
};

// intra-class variance: mean squared distance to the own-class centroid.
// centroid_gap: minimum pairwise centroid distance. accuracy: fraction of
// samples whose nearest centroid is their own class (ties -> lowest class).
CompactionMetrics compaction_metrics(const Matrix& features,
                                     std::span<const int> labels);

struct ClassDelta {
  int class_id = 0;
  double initial_variance = 0.0;
  double final_variance = 0.0;
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
};

struct RunTrace {
  std::vector<double> intertwiner_loss;
  std::vector<double> ot_loss;
  std::vector<double> intra_class_variance;
  std::vector<double> centroid_gap;
  std::vector<double> accuracy;
  CompactionMetrics initial;
  // Means over the last quarter of steps; smooths the step-to-step wobble of
  // full-batch descent.
  CompactionMetrics final_smoothed;
  double final_intertwiner_loss = 0.0;
  double final_ot_loss = 0.0;
  std::vector<ClassDelta> per_class;

  std::string to_csv() const;
  nlohmann::json summary(std::uint64_t seed, const TrainConfig& cfg) const;
};

// Full-batch gradient descent of the make-up/critic pair against the class
// buffer (plus generator/transport critic in upsample_with_ot mode).
// Deterministic for a given (dataset, config, seed). Throws
// TrainingDivergedError when the loss leaves the finite range.
RunTrace train_intertwiner(const SyntheticDataset& data, const TrainConfig& cfg,
                           std::uint64_t seed);

struct GradientCheckReport {
  double max_rel_error_mimic_path = 0.0;      // makeup/critic (+ fusion head)
  double max_rel_error_transport_path = 0.0;  // generator + transport critic
};

// Central-difference check of every analytic gradient used by training, at
// initialization, against the step objective with plan/buffer/centroids
// frozen. Samples a deterministic subset of components per parameter block.
GradientCheckReport check_training_gradients(const SyntheticDataset& data,
                                             const TrainConfig& cfg,
                                             std::uint64_t seed,
                                             int components_per_block = 24);

}  // namespace intertwiner::harness
