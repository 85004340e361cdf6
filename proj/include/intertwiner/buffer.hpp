#pragma once

#include <deque>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "intertwiner/errors.hpp"

namespace intertwiner::buffer {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct LabeledFeature {
  Vector feature;
  int class_id = 0;
  int level = 2;  // pyramid level the sample came from; recorded, not partitioning
};

enum class Strategy {
  kEqualWeightAllHistory,
  kDecayedWeight,
  kWindow,
};

struct BufferConfig {
  Strategy strategy = Strategy::kEqualWeightAllHistory;
  double lambda = 0.01;  // DecayedWeight only
  int window = 2000;     // Window only
  bool detached = true;  // representatives are constants in any gradient

  void validate() const;
};

// Per-class running representative of reliable-set features. Update rules:
//   EqualWeightAllHistory: rep += (f - rep)/(Z+1)
//   DecayedWeight:         rep += lambda*(f - rep), first sample sets rep = f
//   Window(K):             mean of the most recent min(Z, K) samples,
//                          evaluated with the same running-mean recurrence so
//                          Window(K >= total) matches EqualWeight bit for bit.
class ClassBuffer {
 public:
  ClassBuffer(int n_classes, int dim, BufferConfig cfg = {});

  void update(const LabeledFeature& sample);
  // Equivalent to sequential update in submission order. Any invalid sample
  // aborts the whole batch before any mutation.
  void batch_update(std::span<const LabeledFeature> samples);

  // nullopt while no sample of the class has been seen.
  std::optional<Vector> representative(int class_id) const;

  int n_classes() const { return static_cast<int>(counts_.size()); }
  int dim() const { return dim_; }
  long count(int class_id) const;
  const BufferConfig& config() const { return cfg_; }
  bool detached() const { return cfg_.detached; }

  nlohmann::json checkpoint() const;
  static ClassBuffer restore(const nlohmann::json& j);

 private:
  void validate_sample(const LabeledFeature& sample) const;
  void apply(const LabeledFeature& sample);

  BufferConfig cfg_;
  int dim_;
  Matrix reps_;                // n_classes x dim, zero rows while uninitialized
  std::vector<long> counts_;
  std::vector<std::deque<Vector>> windows_;  // Window strategy only
};

// One buffer per pyramid level except the top, which borrows the bottom
// level's buffer (the level with the most large proposals).
class PerLevelBuffers {
 public:
  PerLevelBuffers(int n_classes, int dim, int min_level, int max_level,
                  BufferConfig cfg = {});

  ClassBuffer& buffer_for_level(int level);
  const ClassBuffer& buffer_for_level(int level) const;
  void update(const LabeledFeature& sample);

  int min_level() const { return min_level_; }
  int max_level() const { return max_level_; }

 private:
  int min_level_;
  int max_level_;
  std::vector<ClassBuffer> buffers_;  // levels min..max-1; max aliases front
};

}  // namespace intertwiner::buffer
