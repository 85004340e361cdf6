#pragma once

#include <span>
#include <string>

#include <Eigen/Dense>

#include "intertwiner/buffer.hpp"
#include "intertwiner/errors.hpp"

namespace intertwiner::loss {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using buffer::ClassBuffer;
using buffer::LabeledFeature;

enum class Metric { kL1, kL2, kKl };

Metric metric_from_name(const std::string& name);
const char* metric_name(Metric m);

struct LossConfig {
  Metric metric = Metric::kL2;
  double factor = 1.0;
  // Eq.-style behaviour sums per-sample divergences; the mean switch is for
  // batch-size-independent training scales.
  bool mean_reduction = false;

  void validate() const;
};

struct LossResult {
  double value = 0.0;
  int samples_used = 0;
  int samples_skipped = 0;  // samples whose class has no representative yet
};

// sum_j b_j * log((b_j + delta)/(f_j + delta)), delta = 1e-8.
// Both arguments must lie componentwise in (0, 1).
double kl_term(const Vector& b, const Vector& f);

// Divergence of each sample against its own-class representative, scaled by
// cfg.factor. Uninitialized classes are skipped and counted.
LossResult intertwiner_loss(std::span<const LabeledFeature> samples,
                            const ClassBuffer& buf, const LossConfig& cfg);

enum class FusionMode { kSeparate, kNaiveAdd, kLinear };

FusionMode fusion_from_name(const std::string& name);
const char* fusion_name(FusionMode m);

// separate: detection features pass through untouched.
// naive_add: plain sum; reported to destabilize training when amplitudes
//            differ, provided for completeness.
// linear:    equal-weight midpoint (0.5/0.5).
Vector fuse_features(const Vector& f_critic, const Vector& f_detection,
                     FusionMode mode);

// Spatial-size-preserving affine map (d -> d).
struct MakeupMap {
  Matrix weight;
  Vector bias;

  static MakeupMap identity(int dim);
};

// Affine map to the critic dimension followed by a logistic squash, so
// outputs live strictly in (0, 1)^{d'}.
struct CriticMap {
  Matrix weight;
  Vector bias;
};

Vector makeup_apply(const MakeupMap& m, const Vector& f);
Vector critic_apply(const CriticMap& c, const Vector& f);

// Batched forms used by the training harness.
Matrix makeup_apply(const MakeupMap& m, const Matrix& rows);
Matrix critic_apply(const CriticMap& c, const Matrix& rows);

// l_inter + sum(ot_per_level) + l_standard. Rejects non-finite terms.
double total_loss(double l_inter, std::span<const double> ot_per_level,
                  double l_standard);

// Analytic gradients of the squared-distance mimic path
//   loss = reduce_j factor * || critic(makeup(x_j)) - target_j ||^2
// with targets held constant (detached buffer semantics).
struct MimicGradients {
  Matrix d_makeup_weight;
  Vector d_makeup_bias;
  Matrix d_critic_weight;
  Vector d_critic_bias;
};

// Returns the loss value; fills gradients when `grads` is non-null and the
// per-sample gradient w.r.t. the critic outputs when `d_outputs` is non-null.
double mimic_l2_loss(const Matrix& inputs, const Matrix& targets,
                     const MakeupMap& makeup, const CriticMap& critic,
                     const LossConfig& cfg, MimicGradients* grads,
                     Matrix* d_outputs = nullptr);

}  // namespace intertwiner::loss
