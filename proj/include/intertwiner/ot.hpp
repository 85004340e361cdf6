#pragma once

#include <filesystem>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "intertwiner/errors.hpp"

namespace intertwiner::ot {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// A set of C feature samples (rows) of dimension k with cached Euclidean
// row norms. Zero rows are rejected at construction: cosine geometry is
// undefined for them.
class FeatureMatrix {
 public:
  explicit FeatureMatrix(Matrix data);

  const Matrix& data() const { return data_; }
  const Vector& row_norms() const { return row_norms_; }
  Eigen::Index samples() const { return data_.rows(); }
  Eigen::Index dims() const { return data_.cols(); }

  static FeatureMatrix from_csv(const std::filesystem::path& path);
  void to_csv(const std::filesystem::path& path) const;

 private:
  Matrix data_;
  Vector row_norms_;
};

// Pairwise cosine-distance matrix, entries in [0, 2].
struct GroundCost {
  Matrix q;
};

struct SinkhornConfig {
  double epsilon = 0.1;
  int max_iters = 200;
  double tolerance = 1e-9;  // L-inf marginal residual; 0 disables early stop

  // The fixed-budget setting: epsilon 0.1, 10 iterations, no early stop.
  static SinkhornConfig fixed_budget() { return {0.1, 10, 0.0}; }

  void validate() const;
};

// Scaled coupling proxy P = diag(b) * K * diag(a) with uniform marginals
// 1/C on rows and columns. `a` scales columns, `b` rows. In the log-domain
// regime the stored scalings are clamped to the smallest normal double;
// `p` itself is always exact.
struct TransportPlan {
  Matrix p;
  Vector a;
  Vector b;
  int iters_run = 0;
  double residual = 0.0;

  nlohmann::json diagnostics(double epsilon, double divergence) const;
};

// 1 - u.v/(|u||v|), clamped to [0, 2]. Bit-identical inputs return exactly 0.
double cosine_distance(const Eigen::Ref<const Vector>& u,
                       const Eigen::Ref<const Vector>& v);

GroundCost ground_cost(const FeatureMatrix& a, const FeatureMatrix& b);

// Alternating diagonal scaling of the Gibbs kernel exp(-Q/eps), uniform
// marginals both sides. Iterates move to the log domain when the kernel
// underflows below 1e-300. Deterministic for identical inputs.
TransportPlan sinkhorn_plan(const GroundCost& cost, const SinkhornConfig& cfg);

// <Q, P> for a given plan; the cost-side value the loss consumes.
double plan_cost(const GroundCost& cost, const Matrix& plan);

double sinkhorn_divergence(const GroundCost& cost, const SinkhornConfig& cfg);
double sinkhorn_divergence(const FeatureMatrix& a, const FeatureMatrix& b,
                           const SinkhornConfig& cfg);

// 2 W(A,B) - W(A,A) - W(B,B).
double biased_sinkhorn(const FeatureMatrix& a, const FeatureMatrix& b,
                       const SinkhornConfig& cfg);

// Brute force over all C! permutation couplings with uniform marginals:
// min over sigma of (1/C) sum_x Q(x, sigma(x)). Limited to C <= 8.
double exact_ot_uniform(const GroundCost& cost);

struct FeatureGradients {
  Matrix wrt_a;
  Matrix wrt_b;
};

// d<Q,P>/d(features) with the plan held fixed, chained through the
// analytic cosine-distance derivative per row.
FeatureGradients cost_gradient_through_cosine(const FeatureMatrix& a,
                                              const FeatureMatrix& b,
                                              const Matrix& plan);

// Envelope gradient of the divergence: solves the plan, then applies
// cost_gradient_through_cosine with that plan fixed.
FeatureGradients ot_gradient_wrt_features(const FeatureMatrix& a,
                                          const FeatureMatrix& b,
                                          const SinkhornConfig& cfg);

}  // namespace intertwiner::ot
