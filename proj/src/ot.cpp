#include "intertwiner/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "intertwiner/io.hpp"

namespace intertwiner::ot {

namespace {

constexpr double kUnderflowGuard = 1e-300;

bool rows_bit_equal(const Eigen::Ref<const Vector>& u,
                    const Eigen::Ref<const Vector>& v) {
  if (u.size() != v.size()) return false;
  for (Eigen::Index i = 0; i < u.size(); ++i)
    if (u(i) != v(i)) return false;
  return true;
}

// log(sum(exp(x))) over a vector expression, stable against -inf columns.
double log_sum_exp(const Vector& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) acc += std::exp(x(i) - m);
  return m + std::log(acc);
}

}  // namespace

FeatureMatrix::FeatureMatrix(Matrix data) : data_(std::move(data)) {
  if (data_.rows() < 1 || data_.cols() < 1)
    throw InvalidInputError("feature matrix needs at least one row and one column");
  if (!data_.allFinite())
    throw InvalidInputError("feature matrix contains non-finite entries");
  row_norms_ = data_.rowwise().norm();
  for (Eigen::Index r = 0; r < row_norms_.size(); ++r) {
    if (row_norms_(r) <= 0.0)
      throw InvalidInputError("feature matrix row " + std::to_string(r) +
                              " has zero norm");
  }
}

FeatureMatrix FeatureMatrix::from_csv(const std::filesystem::path& path) {
  return FeatureMatrix(read_matrix_csv(path));
}

void FeatureMatrix::to_csv(const std::filesystem::path& path) const {
  write_matrix_csv(path, data_);
}

void SinkhornConfig::validate() const {
  if (!(epsilon > 0.0)) throw InvalidInputError("sinkhorn epsilon must be > 0");
  if (max_iters < 1) throw InvalidInputError("sinkhorn max_iters must be >= 1");
  if (tolerance < 0.0) throw InvalidInputError("sinkhorn tolerance must be >= 0");
}

nlohmann::json TransportPlan::diagnostics(double epsilon, double divergence) const {
  return nlohmann::json{{"epsilon", epsilon},
                        {"iters_run", iters_run},
                        {"residual", residual},
                        {"divergence", divergence}};
}

double cosine_distance(const Eigen::Ref<const Vector>& u,
                       const Eigen::Ref<const Vector>& v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_distance: vectors of size " +
                         std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu <= 0.0 || nv <= 0.0)
    throw InvalidInputError("cosine_distance: zero-norm input");
  if (rows_bit_equal(u, v)) return 0.0;
  const double d = 1.0 - u.dot(v) / (nu * nv);
  return std::clamp(d, 0.0, 2.0);
}

GroundCost ground_cost(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.samples() != b.samples())
    throw DimensionError("ground_cost: sample counts differ (" +
                         std::to_string(a.samples()) + " vs " +
                         std::to_string(b.samples()) + ")");
  if (a.dims() != b.dims())
    throw DimensionError("ground_cost: feature dims differ (" +
                         std::to_string(a.dims()) + " vs " +
                         std::to_string(b.dims()) + ")");
  const Eigen::Index c = a.samples();
  Matrix q(c, c);
  for (Eigen::Index x = 0; x < c; ++x) {
    for (Eigen::Index y = 0; y < c; ++y) {
      if (rows_bit_equal(a.data().row(x).transpose(), b.data().row(y).transpose())) {
        q(x, y) = 0.0;
        continue;
      }
      const double sim =
          a.data().row(x).dot(b.data().row(y)) / (a.row_norms()(x) * b.row_norms()(y));
      q(x, y) = std::clamp(1.0 - sim, 0.0, 2.0);
    }
  }
  return GroundCost{std::move(q)};
}

namespace {

TransportPlan sinkhorn_plain(const Matrix& k, double mu, double tolerance,
                             int max_iters) {
  const Eigen::Index c = k.rows();
  Vector u = Vector::Constant(c, mu);  // row scaling (paper's b)
  Vector v = Vector::Constant(c, mu);  // column scaling (paper's a)
  int iters = 0;
  double residual = std::numeric_limits<double>::infinity();
  for (iters = 1; iters <= max_iters; ++iters) {
    const Vector kt_u = k.transpose() * u;
    for (Eigen::Index i = 0; i < c; ++i) {
      if (kt_u(i) <= 0.0)
        throw NumericError("sinkhorn: kernel column " + std::to_string(i) +
                           " underflowed to zero (epsilon too small for cost scale)");
      v(i) = mu / kt_u(i);
    }
    const Vector k_v = k * v;
    for (Eigen::Index i = 0; i < c; ++i) {
      if (k_v(i) <= 0.0)
        throw NumericError("sinkhorn: kernel row " + std::to_string(i) +
                           " underflowed to zero (epsilon too small for cost scale)");
      u(i) = mu / k_v(i);
    }
    const Vector col = v.array() * (k.transpose() * u).array();
    const Vector row = u.array() * (k * v).array();
    residual = std::max((col.array() - mu).abs().maxCoeff(),
                        (row.array() - mu).abs().maxCoeff());
    if (tolerance > 0.0 && residual <= tolerance) break;
  }
  iters = std::min(iters, max_iters);
  TransportPlan plan;
  plan.p = u.asDiagonal() * k * v.asDiagonal();
  plan.a = v;
  plan.b = u;
  plan.iters_run = iters;
  plan.residual = residual;
  return plan;
}

TransportPlan sinkhorn_log(const Matrix& logits, double mu, double tolerance,
                           int max_iters) {
  const Eigen::Index c = logits.rows();
  const double log_mu = std::log(mu);
  for (Eigen::Index x = 0; x < c; ++x) {
    if (!std::isfinite(logits.row(x).maxCoeff()))
      throw NumericError("sinkhorn: kernel row " + std::to_string(x) +
                         " underflowed to zero (epsilon too small for cost scale)");
  }
  for (Eigen::Index y = 0; y < c; ++y) {
    if (!std::isfinite(logits.col(y).maxCoeff()))
      throw NumericError("sinkhorn: kernel column " + std::to_string(y) +
                         " underflowed to zero (epsilon too small for cost scale)");
  }
  Vector phi = Vector::Constant(c, log_mu);  // log row scaling
  Vector psi = Vector::Zero(c);              // log column scaling
  int iters = 0;
  double residual = std::numeric_limits<double>::infinity();
  Vector tmp(c);
  for (iters = 1; iters <= max_iters; ++iters) {
    for (Eigen::Index y = 0; y < c; ++y) {
      tmp = logits.col(y) + phi;
      psi(y) = log_mu - log_sum_exp(tmp);
    }
    for (Eigen::Index x = 0; x < c; ++x) {
      tmp = logits.row(x).transpose() + psi;
      phi(x) = log_mu - log_sum_exp(tmp);
    }
    double col_dev = 0.0;
    for (Eigen::Index y = 0; y < c; ++y) {
      tmp = logits.col(y) + phi;
      col_dev = std::max(col_dev, std::abs(std::exp(psi(y) + log_sum_exp(tmp)) - mu));
    }
    double row_dev = 0.0;
    for (Eigen::Index x = 0; x < c; ++x) {
      tmp = logits.row(x).transpose() + psi;
      row_dev = std::max(row_dev, std::abs(std::exp(phi(x) + log_sum_exp(tmp)) - mu));
    }
    residual = std::max(col_dev, row_dev);
    if (tolerance > 0.0 && residual <= tolerance) break;
  }
  iters = std::min(iters, max_iters);
  TransportPlan plan;
  plan.p.resize(c, c);
  for (Eigen::Index x = 0; x < c; ++x)
    for (Eigen::Index y = 0; y < c; ++y)
      plan.p(x, y) = std::exp(phi(x) + logits(x, y) + psi(y));
  // Scalings are diagnostics in this regime; keep them positive.
  const double min_normal = std::numeric_limits<double>::min();
  plan.a.resize(c);
  plan.b.resize(c);
  for (Eigen::Index i = 0; i < c; ++i) {
    plan.a(i) = std::max(std::exp(psi(i)), min_normal);
    plan.b(i) = std::max(std::exp(phi(i)), min_normal);
  }
  plan.iters_run = iters;
  plan.residual = residual;
  return plan;
}

}  // namespace

TransportPlan sinkhorn_plan(const GroundCost& cost, const SinkhornConfig& cfg) {
  cfg.validate();
  if (cost.q.rows() != cost.q.cols())
    throw DimensionError("sinkhorn: cost matrix must be square");
  if (cost.q.rows() < 1) throw InvalidInputError("sinkhorn: empty cost matrix");
  if (!cost.q.allFinite())
    throw InvalidInputError("sinkhorn: cost matrix has non-finite entries");
  const Eigen::Index c = cost.q.rows();
  const double mu = 1.0 / static_cast<double>(c);
  const Matrix logits = (-cost.q / cfg.epsilon);
  const double min_logit = logits.minCoeff();
  if (std::isfinite(min_logit) && std::exp(min_logit) >= kUnderflowGuard) {
    return sinkhorn_plain(logits.array().exp().matrix(), mu, cfg.tolerance,
                          cfg.max_iters);
  }
  return sinkhorn_log(logits, mu, cfg.tolerance, cfg.max_iters);
}

double plan_cost(const GroundCost& cost, const Matrix& plan) {
  if (cost.q.rows() != plan.rows() || cost.q.cols() != plan.cols())
    throw DimensionError("plan_cost: shape mismatch between cost and plan");
  return (cost.q.array() * plan.array()).sum();
}

double sinkhorn_divergence(const GroundCost& cost, const SinkhornConfig& cfg) {
  const TransportPlan plan = sinkhorn_plan(cost, cfg);
  return plan_cost(cost, plan.p);
}

double sinkhorn_divergence(const FeatureMatrix& a, const FeatureMatrix& b,
                           const SinkhornConfig& cfg) {
  return sinkhorn_divergence(ground_cost(a, b), cfg);
}

double biased_sinkhorn(const FeatureMatrix& a, const FeatureMatrix& b,
                       const SinkhornConfig& cfg) {
  const double w_ab = sinkhorn_divergence(a, b, cfg);
  const double w_aa = sinkhorn_divergence(a, a, cfg);
  const double w_bb = sinkhorn_divergence(b, b, cfg);
  return 2.0 * w_ab - w_aa - w_bb;
}

double exact_ot_uniform(const GroundCost& cost) {
  if (cost.q.rows() != cost.q.cols())
    throw DimensionError("exact_ot_uniform: cost matrix must be square");
  const Eigen::Index c = cost.q.rows();
  if (c > 8)
    throw SizeLimitError("exact_ot_uniform: brute force limited to C <= 8, got C = " +
                         std::to_string(c));
  std::vector<int> perm(static_cast<std::size_t>(c));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Eigen::Index x = 0; x < c; ++x) total += cost.q(x, perm[static_cast<std::size_t>(x)]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(c);
}

FeatureGradients cost_gradient_through_cosine(const FeatureMatrix& a,
                                              const FeatureMatrix& b,
                                              const Matrix& plan) {
  if (plan.rows() != a.samples() || plan.cols() != b.samples())
    throw DimensionError("cost_gradient_through_cosine: plan shape mismatch");
  if (a.dims() != b.dims())
    throw DimensionError("cost_gradient_through_cosine: feature dims differ");
  const Matrix an = a.data().array().colwise() / a.row_norms().array();
  const Matrix bn = b.data().array().colwise() / b.row_norms().array();
  const Matrix cosims = an * bn.transpose();
  // dQ(x,y)/du_x = cos * u/|u|^2 - v/(|u||v|); symmetric in the v argument.
  FeatureGradients g;
  const Vector row_w = (plan.array() * cosims.array()).rowwise().sum();
  const Vector col_w = (plan.array() * cosims.array()).colwise().sum();
  g.wrt_a = (a.data().array().colwise() *
             (row_w.array() / a.row_norms().array().square())).matrix() -
            ((plan * bn).array().colwise() / a.row_norms().array()).matrix();
  g.wrt_b = (b.data().array().colwise() *
             (col_w.array() / b.row_norms().array().square())).matrix() -
            ((plan.transpose() * an).array().colwise() / b.row_norms().array()).matrix();
  return g;
}

FeatureGradients ot_gradient_wrt_features(const FeatureMatrix& a,
                                          const FeatureMatrix& b,
                                          const SinkhornConfig& cfg) {
  const TransportPlan plan = sinkhorn_plan(ground_cost(a, b), cfg);
  return cost_gradient_through_cosine(a, b, plan.p);
}

}  // namespace intertwiner::ot
