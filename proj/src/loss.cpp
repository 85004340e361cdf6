#include "intertwiner/loss.hpp"

#include <cmath>

namespace intertwiner::loss {

namespace {

constexpr double kKlDelta = 1e-8;

void check_unit_interval(const Vector& v, const char* which) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!(v(i) > 0.0 && v(i) < 1.0))
      throw InvalidInputError(std::string("kl divergence: ") + which +
                              " component " + std::to_string(i) +
                              " outside (0, 1)");
  }
}

Matrix sigmoid(const Matrix& z) {
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

}  // namespace

Metric metric_from_name(const std::string& name) {
  if (name == "l1") return Metric::kL1;
  if (name == "l2") return Metric::kL2;
  if (name == "kl") return Metric::kKl;
  throw SchemaError("unknown loss metric '" + name + "' (expected l1|l2|kl)");
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kL1: return "l1";
    case Metric::kL2: return "l2";
    case Metric::kKl: return "kl";
  }
  return "l2";
}

void LossConfig::validate() const {
  if (!(factor > 0.0)) throw InvalidInputError("loss factor must be > 0");
}

double kl_term(const Vector& b, const Vector& f) {
  if (b.size() != f.size())
    throw DimensionError("kl divergence: size mismatch");
  check_unit_interval(b, "target");
  check_unit_interval(f, "input");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < b.size(); ++i)
    acc += b(i) * std::log((b(i) + kKlDelta) / (f(i) + kKlDelta));
  return acc;
}

LossResult intertwiner_loss(std::span<const LabeledFeature> samples,
                            const ClassBuffer& buf, const LossConfig& cfg) {
  cfg.validate();
  LossResult result;
  double acc = 0.0;
  for (const auto& s : samples) {
    const auto rep = buf.representative(s.class_id);
    if (!rep) {
      ++result.samples_skipped;
      continue;
    }
    if (s.feature.size() != rep->size())
      throw DimensionError("intertwiner_loss: sample dim " +
                           std::to_string(s.feature.size()) +
                           " != representative dim " + std::to_string(rep->size()));
    switch (cfg.metric) {
      case Metric::kL1:
        acc += (s.feature - *rep).lpNorm<1>();
        break;
      case Metric::kL2:
        acc += (s.feature - *rep).squaredNorm();
        break;
      case Metric::kKl:
        acc += kl_term(*rep, s.feature);
        break;
    }
    ++result.samples_used;
  }
  if (cfg.mean_reduction && result.samples_used > 0)
    acc /= static_cast<double>(result.samples_used);
  result.value = cfg.factor * acc;
  return result;
}

FusionMode fusion_from_name(const std::string& name) {
  if (name == "separate") return FusionMode::kSeparate;
  if (name == "naive_add") return FusionMode::kNaiveAdd;
  if (name == "linear") return FusionMode::kLinear;
  throw SchemaError("unknown fusion mode '" + name +
                    "' (expected separate|naive_add|linear)");
}

const char* fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::kSeparate: return "separate";
    case FusionMode::kNaiveAdd: return "naive_add";
    case FusionMode::kLinear: return "linear";
  }
  return "linear";
}

Vector fuse_features(const Vector& f_critic, const Vector& f_detection,
                     FusionMode mode) {
  if (mode == FusionMode::kSeparate) return f_detection;
  if (f_critic.size() != f_detection.size())
    throw DimensionError("fuse_features: dims differ (" +
                         std::to_string(f_critic.size()) + " vs " +
                         std::to_string(f_detection.size()) + ")");
  if (mode == FusionMode::kNaiveAdd) return f_critic + f_detection;
  return 0.5 * f_critic + 0.5 * f_detection;
}

MakeupMap MakeupMap::identity(int dim) {
  return MakeupMap{Matrix::Identity(dim, dim), Vector::Zero(dim)};
}

Vector makeup_apply(const MakeupMap& m, const Vector& f) {
  if (m.weight.cols() != f.size())
    throw DimensionError("makeup_apply: input dim " + std::to_string(f.size()) +
                         " != weight cols " + std::to_string(m.weight.cols()));
  return m.weight * f + m.bias;
}

Vector critic_apply(const CriticMap& c, const Vector& f) {
  if (c.weight.cols() != f.size())
    throw DimensionError("critic_apply: input dim " + std::to_string(f.size()) +
                         " != weight cols " + std::to_string(c.weight.cols()));
  Vector z = c.weight * f + c.bias;
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

Matrix makeup_apply(const MakeupMap& m, const Matrix& rows) {
  if (m.weight.cols() != rows.cols())
    throw DimensionError("makeup_apply: input dim mismatch");
  return (rows * m.weight.transpose()).rowwise() + m.bias.transpose();
}

Matrix critic_apply(const CriticMap& c, const Matrix& rows) {
  if (c.weight.cols() != rows.cols())
    throw DimensionError("critic_apply: input dim mismatch");
  return sigmoid((rows * c.weight.transpose()).rowwise() + c.bias.transpose());
}

double total_loss(double l_inter, std::span<const double> ot_per_level,
                  double l_standard) {
  if (!std::isfinite(l_inter))
    throw InvalidInputError("total_loss: non-finite intertwiner term");
  if (!std::isfinite(l_standard))
    throw InvalidInputError("total_loss: non-finite standard term");
  double acc = l_inter + l_standard;
  for (std::size_t i = 0; i < ot_per_level.size(); ++i) {
    if (!std::isfinite(ot_per_level[i]))
      throw InvalidInputError("total_loss: non-finite transport term at level index " +
                              std::to_string(i));
    acc += ot_per_level[i];
  }
  return acc;
}

double mimic_l2_loss(const Matrix& inputs, const Matrix& targets,
                     const MakeupMap& makeup, const CriticMap& critic,
                     const LossConfig& cfg, MimicGradients* grads,
                     Matrix* d_outputs) {
  cfg.validate();
  if (cfg.metric != Metric::kL2)
    throw InvalidInputError("mimic_l2_loss: analytic path supports the l2 metric only");
  const Matrix hidden = makeup_apply(makeup, inputs);
  const Matrix outputs = critic_apply(critic, hidden);
  if (targets.rows() != outputs.rows() || targets.cols() != outputs.cols())
    throw DimensionError("mimic_l2_loss: target shape mismatch");
  const Matrix diff = outputs - targets;
  const double n = static_cast<double>(inputs.rows());
  const double scale = cfg.mean_reduction && n > 0 ? cfg.factor / n : cfg.factor;
  const double value = scale * diff.squaredNorm();
  if (grads == nullptr && d_outputs == nullptr) return value;
  const Matrix d_out = 2.0 * scale * diff;
  if (d_outputs != nullptr) *d_outputs = d_out;
  if (grads != nullptr) {
    const Matrix d_pre =
        (d_out.array() * outputs.array() * (1.0 - outputs.array())).matrix();
    grads->d_critic_weight = d_pre.transpose() * hidden;
    grads->d_critic_bias = d_pre.colwise().sum().transpose();
    const Matrix d_hidden = d_pre * critic.weight;
    grads->d_makeup_weight = d_hidden.transpose() * inputs;
    grads->d_makeup_bias = d_hidden.colwise().sum().transpose();
  }
  return value;
}

}  // namespace intertwiner::loss
