#include "intertwiner/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "intertwiner/io.hpp"
#include "intertwiner/rng.hpp"

namespace intertwiner::harness {

namespace {

// World-model constants behind the input-source modes. The current level
// keeps only a thin slice of large-object content plus clutter noise; the
// higher level is a decimated map carrying foreign level statistics.
constexpr double kClassMeanScale = 2.0;
constexpr int kMeanSmoothingPasses = 2;
constexpr int kCurrentLevelRank = 4;
constexpr double kCurrentLevelNoise = 0.3;
constexpr int kHigherLevelRank = 12;
constexpr double kLevelScaleLo = 0.5;
constexpr double kLevelScaleHi = 1.0;
constexpr double kLevelShiftAmp = 3.0;
constexpr double kCriticInitScale = 0.5;
constexpr double kFeatureNormFloor = 1e-12;

Vector smooth_unit(Rng& rng, int dim) {
  Vector v = rng.normal_vector(dim);
  for (int pass = 0; pass < kMeanSmoothingPasses; ++pass) {
    Vector s(dim);
    for (int i = 0; i < dim; ++i) {
      const int prev = (i + dim - 1) % dim;
      const int next = (i + 1) % dim;
      s(i) = (v(prev) + 2.0 * v(i) + v(next)) / 4.0;
    }
    v = std::move(s);
  }
  return v / v.norm();
}

Matrix orthonormal_basis(Rng& rng, int dim, int rank) {
  const Matrix raw = rng.normal_matrix(dim, rank);
  Eigen::HouseholderQR<Matrix> qr(raw);
  return qr.householderQ() * Matrix::Identity(dim, rank);
}

}  // namespace

void SyntheticDatasetSpec::validate() const {
  if (n_classes < 1) throw InvalidInputError("dataset: n_classes must be >= 1");
  if (dim < 1) throw InvalidInputError("dataset: dim must be >= 1");
  if (reliable_per_class < 1 || less_reliable_per_class < 1)
    throw InvalidInputError("dataset: per-class counts must be >= 1");
  if (reliable_stddev < 0.0 || less_reliable_stddev < 0.0)
    throw InvalidInputError("dataset: stddevs must be >= 0");
  if (offset_magnitude < 0.0)
    throw InvalidInputError("dataset: offset magnitude must be >= 0");
}

SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticDataset data;
  data.spec = spec;
  data.class_means.resize(spec.n_classes, spec.dim);
  for (int c = 0; c < spec.n_classes; ++c)
    data.class_means.row(c) = (kClassMeanScale * smooth_unit(rng, spec.dim)).transpose();

  // Offsets model signal attenuation: the less reliable cluster slides toward
  // the origin by the requested magnitude.
  Matrix offsets(spec.n_classes, spec.dim);
  for (int c = 0; c < spec.n_classes; ++c) {
    const Vector mu = data.class_means.row(c).transpose();
    offsets.row(c) = (-spec.offset_magnitude * mu / mu.norm()).transpose();
  }

  data.reliable.reserve(static_cast<std::size_t>(spec.n_classes) *
                        static_cast<std::size_t>(spec.reliable_per_class));
  for (int c = 0; c < spec.n_classes; ++c) {
    for (int j = 0; j < spec.reliable_per_class; ++j) {
      buffer::LabeledFeature f;
      f.feature = data.class_means.row(c).transpose() +
                  spec.reliable_stddev * rng.normal_vector(spec.dim);
      f.class_id = c;
      f.level = 2 + (j % 4);
      data.reliable.push_back(std::move(f));
    }
  }
  data.less_reliable.reserve(static_cast<std::size_t>(spec.n_classes) *
                             static_cast<std::size_t>(spec.less_reliable_per_class));
  for (int c = 0; c < spec.n_classes; ++c) {
    for (int j = 0; j < spec.less_reliable_per_class; ++j) {
      buffer::LabeledFeature f;
      f.feature = data.class_means.row(c).transpose() + offsets.row(c).transpose() +
                  spec.less_reliable_stddev * rng.normal_vector(spec.dim);
      f.class_id = c;
      f.level = 2 + (j % 4);
      data.less_reliable.push_back(std::move(f));
    }
  }
  return data;
}

namespace {

Matrix stack_features(const std::vector<buffer::LabeledFeature>& set, int dim) {
  Matrix m(static_cast<Eigen::Index>(set.size()), dim);
  for (std::size_t i = 0; i < set.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = set[i].feature.transpose();
  return m;
}

std::vector<int> stack_labels(const std::vector<buffer::LabeledFeature>& set) {
  std::vector<int> out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out[i] = set[i].class_id;
  return out;
}

}  // namespace

Matrix SyntheticDataset::reliable_features() const {
  return stack_features(reliable, spec.dim);
}
Matrix SyntheticDataset::less_reliable_features() const {
  return stack_features(less_reliable, spec.dim);
}
std::vector<int> SyntheticDataset::reliable_labels() const {
  return stack_labels(reliable);
}
std::vector<int> SyntheticDataset::less_reliable_labels() const {
  return stack_labels(less_reliable);
}

void export_dataset(const SyntheticDataset& data,
                    const std::filesystem::path& features_reliable,
                    const std::filesystem::path& labels_reliable,
                    const std::filesystem::path& features_less,
                    const std::filesystem::path& labels_less) {
  const auto write_labels = [](const std::filesystem::path& path,
                               const std::vector<buffer::LabeledFeature>& set) {
    std::string out;
    for (const auto& f : set)
      out += std::to_string(f.class_id) + "," + std::to_string(f.level) + "\n";
    write_text_atomic(path, out);
  };
  write_matrix_csv(features_reliable, data.reliable_features());
  write_labels(labels_reliable, data.reliable);
  write_matrix_csv(features_less, data.less_reliable_features());
  write_labels(labels_less, data.less_reliable);
}

InputSource input_source_from_name(const std::string& name) {
  if (name == "use_current") return InputSource::kUseCurrent;
  if (name == "use_higher") return InputSource::kUseHigher;
  if (name == "upsample") return InputSource::kUpsample;
  if (name == "upsample_with_ot") return InputSource::kUpsampleWithOt;
  throw SchemaError("unknown input source '" + name +
                    "' (expected use_current|use_higher|upsample|upsample_with_ot)");
}

const char* input_source_name(InputSource m) {
  switch (m) {
    case InputSource::kUseCurrent: return "use_current";
    case InputSource::kUseHigher: return "use_higher";
    case InputSource::kUpsample: return "upsample";
    case InputSource::kUpsampleWithOt: return "upsample_with_ot";
  }
  return "upsample_with_ot";
}

void TrainConfig::validate() const {
  if (steps < 1) throw InvalidInputError("train: steps must be >= 1");
  if (learning_rate < 0.0) throw InvalidInputError("train: learning rate must be >= 0");
  loss.validate();
  if (loss.metric != loss::Metric::kL2)
    throw InvalidInputError("train: the analytic gradient path supports the l2 metric only");
  sinkhorn.validate();
  buffer.validate();
  if (critic_dim < 1) throw InvalidInputError("train: critic_dim must be >= 1");
  if (ot_feature_dim < 1) throw InvalidInputError("train: ot_feature_dim must be >= 1");
  if (ot_panel < 2 || eval_panel < 2)
    throw InvalidInputError("train: transport panels need at least 2 samples");
  if (!(surrogate_weight > 0.0))
    throw InvalidInputError("train: surrogate weight must be > 0");
}

CompactionMetrics compaction_metrics(const Matrix& features,
                                     std::span<const int> labels) {
  if (features.rows() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("compaction_metrics: feature/label count mismatch");
  if (features.rows() < 1)
    throw InvalidInputError("compaction_metrics: empty feature set");
  int n_classes = 0;
  for (int l : labels) {
    if (l < 0) throw InvalidInputError("compaction_metrics: negative class id");
    n_classes = std::max(n_classes, l + 1);
  }
  std::vector<long> counts(static_cast<std::size_t>(n_classes), 0);
  for (int l : labels) counts[static_cast<std::size_t>(l)] += 1;
  int present = 0;
  for (long c : counts) present += c > 0 ? 1 : 0;
  if (present < 2)
    throw InvalidInputError(
        "compaction_metrics: centroid gap undefined with fewer than two classes");

  Matrix centroids = Matrix::Zero(n_classes, features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    centroids.row(labels[static_cast<std::size_t>(i)]) += features.row(i);
  for (int c = 0; c < n_classes; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0)
      centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);

  CompactionMetrics m;
  double var = 0.0;
  long correct = 0;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    var += (features.row(i) - centroids.row(own)).squaredNorm();
    double best = std::numeric_limits<double>::infinity();
    int best_class = -1;
    for (int c = 0; c < n_classes; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      const double d = (features.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        best_class = c;
      }
    }
    if (best_class == own) ++correct;
  }
  m.intra_class_variance = var / static_cast<double>(features.rows());
  m.nearest_centroid_accuracy =
      static_cast<double>(correct) / static_cast<double>(features.rows());
  double gap = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_classes; ++i) {
    if (counts[static_cast<std::size_t>(i)] == 0) continue;
    for (int j = i + 1; j < n_classes; ++j) {
      if (counts[static_cast<std::size_t>(j)] == 0) continue;
      gap = std::min(gap, (centroids.row(i) - centroids.row(j)).norm());
    }
  }
  m.centroid_gap = gap;
  return m;
}

namespace {

struct PerClassStats {
  std::vector<double> variance;
  std::vector<double> accuracy;
};

PerClassStats per_class_stats(const Matrix& features, std::span<const int> labels,
                              int n_classes) {
  std::vector<long> counts(static_cast<std::size_t>(n_classes), 0);
  Matrix centroids = Matrix::Zero(n_classes, features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int c = labels[static_cast<std::size_t>(i)];
    counts[static_cast<std::size_t>(c)] += 1;
    centroids.row(c) += features.row(i);
  }
  for (int c = 0; c < n_classes; ++c)
    if (counts[static_cast<std::size_t>(c)] > 0)
      centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  PerClassStats stats;
  stats.variance.assign(static_cast<std::size_t>(n_classes), 0.0);
  stats.accuracy.assign(static_cast<std::size_t>(n_classes), 0.0);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    stats.variance[static_cast<std::size_t>(own)] +=
        (features.row(i) - centroids.row(own)).squaredNorm();
    double best = std::numeric_limits<double>::infinity();
    int best_class = -1;
    for (int c = 0; c < n_classes; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      const double d = (features.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        best_class = c;
      }
    }
    if (best_class == own) stats.accuracy[static_cast<std::size_t>(own)] += 1.0;
  }
  for (int c = 0; c < n_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) continue;
    stats.variance[static_cast<std::size_t>(c)] /=
        static_cast<double>(counts[static_cast<std::size_t>(c)]);
    stats.accuracy[static_cast<std::size_t>(c)] /=
        static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return stats;
}

// All parameters and fixed world maps for one training run.
struct TrainState {
  loss::MakeupMap makeup;
  loss::CriticMap critic;
  Matrix det_weight;
  Vector det_bias;
  Vector level_scale;   // s
  Vector level_shift;   // t
  Matrix proj_current;  // rank-limited slice seen at the current level
  Matrix proj_higher;
  Matrix upsample;      // fixed interpolation of the decimated map
  Matrix zoh_select;    // zero-order-hold expansion of even coordinates
  Matrix gen_weight;    // trainable generator F
  Vector gen_bias;
  Matrix ot_critic;     // transport critic H
};

TrainState init_state(const SyntheticDataset& data, const TrainConfig& cfg,
                      std::uint64_t seed) {
  const int d = data.spec.dim;
  const int dp = cfg.critic_dim;
  const bool needs_resample = cfg.input_source != InputSource::kUseCurrent;
  if (needs_resample && d % 2 != 0)
    throw InvalidInputError("train: feature dim must be even for the higher-level map model");
  Rng rng(derive_seed(seed, 1));
  TrainState st;
  st.makeup = loss::MakeupMap::identity(d);
  st.critic.weight = rng.normal_matrix(dp, d) * (kCriticInitScale / std::sqrt(d));
  st.critic.bias = Vector::Zero(dp);
  st.level_scale = rng.uniform_vector(d, kLevelScaleLo, kLevelScaleHi);
  st.level_shift = rng.uniform_vector(d, -kLevelShiftAmp, kLevelShiftAmp);
  const Matrix ba = orthonormal_basis(rng, d, std::min(kCurrentLevelRank, d));
  st.proj_current = ba * ba.transpose();
  const Matrix bb = orthonormal_basis(rng, d, std::min(kHigherLevelRank, d));
  st.proj_higher = bb * bb.transpose();
  st.ot_critic = rng.normal_matrix(cfg.ot_feature_dim, d) / std::sqrt(d);
  st.det_weight = rng.normal_matrix(dp, d) / std::sqrt(d);
  st.det_bias = Vector::Zero(dp);

  if (needs_resample) {
    const int dh = d / 2;
    Matrix dec = Matrix::Zero(dh, d);
    for (int i = 0; i < dh; ++i) dec(i, 2 * i) = 1.0;
    Matrix zoh = Matrix::Zero(d, dh);
    Matrix itp = Matrix::Zero(d, dh);
    for (int i = 0; i < dh; ++i) {
      zoh(2 * i, i) = 1.0;
      zoh(2 * i + 1, i) = 1.0;
      itp(2 * i, i) = 1.0;
      itp(2 * i + 1, i) += 0.5;
      itp(2 * i + 1, (i + 1) % dh) += 0.5;
    }
    st.zoh_select = zoh * dec;
    st.upsample = itp * dec;
  }
  st.gen_weight = st.upsample;
  st.gen_bias = Vector::Zero(d);
  return st;
}

// The raw higher-level map as the RoI sees it: zero-order-hold expansion of
// the decimated features, carrying that level's scale/shift statistics.
Matrix higher_level_raw(const TrainState& st, const Matrix& x) {
  Matrix z = x * st.zoh_select.transpose();
  z.array().rowwise() *= st.level_scale.transpose().array();
  z.rowwise() += st.level_shift.transpose();
  return z;
}

Matrix rendition(const TrainState& st, const TrainConfig& cfg, const Matrix& x,
                 Rng& step_rng) {
  switch (cfg.input_source) {
    case InputSource::kUseCurrent: {
      Matrix z = x * st.proj_current;
      z += kCurrentLevelNoise * step_rng.normal_matrix(x.rows(), x.cols());
      return z;
    }
    case InputSource::kUseHigher: {
      Matrix z = x * st.proj_higher;
      z.array().rowwise() *= st.level_scale.transpose().array();
      z.rowwise() += st.level_shift.transpose();
      return z;
    }
    case InputSource::kUpsample:
      return higher_level_raw(st, x) * st.upsample.transpose();
    case InputSource::kUpsampleWithOt: {
      Matrix z = higher_level_raw(st, x) * st.gen_weight.transpose();
      z.rowwise() += st.gen_bias.transpose();
      return z;
    }
  }
  throw InvalidInputError("train: unknown input source");
}

void check_finite(const TrainState& st, double loss_value, int step) {
  const bool ok = std::isfinite(loss_value) && st.makeup.weight.allFinite() &&
                  st.makeup.bias.allFinite() && st.critic.weight.allFinite() &&
                  st.critic.bias.allFinite() && st.det_weight.allFinite() &&
                  st.gen_weight.allFinite() && st.ot_critic.allFinite();
  if (!ok)
    throw TrainingDivergedError(step, "training diverged at step " +
                                          std::to_string(step) +
                                          ": loss or parameters left the finite range");
}

struct SurrogateResult {
  double value = 0.0;
  Matrix d_critic_out;  // contribution to dL/dF
  Matrix d_det_out;     // dL/dD1
};

// Prototype-softmax classification on the fused features against detached
// class centroids; the anchoring analogue of the standard detection loss.
SurrogateResult surrogate_loss(const Matrix& critic_out, const Matrix& det_out,
                               std::span<const int> labels, int n_classes,
                               loss::FusionMode fusion, double weight,
                               const Matrix* frozen_centroids = nullptr) {
  double alpha_f = 0.5, alpha_d = 0.5;
  if (fusion == loss::FusionMode::kSeparate) {
    alpha_f = 0.0;
    alpha_d = 1.0;
  } else if (fusion == loss::FusionMode::kNaiveAdd) {
    alpha_f = 1.0;
    alpha_d = 1.0;
  }
  const Matrix fused = alpha_f * critic_out + alpha_d * det_out;
  const Eigen::Index n = fused.rows();
  Matrix centroids;
  if (frozen_centroids != nullptr) {
    centroids = *frozen_centroids;
  } else {
    centroids = Matrix::Zero(n_classes, fused.cols());
    std::vector<long> counts(static_cast<std::size_t>(n_classes), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      centroids.row(labels[static_cast<std::size_t>(i)]) += fused.row(i);
      counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] += 1;
    }
    for (int c = 0; c < n_classes; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  Matrix logits(n, n_classes);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < n_classes; ++c)
      logits(i, c) = -(fused.row(i) - centroids.row(c)).squaredNorm();
  Matrix p(n, n_classes);
  double ce = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logits.row(i).maxCoeff();
    const Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    const double z = e.sum();
    p.row(i) = (e / z).matrix();
    ce -= std::log(p(i, labels[static_cast<std::size_t>(i)]));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  SurrogateResult res;
  res.value = weight * ce * inv_n;
  Matrix dlog = p;
  for (Eigen::Index i = 0; i < n; ++i)
    dlog(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  dlog *= weight * inv_n;
  const Vector row_sums = dlog.rowwise().sum();
  const Matrix d_fused =
      -2.0 * ((fused.array().colwise() * row_sums.array()).matrix() - dlog * centroids);
  res.d_critic_out = alpha_f * d_fused;
  res.d_det_out = alpha_d * d_fused;
  return res;
}

struct OtStep {
  double value = 0.0;
  Matrix d_gen_weight;
  Vector d_gen_bias;
  Matrix d_ot_critic;
};

// One transport-alignment evaluation between the current-level cloud and the
// generated cloud, with envelope gradients for F and H.
OtStep ot_alignment(const TrainState& st, const TrainConfig& cfg,
                    const Matrix& current_rows, const Matrix& higher_raw_rows,
                    bool want_gradients, const Matrix* frozen_plan = nullptr) {
  Matrix generated = higher_raw_rows * st.gen_weight.transpose();
  generated.rowwise() += st.gen_bias.transpose();
  const Matrix p_current = current_rows * st.ot_critic.transpose();
  const Matrix p_generated = generated * st.ot_critic.transpose();
  const auto norm_ok = [](const Matrix& m) {
    return m.rowwise().norm().minCoeff() > kFeatureNormFloor;
  };
  if (!norm_ok(p_current) || !norm_ok(p_generated))
    throw NumericError("transport alignment: projected features collapsed to zero norm");
  const ot::FeatureMatrix fa(p_current);
  const ot::FeatureMatrix fb(p_generated);
  const ot::GroundCost q = ot::ground_cost(fa, fb);
  Matrix plan;
  if (frozen_plan != nullptr) {
    plan = *frozen_plan;
  } else {
    plan = ot::sinkhorn_plan(q, cfg.sinkhorn).p;
  }
  OtStep step;
  step.value = ot::plan_cost(q, plan);
  if (!want_gradients) return step;
  const ot::FeatureGradients g = ot::cost_gradient_through_cosine(fa, fb, plan);
  step.d_ot_critic =
      g.wrt_a.transpose() * current_rows + g.wrt_b.transpose() * generated;
  const Matrix d_generated = g.wrt_b * st.ot_critic;
  step.d_gen_weight = d_generated.transpose() * higher_raw_rows;
  step.d_gen_bias = d_generated.colwise().sum().transpose();
  return step;
}

std::vector<buffer::LabeledFeature> to_labeled(const Matrix& rows,
                                               const std::vector<buffer::LabeledFeature>& src) {
  std::vector<buffer::LabeledFeature> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    out[i].feature = rows.row(static_cast<Eigen::Index>(i)).transpose();
    out[i].class_id = src[i].class_id;
    out[i].level = src[i].level;
  }
  return out;
}

double mean_tail(const std::vector<double>& v, std::size_t tail) {
  const std::size_t n = std::min(tail, v.size());
  double acc = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) acc += v[i];
  return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace

RunTrace train_intertwiner(const SyntheticDataset& data, const TrainConfig& cfg,
                           std::uint64_t seed) {
  cfg.validate();
  data.spec.validate();
  const int n_classes = data.spec.n_classes;
  const int dp = cfg.critic_dim;
  const Matrix x_reliable = data.reliable_features();
  const Matrix x_less = data.less_reliable_features();
  const std::vector<int> y_less = data.less_reliable_labels();
  const Eigen::Index n_un = x_less.rows();
  const Eigen::Index n_rel = x_reliable.rows();
  const bool ot_active =
      cfg.input_source == InputSource::kUpsampleWithOt && cfg.ot_enabled;
  const double lr = cfg.learning_rate;

  TrainState st = init_state(data, cfg, seed);
  buffer::ClassBuffer buf(n_classes, dp, cfg.buffer);

  // Fixed evaluation panel for the reported transport metric.
  std::vector<Eigen::Index> eval_cur, eval_rel;
  if (ot_active) {
    Rng panel_rng(derive_seed(seed, 3));
    eval_cur.resize(static_cast<std::size_t>(cfg.eval_panel));
    eval_rel.resize(static_cast<std::size_t>(cfg.eval_panel));
    for (auto& i : eval_cur)
      i = static_cast<Eigen::Index>(panel_rng.integer(static_cast<std::uint64_t>(n_un)));
    for (auto& i : eval_rel)
      i = static_cast<Eigen::Index>(panel_rng.integer(static_cast<std::uint64_t>(n_rel)));
  }
  const auto gather = [](const Matrix& m, const std::vector<Eigen::Index>& idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
  };

  // Warm start: one pass of the reliable set through the critic.
  {
    Rng warm_rng(derive_seed(seed, 2));
    const Matrix g = loss::critic_apply(st.critic, rendition(st, cfg, x_reliable, warm_rng));
    buf.batch_update(to_labeled(g, data.reliable));
  }

  RunTrace trace;
  const auto student_features = [&]() {
    return loss::critic_apply(st.critic, loss::makeup_apply(st.makeup, x_less));
  };
  const Matrix f0 = student_features();
  trace.initial = compaction_metrics(f0, y_less);
  const PerClassStats initial_stats = per_class_stats(f0, y_less, n_classes);

  const double factor = cfg.loss.factor;
  const double scale =
      cfg.loss.mean_reduction ? factor / static_cast<double>(n_un) : factor;

  for (int step = 0; step < cfg.steps; ++step) {
    Rng step_rng(derive_seed(seed, 0x10000ULL + static_cast<std::uint64_t>(step)));

    // Reliable renditions refresh the buffer before the gradient step.
    const Matrix g = loss::critic_apply(st.critic, rendition(st, cfg, x_reliable, step_rng));
    buf.batch_update(to_labeled(g, data.reliable));

    Matrix targets(n_un, dp);
    for (Eigen::Index i = 0; i < n_un; ++i) {
      const auto rep = buf.representative(y_less[static_cast<std::size_t>(i)]);
      if (!rep)
        throw NumericError("train: class " +
                           std::to_string(y_less[static_cast<std::size_t>(i)]) +
                           " has no representative after warm start");
      targets.row(i) = rep->transpose();
    }

    const Matrix hidden = loss::makeup_apply(st.makeup, x_less);
    const Matrix outputs = loss::critic_apply(st.critic, hidden);
    const Matrix diff = outputs - targets;
    double step_loss = scale * diff.squaredNorm();

    if (cfg.intertwiner_enabled && lr > 0.0) {
      Matrix d_out = 2.0 * scale * diff;
      Matrix d_det;
      if (cfg.surrogate_loss) {
        const Matrix det_out =
            (hidden * st.det_weight.transpose()).rowwise() + st.det_bias.transpose();
        const SurrogateResult sres =
            surrogate_loss(outputs, det_out, y_less, n_classes, cfg.fusion,
                           cfg.surrogate_weight);
        step_loss += sres.value;
        d_out += sres.d_critic_out;
        d_det = sres.d_det_out;
      }
      const Matrix d_pre =
          (d_out.array() * outputs.array() * (1.0 - outputs.array())).matrix();
      const Matrix g_critic_w = d_pre.transpose() * hidden;
      const Vector g_critic_b = d_pre.colwise().sum().transpose();
      Matrix d_hidden = d_pre * st.critic.weight;
      if (cfg.surrogate_loss) {
        const Matrix g_det_w = d_det.transpose() * hidden;
        const Vector g_det_b = d_det.colwise().sum().transpose();
        d_hidden += d_det * st.det_weight;
        st.det_weight -= lr * g_det_w;
        st.det_bias -= lr * g_det_b;
      }
      const Matrix g_makeup_w = d_hidden.transpose() * x_less;
      const Vector g_makeup_b = d_hidden.colwise().sum().transpose();
      st.makeup.weight -= lr * g_makeup_w;
      st.makeup.bias -= lr * g_makeup_b;
      st.critic.weight -= lr * g_critic_w;
      st.critic.bias -= lr * g_critic_b;

      if (ot_active) {
        std::vector<Eigen::Index> cur_idx(static_cast<std::size_t>(cfg.ot_panel));
        std::vector<Eigen::Index> rel_idx(static_cast<std::size_t>(cfg.ot_panel));
        for (auto& i : cur_idx)
          i = static_cast<Eigen::Index>(step_rng.integer(static_cast<std::uint64_t>(n_un)));
        for (auto& i : rel_idx)
          i = static_cast<Eigen::Index>(step_rng.integer(static_cast<std::uint64_t>(n_rel)));
        const Matrix cur_rows = gather(x_less, cur_idx);
        const Matrix raw_rows = higher_level_raw(st, gather(x_reliable, rel_idx));
        const OtStep ot = ot_alignment(st, cfg, cur_rows, raw_rows, true);
        st.gen_weight -= lr * ot.d_gen_weight;
        st.gen_bias -= lr * ot.d_gen_bias;
        st.ot_critic -= lr * ot.d_ot_critic;
      }
    }

    // Trace metrics are deterministic functions of the post-step state.
    const Matrix f_now = student_features();
    Matrix reps_now(n_un, dp);
    for (Eigen::Index i = 0; i < n_un; ++i)
      reps_now.row(i) = buf.representative(y_less[static_cast<std::size_t>(i)])->transpose();
    const double inter_now = scale * (f_now - reps_now).squaredNorm();
    double ot_now = 0.0;
    if (ot_active) {
      const Matrix cur_rows = gather(x_less, eval_cur);
      const Matrix raw_rows = higher_level_raw(st, gather(x_reliable, eval_rel));
      ot_now = ot_alignment(st, cfg, cur_rows, raw_rows, false).value;
    }
    check_finite(st, inter_now + ot_now + step_loss, step);
    const CompactionMetrics m = compaction_metrics(f_now, y_less);
    trace.intertwiner_loss.push_back(inter_now);
    trace.ot_loss.push_back(ot_now);
    trace.intra_class_variance.push_back(m.intra_class_variance);
    trace.centroid_gap.push_back(m.centroid_gap);
    trace.accuracy.push_back(m.nearest_centroid_accuracy);
  }

  const auto tail = static_cast<std::size_t>(std::max(1, cfg.steps / 4));
  trace.final_smoothed.intra_class_variance = mean_tail(trace.intra_class_variance, tail);
  trace.final_smoothed.centroid_gap = mean_tail(trace.centroid_gap, tail);
  trace.final_smoothed.nearest_centroid_accuracy = mean_tail(trace.accuracy, tail);
  trace.final_intertwiner_loss = mean_tail(trace.intertwiner_loss, tail);
  trace.final_ot_loss = mean_tail(trace.ot_loss, tail);

  const Matrix f_final = student_features();
  const PerClassStats final_stats = per_class_stats(f_final, y_less, n_classes);
  for (int c = 0; c < n_classes; ++c) {
    ClassDelta delta;
    delta.class_id = c;
    delta.initial_variance = initial_stats.variance[static_cast<std::size_t>(c)];
    delta.final_variance = final_stats.variance[static_cast<std::size_t>(c)];
    delta.initial_accuracy = initial_stats.accuracy[static_cast<std::size_t>(c)];
    delta.final_accuracy = final_stats.accuracy[static_cast<std::size_t>(c)];
    trace.per_class.push_back(delta);
  }
  return trace;
}

std::string RunTrace::to_csv() const {
  std::string out =
      "step,intertwiner_loss,ot_loss,intra_class_variance,centroid_gap,"
      "nearest_centroid_accuracy\n";
  for (std::size_t i = 0; i < intertwiner_loss.size(); ++i) {
    out += std::to_string(i + 1);
    out += ',';
    out += format_double(intertwiner_loss[i]);
    out += ',';
    out += format_double(ot_loss[i]);
    out += ',';
    out += format_double(intra_class_variance[i]);
    out += ',';
    out += format_double(centroid_gap[i]);
    out += ',';
    out += format_double(accuracy[i]);
    out += '\n';
  }
  return out;
}

nlohmann::json RunTrace::summary(std::uint64_t seed, const TrainConfig& cfg) const {
  const auto metrics_json = [](const CompactionMetrics& m) {
    return nlohmann::json{{"intra_class_variance", m.intra_class_variance},
                          {"centroid_gap", m.centroid_gap},
                          {"nearest_centroid_accuracy", m.nearest_centroid_accuracy}};
  };
  return nlohmann::json{
      {"seed", seed},
      {"steps", static_cast<int>(intertwiner_loss.size())},
      {"input_source", input_source_name(cfg.input_source)},
      {"fusion", loss::fusion_name(cfg.fusion)},
      {"metric", loss::metric_name(cfg.loss.metric)},
      {"factor", cfg.loss.factor},
      {"ot_enabled", cfg.ot_enabled},
      {"intertwiner_enabled", cfg.intertwiner_enabled},
      {"surrogate_loss", cfg.surrogate_loss},
      {"epsilon", cfg.sinkhorn.epsilon},
      {"sinkhorn_iters", cfg.sinkhorn.max_iters},
      {"initial", metrics_json(initial)},
      {"final", metrics_json(final_smoothed)},
      {"variance_ratio", initial.intra_class_variance > 0.0
                             ? final_smoothed.intra_class_variance /
                                   initial.intra_class_variance
                             : 0.0},
      {"final_intertwiner_loss", final_intertwiner_loss},
      {"final_ot_loss", final_ot_loss}};
}

GradientCheckReport check_training_gradients(const SyntheticDataset& data,
                                             const TrainConfig& cfg,
                                             std::uint64_t seed,
                                             int components_per_block) {
  cfg.validate();
  TrainState st = init_state(data, cfg, seed);
  const int n_classes = data.spec.n_classes;
  const Matrix x_reliable = data.reliable_features();
  const Matrix x_less = data.less_reliable_features();
  const std::vector<int> y_less = data.less_reliable_labels();
  const Eigen::Index n_un = x_less.rows();
  const bool ot_active =
      cfg.input_source == InputSource::kUpsampleWithOt && cfg.ot_enabled;

  buffer::ClassBuffer buf(n_classes, cfg.critic_dim, cfg.buffer);
  {
    Rng warm_rng(derive_seed(seed, 2));
    const Matrix g =
        loss::critic_apply(st.critic, rendition(st, cfg, x_reliable, warm_rng));
    buf.batch_update(to_labeled(g, data.reliable));
  }
  Matrix targets(n_un, cfg.critic_dim);
  for (Eigen::Index i = 0; i < n_un; ++i)
    targets.row(i) = buf.representative(y_less[static_cast<std::size_t>(i)])->transpose();

  // Frozen pieces: surrogate centroids, transport panel and plan.
  Matrix frozen_centroids;
  if (cfg.surrogate_loss) {
    const Matrix hidden = loss::makeup_apply(st.makeup, x_less);
    const Matrix outputs = loss::critic_apply(st.critic, hidden);
    const Matrix det_out =
        (hidden * st.det_weight.transpose()).rowwise() + st.det_bias.transpose();
    double alpha_f = 0.5, alpha_d = 0.5;
    if (cfg.fusion == loss::FusionMode::kSeparate) {
      alpha_f = 0.0;
      alpha_d = 1.0;
    } else if (cfg.fusion == loss::FusionMode::kNaiveAdd) {
      alpha_f = 1.0;
      alpha_d = 1.0;
    }
    const Matrix fused = alpha_f * outputs + alpha_d * det_out;
    frozen_centroids = Matrix::Zero(n_classes, fused.cols());
    std::vector<long> counts(static_cast<std::size_t>(n_classes), 0);
    for (Eigen::Index i = 0; i < n_un; ++i) {
      frozen_centroids.row(y_less[static_cast<std::size_t>(i)]) += fused.row(i);
      counts[static_cast<std::size_t>(y_less[static_cast<std::size_t>(i)])] += 1;
    }
    for (int c = 0; c < n_classes; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        frozen_centroids.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }

  Matrix cur_rows, raw_rows, frozen_plan;
  if (ot_active) {
    Rng step_rng(derive_seed(seed, 0x10000ULL));
    std::vector<Eigen::Index> cur_idx(static_cast<std::size_t>(cfg.ot_panel));
    std::vector<Eigen::Index> rel_idx(static_cast<std::size_t>(cfg.ot_panel));
    for (auto& i : cur_idx)
      i = static_cast<Eigen::Index>(step_rng.integer(static_cast<std::uint64_t>(n_un)));
    for (auto& i : rel_idx)
      i = static_cast<Eigen::Index>(
          step_rng.integer(static_cast<std::uint64_t>(x_reliable.rows())));
    cur_rows.resize(static_cast<Eigen::Index>(cur_idx.size()), x_less.cols());
    for (std::size_t i = 0; i < cur_idx.size(); ++i)
      cur_rows.row(static_cast<Eigen::Index>(i)) = x_less.row(cur_idx[i]);
    Matrix rel_rows(static_cast<Eigen::Index>(rel_idx.size()), x_reliable.cols());
    for (std::size_t i = 0; i < rel_idx.size(); ++i)
      rel_rows.row(static_cast<Eigen::Index>(i)) = x_reliable.row(rel_idx[i]);
    raw_rows = higher_level_raw(st, rel_rows);
    Matrix generated = raw_rows * st.gen_weight.transpose();
    generated.rowwise() += st.gen_bias.transpose();
    const ot::FeatureMatrix fa(cur_rows * st.ot_critic.transpose());
    const ot::FeatureMatrix fb(generated * st.ot_critic.transpose());
    frozen_plan = ot::sinkhorn_plan(ot::ground_cost(fa, fb), cfg.sinkhorn).p;
  }

  const double scale = cfg.loss.mean_reduction
                           ? cfg.loss.factor / static_cast<double>(n_un)
                           : cfg.loss.factor;

  const auto objective = [&](const TrainState& s) {
    const Matrix hidden = loss::makeup_apply(s.makeup, x_less);
    const Matrix outputs = loss::critic_apply(s.critic, hidden);
    double value = scale * (outputs - targets).squaredNorm();
    if (cfg.surrogate_loss) {
      const Matrix det_out =
          (hidden * s.det_weight.transpose()).rowwise() + s.det_bias.transpose();
      value += surrogate_loss(outputs, det_out, y_less, n_classes, cfg.fusion,
                              cfg.surrogate_weight, &frozen_centroids)
                   .value;
    }
    if (ot_active)
      value += ot_alignment(s, cfg, cur_rows, raw_rows, false, &frozen_plan).value;
    return value;
  };

  // Analytic gradients of that frozen objective.
  const Matrix hidden = loss::makeup_apply(st.makeup, x_less);
  const Matrix outputs = loss::critic_apply(st.critic, hidden);
  Matrix d_out = 2.0 * scale * (outputs - targets);
  Matrix d_det = Matrix::Zero(n_un, cfg.critic_dim);
  if (cfg.surrogate_loss) {
    const Matrix det_out =
        (hidden * st.det_weight.transpose()).rowwise() + st.det_bias.transpose();
    const SurrogateResult sres =
        surrogate_loss(outputs, det_out, y_less, n_classes, cfg.fusion,
                       cfg.surrogate_weight, &frozen_centroids);
    d_out += sres.d_critic_out;
    d_det = sres.d_det_out;
  }
  const Matrix d_pre =
      (d_out.array() * outputs.array() * (1.0 - outputs.array())).matrix();
  const Matrix g_critic_w = d_pre.transpose() * hidden;
  const Vector g_critic_b = d_pre.colwise().sum().transpose();
  Matrix d_hidden = d_pre * st.critic.weight;
  Matrix g_det_w;
  Vector g_det_b;
  if (cfg.surrogate_loss) {
    g_det_w = d_det.transpose() * hidden;
    g_det_b = d_det.colwise().sum().transpose();
    d_hidden += d_det * st.det_weight;
  }
  const Matrix g_makeup_w = d_hidden.transpose() * x_less;
  const Vector g_makeup_b = d_hidden.colwise().sum().transpose();
  OtStep ot_grads;
  if (ot_active) ot_grads = ot_alignment(st, cfg, cur_rows, raw_rows, true, &frozen_plan);

  constexpr double kFdStep = 1e-6;
  const auto block_error = [&](double* block, Eigen::Index size,
                               const double* analytic) {
    double block_inf = 0.0;
    for (Eigen::Index i = 0; i < size; ++i)
      block_inf = std::max(block_inf, std::abs(analytic[i]));
    const double floor = 1e-3 * block_inf + 1e-30;
    const int n_samples = std::min<Eigen::Index>(components_per_block, size);
    double worst = 0.0;
    for (int j = 0; j < n_samples; ++j) {
      const Eigen::Index idx = size <= n_samples ? j : (j * size) / n_samples;
      const double saved = block[idx];
      block[idx] = saved + kFdStep;
      const double up = objective(st);
      block[idx] = saved - kFdStep;
      const double down = objective(st);
      block[idx] = saved;
      const double fd = (up - down) / (2.0 * kFdStep);
      const double a = analytic[idx];
      const double rel =
          std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
      worst = std::max(worst, rel);
    }
    return worst;
  };

  GradientCheckReport report;
  report.max_rel_error_mimic_path = std::max(
      {block_error(st.makeup.weight.data(), st.makeup.weight.size(), g_makeup_w.data()),
       block_error(st.makeup.bias.data(), st.makeup.bias.size(), g_makeup_b.data()),
       block_error(st.critic.weight.data(), st.critic.weight.size(), g_critic_w.data()),
       block_error(st.critic.bias.data(), st.critic.bias.size(), g_critic_b.data())});
  if (cfg.surrogate_loss) {
    report.max_rel_error_mimic_path = std::max(
        {report.max_rel_error_mimic_path,
         block_error(st.det_weight.data(), st.det_weight.size(), g_det_w.data()),
         block_error(st.det_bias.data(), st.det_bias.size(), g_det_b.data())});
  }
  if (ot_active) {
    report.max_rel_error_transport_path = std::max(
        {block_error(st.gen_weight.data(), st.gen_weight.size(),
                     ot_grads.d_gen_weight.data()),
         block_error(st.gen_bias.data(), st.gen_bias.size(), ot_grads.d_gen_bias.data()),
         block_error(st.ot_critic.data(), st.ot_critic.size(),
                     ot_grads.d_ot_critic.data())});
  }
  return report;
}

}  // namespace intertwiner::harness
