#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "intertwiner/harness.hpp"
#include "intertwiner/io.hpp"
#include "intertwiner/rng.hpp"

using namespace intertwiner;
using harness::InputSource;
using harness::SyntheticDatasetSpec;
using harness::TrainConfig;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace {

SyntheticDatasetSpec small_spec(std::uint64_t seed = 1) {
  SyntheticDatasetSpec spec;
  spec.n_classes = 4;
  spec.dim = 16;
  spec.reliable_per_class = 30;
  spec.less_reliable_per_class = 30;
  spec.seed = seed;
  return spec;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.steps = 30;
  cfg.critic_dim = 24;
  cfg.ot_panel = 16;
  cfg.eval_panel = 16;
  return cfg;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic under the seed") {
  const auto a = harness::generate_synthetic(small_spec(9));
  const auto b = harness::generate_synthetic(small_spec(9));
  CHECK((a.class_means - b.class_means).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(a.reliable.size() == b.reliable.size());
  for (std::size_t i = 0; i < a.reliable.size(); ++i) {
    CHECK((a.reliable[i].feature - b.reliable[i].feature).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.reliable[i].class_id == b.reliable[i].class_id);
    CHECK(a.reliable[i].level == b.reliable[i].level);
  }
  const auto c = harness::generate_synthetic(small_spec(10));
  CHECK((a.class_means - c.class_means).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("less-reliable spread exceeds the reliable spread by the construction ratio") {
  SyntheticDatasetSpec spec;
  spec.seed = 21;
  const auto data = harness::generate_synthetic(spec);
  const auto var_of = [&](const Matrix& rows, const std::vector<int>& labels) {
    return harness::compaction_metrics(rows, labels).intra_class_variance;
  };
  const double rel = var_of(data.reliable_features(), data.reliable_labels());
  const double unrel = var_of(data.less_reliable_features(), data.less_reliable_labels());
  const double ratio = unrel / rel;
  // construction ratio (0.5/0.1)^2 = 25, up to sampling noise
  CHECK(ratio > 20.0);
  CHECK(ratio < 30.0);
}

TEST_CASE("coincident sets: zero spread stddevs give near-zero initial loss") {
  SyntheticDatasetSpec spec = small_spec(3);
  spec.reliable_stddev = 0.0;
  spec.less_reliable_stddev = 0.0;
  spec.offset_magnitude = 0.0;
  const auto data = harness::generate_synthetic(spec);
  TrainConfig cfg = quick_config();
  cfg.steps = 1;
  cfg.input_source = InputSource::kUpsample;  // deterministic rendition
  cfg.ot_enabled = false;
  const auto trace = harness::train_intertwiner(data, cfg, 1);
  CHECK(trace.initial.intra_class_variance == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("compaction metric anchors") {
  Matrix feats(4, 2);
  feats << 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0;
  const std::vector<int> labels = {0, 0, 1, 1};
  const auto m = harness::compaction_metrics(feats, labels);
  CHECK(m.intra_class_variance == 0.0);
  CHECK(m.centroid_gap == doctest::Approx(1.0));
  CHECK(m.nearest_centroid_accuracy == 1.0);

  const std::vector<int> one_class = {0, 0, 0, 0};
  CHECK_THROWS_AS(harness::compaction_metrics(feats, one_class), InvalidInputError);
}

TEST_CASE("training runs are deterministic") {
  const auto data = harness::generate_synthetic(small_spec(5));
  const TrainConfig cfg = quick_config();
  const auto t1 = harness::train_intertwiner(data, cfg, 17);
  const auto t2 = harness::train_intertwiner(data, cfg, 17);
  REQUIRE(t1.intertwiner_loss.size() == t2.intertwiner_loss.size());
  for (std::size_t i = 0; i < t1.intertwiner_loss.size(); ++i) {
    CHECK(t1.intertwiner_loss[i] == t2.intertwiner_loss[i]);
    CHECK(t1.ot_loss[i] == t2.ot_loss[i]);
    CHECK(t1.accuracy[i] == t2.accuracy[i]);
  }
  const auto t3 = harness::train_intertwiner(data, cfg, 18);
  CHECK(t1.intertwiner_loss.back() != t3.intertwiner_loss.back());
}

TEST_CASE("zero learning rate freezes every trace metric") {
  const auto data = harness::generate_synthetic(small_spec(6));
  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.0;
  const auto trace = harness::train_intertwiner(data, cfg, 3);
  for (std::size_t i = 1; i < trace.intertwiner_loss.size(); ++i) {
    // the equal-weight buffer re-averages identical passes, so the loss is
    // constant only up to running-mean rounding
    CHECK(std::abs(trace.intertwiner_loss[i] - trace.intertwiner_loss[0]) <=
          1e-12 * std::max(1.0, std::abs(trace.intertwiner_loss[0])));
    CHECK(trace.ot_loss[i] == trace.ot_loss[0]);
    CHECK(trace.intra_class_variance[i] == trace.intra_class_variance[0]);
    CHECK(trace.centroid_gap[i] == trace.centroid_gap[0]);
    CHECK(trace.accuracy[i] == trace.accuracy[0]);
  }
  CHECK(trace.intra_class_variance[0] ==
        doctest::Approx(trace.initial.intra_class_variance).epsilon(1e-12));
}

TEST_CASE("training compacts the less-reliable clusters") {
  const auto data = harness::generate_synthetic(small_spec(7));
  TrainConfig cfg = quick_config();
  cfg.steps = 120;
  const auto trace = harness::train_intertwiner(data, cfg, 7);
  CHECK(trace.final_smoothed.intra_class_variance <
        0.6 * trace.initial.intra_class_variance);
  // control run leaves the variance untouched
  TrainConfig control = cfg;
  control.intertwiner_enabled = false;
  const auto ctrl = harness::train_intertwiner(data, control, 7);
  CHECK(ctrl.final_smoothed.intra_class_variance ==
        doctest::Approx(ctrl.initial.intra_class_variance).epsilon(1e-12));
  CHECK(trace.final_smoothed.intra_class_variance <
        ctrl.final_smoothed.intra_class_variance);
}

TEST_CASE("buffer stays detached: loss evaluation never mutates the targets") {
  const int n_classes = 3, dim = 4;
  buffer::ClassBuffer buf(n_classes, dim);
  Rng rng(8);
  for (int c = 0; c < n_classes; ++c)
    buf.update(buffer::LabeledFeature{rng.normal_vector(dim), c, 2});
  std::vector<Vector> before;
  for (int c = 0; c < n_classes; ++c) before.push_back(*buf.representative(c));

  std::vector<buffer::LabeledFeature> samples;
  for (int i = 0; i < 10; ++i)
    samples.push_back(buffer::LabeledFeature{rng.normal_vector(dim),
                                             static_cast<int>(rng.integer(3)), 2});
  const loss::LossConfig cfg{loss::Metric::kL2, 1.0};
  (void)loss::intertwiner_loss(samples, buf, cfg);
  (void)loss::intertwiner_loss(samples, buf, cfg);
  for (int c = 0; c < n_classes; ++c) {
    const Vector now = *buf.representative(c);
    for (int j = 0; j < dim; ++j) CHECK(now(j) == before[static_cast<std::size_t>(c)](j));
  }
  // the next explicit update does move the representative
  buf.update(buffer::LabeledFeature{rng.normal_vector(dim), 0, 2});
  CHECK((*buf.representative(0) - before[0]).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("training gradients match finite differences at initialization") {
  const auto data = harness::generate_synthetic(small_spec(11));
  TrainConfig cfg = quick_config();
  SUBCASE("default transport mode") {}
  SUBCASE("with the surrogate anchor") { cfg.surrogate_loss = true; }
  SUBCASE("surrogate with naive_add fusion") {
    cfg.surrogate_loss = true;
    cfg.fusion = loss::FusionMode::kNaiveAdd;
  }
  const auto report = harness::check_training_gradients(data, cfg, 4);
  CHECK(report.max_rel_error_mimic_path <= 1e-4);
  CHECK(report.max_rel_error_transport_path <= 1e-4);
}

TEST_CASE("divergent training aborts with the failing step index") {
  const auto data = harness::generate_synthetic(small_spec(12));
  TrainConfig cfg = quick_config();
  cfg.surrogate_loss = true;
  cfg.fusion = loss::FusionMode::kNaiveAdd;
  cfg.learning_rate = 3000.0;  // drives the quadratic surrogate unstable
  cfg.steps = 200;
  bool aborted = false;
  try {
    (void)harness::train_intertwiner(data, cfg, 2);
  } catch (const TrainingDivergedError& e) {
    aborted = true;
    CHECK(e.step() >= 0);
    CHECK(e.step() < 200);
  }
  CHECK(aborted);
}

TEST_CASE("trace exports: csv shape and summary fields") {
  const auto data = harness::generate_synthetic(small_spec(13));
  TrainConfig cfg = quick_config();
  cfg.steps = 5;
  const auto trace = harness::train_intertwiner(data, cfg, 13);
  const std::string csv = trace.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);  // header + 5 rows
  const auto j = trace.summary(13, cfg);
  CHECK(j.at("seed").get<std::uint64_t>() == 13);
  CHECK(j.at("steps").get<int>() == 5);
  CHECK(j.contains("variance_ratio"));
  CHECK(trace.per_class.size() == 4);
  for (const auto& d : trace.per_class) {
    CHECK(std::isfinite(d.initial_variance));
    CHECK(std::isfinite(d.final_variance));
  }
}

TEST_CASE("config validation") {
  TrainConfig cfg = quick_config();
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
  cfg = quick_config();
  cfg.loss.metric = loss::Metric::kKl;
  CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
  cfg = quick_config();
  cfg.learning_rate = -0.5;
  CHECK_THROWS_AS(cfg.validate(), InvalidInputError);
  SyntheticDatasetSpec spec;
  spec.n_classes = 0;
  CHECK_THROWS_AS(spec.validate(), InvalidInputError);
}

TEST_CASE("dataset export writes features and label sidecars") {
  const auto data = harness::generate_synthetic(small_spec(14));
  const auto dir = std::filesystem::temp_directory_path() / "itw_harness_export";
  std::filesystem::create_directories(dir);
  harness::export_dataset(data, dir / "rel.csv", dir / "rel_labels.csv",
                          dir / "unrel.csv", dir / "unrel_labels.csv");
  const Matrix rel = read_matrix_csv(dir / "rel.csv");
  CHECK(rel.rows() == 120);
  CHECK(rel.cols() == 16);
  const std::string labels = read_text_file(dir / "rel_labels.csv");
  CHECK(std::count(labels.begin(), labels.end(), '\n') == 120);
  std::filesystem::remove_all(dir);
}
