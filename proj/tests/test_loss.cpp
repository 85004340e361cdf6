#include <doctest.h>

#include <cmath>

#include "intertwiner/loss.hpp"
#include "intertwiner/rng.hpp"

using namespace intertwiner;
using loss::CriticMap;
using loss::FusionMode;
using loss::LossConfig;
using loss::MakeupMap;
using loss::Metric;
using buffer::ClassBuffer;
using buffer::LabeledFeature;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace {

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

ClassBuffer buffer_with(const Vector& rep, int class_id = 0, int n_classes = 1) {
  ClassBuffer buf(n_classes, static_cast<int>(rep.size()));
  buf.update(LabeledFeature{rep, class_id, 2});
  return buf;
}

}  // namespace

TEST_CASE("all metrics vanish when features match the representative") {
  const Vector rep = vec({0.3, 0.6});
  const auto buf = buffer_with(rep);
  const std::vector<LabeledFeature> samples = {{rep, 0, 2}};
  for (const Metric m : {Metric::kL1, Metric::kL2, Metric::kKl}) {
    const auto r = loss::intertwiner_loss(samples, buf, LossConfig{m, 2.5});
    CHECK(r.samples_used == 1);
    CHECK(std::abs(r.value) <= 1e-7);
  }
}

TEST_CASE("l2 arithmetic anchor") {
  const auto buf = buffer_with(vec({0.25, 0.75}));
  const std::vector<LabeledFeature> samples = {{vec({0.5, 0.5}), 0, 2}};
  const auto r = loss::intertwiner_loss(samples, buf, LossConfig{Metric::kL2, 1.0});
  CHECK(r.value == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("kl anchor: log 2 within 1e-7") {
  const double v = loss::kl_term(vec({0.5, 0.5}), vec({0.25, 0.25}));
  CHECK(std::abs(v - std::log(2.0)) <= 1e-7);
  CHECK(loss::kl_term(vec({0.5, 0.5}), vec({0.5, 0.5})) == 0.0);
}

TEST_CASE("kl is asymmetric on random pairs") {
  Rng rng(1);
  int differing = 0;
  for (int i = 0; i < 20; ++i) {
    Vector b(3), f(3);
    for (int j = 0; j < 3; ++j) {
      b(j) = rng.uniform(0.05, 0.95);
      f(j) = rng.uniform(0.05, 0.95);
    }
    if (std::abs(loss::kl_term(b, f) - loss::kl_term(f, b)) > 1e-9) ++differing;
  }
  CHECK(differing == 20);
}

TEST_CASE("kl rejects out-of-domain components") {
  CHECK_THROWS_AS(loss::kl_term(vec({0.5, 1.0}), vec({0.5, 0.5})), InvalidInputError);
  CHECK_THROWS_AS(loss::kl_term(vec({0.5, 0.5}), vec({0.0, 0.5})), InvalidInputError);
  const auto buf = buffer_with(vec({0.5, 1.5}));
  const std::vector<LabeledFeature> samples = {{vec({0.5, 0.5}), 0, 2}};
  CHECK_THROWS_AS(loss::intertwiner_loss(samples, buf, LossConfig{Metric::kKl, 1.0}),
                  InvalidInputError);
}

TEST_CASE("loss scales linearly in the factor, exactly") {
  Rng rng(2);
  const Vector rep = vec({0.2, 0.4, 0.6});
  auto buf = buffer_with(rep);
  std::vector<LabeledFeature> samples;
  for (int i = 0; i < 8; ++i) {
    Vector f(3);
    for (int j = 0; j < 3; ++j) f(j) = rng.uniform(0.1, 0.9);
    samples.push_back({f, 0, 2});
  }
  for (const Metric m : {Metric::kL1, Metric::kL2, Metric::kKl}) {
    const double base = loss::intertwiner_loss(samples, buf, LossConfig{m, 1.0}).value;
    const double scaled = loss::intertwiner_loss(samples, buf, LossConfig{m, 3.0}).value;
    CHECK(scaled == 3.0 * base);
  }
}

TEST_CASE("uninitialized classes are skipped and counted") {
  ClassBuffer buf(2, 2);
  buf.update(LabeledFeature{vec({0.5, 0.5}), 0, 2});
  const std::vector<LabeledFeature> samples = {{vec({0.4, 0.6}), 0, 2},
                                               {vec({0.4, 0.6}), 1, 2}};
  const auto r = loss::intertwiner_loss(samples, buf, LossConfig{Metric::kL2, 1.0});
  CHECK(r.samples_used == 1);
  CHECK(r.samples_skipped == 1);
  CHECK(r.value == doctest::Approx(0.02).epsilon(1e-12));
}

TEST_CASE("mean reduction divides by the used count") {
  const auto buf = buffer_with(vec({0.0, 0.0}) + Vector::Constant(2, 0.5));
  const std::vector<LabeledFeature> samples = {{vec({0.7, 0.5}), 0, 2},
                                               {vec({0.5, 0.9}), 0, 2}};
  LossConfig sum_cfg{Metric::kL2, 1.0};
  LossConfig mean_cfg{Metric::kL2, 1.0, true};
  const double sum = loss::intertwiner_loss(samples, buf, sum_cfg).value;
  const double mean = loss::intertwiner_loss(samples, buf, mean_cfg).value;
  CHECK(mean == doctest::Approx(sum / 2.0).epsilon(1e-15));
}

TEST_CASE("l2 is symmetric in (f, b); kl is not") {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    Vector f(4), b(4);
    for (int j = 0; j < 4; ++j) {
      f(j) = rng.uniform(0.1, 0.9);
      b(j) = rng.uniform(0.1, 0.9);
    }
    CHECK((f - b).squaredNorm() == doctest::Approx((b - f).squaredNorm()));
  }
}

TEST_CASE("fusion anchors") {
  const Vector v = vec({1.0, 0.0});
  const Vector w = vec({0.0, 1.0});
  CHECK((loss::fuse_features(v, v, FusionMode::kLinear) - v).cwiseAbs().maxCoeff() ==
        0.0);
  const Vector mid = loss::fuse_features(v, w, FusionMode::kLinear);
  CHECK(mid(0) == 0.5);
  CHECK(mid(1) == 0.5);
  const Vector sum = loss::fuse_features(v, w, FusionMode::kNaiveAdd);
  CHECK(sum(0) == 1.0);
  CHECK(sum(1) == 1.0);
  CHECK((loss::fuse_features(v, w, FusionMode::kSeparate) - w).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK_THROWS_AS(loss::fuse_features(v, vec({1.0, 2.0, 3.0}), FusionMode::kLinear),
                  DimensionError);
}

TEST_CASE("linear fusion is exactly the midpoint") {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const Vector a = rng.normal_vector(5);
    const Vector b = rng.normal_vector(5);
    const Vector fused = loss::fuse_features(a, b, FusionMode::kLinear);
    CHECK((fused - 0.5 * (a + b)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("makeup and critic map anchors") {
  const MakeupMap identity = MakeupMap::identity(3);
  const Vector f = vec({1.0, -2.0, 0.5});
  CHECK((loss::makeup_apply(identity, f) - f).cwiseAbs().maxCoeff() == 0.0);

  CriticMap zero{Matrix::Zero(4, 3), Vector::Zero(4)};
  const Vector squashed = loss::critic_apply(zero, f);
  for (int i = 0; i < 4; ++i) CHECK(squashed(i) == 0.5);

  Rng rng(5);
  CriticMap random{rng.normal_matrix(4, 3), rng.normal_vector(4)};
  const Vector out = loss::critic_apply(random, f);
  CHECK(out.minCoeff() > 0.0);
  CHECK(out.maxCoeff() < 1.0);
  CHECK_THROWS_AS(loss::makeup_apply(identity, vec({1.0})), DimensionError);
}

TEST_CASE("total loss sums terms and rejects non-finite input") {
  CHECK(loss::total_loss(0.0, {}, 0.0) == 0.0);
  const std::vector<double> per_level = {0.2, 0.3};
  CHECK(loss::total_loss(1.5, per_level, 2.0) == doctest::Approx(4.0));
  const std::vector<double> bad = {std::nan("")};
  CHECK_THROWS_AS(loss::total_loss(0.0, bad, 0.0), InvalidInputError);
  CHECK_THROWS_AS(loss::total_loss(INFINITY, {}, 0.0), InvalidInputError);
}

TEST_CASE("analytic mimic-path gradients match central differences to 1e-6") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 6, d = 4, dp = 5;
    const Matrix inputs = rng.normal_matrix(n, d);
    Matrix targets(n, dp);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dp; ++j) targets(i, j) = rng.uniform(0.2, 0.8);
    MakeupMap makeup{rng.normal_matrix(d, d) * 0.5, rng.normal_vector(d) * 0.1};
    CriticMap critic{rng.normal_matrix(dp, d) * 0.5, rng.normal_vector(dp) * 0.1};
    const LossConfig cfg{Metric::kL2, 1.0, true};

    loss::MimicGradients grads;
    loss::mimic_l2_loss(inputs, targets, makeup, critic, cfg, &grads);

    const double h = 1e-6;
    const auto fd_check = [&](auto& block, const auto& analytic) {
      double block_inf = analytic.cwiseAbs().maxCoeff();
      for (Eigen::Index i = 0; i < block.size(); ++i) {
        double* cell = block.data() + i;
        const double saved = *cell;
        *cell = saved + h;
        const double up =
            loss::mimic_l2_loss(inputs, targets, makeup, critic, cfg, nullptr);
        *cell = saved - h;
        const double down =
            loss::mimic_l2_loss(inputs, targets, makeup, critic, cfg, nullptr);
        *cell = saved;
        const double fd = (up - down) / (2.0 * h);
        const double a = *(analytic.data() + i);
        const double denom = std::max({std::abs(a), std::abs(fd), 1e-3 * block_inf});
        CHECK(std::abs(a - fd) / denom <= 1e-6);
      }
    };
    fd_check(makeup.weight, grads.d_makeup_weight);
    fd_check(makeup.bias, grads.d_makeup_bias);
    fd_check(critic.weight, grads.d_critic_weight);
    fd_check(critic.bias, grads.d_critic_bias);
  }
}
