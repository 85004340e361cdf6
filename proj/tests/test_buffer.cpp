#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "intertwiner/buffer.hpp"
#include "intertwiner/rng.hpp"

using namespace intertwiner;
using buffer::BufferConfig;
using buffer::ClassBuffer;
using buffer::LabeledFeature;
using buffer::Strategy;
using Vector = Eigen::VectorXd;

namespace {

LabeledFeature feat(std::initializer_list<double> values, int class_id = 0,
                    int level = 2) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return LabeledFeature{v, class_id, level};
}

}  // namespace

TEST_CASE("first sample becomes the representative; uninitialized stays empty") {
  ClassBuffer buf(3, 2);
  CHECK(!buf.representative(1).has_value());
  buf.update(feat({1.0, -2.0}, 1));
  const auto rep = buf.representative(1);
  REQUIRE(rep.has_value());
  CHECK((*rep)(0) == 1.0);
  CHECK((*rep)(1) == -2.0);
  CHECK(!buf.representative(0).has_value());
  CHECK(buf.count(1) == 1);
  CHECK(buf.detached());
}

TEST_CASE("equal weight matches the arithmetic mean") {
  ClassBuffer buf(1, 2);
  buf.update(feat({1.0, 0.0}));
  buf.update(feat({0.0, 1.0}));
  buf.update(feat({1.0, 1.0}));
  const auto rep = buf.representative(0);
  REQUIRE(rep.has_value());
  CHECK((*rep)(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK((*rep)(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("running mean stays within 1e-9 of the batch mean after 1e5 updates") {
  Rng rng(3);
  ClassBuffer buf(1, 4);
  Vector total = Vector::Zero(4);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Vector f = rng.normal_vector(4);  // unit-scale features
    total += f;
    buf.update(LabeledFeature{f, 0, 2 + (i % 4)});
  }
  const Vector mean = total / static_cast<double>(n);
  const auto rep = buf.representative(0);
  REQUIRE(rep.has_value());
  CHECK((*rep - mean).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("permutation invariance of the equal-weight mean") {
  Rng rng(4);
  std::vector<LabeledFeature> samples;
  for (int i = 0; i < 500; ++i)
    samples.push_back(LabeledFeature{rng.normal_vector(3), 0, 2});
  ClassBuffer forward(1, 3);
  for (const auto& s : samples) forward.update(s);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.integer(i)]);
  ClassBuffer shuffled(1, 3);
  for (std::size_t i : order) shuffled.update(samples[i]);
  const Vector a = *forward.representative(0);
  const Vector b = *shuffled.representative(0);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("window covering all history matches equal weight exactly") {
  Rng rng(5);
  BufferConfig window_cfg;
  window_cfg.strategy = Strategy::kWindow;
  window_cfg.window = 200;
  ClassBuffer windowed(1, 3, window_cfg);
  ClassBuffer equal(1, 3);
  for (int i = 0; i < 150; ++i) {
    const LabeledFeature s{rng.normal_vector(3), 0, 2};
    windowed.update(s);
    equal.update(s);
  }
  CHECK((*windowed.representative(0) - *equal.representative(0))
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("window keeps only the most recent K samples") {
  BufferConfig cfg;
  cfg.strategy = Strategy::kWindow;
  cfg.window = 2;
  ClassBuffer buf(1, 1, cfg);
  buf.update(feat({1.0}));
  buf.update(feat({2.0}));
  buf.update(feat({10.0}));
  CHECK((*buf.representative(0))(0) == doctest::Approx(6.0));
}

TEST_CASE("constant features are a fixed point for every strategy") {
  const Vector f = (Vector(2) << 0.25, -1.5).finished();
  for (const auto strategy :
       {Strategy::kEqualWeightAllHistory, Strategy::kDecayedWeight, Strategy::kWindow}) {
    BufferConfig cfg;
    cfg.strategy = strategy;
    ClassBuffer buf(1, 2, cfg);
    for (int i = 0; i < 50; ++i) buf.update(LabeledFeature{f, 0, 3});
    CHECK(((*buf.representative(0)) - f).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("decayed weight follows the exponential update") {
  BufferConfig cfg;
  cfg.strategy = Strategy::kDecayedWeight;
  cfg.lambda = 0.25;
  ClassBuffer buf(1, 1, cfg);
  buf.update(feat({1.0}));
  CHECK((*buf.representative(0))(0) == 1.0);  // first sample sets the rep
  buf.update(feat({0.0}));
  CHECK((*buf.representative(0))(0) == doctest::Approx(0.75));
  buf.update(feat({0.0}));
  CHECK((*buf.representative(0))(0) == doctest::Approx(0.5625));
}

TEST_CASE("batch update equals sequential updates and splits compose") {
  Rng rng(6);
  std::vector<LabeledFeature> samples;
  for (int i = 0; i < 60; ++i)
    samples.push_back(LabeledFeature{rng.normal_vector(2),
                                     static_cast<int>(rng.integer(3)), 2});
  ClassBuffer whole(3, 2);
  whole.batch_update(samples);
  ClassBuffer split(3, 2);
  split.batch_update(std::span(samples).subspan(0, 25));
  split.batch_update(std::span(samples).subspan(25));
  ClassBuffer sequential(3, 2);
  for (const auto& s : samples) sequential.update(s);
  for (int c = 0; c < 3; ++c) {
    if (!whole.representative(c)) continue;
    CHECK((*whole.representative(c) - *split.representative(c)).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK((*whole.representative(c) - *sequential.representative(c))
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("empty batch leaves the buffer unchanged") {
  ClassBuffer buf(2, 2);
  buf.update(feat({1.0, 2.0}, 1));
  const Vector before = *buf.representative(1);
  buf.batch_update({});
  CHECK((*buf.representative(1) - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a bad sample aborts the batch atomically") {
  ClassBuffer buf(2, 2);
  buf.update(feat({1.0, 1.0}, 0));
  std::vector<LabeledFeature> batch = {feat({2.0, 2.0}, 0), feat({1.0, 1.0}, 7)};
  CHECK_THROWS_AS(buf.batch_update(batch), InvalidInputError);
  CHECK((*buf.representative(0))(0) == 1.0);  // first good sample not applied
  CHECK(buf.count(0) == 1);
  std::vector<LabeledFeature> bad_dim = {feat({1.0, 2.0, 3.0}, 0)};
  CHECK_THROWS_AS(buf.batch_update(bad_dim), DimensionError);
}

TEST_CASE("samples from all levels land in one unified buffer") {
  ClassBuffer buf(1, 1);
  for (int level = 2; level <= 5; ++level)
    buf.update(feat({static_cast<double>(level)}, 0, level));
  CHECK(buf.count(0) == 4);
  CHECK((*buf.representative(0))(0) == doctest::Approx(3.5));
}

TEST_CASE("representative is read-only") {
  ClassBuffer buf(1, 2);
  buf.update(feat({0.5, 0.25}));
  const Vector first = *buf.representative(0);
  for (int i = 0; i < 10; ++i) (void)buf.representative(0);
  CHECK((*buf.representative(0) - first).cwiseAbs().maxCoeff() == 0.0);
  CHECK(buf.count(0) == 1);
  CHECK_THROWS_AS(buf.representative(5), InvalidInputError);
}

TEST_CASE("checkpoint restores identical future behavior") {
  Rng rng(7);
  for (const auto strategy :
       {Strategy::kEqualWeightAllHistory, Strategy::kDecayedWeight, Strategy::kWindow}) {
    BufferConfig cfg;
    cfg.strategy = strategy;
    cfg.window = 3;
    ClassBuffer original(2, 2, cfg);
    for (int i = 0; i < 10; ++i)
      original.update(LabeledFeature{rng.normal_vector(2),
                                     static_cast<int>(rng.integer(2)), 2});
    ClassBuffer restored = ClassBuffer::restore(original.checkpoint());
    // identical representatives now, and identical evolution afterwards
    for (int i = 0; i < 7; ++i) {
      const LabeledFeature s{rng.normal_vector(2), static_cast<int>(rng.integer(2)), 3};
      original.update(s);
      restored.update(s);
    }
    for (int c = 0; c < 2; ++c) {
      REQUIRE(original.representative(c).has_value());
      CHECK((*original.representative(c) - *restored.representative(c))
                .cwiseAbs()
                .maxCoeff() == 0.0);
      CHECK(original.count(c) == restored.count(c));
    }
  }
}

TEST_CASE("per-level buffers: top level borrows the bottom buffer") {
  buffer::PerLevelBuffers buffers(1, 1, 2, 5);
  buffers.update(feat({1.0}, 0, 5));  // lands in level 2's buffer
  CHECK(buffers.buffer_for_level(2).count(0) == 1);
  CHECK(buffers.buffer_for_level(5).count(0) == 1);
  CHECK(buffers.buffer_for_level(3).count(0) == 0);
  buffers.update(feat({3.0}, 0, 2));
  CHECK((*buffers.buffer_for_level(5).representative(0))(0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(buffers.buffer_for_level(7), InvalidInputError);
}

TEST_CASE("config validation") {
  BufferConfig bad_lambda;
  bad_lambda.strategy = Strategy::kDecayedWeight;
  bad_lambda.lambda = 1.5;
  CHECK_THROWS_AS(ClassBuffer(1, 1, bad_lambda), InvalidInputError);
  BufferConfig bad_window;
  bad_window.strategy = Strategy::kWindow;
  bad_window.window = 0;
  CHECK_THROWS_AS(ClassBuffer(1, 1, bad_window), InvalidInputError);
}
