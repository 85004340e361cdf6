#include "intertwiner/buffer.hpp"

#include <string>

namespace intertwiner::buffer {

void BufferConfig::validate() const {
  if (strategy == Strategy::kDecayedWeight && !(lambda > 0.0 && lambda < 1.0))
    throw InvalidInputError("buffer decay lambda must lie in (0, 1)");
  if (strategy == Strategy::kWindow && window < 1)
    throw InvalidInputError("buffer window must be >= 1");
}

ClassBuffer::ClassBuffer(int n_classes, int dim, BufferConfig cfg)
    : cfg_(cfg), dim_(dim) {
  if (n_classes < 1) throw InvalidInputError("buffer needs at least one class");
  if (dim < 1) throw InvalidInputError("buffer feature dim must be >= 1");
  cfg_.validate();
  reps_ = Matrix::Zero(n_classes, dim);
  counts_.assign(static_cast<std::size_t>(n_classes), 0);
  if (cfg_.strategy == Strategy::kWindow)
    windows_.resize(static_cast<std::size_t>(n_classes));
}

void ClassBuffer::validate_sample(const LabeledFeature& sample) const {
  if (sample.class_id < 0 || sample.class_id >= n_classes())
    throw InvalidInputError("buffer update: class_id " +
                            std::to_string(sample.class_id) + " out of range [0, " +
                            std::to_string(n_classes()) + ")");
  if (sample.feature.size() != dim_)
    throw DimensionError("buffer update: feature dim " +
                         std::to_string(sample.feature.size()) + " != buffer dim " +
                         std::to_string(dim_));
}

void ClassBuffer::apply(const LabeledFeature& sample) {
  const auto c = static_cast<std::size_t>(sample.class_id);
  const int row = sample.class_id;
  switch (cfg_.strategy) {
    case Strategy::kEqualWeightAllHistory: {
      const double z = static_cast<double>(counts_[c]);
      reps_.row(row) += (sample.feature.transpose() - reps_.row(row)) / (z + 1.0);
      break;
    }
    case Strategy::kDecayedWeight: {
      if (counts_[c] == 0) {
        reps_.row(row) = sample.feature.transpose();
      } else {
        reps_.row(row) += cfg_.lambda * (sample.feature.transpose() - reps_.row(row));
      }
      break;
    }
    case Strategy::kWindow: {
      auto& ring = windows_[c];
      ring.push_back(sample.feature);
      if (static_cast<int>(ring.size()) > cfg_.window) ring.pop_front();
      Vector mean = Vector::Zero(dim_);
      double n = 0.0;
      for (const Vector& f : ring) {
        n += 1.0;
        mean += (f - mean) / n;
      }
      reps_.row(row) = mean.transpose();
      break;
    }
  }
  counts_[c] += 1;
}

void ClassBuffer::update(const LabeledFeature& sample) {
  validate_sample(sample);
  apply(sample);
}

void ClassBuffer::batch_update(std::span<const LabeledFeature> samples) {
  for (const auto& s : samples) validate_sample(s);
  for (const auto& s : samples) apply(s);
}

std::optional<Vector> ClassBuffer::representative(int class_id) const {
  if (class_id < 0 || class_id >= n_classes())
    throw InvalidInputError("representative: class_id " + std::to_string(class_id) +
                            " out of range [0, " + std::to_string(n_classes()) + ")");
  if (counts_[static_cast<std::size_t>(class_id)] == 0) return std::nullopt;
  return Vector(reps_.row(class_id).transpose());
}

long ClassBuffer::count(int class_id) const {
  if (class_id < 0 || class_id >= n_classes())
    throw InvalidInputError("count: class_id out of range");
  return counts_[static_cast<std::size_t>(class_id)];
}

namespace {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kEqualWeightAllHistory: return "equal_weight_all_history";
    case Strategy::kDecayedWeight: return "decayed_weight";
    case Strategy::kWindow: return "window";
  }
  return "equal_weight_all_history";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "equal_weight_all_history") return Strategy::kEqualWeightAllHistory;
  if (name == "decayed_weight") return Strategy::kDecayedWeight;
  if (name == "window") return Strategy::kWindow;
  throw SchemaError("unknown buffer strategy '" + name + "'");
}

}  // namespace

nlohmann::json ClassBuffer::checkpoint() const {
  nlohmann::json j;
  j["strategy"] = strategy_name(cfg_.strategy);
  j["detached"] = cfg_.detached;
  j["dim"] = dim_;
  if (cfg_.strategy == Strategy::kDecayedWeight) j["lambda"] = cfg_.lambda;
  if (cfg_.strategy == Strategy::kWindow) j["window"] = cfg_.window;
  j["counts"] = counts_;
  nlohmann::json reps = nlohmann::json::array();
  for (Eigen::Index r = 0; r < reps_.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < reps_.cols(); ++c) row.push_back(reps_(r, c));
    reps.push_back(std::move(row));
  }
  j["reps"] = std::move(reps);
  if (cfg_.strategy == Strategy::kWindow) {
    nlohmann::json store = nlohmann::json::array();
    for (const auto& ring : windows_) {
      nlohmann::json cls = nlohmann::json::array();
      for (const Vector& f : ring) {
        nlohmann::json vec = nlohmann::json::array();
        for (Eigen::Index i = 0; i < f.size(); ++i) vec.push_back(f(i));
        cls.push_back(std::move(vec));
      }
      store.push_back(std::move(cls));
    }
    j["window_store"] = std::move(store);
  }
  return j;
}

ClassBuffer ClassBuffer::restore(const nlohmann::json& j) {
  try {
    BufferConfig cfg;
    cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    cfg.detached = j.at("detached").get<bool>();
    if (cfg.strategy == Strategy::kDecayedWeight) cfg.lambda = j.at("lambda").get<double>();
    if (cfg.strategy == Strategy::kWindow) cfg.window = j.at("window").get<int>();
    const auto& reps = j.at("reps");
    const int n_classes = static_cast<int>(reps.size());
    const int dim = j.at("dim").get<int>();
    ClassBuffer buf(n_classes, dim, cfg);
    for (int r = 0; r < n_classes; ++r) {
      const auto& row = reps.at(static_cast<std::size_t>(r));
      if (static_cast<int>(row.size()) != dim)
        throw SchemaError("buffer checkpoint: ragged reps row");
      for (int c = 0; c < dim; ++c)
        buf.reps_(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    buf.counts_ = j.at("counts").get<std::vector<long>>();
    if (static_cast<int>(buf.counts_.size()) != n_classes)
      throw SchemaError("buffer checkpoint: counts length mismatch");
    if (cfg.strategy == Strategy::kWindow) {
      const auto& store = j.at("window_store");
      if (static_cast<int>(store.size()) != n_classes)
        throw SchemaError("buffer checkpoint: window_store length mismatch");
      for (int c = 0; c < n_classes; ++c) {
        for (const auto& vec : store.at(static_cast<std::size_t>(c))) {
          Vector f(dim);
          if (static_cast<int>(vec.size()) != dim)
            throw SchemaError("buffer checkpoint: ragged window feature");
          for (int i = 0; i < dim; ++i) f(i) = vec.at(static_cast<std::size_t>(i)).get<double>();
          buf.windows_[static_cast<std::size_t>(c)].push_back(std::move(f));
        }
      }
    }
    return buf;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("buffer checkpoint: ") + e.what());
  }
}

PerLevelBuffers::PerLevelBuffers(int n_classes, int dim, int min_level,
                                 int max_level, BufferConfig cfg)
    : min_level_(min_level), max_level_(max_level) {
  if (min_level >= max_level)
    throw InvalidInputError("per-level buffers need min_level < max_level");
  for (int l = min_level; l < max_level; ++l)
    buffers_.emplace_back(n_classes, dim, cfg);
}

ClassBuffer& PerLevelBuffers::buffer_for_level(int level) {
  if (level < min_level_ || level > max_level_)
    throw InvalidInputError("buffer_for_level: level " + std::to_string(level) +
                            " outside [" + std::to_string(min_level_) + ", " +
                            std::to_string(max_level_) + "]");
  if (level == max_level_) return buffers_.front();  // top level borrows bottom
  return buffers_[static_cast<std::size_t>(level - min_level_)];
}

const ClassBuffer& PerLevelBuffers::buffer_for_level(int level) const {
  return const_cast<PerLevelBuffers*>(this)->buffer_for_level(level);
}

void PerLevelBuffers::update(const LabeledFeature& sample) {
  buffer_for_level(sample.level).update(sample);
}

}  // namespace intertwiner::buffer
