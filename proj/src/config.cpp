#include "intertwiner/config.hpp"

#include <set>

namespace intertwiner::config {

namespace {

using nlohmann::json;

class Collector {
 public:
  void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) issues_.push_back(where + ": expected an object");
  }

  void check_keys(const json& j, const std::string& where,
                  const std::set<std::string>& allowed) {
    if (!j.is_object()) return;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!allowed.count(it.key()))
        issues_.push_back(where + ": unknown key '" + it.key() + "'");
    }
  }

  template <typename T>
  void read(const json& j, const std::string& where, const char* key, T& out) {
    if (!j.is_object() || !j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      issues_.push_back(where + "." + key + ": wrong type");
    }
  }

  void note(const std::string& issue) { issues_.push_back(issue); }

  void finish() const {
    if (issues_.empty()) return;
    std::string msg = "config schema violations:";
    for (const auto& i : issues_) msg += "\n  - " + i;
    throw SchemaError(msg);
  }

 private:
  std::vector<std::string> issues_;
};

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  Collector c;
  c.require_object(doc, "config");
  c.check_keys(doc, "config", {"sinkhorn", "loss", "buffer", "assignment", "harness"});

  if (doc.is_object() && doc.contains("sinkhorn")) {
    const json& s = doc.at("sinkhorn");
    c.require_object(s, "sinkhorn");
    c.check_keys(s, "sinkhorn", {"epsilon", "max_iters", "tolerance"});
    c.read(s, "sinkhorn", "epsilon", cfg.sinkhorn.epsilon);
    c.read(s, "sinkhorn", "max_iters", cfg.sinkhorn.max_iters);
    c.read(s, "sinkhorn", "tolerance", cfg.sinkhorn.tolerance);
  }
  if (doc.is_object() && doc.contains("loss")) {
    const json& l = doc.at("loss");
    c.require_object(l, "loss");
    c.check_keys(l, "loss", {"metric", "factor", "reduction"});
    std::string metric = loss::metric_name(cfg.loss.metric);
    c.read(l, "loss", "metric", metric);
    try {
      cfg.loss.metric = loss::metric_from_name(metric);
    } catch (const SchemaError& e) {
      c.note(e.what());
    }
    c.read(l, "loss", "factor", cfg.loss.factor);
    std::string reduction = cfg.loss.mean_reduction ? "mean" : "sum";
    c.read(l, "loss", "reduction", reduction);
    if (reduction == "mean") {
      cfg.loss.mean_reduction = true;
    } else if (reduction == "sum") {
      cfg.loss.mean_reduction = false;
    } else {
      c.note("loss.reduction: expected 'sum' or 'mean'");
    }
  }
  if (doc.is_object() && doc.contains("buffer")) {
    const json& b = doc.at("buffer");
    c.require_object(b, "buffer");
    c.check_keys(b, "buffer", {"strategy", "lambda", "window", "detached"});
    std::string strategy = "equal_weight_all_history";
    c.read(b, "buffer", "strategy", strategy);
    if (strategy == "equal_weight_all_history") {
      cfg.buffer.strategy = buffer::Strategy::kEqualWeightAllHistory;
    } else if (strategy == "decayed_weight") {
      cfg.buffer.strategy = buffer::Strategy::kDecayedWeight;
    } else if (strategy == "window") {
      cfg.buffer.strategy = buffer::Strategy::kWindow;
    } else {
      c.note("buffer.strategy: unknown strategy '" + strategy + "'");
    }
    c.read(b, "buffer", "lambda", cfg.buffer.lambda);
    c.read(b, "buffer", "window", cfg.buffer.window);
    c.read(b, "buffer", "detached", cfg.buffer.detached);
  }
  if (doc.is_object() && doc.contains("assignment")) {
    const json& a = doc.at("assignment");
    c.require_object(a, "assignment");
    c.check_keys(a, "assignment",
                 {"a0", "base", "min_level", "max_level", "roi_out", "image_size",
                  "strides", "strategy", "log_base", "more_on_higher_base"});
    c.read(a, "assignment", "a0", cfg.assignment.canonical_level);
    c.read(a, "assignment", "base", cfg.assignment.base);
    c.read(a, "assignment", "min_level", cfg.assignment.min_level);
    c.read(a, "assignment", "max_level", cfg.assignment.max_level);
    c.read(a, "assignment", "roi_out", cfg.assignment.roi_out);
    c.read(a, "assignment", "image_size", cfg.assignment.image_size);
    c.read(a, "assignment", "strides", cfg.assignment.strides);
    std::string strategy = assign::strategy_name(cfg.assignment.strategy);
    c.read(a, "assignment", "strategy", strategy);
    try {
      cfg.assignment.strategy = assign::strategy_from_name(strategy);
    } catch (const SchemaError& e) {
      c.note(e.what());
    }
    std::string log_base = cfg.assignment.log_base == assign::LogBase::kTwo
                               ? "two"
                               : "natural";
    c.read(a, "assignment", "log_base", log_base);
    if (log_base == "two") {
      cfg.assignment.log_base = assign::LogBase::kTwo;
    } else if (log_base == "natural") {
      cfg.assignment.log_base = assign::LogBase::kNatural;
    } else {
      c.note("assignment.log_base: expected 'two' or 'natural'");
    }
    c.read(a, "assignment", "more_on_higher_base", cfg.assignment.more_on_higher_base);
  }
  if (doc.is_object() && doc.contains("harness")) {
    const json& h = doc.at("harness");
    c.require_object(h, "harness");
    c.check_keys(h, "harness",
                 {"n_classes", "dim", "reliable_per_class", "less_reliable_per_class",
                  "reliable_stddev", "less_reliable_stddev", "offset_magnitude",
                  "steps", "learning_rate", "ot_enabled", "input_source", "fusion",
                  "intertwiner_enabled", "surrogate_loss", "surrogate_weight",
                  "critic_dim", "ot_feature_dim", "ot_panel", "eval_panel"});
    c.read(h, "harness", "n_classes", cfg.dataset.n_classes);
    c.read(h, "harness", "dim", cfg.dataset.dim);
    c.read(h, "harness", "reliable_per_class", cfg.dataset.reliable_per_class);
    c.read(h, "harness", "less_reliable_per_class", cfg.dataset.less_reliable_per_class);
    c.read(h, "harness", "reliable_stddev", cfg.dataset.reliable_stddev);
    c.read(h, "harness", "less_reliable_stddev", cfg.dataset.less_reliable_stddev);
    c.read(h, "harness", "offset_magnitude", cfg.dataset.offset_magnitude);
    c.read(h, "harness", "steps", cfg.harness.steps);
    c.read(h, "harness", "learning_rate", cfg.harness.learning_rate);
    c.read(h, "harness", "ot_enabled", cfg.harness.ot_enabled);
    std::string source = harness::input_source_name(cfg.harness.input_source);
    c.read(h, "harness", "input_source", source);
    if (source == "sweep") {
      cfg.sweep_input_sources = true;
    } else {
      try {
        cfg.harness.input_source = harness::input_source_from_name(source);
      } catch (const SchemaError& e) {
        c.note(e.what());
      }
    }
    std::string fusion = loss::fusion_name(cfg.harness.fusion);
    c.read(h, "harness", "fusion", fusion);
    try {
      cfg.harness.fusion = loss::fusion_from_name(fusion);
    } catch (const SchemaError& e) {
      c.note(e.what());
    }
    c.read(h, "harness", "intertwiner_enabled", cfg.harness.intertwiner_enabled);
    c.read(h, "harness", "surrogate_loss", cfg.harness.surrogate_loss);
    c.read(h, "harness", "surrogate_weight", cfg.harness.surrogate_weight);
    c.read(h, "harness", "critic_dim", cfg.harness.critic_dim);
    c.read(h, "harness", "ot_feature_dim", cfg.harness.ot_feature_dim);
    c.read(h, "harness", "ot_panel", cfg.harness.ot_panel);
    c.read(h, "harness", "eval_panel", cfg.harness.eval_panel);
  }

  // Semantic validation collected alongside structural checks.
  try {
    cfg.sinkhorn.validate();
  } catch (const std::exception& e) {
    c.note(e.what());
  }
  try {
    cfg.loss.validate();
  } catch (const std::exception& e) {
    c.note(e.what());
  }
  try {
    cfg.buffer.validate();
  } catch (const std::exception& e) {
    c.note(e.what());
  }
  try {
    cfg.assignment.validate();
  } catch (const std::exception& e) {
    c.note(e.what());
  }
  try {
    cfg.dataset.validate();
  } catch (const std::exception& e) {
    c.note(e.what());
  }
  cfg.harness.loss = cfg.loss;
  cfg.harness.sinkhorn = cfg.sinkhorn;
  cfg.harness.buffer = cfg.buffer;
  try {
    cfg.harness.validate();
  } catch (const std::exception& e) {
    c.note(e.what());
  }
  c.finish();
  return cfg;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["sinkhorn"] = {{"epsilon", sinkhorn.epsilon},
                   {"max_iters", sinkhorn.max_iters},
                   {"tolerance", sinkhorn.tolerance}};
  j["loss"] = {{"metric", loss::metric_name(loss.metric)},
               {"factor", loss.factor},
               {"reduction", loss.mean_reduction ? "mean" : "sum"}};
  const char* strategy = "equal_weight_all_history";
  if (buffer.strategy == buffer::Strategy::kDecayedWeight) strategy = "decayed_weight";
  if (buffer.strategy == buffer::Strategy::kWindow) strategy = "window";
  j["buffer"] = {{"strategy", strategy},
                 {"lambda", buffer.lambda},
                 {"window", buffer.window},
                 {"detached", buffer.detached}};
  j["assignment"] = {{"a0", assignment.canonical_level},
                     {"base", assignment.base},
                     {"min_level", assignment.min_level},
                     {"max_level", assignment.max_level},
                     {"roi_out", assignment.roi_out},
                     {"image_size", assignment.image_size},
                     {"strides", assignment.strides},
                     {"strategy", assign::strategy_name(assignment.strategy)},
                     {"log_base", assignment.log_base == assign::LogBase::kTwo
                                      ? "two"
                                      : "natural"},
                     {"more_on_higher_base", assignment.more_on_higher_base}};
  j["harness"] = {{"n_classes", dataset.n_classes},
                  {"dim", dataset.dim},
                  {"reliable_per_class", dataset.reliable_per_class},
                  {"less_reliable_per_class", dataset.less_reliable_per_class},
                  {"reliable_stddev", dataset.reliable_stddev},
                  {"less_reliable_stddev", dataset.less_reliable_stddev},
                  {"offset_magnitude", dataset.offset_magnitude},
                  {"steps", harness.steps},
                  {"learning_rate", harness.learning_rate},
                  {"ot_enabled", harness.ot_enabled},
                  {"input_source", sweep_input_sources
                                       ? "sweep"
                                       : harness::input_source_name(harness.input_source)},
                  {"fusion", loss::fusion_name(harness.fusion)},
                  {"intertwiner_enabled", harness.intertwiner_enabled},
                  {"surrogate_loss", harness.surrogate_loss},
                  {"surrogate_weight", harness.surrogate_weight},
                  {"critic_dim", harness.critic_dim},
                  {"ot_feature_dim", harness.ot_feature_dim},
                  {"ot_panel", harness.ot_panel},
                  {"eval_panel", harness.eval_panel}};
  return j;
}

}  // namespace intertwiner::config
