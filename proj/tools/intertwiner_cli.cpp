#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "intertwiner/assign.hpp"
#include "intertwiner/config.hpp"
#include "intertwiner/harness.hpp"
#include "intertwiner/io.hpp"
#include "intertwiner/ot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace intertwiner;

namespace {

constexpr int kExitIo = 2;
constexpr int kExitSchema = 3;
constexpr int kExitInput = 4;
constexpr int kExitNumeric = 5;

struct OtOptions {
  std::string features_a;
  std::string features_b;
  std::string cost_file;
  double epsilon = 0.1;
  int max_iters = 10;
  double tolerance = 0.0;
  bool biased = false;
  bool exact = false;
  std::string plan_out;
  std::string json_out;
};

int run_ot(const OtOptions& opt) {
  ot::SinkhornConfig cfg{opt.epsilon, opt.max_iters, opt.tolerance};
  cfg.validate();
  json out;
  out["epsilon"] = cfg.epsilon;
  out["max_iters"] = cfg.max_iters;
  out["tolerance"] = cfg.tolerance;

  ot::GroundCost cost;
  if (!opt.cost_file.empty()) {
    if (!opt.features_a.empty() || !opt.features_b.empty())
      throw SchemaError("ot: pass either two feature files or --cost, not both");
    if (opt.biased)
      throw SchemaError("ot: --biased needs feature inputs, not a precomputed cost");
    cost.q = read_matrix_csv(opt.cost_file);
    if (cost.q.size() == 0) throw SchemaError("ot: cost file is empty");
  } else {
    if (opt.features_a.empty() || opt.features_b.empty())
      throw SchemaError("ot: expected two feature CSV files (or --cost FILE)");
    const ot::FeatureMatrix a = ot::FeatureMatrix::from_csv(opt.features_a);
    const ot::FeatureMatrix b = ot::FeatureMatrix::from_csv(opt.features_b);
    cost = ot::ground_cost(a, b);
    if (opt.biased) out["biased_divergence"] = ot::biased_sinkhorn(a, b, cfg);
  }

  const ot::TransportPlan plan = ot::sinkhorn_plan(cost, cfg);
  const double divergence = ot::plan_cost(cost, plan.p);
  out["divergence"] = divergence;
  out["iters_run"] = plan.iters_run;
  out["residual"] = plan.residual;
  if (opt.exact) out["exact"] = ot::exact_ot_uniform(cost);
  if (!opt.plan_out.empty()) write_matrix_csv(opt.plan_out, plan.p);
  if (!opt.json_out.empty()) write_json_atomic(opt.json_out, out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct AssignOptions {
  std::string proposals_file;
  std::string strategy = "default";
  std::string log_base = "two";
  int a0 = 4;
  double base = 224.0;
  int image_size = 512;
  int roi_out = 14;
  std::string json_out;
};

int run_assign(const AssignOptions& opt) {
  assign::AssignmentConfig cfg;
  cfg.strategy = assign::strategy_from_name(opt.strategy);
  if (opt.log_base == "two") {
    cfg.log_base = assign::LogBase::kTwo;
  } else if (opt.log_base == "natural") {
    cfg.log_base = assign::LogBase::kNatural;
  } else {
    throw SchemaError("assign: --log expects 'two' or 'natural'");
  }
  cfg.canonical_level = opt.a0;
  cfg.base = opt.base;
  cfg.image_size = opt.image_size;
  cfg.roi_out = opt.roi_out;
  cfg.validate();
  const auto proposals = assign::read_proposals_csv(opt.proposals_file);
  const auto breakdown = assign::breakdown_report(proposals, cfg);
  std::cout << assign::render_text(breakdown);
  if (!opt.json_out.empty()) write_json_atomic(opt.json_out, assign::render_json(breakdown));
  return 0;
}

struct SimulateOptions {
  std::string config_file;
  std::string out_dir;
  std::uint64_t seed = 1;
  std::string seeds_range;
  int steps_override = -1;
  double lr_override = -1.0;
  std::string mode_override;
  double epsilon_override = -1.0;
  int iters_override = -1;
};

void write_run_outputs(const fs::path& dir, const harness::RunTrace& trace,
                       std::uint64_t seed, const harness::TrainConfig& cfg) {
  fs::create_directories(dir);
  write_text_atomic(dir / "trace.csv", trace.to_csv());
  write_json_atomic(dir / "summary.json", trace.summary(seed, cfg));
  std::string pc =
      "class_id,initial_variance,final_variance,variance_delta,"
      "initial_accuracy,final_accuracy,accuracy_delta\n";
  for (const auto& d : trace.per_class) {
    pc += std::to_string(d.class_id);
    pc += ',';
    pc += format_double(d.initial_variance);
    pc += ',';
    pc += format_double(d.final_variance);
    pc += ',';
    pc += format_double(d.final_variance - d.initial_variance);
    pc += ',';
    pc += format_double(d.initial_accuracy);
    pc += ',';
    pc += format_double(d.final_accuracy);
    pc += ',';
    pc += format_double(d.final_accuracy - d.initial_accuracy);
    pc += '\n';
  }
  write_text_atomic(dir / "per_class_delta.csv", pc);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int run_simulate(const SimulateOptions& opt) {
  config::ExperimentConfig cfg;
  if (!opt.config_file.empty())
    cfg = config::ExperimentConfig::from_json(read_json_file(opt.config_file));
  if (opt.steps_override >= 0) cfg.harness.steps = opt.steps_override;
  if (opt.lr_override >= 0.0) cfg.harness.learning_rate = opt.lr_override;
  if (opt.epsilon_override > 0.0) cfg.harness.sinkhorn.epsilon = opt.epsilon_override;
  if (opt.iters_override > 0) cfg.harness.sinkhorn.max_iters = opt.iters_override;
  if (!opt.mode_override.empty()) {
    if (opt.mode_override == "sweep") {
      cfg.sweep_input_sources = true;
    } else {
      cfg.sweep_input_sources = false;
      cfg.harness.input_source = harness::input_source_from_name(opt.mode_override);
    }
  }
  cfg.harness.validate();

  std::vector<std::uint64_t> seeds;
  if (!opt.seeds_range.empty()) {
    const auto dots = opt.seeds_range.find("..");
    if (dots == std::string::npos)
      throw SchemaError("simulate: --seeds expects the form A..B");
    const std::uint64_t lo = std::stoull(opt.seeds_range.substr(0, dots));
    const std::uint64_t hi = std::stoull(opt.seeds_range.substr(dots + 2));
    if (hi < lo) throw SchemaError("simulate: --seeds range is empty");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  } else {
    seeds.push_back(opt.seed);
  }

  std::vector<harness::InputSource> modes;
  if (cfg.sweep_input_sources) {
    modes = {harness::InputSource::kUseCurrent, harness::InputSource::kUseHigher,
             harness::InputSource::kUpsample, harness::InputSource::kUpsampleWithOt};
  } else {
    modes = {cfg.harness.input_source};
  }

  const fs::path out_root(opt.out_dir);
  fs::create_directories(out_root);
  json aggregate;
  aggregate["config"] = cfg.to_json();
  json mode_entries = json::object();

  for (const auto mode : modes) {
    harness::TrainConfig train_cfg = cfg.harness;
    train_cfg.input_source = mode;
    const fs::path mode_dir =
        modes.size() > 1 ? out_root / harness::input_source_name(mode) : out_root;
    std::vector<double> ratios, accs;
    json per_seed = json::array();
    for (const std::uint64_t seed : seeds) {
      harness::SyntheticDatasetSpec spec = cfg.dataset;
      spec.seed = seed;
      const auto data = harness::generate_synthetic(spec);
      const auto trace = harness::train_intertwiner(data, train_cfg, seed);
      const fs::path run_dir =
          seeds.size() > 1 ? mode_dir / ("seed_" + std::to_string(seed)) : mode_dir;
      write_run_outputs(run_dir, trace, seed, train_cfg);
      const double ratio = trace.initial.intra_class_variance > 0.0
                               ? trace.final_smoothed.intra_class_variance /
                                     trace.initial.intra_class_variance
                               : 0.0;
      ratios.push_back(ratio);
      accs.push_back(trace.final_smoothed.nearest_centroid_accuracy);
      per_seed.push_back({{"seed", seed},
                          {"variance_ratio", ratio},
                          {"final_accuracy",
                           trace.final_smoothed.nearest_centroid_accuracy}});
    }
    mode_entries[harness::input_source_name(mode)] = {
        {"median_variance_ratio", median(ratios)},
        {"median_final_accuracy", median(accs)},
        {"runs", per_seed}};
  }
  aggregate["seeds"] = seeds;
  aggregate["modes"] = mode_entries;
  write_json_atomic(out_root / "aggregate.json", aggregate);
  std::cout << "wrote " << (out_root / "aggregate.json").string() << "\n";
  return 0;
}

int run_report(const std::string& summary_file) {
  const json j = read_json_file(summary_file);
  char line[256];
  const auto metric_row = [&](const char* name, const json& section) {
    std::snprintf(line, sizeof(line), "  %-26s %12.6g %12.6g\n", name,
                  section.at("initial").value(name, 0.0),
                  section.at("final").value(name, 0.0));
    std::cout << line;
  };
  if (j.contains("modes")) {
    std::cout << "mode                         med var ratio  med accuracy\n";
    for (auto it = j.at("modes").begin(); it != j.at("modes").end(); ++it) {
      std::snprintf(line, sizeof(line), "%-28s %13.6g %13.6g\n", it.key().c_str(),
                    it.value().value("median_variance_ratio", 0.0),
                    it.value().value("median_final_accuracy", 0.0));
      std::cout << line;
    }
    return 0;
  }
  std::cout << "run summary (seed " << j.value("seed", 0) << ", "
            << j.value("input_source", std::string("?")) << ")\n";
  std::cout << "  metric                          initial        final\n";
  metric_row("intra_class_variance", j);
  metric_row("centroid_gap", j);
  metric_row("nearest_centroid_accuracy", j);
  std::snprintf(line, sizeof(line), "  %-26s %12.6g\n", "variance_ratio",
                j.value("variance_ratio", 0.0));
  std::cout << line;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sinkhorn transport, class-buffer losses, proposal assignment, "
               "and the synthetic cluster-compaction harness"};
  app.require_subcommand(1);

  OtOptions ot_opt;
  auto* ot_cmd = app.add_subcommand(
      "ot", "Transport divergence between two feature CSVs or a cost matrix");
  ot_cmd->add_option("features_a", ot_opt.features_a, "feature CSV, one sample per row");
  ot_cmd->add_option("features_b", ot_opt.features_b, "second feature CSV");
  ot_cmd->add_option("--cost", ot_opt.cost_file, "precomputed square cost CSV");
  ot_cmd->add_option("--epsilon", ot_opt.epsilon, "entropic regularizer");
  ot_cmd->add_option("--iters", ot_opt.max_iters, "iteration budget");
  ot_cmd->add_option("--tolerance", ot_opt.tolerance,
                     "marginal-residual early stop (0 disables)");
  ot_cmd->add_flag("--biased", ot_opt.biased, "also report 2W(A,B)-W(A,A)-W(B,B)");
  ot_cmd->add_flag("--exact", ot_opt.exact, "add the brute-force value (C <= 8)");
  ot_cmd->add_option("--plan", ot_opt.plan_out, "write the transport plan CSV here");
  ot_cmd->add_option("--out", ot_opt.json_out, "write the JSON record here");

  AssignOptions as_opt;
  auto* as_cmd = app.add_subcommand("assign", "Pyramid-level proposal breakdown");
  as_cmd->add_option("proposals", as_opt.proposals_file,
                     "CSV of width,height[,class_id] rows")
      ->required();
  as_cmd->add_option("--strategy", as_opt.strategy,
                     "default|by_roi_size|more_on_higher");
  as_cmd->add_option("--log", as_opt.log_base, "two|natural");
  as_cmd->add_option("--a0", as_opt.a0, "canonical level");
  as_cmd->add_option("--base", as_opt.base, "canonical proposal side");
  as_cmd->add_option("--image-size", as_opt.image_size, "input image side in pixels");
  as_cmd->add_option("--roi-out", as_opt.roi_out, "RoI output side");
  as_cmd->add_option("--json", as_opt.json_out, "write the JSON breakdown here");

  SimulateOptions sim_opt;
  auto* sim_cmd = app.add_subcommand("simulate", "Synthetic compaction runs");
  sim_cmd->add_option("--config", sim_opt.config_file, "experiment JSON config");
  sim_cmd->add_option("--seed", sim_opt.seed, "run seed");
  sim_cmd->add_option("--seeds", sim_opt.seeds_range, "inclusive seed range A..B");
  sim_cmd->add_option("--out", sim_opt.out_dir, "output directory")->required();
  sim_cmd->add_option("--steps", sim_opt.steps_override, "override harness.steps");
  sim_cmd->add_option("--lr", sim_opt.lr_override, "override harness.learning_rate");
  sim_cmd->add_option("--mode", sim_opt.mode_override,
                      "override harness.input_source (or 'sweep')");
  sim_cmd->add_option("--epsilon", sim_opt.epsilon_override, "override sinkhorn.epsilon");
  sim_cmd->add_option("--iters", sim_opt.iters_override, "override sinkhorn.max_iters");

  std::string report_file;
  auto* rep_cmd = app.add_subcommand("report", "Re-render a summary JSON as text");
  rep_cmd->add_option("summary", report_file, "summary.json or aggregate.json")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (ot_cmd->parsed()) return run_ot(ot_opt);
    if (as_cmd->parsed()) return run_assign(as_opt);
    if (sim_cmd->parsed()) return run_simulate(sim_opt);
    if (rep_cmd->parsed()) return run_report(report_file);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kExitSchema;
  } catch (const InvalidInputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
