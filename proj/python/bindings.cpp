#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "intertwiner/assign.hpp"
#include "intertwiner/harness.hpp"
#include "intertwiner/loss.hpp"
#include "intertwiner/ot.hpp"

namespace py = pybind11;
using namespace intertwiner;

namespace {

ot::SinkhornConfig make_sinkhorn_config(double epsilon, int max_iters,
                                        double tolerance) {
  ot::SinkhornConfig cfg{epsilon, max_iters, tolerance};
  cfg.validate();
  return cfg;
}

std::vector<buffer::LabeledFeature> to_samples(const Eigen::MatrixXd& features,
                                               const std::vector<int>& labels,
                                               const std::vector<int>& levels) {
  if (features.rows() != static_cast<Eigen::Index>(labels.size()))
    throw DimensionError("features and labels disagree on the sample count");
  std::vector<buffer::LabeledFeature> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i].feature = features.row(static_cast<Eigen::Index>(i)).transpose();
    out[i].class_id = labels[i];
    out[i].level = levels.empty() ? 2 : levels[i % levels.size()];
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sinkhorn transport, class buffers, intertwiner losses, and "
            "pyramid-level proposal assignment";

  py::register_exception<InvalidInputError>(m, "InvalidInputError",
                                            PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);

  py::class_<ot::SinkhornConfig>(m, "SinkhornConfig")
      .def(py::init(&make_sinkhorn_config), py::arg("epsilon") = 0.1,
           py::arg("max_iters") = 200, py::arg("tolerance") = 1e-9)
      .def_static("fixed_budget", &ot::SinkhornConfig::fixed_budget)
      .def_readonly("epsilon", &ot::SinkhornConfig::epsilon)
      .def_readonly("max_iters", &ot::SinkhornConfig::max_iters)
      .def_readonly("tolerance", &ot::SinkhornConfig::tolerance);

  py::class_<ot::TransportPlan>(m, "TransportPlan")
      .def_readonly("p", &ot::TransportPlan::p)
      .def_readonly("a", &ot::TransportPlan::a)
      .def_readonly("b", &ot::TransportPlan::b)
      .def_readonly("iters_run", &ot::TransportPlan::iters_run)
      .def_readonly("residual", &ot::TransportPlan::residual);

  m.def("cosine_distance", [](const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
    return ot::cosine_distance(u, v);
  });
  m.def("ground_cost", [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return ot::ground_cost(ot::FeatureMatrix(a), ot::FeatureMatrix(b)).q;
  });
  m.def(
      "sinkhorn_plan",
      [](const Eigen::MatrixXd& cost, const ot::SinkhornConfig& cfg) {
        return ot::sinkhorn_plan(ot::GroundCost{cost}, cfg);
      },
      py::arg("cost"), py::arg("config") = ot::SinkhornConfig());
  m.def(
      "sinkhorn_divergence",
      [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
         const ot::SinkhornConfig& cfg) {
        return ot::sinkhorn_divergence(ot::FeatureMatrix(a), ot::FeatureMatrix(b), cfg);
      },
      py::arg("a"), py::arg("b"), py::arg("config") = ot::SinkhornConfig());
  m.def(
      "biased_sinkhorn",
      [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
         const ot::SinkhornConfig& cfg) {
        return ot::biased_sinkhorn(ot::FeatureMatrix(a), ot::FeatureMatrix(b), cfg);
      },
      py::arg("a"), py::arg("b"), py::arg("config") = ot::SinkhornConfig());
  m.def("exact_ot_uniform", [](const Eigen::MatrixXd& cost) {
    return ot::exact_ot_uniform(ot::GroundCost{cost});
  });
  m.def(
      "ot_gradient_wrt_features",
      [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
         const ot::SinkhornConfig& cfg) {
        const auto g =
            ot::ot_gradient_wrt_features(ot::FeatureMatrix(a), ot::FeatureMatrix(b), cfg);
        return py::make_tuple(g.wrt_a, g.wrt_b);
      },
      py::arg("a"), py::arg("b"), py::arg("config") = ot::SinkhornConfig());

  py::enum_<buffer::Strategy>(m, "BufferStrategy")
      .value("EQUAL_WEIGHT_ALL_HISTORY", buffer::Strategy::kEqualWeightAllHistory)
      .value("DECAYED_WEIGHT", buffer::Strategy::kDecayedWeight)
      .value("WINDOW", buffer::Strategy::kWindow);

  py::class_<buffer::ClassBuffer>(m, "ClassBuffer")
      .def(py::init([](int n_classes, int dim, buffer::Strategy strategy,
                       double lambda, int window, bool detached) {
             buffer::BufferConfig cfg;
             cfg.strategy = strategy;
             cfg.lambda = lambda;
             cfg.window = window;
             cfg.detached = detached;
             return buffer::ClassBuffer(n_classes, dim, cfg);
           }),
           py::arg("n_classes"), py::arg("dim"),
           py::arg("strategy") = buffer::Strategy::kEqualWeightAllHistory,
           py::arg("lambda_") = 0.01, py::arg("window") = 2000,
           py::arg("detached") = true)
      .def(
          "update",
          [](buffer::ClassBuffer& self, const Eigen::VectorXd& feature, int class_id,
             int level) {
            self.update(buffer::LabeledFeature{feature, class_id, level});
          },
          py::arg("feature"), py::arg("class_id"), py::arg("level") = 2)
      .def(
          "batch_update",
          [](buffer::ClassBuffer& self, const Eigen::MatrixXd& features,
             const std::vector<int>& labels, const std::vector<int>& levels) {
            self.batch_update(to_samples(features, labels, levels));
          },
          py::arg("features"), py::arg("labels"),
          py::arg("levels") = std::vector<int>{})
      .def("representative",
           [](const buffer::ClassBuffer& self, int class_id)
               -> std::optional<Eigen::VectorXd> { return self.representative(class_id); })
      .def("count", &buffer::ClassBuffer::count)
      .def_property_readonly("detached", &buffer::ClassBuffer::detached)
      .def("checkpoint",
           [](const buffer::ClassBuffer& self) { return self.checkpoint().dump(); })
      .def_static("restore", [](const std::string& text) {
        return buffer::ClassBuffer::restore(nlohmann::json::parse(text));
      });

  py::enum_<loss::Metric>(m, "Metric")
      .value("L1", loss::Metric::kL1)
      .value("L2", loss::Metric::kL2)
      .value("KL", loss::Metric::kKl);

  py::enum_<loss::FusionMode>(m, "FusionMode")
      .value("SEPARATE", loss::FusionMode::kSeparate)
      .value("NAIVE_ADD", loss::FusionMode::kNaiveAdd)
      .value("LINEAR", loss::FusionMode::kLinear);

  m.def(
      "intertwiner_loss",
      [](const Eigen::MatrixXd& features, const std::vector<int>& labels,
         const buffer::ClassBuffer& buf, loss::Metric metric, double factor,
         bool mean_reduction) {
        const auto r = loss::intertwiner_loss(to_samples(features, labels, {}), buf,
                                              loss::LossConfig{metric, factor,
                                                               mean_reduction});
        return py::make_tuple(r.value, r.samples_used, r.samples_skipped);
      },
      py::arg("features"), py::arg("labels"), py::arg("buffer"),
      py::arg("metric") = loss::Metric::kL2, py::arg("factor") = 1.0,
      py::arg("mean_reduction") = false);
  m.def("kl_term", &loss::kl_term, py::arg("b"), py::arg("f"));
  m.def("fuse_features", &loss::fuse_features, py::arg("f_critic"),
        py::arg("f_detection"), py::arg("mode") = loss::FusionMode::kLinear);
  m.def("total_loss", [](double inter, const std::vector<double>& ot_terms,
                         double standard) {
    return loss::total_loss(inter, ot_terms, standard);
  });

  py::class_<assign::AssignmentConfig>(m, "AssignmentConfig")
      .def(py::init([](int a0, double base, int min_level, int max_level, int roi_out,
                       int image_size, const std::string& strategy,
                       const std::string& log_base) {
             assign::AssignmentConfig cfg;
             cfg.canonical_level = a0;
             cfg.base = base;
             cfg.min_level = min_level;
             cfg.max_level = max_level;
             cfg.roi_out = roi_out;
             cfg.image_size = image_size;
             cfg.strategy = assign::strategy_from_name(strategy);
             if (log_base == "two") {
               cfg.log_base = assign::LogBase::kTwo;
             } else if (log_base == "natural") {
               cfg.log_base = assign::LogBase::kNatural;
             } else {
               throw SchemaError("log_base must be 'two' or 'natural'");
             }
             cfg.validate();
             return cfg;
           }),
           py::arg("a0") = 4, py::arg("base") = 224.0, py::arg("min_level") = 2,
           py::arg("max_level") = 5, py::arg("roi_out") = 14,
           py::arg("image_size") = 512, py::arg("strategy") = "default",
           py::arg("log_base") = "two");

  m.def(
      "assign_level",
      [](double width, double height, const assign::AssignmentConfig& cfg) {
        return assign::assign_level({width, height, {}}, cfg);
      },
      py::arg("width"), py::arg("height"),
      py::arg("config") = assign::AssignmentConfig());
  m.def("roi_threshold", &assign::roi_threshold, py::arg("level"),
        py::arg("config") = assign::AssignmentConfig());
  m.def(
      "breakdown_report",
      [](const std::vector<std::pair<double, double>>& sizes,
         const assign::AssignmentConfig& cfg) {
        std::vector<assign::Proposal> proposals;
        proposals.reserve(sizes.size());
        for (const auto& [w, h] : sizes) proposals.push_back({w, h, {}});
        return assign::render_json(assign::breakdown_report(proposals, cfg)).dump();
      },
      py::arg("sizes"), py::arg("config") = assign::AssignmentConfig());

  py::class_<harness::SyntheticDatasetSpec>(m, "SyntheticDatasetSpec")
      .def(py::init<>())
      .def_readwrite("n_classes", &harness::SyntheticDatasetSpec::n_classes)
      .def_readwrite("dim", &harness::SyntheticDatasetSpec::dim)
      .def_readwrite("reliable_per_class",
                     &harness::SyntheticDatasetSpec::reliable_per_class)
      .def_readwrite("less_reliable_per_class",
                     &harness::SyntheticDatasetSpec::less_reliable_per_class)
      .def_readwrite("reliable_stddev", &harness::SyntheticDatasetSpec::reliable_stddev)
      .def_readwrite("less_reliable_stddev",
                     &harness::SyntheticDatasetSpec::less_reliable_stddev)
      .def_readwrite("offset_magnitude",
                     &harness::SyntheticDatasetSpec::offset_magnitude)
      .def_readwrite("seed", &harness::SyntheticDatasetSpec::seed);

  py::class_<harness::SyntheticDataset>(m, "SyntheticDataset")
      .def_property_readonly("class_means",
                             [](const harness::SyntheticDataset& d) {
                               return d.class_means;
                             })
      .def("reliable_features", &harness::SyntheticDataset::reliable_features)
      .def("less_reliable_features", &harness::SyntheticDataset::less_reliable_features)
      .def("reliable_labels", &harness::SyntheticDataset::reliable_labels)
      .def("less_reliable_labels", &harness::SyntheticDataset::less_reliable_labels);

  py::enum_<harness::InputSource>(m, "InputSource")
      .value("USE_CURRENT", harness::InputSource::kUseCurrent)
      .value("USE_HIGHER", harness::InputSource::kUseHigher)
      .value("UPSAMPLE", harness::InputSource::kUpsample)
      .value("UPSAMPLE_WITH_OT", harness::InputSource::kUpsampleWithOt);

  py::class_<harness::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &harness::TrainConfig::steps)
      .def_readwrite("learning_rate", &harness::TrainConfig::learning_rate)
      .def_readwrite("ot_enabled", &harness::TrainConfig::ot_enabled)
      .def_readwrite("input_source", &harness::TrainConfig::input_source)
      .def_readwrite("fusion", &harness::TrainConfig::fusion)
      .def_readwrite("intertwiner_enabled", &harness::TrainConfig::intertwiner_enabled)
      .def_readwrite("surrogate_loss", &harness::TrainConfig::surrogate_loss)
      .def_readwrite("critic_dim", &harness::TrainConfig::critic_dim)
      .def_readwrite("ot_panel", &harness::TrainConfig::ot_panel)
      .def_readwrite("eval_panel", &harness::TrainConfig::eval_panel);

  py::class_<harness::CompactionMetrics>(m, "CompactionMetrics")
      .def_readonly("intra_class_variance",
                    &harness::CompactionMetrics::intra_class_variance)
      .def_readonly("centroid_gap", &harness::CompactionMetrics::centroid_gap)
      .def_readonly("nearest_centroid_accuracy",
                    &harness::CompactionMetrics::nearest_centroid_accuracy);

  py::class_<harness::RunTrace>(m, "RunTrace")
      .def_readonly("intertwiner_loss", &harness::RunTrace::intertwiner_loss)
      .def_readonly("ot_loss", &harness::RunTrace::ot_loss)
      .def_readonly("intra_class_variance", &harness::RunTrace::intra_class_variance)
      .def_readonly("centroid_gap", &harness::RunTrace::centroid_gap)
      .def_readonly("accuracy", &harness::RunTrace::accuracy)
      .def_readonly("initial", &harness::RunTrace::initial)
      .def_readonly("final_smoothed", &harness::RunTrace::final_smoothed)
      .def("to_csv", &harness::RunTrace::to_csv);

  m.def("generate_synthetic", &harness::generate_synthetic, py::arg("spec"));
  m.def(
      "compaction_metrics",
      [](const Eigen::MatrixXd& features, const std::vector<int>& labels) {
        return harness::compaction_metrics(features, labels);
      },
      py::arg("features"), py::arg("labels"));
  m.def(
      "train_intertwiner",
      [](const harness::SyntheticDataset& d, const harness::TrainConfig& c,
         std::uint64_t seed) { return harness::train_intertwiner(d, c, seed); },
      py::arg("dataset"), py::arg("config"), py::arg("seed"));
}
