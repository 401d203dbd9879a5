#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <span>

#include "pxc/clustering.hpp"
#include "pxc/commands.hpp"
#include "pxc/eval.hpp"
#include "pxc/numerics.hpp"

namespace py = pybind11;

namespace {

using pxc::DenseGrid;

DenseGrid grid_from_array(const py::array_t<double, py::array::c_style |
                                                        py::array::forcecast>& a) {
  DenseGrid g;
  g.shape.assign(a.ndim(), 0);
  for (py::ssize_t i = 0; i < a.ndim(); ++i)
    g.shape[static_cast<std::size_t>(i)] =
        static_cast<std::size_t>(a.shape(i));
  g.data.assign(a.data(), a.data() + a.size());
  return g;
}

py::array_t<double> array_from_grid(const DenseGrid& g) {
  std::vector<py::ssize_t> shape(g.shape.begin(), g.shape.end());
  py::array_t<double> a(shape);
  std::memcpy(a.mutable_data(), g.data.data(), g.data.size() * sizeof(double));
  return a;
}

pxc::LabelGrid labels_from_array(
    const py::array_t<std::int64_t,
                      py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw py::value_error("labels must be a 2-d array");
  pxc::LabelGrid g(static_cast<std::size_t>(a.shape(0)),
                   static_cast<std::size_t>(a.shape(1)));
  for (std::size_t i = 0; i < g.v.size(); ++i)
    g.v[i] = static_cast<std::uint16_t>(a.data()[i]);
  return g;
}

py::dict report_dict(const pxc::SegmentationReport& rep) {
  py::dict d;
  d["miou"] = rep.miou;
  d["per_class_iou"] = rep.per_class_iou;
  py::dict matching;
  for (const auto& [cluster, cls] : rep.matching)
    matching[py::int_(cluster)] = cls;
  d["matching"] = matching;
  d["mask_accuracy"] = rep.mask_accuracy;
  d["num_samples"] = rep.num_samples;
  return d;
}

pxc::RunConfig config_from_json_str(const std::string& config_json) {
  return pxc::run_config_from_json(nlohmann::json::parse(config_json));
}

}  // namespace

PYBIND11_MODULE(_pxc, m) {
  m.doc() = "Per-pixel semantic training from unlabeled masks";

  m.def("l2_normalize", [](const py::array_t<double, py::array::c_style |
                                                         py::array::forcecast>& v) {
    std::span<const double> s(v.data(), static_cast<std::size_t>(v.size()));
    return pxc::l2_normalize(s);
  });

  m.def("cosine_similarity",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& a,
           const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& b) {
          std::span<const double> sa(a.data(),
                                     static_cast<std::size_t>(a.size()));
          std::span<const double> sb(b.data(),
                                     static_cast<std::size_t>(b.size()));
          return pxc::cosine_similarity(sa, sb);
        });

  m.def("bilinear_upsample",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& grid,
           std::size_t factor) {
          return array_from_grid(
              pxc::bilinear_upsample(grid_from_array(grid), factor));
        },
        py::arg("grid"), py::arg("factor"));

  m.def("sinkhorn",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& affinity,
           double epsilon, double tol, int max_iter) {
          const pxc::AssignmentMatrix q =
              pxc::sinkhorn_solve(grid_from_array(affinity), epsilon, tol,
                                  max_iter);
          return py::make_tuple(array_from_grid(q.q), q.iterations_used,
                                q.marginal_error);
        },
        py::arg("affinity"), py::arg("epsilon") = 1.0, py::arg("tol") = 1e-6,
        py::arg("max_iter") = 1000,
        "Balanced entropy-regularized transport plan; returns (Q, iterations, "
        "marginal_error)");

  m.def("clustering_objective",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& q,
           const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& affinity,
           double epsilon) {
          return pxc::clustering_objective(grid_from_array(q),
                                           grid_from_array(affinity), epsilon);
        },
        py::arg("q"), py::arg("affinity"), py::arg("epsilon"));

  m.def("hard_assign",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& q) {
          pxc::AssignmentMatrix a;
          a.q = grid_from_array(q);
          return pxc::hard_assign(a).cluster_of;
        });

  m.def("kmeans",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& points,
           std::size_t k, std::size_t iters, std::uint64_t seed) {
          const pxc::KMeansResult r =
              pxc::kmeans(grid_from_array(points), k, iters, seed);
          return py::make_tuple(array_from_grid(r.centroids), r.labels);
        },
        py::arg("points"), py::arg("k"), py::arg("iters") = 64,
        py::arg("seed") = 0);

  m.def("hungarian_match",
        [](const py::array_t<double, py::array::c_style |
                                         py::array::forcecast>& iou) {
          return pxc::hungarian_match(grid_from_array(iou));
        });

  m.def("miou",
        [](const py::array_t<std::int64_t, py::array::c_style |
                                               py::array::forcecast>& pred,
           const py::array_t<std::int64_t, py::array::c_style |
                                               py::array::forcecast>& gt,
           std::size_t num_classes, std::uint16_t ignore_label) {
          const pxc::MiouResult r =
              pxc::miou(labels_from_array(pred), labels_from_array(gt),
                        num_classes, ignore_label);
          py::dict d;
          d["miou"] = r.miou;
          d["per_class_iou"] = r.per_class_iou;
          d["class_present"] = r.class_present;
          return d;
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes"),
        py::arg("ignore_label") = pxc::kUnlabeled);

  m.def("default_config",
        []() { return pxc::run_config_to_json(pxc::default_run_config()).dump(2); });

  m.def("generate_dataset",
        [](const std::string& config_json, const std::string& out_dir) {
          return pxc::run_gen_data(config_from_json_str(config_json), out_dir);
        },
        py::arg("config_json"), py::arg("out_dir"));

  m.def("train",
        [](const std::string& config_json, const std::string& data_dir,
           const std::string& out_dir) {
          const pxc::TrainRunResult r = pxc::run_train(
              config_from_json_str(config_json), data_dir, out_dir);
          py::dict d;
          d["first_loss"] = r.first_loss;
          d["final_loss"] = r.final_loss;
          d["steps"] = r.steps;
          d["checkpoint"] = r.checkpoint_prefix;
          d["metrics"] = r.metrics_path;
          return d;
        },
        py::arg("config_json"), py::arg("data_dir"), py::arg("out_dir"));

  m.def("evaluate",
        [](const std::string& checkpoint, const std::string& data_dir,
           bool masks_from_gt) {
          return report_dict(pxc::run_eval(checkpoint, data_dir, masks_from_gt));
        },
        py::arg("checkpoint"), py::arg("data_dir"),
        py::arg("masks_from_gt") = false);

  m.def("infer",
        [](const std::string& checkpoint, const std::string& data_dir,
           std::size_t index) {
          const pxc::LabelGrid labels =
              pxc::run_infer(checkpoint, data_dir, index);
          py::array_t<std::int64_t> a(
              {static_cast<py::ssize_t>(labels.h),
               static_cast<py::ssize_t>(labels.w)});
          for (std::size_t i = 0; i < labels.v.size(); ++i)
            a.mutable_data()[i] = labels.v[i];
          return a;
        },
        py::arg("checkpoint"), py::arg("data_dir"), py::arg("index") = 0);
}
