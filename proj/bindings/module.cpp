#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "coopdet/bench.hpp"
#include "coopdet/detection.hpp"
#include "coopdet/evaluation.hpp"
#include "coopdet/model.hpp"
#include "coopdet/simulator.hpp"
#include "coopdet/train.hpp"

namespace py = pybind11;
using namespace coopdet;

namespace {

std::vector<Box3D> gt_in_ego(const Scene& scene) {
    const Pose to_ego = scene.agents.at(scene.ego).pose.inverse();
    std::vector<Box3D> out;
    for (const auto& g : scene.gt) {
        const auto c = to_ego.apply(g.cx, g.cy, g.cz);
        out.emplace_back(c[0], c[1], c[2], g.l, g.w, g.h, g.yaw + to_ego.yaw, g.cls, 1.0);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "cooperative multi-agent BEV detection sandbox";

    py::register_exception<ShapeError>(m, "ShapeError");
    py::register_exception<DomainError>(m, "DomainErrorCpp");
    py::register_exception<NumericError>(m, "NumericError");
    py::register_exception<ParseError>(m, "ParseErrorCpp");
    py::register_exception<CapacityError>(m, "CapacityError");

    py::class_<Box3D>(m, "Box3D")
        .def(py::init([](double cx, double cy, double cz, double l, double w, double h, double yaw,
                         const std::string& cls, double score) {
                 return Box3D(cx, cy, cz, l, w, h, yaw, class_from_name(cls), score);
             }),
             py::arg("cx"), py::arg("cy"), py::arg("cz"), py::arg("l"), py::arg("w"), py::arg("h"),
             py::arg("yaw"), py::arg("cls") = "car", py::arg("score") = 1.0)
        .def_readwrite("cx", &Box3D::cx)
        .def_readwrite("cy", &Box3D::cy)
        .def_readwrite("cz", &Box3D::cz)
        .def_readwrite("l", &Box3D::l)
        .def_readwrite("w", &Box3D::w)
        .def_readwrite("h", &Box3D::h)
        .def_readwrite("yaw", &Box3D::yaw)
        .def_readwrite("score", &Box3D::score)
        .def_property(
            "cls", [](const Box3D& b) { return std::string(class_name(b.cls)); },
            [](Box3D& b, const std::string& name) { b.cls = class_from_name(name); })
        .def("__repr__", [](const Box3D& b) {
            return "Box3D(" + std::string(class_name(b.cls)) + ", c=(" + std::to_string(b.cx) + ", " +
                   std::to_string(b.cy) + "), score=" + std::to_string(b.score) + ")";
        });

    m.def("bev_iou_rotated", &bev_iou_rotated, py::arg("a"), py::arg("b"),
          "rotated-footprint intersection over union");
    m.def("iou3d", &iou3d, py::arg("a"), py::arg("b"));
    m.def("nms", &nms_per_class, py::arg("detections"), py::arg("iou_threshold") = 0.15,
          "greedy per-class suppression");
    m.def("softmax", [](const std::vector<double>& x) {
        auto t = softmax_lastdim(Tensor::of({static_cast<std::int64_t>(x.size())}, x));
        return t.data();
    });

    m.def(
        "generate_dataset",
        [](const std::string& config_json, const std::string& path, std::uint64_t seed,
           std::int64_t n_scenes) {
            RunConfig cfg = run_config_from_json(config_json);
            const auto n = n_scenes > 0 ? n_scenes : cfg.n_scenes;
            std::vector<Scene> scenes;
            Rng root(seed);
            for (std::int64_t i = 0; i < n; ++i)
                scenes.push_back(gen_scene(cfg.scene, root.derive(static_cast<std::uint64_t>(i)).next_u64()));
            write_dataset(scenes, path);
            return scenes.size();
        },
        py::arg("config_json"), py::arg("path"), py::arg("seed") = 0, py::arg("n_scenes") = 0);

    m.def("dataset_size", [](const std::string& path) { return read_dataset(path).size(); });
    m.def("dataset_ground_truth", [](const std::string& path, std::size_t index) {
        auto scenes = read_dataset(path);
        return gt_in_ego(scenes.at(index));
    });

    py::class_<Model, std::shared_ptr<Model>>(m, "Model")
        .def(py::init([](const std::string& config_json, std::uint64_t seed) {
                 RunConfig cfg = run_config_from_json(config_json);
                 return std::make_shared<Model>(cfg.model, seed);
             }),
             py::arg("config_json"), py::arg("seed") = 0)
        .def_static("load",
                    [](const std::string& path) { return std::make_shared<Model>(load_checkpoint(path).model); })
        .def("param_count", &Model::param_count)
        .def("config_json", [](const Model& model) { return model_config_to_json(model.config()); })
        .def(
            "detect",
            [](const Model& model, const std::string& dataset_path, std::size_t index) {
                auto scenes = read_dataset(dataset_path);
                return model.forward(scenes.at(index));
            },
            py::arg("dataset_path"), py::arg("index") = 0)
        .def("save", [](const Model& model, const std::string& path) {
            auto params = const_cast<Model&>(model).named_params();
            save_checkpoint(path, model, init_adam_state(params), 0);
        });

    m.def(
        "train",
        [](const std::string& config_json, const std::string& dataset_path, const std::string& out_path) {
            RunConfig cfg = run_config_from_json(config_json);
            auto scenes = read_dataset(dataset_path);
            Model model(cfg.model, cfg.train.seed);
            auto history = train_toy(model, scenes, cfg.train, cfg.eval);
            auto params = model.named_params();
            save_checkpoint(out_path, model, init_adam_state(params), cfg.train.epochs);
            std::vector<double> losses;
            for (const auto& e : history.epochs) losses.push_back(e.mean_loss.total);
            return losses;
        },
        py::arg("config_json"), py::arg("dataset_path"), py::arg("out_path"));

    m.def(
        "evaluate",
        [](const std::vector<std::vector<Box3D>>& dets, const std::vector<std::vector<Box3D>>& gts,
           bool use_3d) {
            EvalConfig cfg;
            if (use_3d) cfg.flavor = IouFlavor::full_3d;
            return report_to_json(eval_scenes(dets, gts, cfg));
        },
        py::arg("detections"), py::arg("ground_truth"), py::arg("iou3d") = false,
        "per-class AP report as a JSON string");

    m.def(
        "bench_attention",
        [](const std::vector<std::int64_t>& sizes, std::int64_t window, std::int64_t dim, int reps) {
            return bench_to_csv(bench_attention(sizes, window, dim, reps));
        },
        py::arg("sizes"), py::arg("window") = 4, py::arg("dim") = 16, py::arg("reps") = 3);
}
