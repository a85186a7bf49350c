#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "coopdet/bench.hpp"
#include "coopdet/evaluation.hpp"
#include "coopdet/model.hpp"
#include "coopdet/simulator.hpp"
#include "coopdet/train.hpp"

using namespace coopdet;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

std::vector<Box3D> scene_gt_in_ego(const Scene& scene) {
    const Pose to_ego = scene.agents.at(scene.ego).pose.inverse();
    std::vector<Box3D> out;
    for (const auto& g : scene.gt) {
        const auto c = to_ego.apply(g.cx, g.cy, g.cz);
        out.emplace_back(c[0], c[1], c[2], g.l, g.w, g.h, g.yaw + to_ego.yaw, g.cls, 1.0);
    }
    return out;
}

json detection_to_json(const Box3D& b) {
    json j;
    j["c"] = {b.cx, b.cy, b.cz};
    j["s"] = {b.l, b.w, b.h};
    j["yaw"] = b.yaw;
    j["class"] = class_name(b.cls);
    j["score"] = b.score;
    return j;
}

Box3D detection_from_json(const json& j) {
    const auto& c = j.at("c");
    const auto& s = j.at("s");
    return Box3D(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(),
                 s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>(),
                 j.at("yaw").get<double>(), class_from_name(j.at("class").get<std::string>()),
                 j.at("score").get<double>());
}

// model argument: a checkpoint (has "params") or a config for a fresh net
Model load_model_arg(const std::string& path, std::uint64_t seed) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError("model file: " + std::string(e.what()));
    }
    if (j.contains("params")) return load_checkpoint(path).model;
    RunConfig cfg = run_config_from_json(j.dump());
    return Model(cfg.model, seed);
}

int run_gen(const std::string& config_path, const std::string& out_path, std::uint64_t seed,
            std::int64_t n_scenes_override) {
    RunConfig cfg = load_run_config(config_path);
    const auto n = n_scenes_override > 0 ? n_scenes_override : cfg.n_scenes;
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(n));
    Rng root(seed);
    for (std::int64_t i = 0; i < n; ++i)
        scenes.push_back(gen_scene(cfg.scene, root.derive(static_cast<std::uint64_t>(i)).next_u64()));
    write_dataset(scenes, out_path);
    std::cout << "wrote " << scenes.size() << " scenes to " << out_path << "\n";
    return 0;
}

int run_forward(const std::string& model_path, const std::string& data_path,
                const std::string& out_path) {
    Model model = load_model_arg(model_path, 0);
    auto scenes = read_dataset(data_path);
    json out = json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        json record;
        record["scene"] = i;
        json dets = json::array();
        for (const auto& d : model.forward(scenes[i])) dets.push_back(detection_to_json(d));
        record["detections"] = dets;
        out.push_back(std::move(record));
    }
    write_file(out_path, out.dump());
    std::cout << "wrote detections for " << scenes.size() << " scenes to " << out_path << "\n";
    return 0;
}

int run_eval(const std::string& dets_path, const std::string& data_path, const std::string& report_path,
             bool use_3d, const std::string& config_path) {
    EvalConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path).eval;
    if (use_3d) cfg.flavor = IouFlavor::full_3d;
    auto scenes = read_dataset(data_path);
    json j;
    try {
        j = json::parse(read_file(dets_path));
    } catch (const json::parse_error& e) {
        throw ParseError("detections: " + std::string(e.what()));
    }
    if (j.size() != scenes.size()) throw ParseError("detections: scene count does not match dataset");
    std::vector<std::vector<Box3D>> dets(scenes.size()), gts;
    for (const auto& record : j) {
        const auto idx = record.at("scene").get<std::size_t>();
        if (idx >= scenes.size()) throw ParseError("detections: scene index out of range");
        for (const auto& d : record.at("detections")) dets[idx].push_back(detection_from_json(d));
    }
    gts.reserve(scenes.size());
    for (const auto& s : scenes) gts.push_back(scene_gt_in_ego(s));
    auto report = eval_scenes(dets, gts, cfg);
    write_file(report_path, report_to_json(report));
    std::cout << report_to_json(report) << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& data_path, const std::string& out_path,
              bool no_m1, bool no_m2, bool no_m3, const std::string& fusion) {
    RunConfig cfg = load_run_config(config_path);
    if (no_m1) cfg.model.m1 = false;
    if (no_m2) cfg.model.m2 = false;
    if (no_m3) cfg.model.m3 = false;
    if (!fusion.empty()) cfg.model.fusion_baseline = baseline_mode_from_name(fusion);
    auto scenes = read_dataset(data_path);
    Model model(cfg.model, cfg.train.seed);
    {
        json counts;
        for (const auto& [module, n] : model.param_counts_by_module()) counts[module] = n;
        counts["total"] = model.param_count();
        std::cout << json{{"params", counts}}.dump() << "\n";
    }
    auto history = train_toy(model, scenes, cfg.train, cfg.eval);
    for (const auto& log : history.epochs) {
        json line;
        line["epoch"] = log.epoch;
        line["lr"] = log.lr;
        json loss;
        loss["total"] = log.mean_loss.total;
        for (int c = 0; c < kNumClasses; ++c) {
            const char* name = class_name(static_cast<ObjectClass>(c));
            loss[name] = {{"cls", log.mean_loss.cls[static_cast<std::size_t>(c)]},
                          {"reg", log.mean_loss.reg[static_cast<std::size_t>(c)]},
                          {"dir", log.mean_loss.dir[static_cast<std::size_t>(c)]},
                          {"positives", log.mean_loss.positives[static_cast<std::size_t>(c)]}};
        }
        line["loss"] = loss;
        if (log.val) line["val"] = json::parse(report_to_json(*log.val));
        std::cout << line.dump() << "\n";
    }
    auto params = model.named_params();
    AdamState state = init_adam_state(params);  // moments are not carried across the CLI boundary
    save_checkpoint(out_path, model, state, cfg.train.epochs);
    std::cout << "saved checkpoint to " << out_path << "\n";
    return 0;
}

int run_gradcheck(bool micro) {
    int failures = 0;
    auto check = [&](const char* name, const GradReport& report, double tol) {
        const auto* worst = report.worst();
        const bool ok = report.max_rel_err < tol;
        std::printf("[%s] %-28s max rel err %.3e (tol %.0e)%s%s\n", ok ? "PASS" : "FAIL", name,
                    report.max_rel_err, tol, worst && !ok ? " worst " : "",
                    worst && !ok ? worst->param.c_str() : "");
        if (!ok) ++failures;
    };

    Rng rng(20240809);
    auto rnd = [&](Shape shape) {
        std::vector<double> d(static_cast<std::size_t>(shape_size(shape)));
        for (auto& v : d) v = rng.uniform(-1, 1);
        return Tensor::of(shape, std::move(d));
    };

    {
        auto a = rnd({4, 5}).set_requires_grad(true);
        auto b = rnd({5, 3}).set_requires_grad(true);
        check("matmul", grad_check([&] { return sum_all(matmul(a, b)); }, {{"a", &a}, {"b", &b}}), 1e-5);
    }
    {
        auto x = rnd({3, 6}).set_requires_grad(true);
        auto w = rnd({3, 6});
        check("softmax",
              grad_check([&] { return sum_all(mul(softmax_lastdim(x), w)); }, {{"x", &x}}), 1e-5);
    }
    {
        auto x = rnd({2, 6, 6}).set_requires_grad(true);
        auto k = rnd({2, 2, 3, 3}).set_requires_grad(true);
        auto f = [&] {
            return sum_all(global_avg_pool(relu(conv2d(x, k, {.stride = 1, .dilation = 2, .pad = 2}))));
        };
        check("dilated conv + pooling", grad_check(f, {{"x", &x}, {"k", &k}}), 1e-5);
    }
    {
        auto x = rnd({3, 4, 4}).set_requires_grad(true);
        auto scale = rnd({3}).set_requires_grad(true);
        auto shift = rnd({3}).set_requires_grad(true);
        check("channel_norm",
              grad_check([&] { return sum_all(mul(channel_norm(x, scale, shift), x)); },
                         {{"x", &x}, {"scale", &scale}, {"shift", &shift}}),
              1e-5);
    }

    if (micro) {
        ModelConfig cfg;
        cfg.x_min = -6.4;
        cfg.x_max = 6.4;
        cfg.y_min = -6.4;
        cfg.y_max = 6.4;
        cfg.cell = 0.8;
        cfg.pillar_channels = 4;
        cfg.backbone_widths = {8, 8, 16};
        cfg.backbone_strides = {2, 1, 1};
        cfg.feature_dim = 16;
        cfg.window.sizes = {2, 4};
        cfg.window.heads = {2, 1};
        cfg.window.head_dims = {8, 16};
        cfg.groups.small_heads = 2;
        cfg.groups.small_dim = 8;
        cfg.groups.large_heads = 1;
        cfg.groups.large_dim = 16;
        cfg.aspp_branch_channels = 4;
        cfg.se_reduction = 4;
        cfg.precision = Precision::f64;
        Model model(cfg, 51);
        SceneConfig scfg;
        scfg.n_agents = 2;
        scfg.counts = {1, 1, 1};
        scfg.x_min = -6.4;
        scfg.x_max = 6.4;
        scfg.y_min = -6.4;
        scfg.y_max = 6.4;
        scfg.sensor.base_rate = 60;
        scfg.clutter_points = 10;
        scfg.placement_retries = 2000;
        auto scene = gen_scene(scfg, 53);
        auto gts = scene_gt_in_ego(scene);
        auto targets = build_targets(model.anchors(), match_anchors(model.anchors(), gts, cfg.anchors),
                                     gts, cfg.feature_grid());
        Rng jitter(77);
        for (auto& [name, p] : model.named_params())
            for (auto& v : p->mutable_data()) v += jitter.uniform(-0.05, 0.05);
        auto objective = [&] {
            return total_loss(model.forward_features(scene, true), targets, cfg.loss).total;
        };
        auto fine = grad_check(objective, model.named_params(), 1e-5, 3, 61);
        auto coarse = grad_check(objective, model.named_params(), 1e-3, 3, 61);
        GradReport combined;
        for (std::size_t i = 0; i < fine.entries.size(); ++i) {
            auto e = fine.entries[i];
            if (coarse.entries[i].rel_err < e.rel_err) e = coarse.entries[i];
            combined.max_rel_err = std::max(combined.max_rel_err, e.rel_err);
            combined.entries.push_back(e);
        }
        check("micro pipeline total_loss", combined, 1e-4);
    }
    return failures == 0 ? 0 : 1;
}

int run_bench(const std::string& sizes_arg, const std::string& out_path, std::int64_t window,
              std::int64_t dim, int reps) {
    std::vector<std::int64_t> sizes;
    std::stringstream ss(sizes_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) sizes.push_back(std::stoll(tok));
    if (sizes.empty()) throw DomainError("bench: no sizes given");
    auto rows = bench_attention(sizes, window, dim, reps);
    auto csv = bench_to_csv(rows);
    if (!out_path.empty()) write_file(out_path, csv);
    std::cout << csv;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cooperative multi-agent BEV detection sandbox"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, model_path, dets_path, report_path, fusion;
    std::string sizes = "16,32,64";
    std::uint64_t seed = 0;
    std::int64_t n_scenes = 0;
    std::int64_t bench_window = 4, bench_dim = 16;
    int bench_reps = 5;
    bool no_m1 = false, no_m2 = false, no_m3 = false, micro = false, use_3d = false;

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "run config JSON")->required();
    gen->add_option("--out", out_path, "output dataset (ndjson)")->required();
    gen->add_option("--seed", seed, "dataset seed");
    gen->add_option("--n-scenes", n_scenes, "override the scene count");

    auto* fwd = app.add_subcommand("forward", "run detection over a dataset");
    fwd->add_option("--model", model_path, "checkpoint or config JSON")->required();
    fwd->add_option("--data", data_path, "dataset (ndjson)")->required();
    fwd->add_option("--out", out_path, "detections JSON")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_flag("--micro", micro, "include the end-to-end micro pipeline check");

    auto* train = app.add_subcommand("train", "train on a dataset");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--data", data_path, "dataset (ndjson)")->required();
    train->add_option("--out", out_path, "checkpoint path")->required();
    train->add_flag("--no-m1", no_m1, "replace class-specific fusion with the baseline fuser");
    train->add_flag("--no-m2", no_m2, "disable BEV enhancement");
    train->add_flag("--no-m3", no_m3, "train with uniform class weights");
    train->add_option("--fusion", fusion, "baseline fusion mode: max|avg|single");

    auto* ev = app.add_subcommand("eval", "evaluate detections against a dataset");
    ev->add_option("--dets", dets_path, "detections JSON")->required();
    ev->add_option("--data", data_path, "dataset (ndjson)")->required();
    ev->add_option("--report", report_path, "report JSON")->required();
    ev->add_flag("--iou3d", use_3d, "match with full 3D IoU");
    ev->add_option("--config", config_path, "run config JSON for the eval section");

    auto* bench = app.add_subcommand("bench", "attention complexity benchmark");
    bench->add_option("--sizes", sizes, "comma-separated square map extents");
    bench->add_option("--out", out_path, "CSV output path");
    bench->add_option("--window", bench_window, "window extent for the windowed mode");
    bench->add_option("--dim", bench_dim, "head dimension");
    bench->add_option("--reps", bench_reps, "timing repetitions");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_gen(config_path, out_path, seed, n_scenes);
        if (fwd->parsed()) return run_forward(model_path, data_path, out_path);
        if (gc->parsed()) return run_gradcheck(micro);
        if (train->parsed())
            return run_train(config_path, data_path, out_path, no_m1, no_m2, no_m3, fusion);
        if (ev->parsed()) return run_eval(dets_path, data_path, report_path, use_3d, config_path);
        if (bench->parsed()) return run_bench(sizes, out_path, bench_window, bench_dim, bench_reps);
    } catch (const ParseError& e) {
        std::cerr << json{{"error", e.what()}, {"type", "parse"}}.dump() << "\n";
        return 1;
    } catch (const DomainError& e) {
        std::cerr << json{{"error", e.what()}, {"type", "domain"}}.dump() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << json{{"error", e.what()}, {"type", "numeric"}}.dump() << "\n";
        return 1;
    } catch (const CapacityError& e) {
        std::cerr << json{{"error", e.what()}, {"type", "capacity"}}.dump() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << json{{"error", e.what()}, {"type", "io"}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"type", "internal"}}.dump() << "\n";
        return 1;
    }
    return 0;
}
