#include "coopdet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace coopdet {

using nlohmann::json;

// defined in model.cpp
ModelConfig model_config_from_json_obj(const json& j);
json model_config_to_json_obj(const ModelConfig& cfg);

void TrainConfig::validate() const {
    if (epochs < 0 || batch_size < 1) throw DomainError("train config: bad epochs/batch size");
    if (lr <= 0 || gamma <= 0 || epsilon <= 0) throw DomainError("train config: rates must be positive");
    if (weight_decay < 0) throw DomainError("train config: negative weight decay");
    for (std::size_t i = 1; i < milestones.size(); ++i)
        if (milestones[i] <= milestones[i - 1]) throw DomainError("train config: milestones must increase");
    if (val_fraction < 0 || val_fraction >= 1) throw DomainError("train config: bad val fraction");
    if (aug_scale_min <= 0 || aug_scale_max < aug_scale_min)
        throw DomainError("train config: bad augmentation scale range");
}

double multistep_lr(int epoch, const TrainConfig& config) {
    if (epoch < 0) throw DomainError("multistep_lr: negative epoch");
    double lr = config.lr;
    for (const int m : config.milestones)
        if (epoch >= m) lr *= config.gamma;
    return lr;
}

AdamState init_adam_state(const std::vector<std::pair<std::string, Tensor*>>& params) {
    AdamState state;
    for (const auto& [name, p] : params) {
        state.m.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
        state.v.emplace_back(static_cast<std::size_t>(p->size()), 0.0);
    }
    return state;
}

void adam_step(std::vector<std::pair<std::string, Tensor*>>& params,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               const TrainConfig& config) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("adam_step: parameter/gradient/state count mismatch");
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* p = params[pi].second;
        const auto& g = grads[pi];
        if (g.size() != static_cast<std::size_t>(p->size()))
            throw ShapeError("adam_step: gradient extent mismatch for " + params[pi].first);
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        auto& data = p->mutable_data();
        const bool f32 = p->precision() == Precision::f32;
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double next = data[i] - lr * (mhat / (std::sqrt(vhat) + config.epsilon) +
                                          config.weight_decay * data[i]);
            if (f32) next = static_cast<double>(static_cast<float>(next));
            if (!std::isfinite(next)) throw NumericError("adam_step: non-finite parameter update");
            data[i] = next;
        }
    }
}

namespace {

std::vector<Box3D> gt_in_ego_frame(const Scene& scene, const BevGrid& grid) {
    const Pose to_ego = scene.agents[scene.ego].pose.inverse();
    std::vector<Box3D> out;
    for (const auto& g : scene.gt) {
        const auto c = to_ego.apply(g.cx, g.cy, g.cz);
        Box3D b(c[0], c[1], c[2], g.l, g.w, g.h, g.yaw + to_ego.yaw, g.cls, 1.0);
        std::int64_t row, col;
        if (grid.locate(b.cx, b.cy, row, col)) out.push_back(b);  // targets only inside the grid
    }
    return out;
}

}  // namespace

TrainHistory train_toy(Model& model, const std::vector<Scene>& dataset, const TrainConfig& config,
                       const EvalConfig& eval_config) {
    config.validate();
    if (dataset.empty()) throw DomainError("train: empty dataset");

    const auto n_val = static_cast<std::size_t>(std::floor(config.val_fraction *
                                                           static_cast<double>(dataset.size())));
    const auto n_train = dataset.size() - n_val;
    if (n_train == 0) throw DomainError("train: no training scenes left after the validation split");

    auto params = model.named_params();
    AdamState state = init_adam_state(params);
    Rng root(config.seed ^ 0x747261696eull);
    const auto grid = model.config().pillar_grid();
    const auto& anchors = model.anchors();

    TrainHistory history;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = multistep_lr(epoch, config);
        Rng erng = root.derive(static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order(n_train);
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[erng.below(i)]);

        LossBreakdown epoch_sum;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            Tape tape;
            Tensor batch_total;
            LossBreakdown batch_break;
            for (std::size_t bi = start; bi < end; ++bi) {
                Scene scene = dataset[order[bi]];
                if (config.augment) {
                    Augmentation aug;
                    aug.flip = config.aug_flip && erng.bernoulli(0.5);
                    aug.rotation = erng.uniform(-config.aug_rotation, config.aug_rotation);
                    aug.scale = erng.uniform(config.aug_scale_min, config.aug_scale_max);
                    scene = augment_scene(scene, aug);
                }
                LossResult result;
                try {
                    auto head = model.forward_features(scene, true);
                    auto gts = gt_in_ego_frame(scene, grid);
                    auto targets = build_targets(anchors, match_anchors(anchors, gts, model.config().anchors),
                                                 gts, model.config().feature_grid());
                    const LossWeights weights = model.config().m3 ? model.config().loss
                                                                  : LossWeights::uniform();
                    result = total_loss(head, targets, weights);
                } catch (const NumericError& e) {
                    throw NumericError("train: epoch " + std::to_string(epoch) + " scene " +
                                       std::to_string(order[bi]) + ": " + e.what());
                }
                batch_total = batch_total.defined() ? add(batch_total, result.total) : result.total;
                for (int c = 0; c < kNumClasses; ++c) {
                    batch_break.cls[static_cast<std::size_t>(c)] += result.breakdown.cls[static_cast<std::size_t>(c)];
                    batch_break.reg[static_cast<std::size_t>(c)] += result.breakdown.reg[static_cast<std::size_t>(c)];
                    batch_break.dir[static_cast<std::size_t>(c)] += result.breakdown.dir[static_cast<std::size_t>(c)];
                    batch_break.positives[static_cast<std::size_t>(c)] += result.breakdown.positives[static_cast<std::size_t>(c)];
                }
                batch_break.total += result.breakdown.total;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            batch_total = mul_scalar(batch_total, inv);
            tape.backward(batch_total);
            std::vector<std::vector<double>> grads;
            grads.reserve(params.size());
            for (auto& [name, p] : params) grads.push_back(tape.grad(*p).data());
            adam_step(params, grads, state, lr, config);

            if (epoch == 0) history.first_losses.push_back(batch_total.value());
            for (int c = 0; c < kNumClasses; ++c) {
                epoch_sum.cls[static_cast<std::size_t>(c)] += batch_break.cls[static_cast<std::size_t>(c)] * inv;
                epoch_sum.reg[static_cast<std::size_t>(c)] += batch_break.reg[static_cast<std::size_t>(c)] * inv;
                epoch_sum.dir[static_cast<std::size_t>(c)] += batch_break.dir[static_cast<std::size_t>(c)] * inv;
                epoch_sum.positives[static_cast<std::size_t>(c)] += batch_break.positives[static_cast<std::size_t>(c)];
            }
            epoch_sum.total += batch_break.total * inv;
            ++steps;
        }

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        const double inv_steps = steps ? 1.0 / static_cast<double>(steps) : 0.0;
        for (int c = 0; c < kNumClasses; ++c) {
            log.mean_loss.cls[static_cast<std::size_t>(c)] = epoch_sum.cls[static_cast<std::size_t>(c)] * inv_steps;
            log.mean_loss.reg[static_cast<std::size_t>(c)] = epoch_sum.reg[static_cast<std::size_t>(c)] * inv_steps;
            log.mean_loss.dir[static_cast<std::size_t>(c)] = epoch_sum.dir[static_cast<std::size_t>(c)] * inv_steps;
            log.mean_loss.positives[static_cast<std::size_t>(c)] = epoch_sum.positives[static_cast<std::size_t>(c)];
        }
        log.mean_loss.total = epoch_sum.total * inv_steps;

        if (n_val > 0) {
            std::vector<std::vector<Box3D>> dets, gts;
            for (std::size_t i = n_train; i < dataset.size(); ++i) {
                dets.push_back(model.forward(dataset[i]));
                gts.push_back(gt_in_ego_frame(dataset[i], grid));
            }
            log.val = eval_scenes(dets, gts, eval_config);
        }
        history.epochs.push_back(std::move(log));
    }
    return history;
}

std::uint64_t config_fingerprint(const ModelConfig& cfg) {
    const std::string text = model_config_to_json_obj(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

void save_checkpoint(const std::string& path, const Model& model, const AdamState& state, int epoch) {
    json j;
    j["config"] = model_config_to_json_obj(model.config());
    std::ostringstream fp;
    fp << std::hex << config_fingerprint(model.config());
    j["fingerprint"] = fp.str();
    j["epoch"] = epoch;
    json params = json::array();
    for (auto& [name, p] : const_cast<Model&>(model).named_params()) {
        json jp;
        jp["name"] = name;
        jp["data"] = p->data();
        params.push_back(std::move(jp));
    }
    j["params"] = params;
    j["opt"] = {{"step", state.step}, {"m", state.m}, {"v", state.v}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump();
    if (!out) throw IoError("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("checkpoint: " + std::string(e.what()));
    }
    ModelConfig cfg = model_config_from_json_obj(j.at("config"));
    std::ostringstream fp;
    fp << std::hex << config_fingerprint(cfg);
    if (j.contains("fingerprint") && j.at("fingerprint").get<std::string>() != fp.str())
        throw ParseError("checkpoint: config fingerprint mismatch");
    LoadedCheckpoint out{Model(cfg, 0), AdamState{}, j.at("epoch").get<int>()};
    auto params = out.model.named_params();
    const auto& jp = j.at("params");
    if (jp.size() != params.size()) throw ParseError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (jp.at(i).at("name").get<std::string>() != params[i].first)
            throw ParseError("checkpoint: parameter order mismatch at " + params[i].first);
        auto data = jp.at(i).at("data").get<std::vector<double>>();
        if (data.size() != static_cast<std::size_t>(params[i].second->size()))
            throw ParseError("checkpoint: parameter extent mismatch at " + params[i].first);
        params[i].second->mutable_data() = std::move(data);
    }
    const auto& jo = j.at("opt");
    out.state.step = jo.at("step").get<std::int64_t>();
    out.state.m = jo.at("m").get<std::vector<std::vector<double>>>();
    out.state.v = jo.at("v").get<std::vector<std::vector<double>>>();
    if (out.state.m.size() != params.size() || out.state.v.size() != params.size())
        throw ParseError("checkpoint: optimizer state mismatch");
    return out;
}

namespace {

void expect_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ParseError("config: unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig train_config_from_json_obj(const json& j) {
    TrainConfig cfg;
    expect_keys(j,
                {"epochs", "lr", "weight_decay", "epsilon", "batch_size", "milestones", "gamma",
                 "seed", "augment", "aug_flip", "aug_rotation", "aug_scale_min", "aug_scale_max",
                 "val_fraction"},
                "train");
    maybe(j, "epochs", cfg.epochs);
    maybe(j, "lr", cfg.lr);
    maybe(j, "weight_decay", cfg.weight_decay);
    maybe(j, "epsilon", cfg.epsilon);
    maybe(j, "batch_size", cfg.batch_size);
    maybe(j, "milestones", cfg.milestones);
    maybe(j, "gamma", cfg.gamma);
    maybe(j, "seed", cfg.seed);
    maybe(j, "augment", cfg.augment);
    maybe(j, "aug_flip", cfg.aug_flip);
    maybe(j, "aug_rotation", cfg.aug_rotation);
    maybe(j, "aug_scale_min", cfg.aug_scale_min);
    maybe(j, "aug_scale_max", cfg.aug_scale_max);
    maybe(j, "val_fraction", cfg.val_fraction);
    cfg.validate();
    return cfg;
}

json train_config_to_json_obj(const TrainConfig& cfg) {
    json j;
    j["epochs"] = cfg.epochs;
    j["lr"] = cfg.lr;
    j["weight_decay"] = cfg.weight_decay;
    j["epsilon"] = cfg.epsilon;
    j["batch_size"] = cfg.batch_size;
    j["milestones"] = cfg.milestones;
    j["gamma"] = cfg.gamma;
    j["seed"] = cfg.seed;
    j["augment"] = cfg.augment;
    j["aug_flip"] = cfg.aug_flip;
    j["aug_rotation"] = cfg.aug_rotation;
    j["aug_scale_min"] = cfg.aug_scale_min;
    j["aug_scale_max"] = cfg.aug_scale_max;
    j["val_fraction"] = cfg.val_fraction;
    return j;
}

TrainConfig train_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("train config: ") + e.what());
    }
    return train_config_from_json_obj(j);
}

std::string train_config_to_json(const TrainConfig& cfg) { return train_config_to_json_obj(cfg).dump(2); }

namespace {

EvalConfig eval_config_from_json_obj(const json& j) {
    EvalConfig cfg;
    expect_keys(j, {"x_min", "x_max", "y_min", "y_max", "iou_thresholds", "range_edges", "flavor",
                    "interp"},
                "eval");
    maybe(j, "x_min", cfg.x_min);
    maybe(j, "x_max", cfg.x_max);
    maybe(j, "y_min", cfg.y_min);
    maybe(j, "y_max", cfg.y_max);
    maybe(j, "iou_thresholds", cfg.iou_thresholds);
    maybe(j, "range_edges", cfg.range_edges);
    if (j.contains("flavor")) {
        const auto f = j.at("flavor").get<std::string>();
        if (f == "bev")
            cfg.flavor = IouFlavor::rotated_bev;
        else if (f == "3d")
            cfg.flavor = IouFlavor::full_3d;
        else
            throw ParseError("config: eval flavor must be bev or 3d");
    }
    if (j.contains("interp")) {
        const auto v = j.at("interp").get<std::string>();
        if (v == "exact")
            cfg.interp = ApInterp::exact;
        else if (v == "11point")
            cfg.interp = ApInterp::eleven_point;
        else if (v == "40point")
            cfg.interp = ApInterp::forty_point;
        else
            throw ParseError("config: eval interp must be exact, 11point, or 40point");
    }
    cfg.validate();
    return cfg;
}

json eval_config_to_json_obj(const EvalConfig& cfg) {
    json j;
    j["x_min"] = cfg.x_min;
    j["x_max"] = cfg.x_max;
    j["y_min"] = cfg.y_min;
    j["y_max"] = cfg.y_max;
    j["iou_thresholds"] = cfg.iou_thresholds;
    j["range_edges"] = cfg.range_edges;
    j["flavor"] = cfg.flavor == IouFlavor::rotated_bev ? "bev" : "3d";
    j["interp"] = cfg.interp == ApInterp::exact ? "exact"
                  : cfg.interp == ApInterp::eleven_point ? "11point"
                                                         : "40point";
    return j;
}

SceneConfig scene_config_from_json_obj(const json& j) {
    SceneConfig cfg;
    expect_keys(j, {"n_agents", "counts", "classes", "region", "sensor", "clutter_points",
                    "sensor_height", "occlusion", "placement_retries"},
                "scene");
    maybe(j, "n_agents", cfg.n_agents);
    if (j.contains("counts")) {
        const auto& jc = j.at("counts");
        expect_keys(jc, {"pedestrian", "car", "truck"}, "scene.counts");
        for (int c = 0; c < kNumClasses; ++c)
            if (jc.contains(class_name(static_cast<ObjectClass>(c))))
                cfg.counts[static_cast<std::size_t>(c)] =
                    jc.at(class_name(static_cast<ObjectClass>(c))).get<std::int64_t>();
    }
    if (j.contains("classes")) {
        const auto& jc = j.at("classes");
        expect_keys(jc, {"pedestrian", "car", "truck"}, "scene.classes");
        for (int c = 0; c < kNumClasses; ++c) {
            const char* name = class_name(static_cast<ObjectClass>(c));
            if (!jc.contains(name)) continue;
            const auto& jm = jc.at(name);
            expect_keys(jm, {"size", "jitter"}, std::string("scene.classes.") + name);
            auto& model = cfg.classes[static_cast<std::size_t>(c)];
            if (jm.contains("size")) {
                auto v = jm.at("size").get<std::vector<double>>();
                if (v.size() != 3) throw ParseError("config: class size needs 3 extents");
                model.mean_size = {v[0], v[1], v[2]};
            }
            maybe(jm, "jitter", model.jitter);
        }
    }
    if (j.contains("region")) {
        const auto& r = j.at("region");
        expect_keys(r, {"x_min", "x_max", "y_min", "y_max"}, "scene.region");
        maybe(r, "x_min", cfg.x_min);
        maybe(r, "x_max", cfg.x_max);
        maybe(r, "y_min", cfg.y_min);
        maybe(r, "y_max", cfg.y_max);
    }
    if (j.contains("sensor")) {
        const auto& s = j.at("sensor");
        expect_keys(s, {"base_rate", "max_range", "noise_sigma", "min_range"}, "scene.sensor");
        maybe(s, "base_rate", cfg.sensor.base_rate);
        maybe(s, "max_range", cfg.sensor.max_range);
        maybe(s, "noise_sigma", cfg.sensor.noise_sigma);
        maybe(s, "min_range", cfg.sensor.min_range);
    }
    maybe(j, "clutter_points", cfg.clutter_points);
    maybe(j, "sensor_height", cfg.sensor_height);
    maybe(j, "occlusion", cfg.occlusion);
    maybe(j, "placement_retries", cfg.placement_retries);
    cfg.validate();
    return cfg;
}

json scene_config_to_json_obj(const SceneConfig& cfg) {
    json j;
    j["n_agents"] = cfg.n_agents;
    json counts, classes;
    for (int c = 0; c < kNumClasses; ++c) {
        counts[class_name(static_cast<ObjectClass>(c))] = cfg.counts[static_cast<std::size_t>(c)];
        const auto& m = cfg.classes[static_cast<std::size_t>(c)];
        classes[class_name(static_cast<ObjectClass>(c))] = {
            {"size", {m.mean_size[0], m.mean_size[1], m.mean_size[2]}}, {"jitter", m.jitter}};
    }
    j["counts"] = counts;
    j["classes"] = classes;
    j["region"] = {{"x_min", cfg.x_min}, {"x_max", cfg.x_max}, {"y_min", cfg.y_min}, {"y_max", cfg.y_max}};
    j["sensor"] = {{"base_rate", cfg.sensor.base_rate}, {"max_range", cfg.sensor.max_range},
                   {"noise_sigma", cfg.sensor.noise_sigma}, {"min_range", cfg.sensor.min_range}};
    j["clutter_points"] = cfg.clutter_points;
    j["sensor_height"] = cfg.sensor_height;
    j["occlusion"] = cfg.occlusion;
    j["placement_retries"] = cfg.placement_retries;
    return j;
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    expect_keys(j, {"model", "train", "eval", "scene", "n_scenes"}, "config");
    RunConfig cfg;
    if (j.contains("model")) cfg.model = model_config_from_json_obj(j.at("model"));
    if (j.contains("train")) cfg.train = train_config_from_json_obj(j.at("train"));
    if (j.contains("eval")) cfg.eval = eval_config_from_json_obj(j.at("eval"));
    if (j.contains("scene")) cfg.scene = scene_config_from_json_obj(j.at("scene"));
    maybe(j, "n_scenes", cfg.n_scenes);
    cfg.model.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return run_config_from_json(text);
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["model"] = model_config_to_json_obj(cfg.model);
    j["train"] = train_config_to_json_obj(cfg.train);
    j["eval"] = eval_config_to_json_obj(cfg.eval);
    j["scene"] = scene_config_to_json_obj(cfg.scene);
    j["n_scenes"] = cfg.n_scenes;
    return j.dump(2);
}

}  // namespace coopdet
