#include "coopdet/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace coopdet {

using nlohmann::json;

std::int64_t ModelConfig::stride_product() const {
    std::int64_t p = 1;
    for (auto s : backbone_strides) p *= s;
    return p;
}

BevGrid ModelConfig::pillar_grid() const { return BevGrid(x_min, x_max, y_min, y_max, cell); }

BevGrid ModelConfig::feature_grid() const {
    return BevGrid(x_min, x_max, y_min, y_max, cell * static_cast<double>(stride_product()));
}

void ModelConfig::validate() {
    if (pillar_channels < 1 || feature_dim < 1) throw DomainError("model config: bad channel extents");
    if (backbone_widths.empty() || backbone_widths.size() != backbone_strides.size())
        throw DomainError("model config: backbone widths/strides must align");
    for (auto s : backbone_strides)
        if (s != 1 && s != 2) throw DomainError("model config: strides must be 1 or 2");
    if (backbone_widths.back() != feature_dim)
        throw DomainError("model config: last backbone width must equal feature_dim");
    if (max_points_per_pillar < 1) throw DomainError("model config: max_points_per_pillar must be >= 1");
    if (max_agents < 1 || max_agents > 4) throw DomainError("model config: max_agents must be 1..4");
    if (score_threshold < 0 || score_threshold > 1) throw DomainError("model config: bad score threshold");
    if (nms_iou < 0 || nms_iou > 1) throw DomainError("model config: bad NMS threshold");
    window.channels = feature_dim;
    groups.channels = feature_dim;
    window.validate();
    groups.validate();
    anchors.validate();
    pillar_grid();
    feature_grid();  // also checks divisibility by the stride product
    const auto fg = feature_grid();
    const auto pg = pillar_grid();
    if (fg.height() * stride_product() != pg.height() || fg.width() * stride_product() != pg.width())
        throw DomainError("model config: grid extents must divide by the stride product");
    if (se_reduction < 1 || feature_dim % se_reduction != 0)
        throw DomainError("model config: se_reduction must divide feature_dim");
}

namespace {

ConvLayer init_conv_layer(std::int64_t in, std::int64_t out, Rng& rng, Precision prec) {
    ConvLayer layer;
    const double bound = std::sqrt(6.0 / static_cast<double>(in * 9 + out));
    layer.w = Tensor::uniform({out, in, 3, 3}, bound, rng, prec).set_requires_grad(true);
    layer.norm.scale = Tensor::full({out}, 1.0, prec).set_requires_grad(true);
    layer.norm.shift = Tensor::zeros({out}, prec).set_requires_grad(true);
    return layer;
}

ClassHead init_head(std::int64_t d, Rng& rng, Precision prec) {
    ClassHead h;
    auto conv1x1 = [&](std::int64_t out) {
        const double bound = std::sqrt(6.0 / static_cast<double>(d + out));
        return Tensor::uniform({out, d, 1, 1}, bound, rng, prec).set_requires_grad(true);
    };
    h.cls_w = conv1x1(2);
    // objectness prior at sigmoid ~0.01 keeps early focal loss small and
    // an all-zero map below any sane score threshold
    h.cls_b = Tensor::full({2}, -4.59511985013459, prec).set_requires_grad(true);
    h.reg_w = conv1x1(14);
    h.reg_b = Tensor::zeros({14}, prec).set_requires_grad(true);
    h.dir_w = conv1x1(4);
    h.dir_b = Tensor::zeros({4}, prec).set_requires_grad(true);
    return h;
}

Tensor conv_norm_relu(const Tensor& x, const ConvLayer& layer, std::int64_t stride) {
    auto y = conv2d(x, layer.w, {.stride = stride, .dilation = 1, .pad = 1});
    return relu(channel_norm(y, layer.norm.scale, layer.norm.shift));
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Precision prec = cfg_.precision;
    Rng root(seed);

    Rng pr = root.derive(1);
    pillar_w = Tensor::uniform({9, cfg_.pillar_channels},
                               std::sqrt(6.0 / static_cast<double>(9 + cfg_.pillar_channels)), pr, prec)
                   .set_requires_grad(true);
    pillar_b = Tensor::zeros({cfg_.pillar_channels}, prec).set_requires_grad(true);

    Rng br = root.derive(2);
    std::int64_t in = cfg_.pillar_channels;
    for (std::size_t i = 0; i < cfg_.backbone_widths.size(); ++i) {
        const auto out = cfg_.backbone_widths[i];
        BackboneBlock block;
        block.down = init_conv_layer(in, out, br, prec);
        block.keep1 = init_conv_layer(out, out, br, prec);
        block.keep2 = init_conv_layer(out, out, br, prec);
        backbone.push_back(std::move(block));
        in = out;
    }

    Rng ar = root.derive(3);
    attention = init_attention_params(cfg_.window, ar, prec);
    Rng fr = root.derive(4);
    fusion = init_group_params(cfg_.groups, fr, prec);
    if (!cfg_.m1 && cfg_.fusion_baseline == BaselineMode::single_path_attention) {
        Rng sr = root.derive(5);
        single_path = init_path_params(cfg_.feature_dim, cfg_.groups.large_heads, cfg_.groups.large_dim,
                                       sr, prec);
    }
    Rng er = root.derive(6);
    enhancement.aspp = init_aspp_params(cfg_.feature_dim, cfg_.aspp_branch_channels, er, prec);
    enhancement.se = init_se_params(cfg_.feature_dim, cfg_.se_reduction, er, prec);

    Rng hr = root.derive(7);
    for (int c = 0; c < kNumClasses; ++c) heads.push_back(init_head(cfg_.feature_dim, hr, prec));

    anchors_ = generate_anchors(cfg_.feature_grid(), cfg_.anchors);
}

Tensor Model::encode_agent(const PointCloud& ego_frame_points, bool training) const {
    const auto grid = cfg_.pillar_grid();
    const auto cap = training ? cfg_.max_pillars_train : cfg_.max_pillars_eval;
    auto set = pillarize_and_encode(ego_frame_points, grid, cfg_.max_points_per_pillar, cap);
    if (set.pillars.empty())
        return Tensor::zeros({cfg_.pillar_channels, grid.height(), grid.width()}, cfg_.precision);
    std::vector<double> rows;
    rows.reserve(static_cast<std::size_t>(set.kept_points) * 9);
    std::vector<std::int64_t> offsets{0};
    std::vector<std::pair<std::int64_t, std::int64_t>> cells;
    for (const auto& pillar : set.pillars) {
        for (const auto& f : pillar.features) rows.insert(rows.end(), f.begin(), f.end());
        offsets.push_back(offsets.back() + static_cast<std::int64_t>(pillar.features.size()));
        cells.emplace_back(pillar.row, pillar.col);
    }
    Tensor x = Tensor::of({offsets.back(), 9}, std::move(rows), cfg_.precision);
    Tensor feats = segment_max_rows(relu(add_rowvec(matmul(x, pillar_w), pillar_b)), offsets);
    return scatter_pillars(feats, cells, grid.height(), grid.width());
}

Tensor Model::backbone_forward(const Tensor& pillar_map) const {
    Tensor x = pillar_map;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
        x = conv_norm_relu(x, backbone[i].down, cfg_.backbone_strides[i]);
        x = conv_norm_relu(x, backbone[i].keep1, 1);
        x = conv_norm_relu(x, backbone[i].keep2, 1);
    }
    return x;
}

std::vector<Tensor> Model::agent_features(const Scene& scene, bool training) const {
    if (scene.agents.empty()) throw DomainError("forward: scene has no agents");
    if (static_cast<int>(scene.agents.size()) > cfg_.max_agents)
        throw DomainError("forward: scene exceeds the configured agent bound");
    if (scene.ego >= scene.agents.size()) throw DomainError("forward: ego index out of range");
    const Pose to_ego = scene.agents[scene.ego].pose.inverse();
    std::vector<Tensor> maps;
    maps.reserve(scene.agents.size());
    for (const auto& agent : scene.agents) {
        const Pose xf = to_ego.compose(agent.pose);
        maps.push_back(backbone_forward(encode_agent(transform_points(xf, agent.cloud), training)));
    }
    return maps;
}

Tensor Model::fuse_stage(const std::vector<Tensor>& maps, std::size_t ego, MacCounter* counter) const {
    if (!cfg_.m1) {
        if (cfg_.fusion_baseline == BaselineMode::single_path_attention)
            return baseline_fuse(maps, cfg_.fusion_baseline, ego, &single_path, cfg_.groups.large_heads,
                                 cfg_.groups.large_dim);
        return baseline_fuse(maps, cfg_.fusion_baseline, ego);
    }
    std::vector<Tensor> routed;
    routed.reserve(maps.size());
    for (const auto& m : maps) routed.push_back(msw_forward(m, cfg_.window, attention, counter));
    return class_specific_fuse(routed, ego, cfg_.groups, fusion);
}

Tensor Model::enhance_stage(const Tensor& fused) const {
    return cfg_.m2 ? enhance_forward(fused, enhancement) : fused;
}

HeadOutputs Model::head_forward(const Tensor& bev) const {
    HeadOutputs out;
    out.height = bev.dim(1);
    out.width = bev.dim(2);
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& h = heads[static_cast<std::size_t>(c)];
        out.cls[static_cast<std::size_t>(c)] =
            add_channel_bias(conv2d(bev, h.cls_w, {.stride = 1, .dilation = 1, .pad = 0}), h.cls_b);
        out.reg[static_cast<std::size_t>(c)] =
            add_channel_bias(conv2d(bev, h.reg_w, {.stride = 1, .dilation = 1, .pad = 0}), h.reg_b);
        out.dir[static_cast<std::size_t>(c)] =
            add_channel_bias(conv2d(bev, h.dir_w, {.stride = 1, .dilation = 1, .pad = 0}), h.dir_b);
    }
    return out;
}

HeadOutputs Model::forward_features(const Scene& scene, bool training, MacCounter* counter) const {
    auto maps = agent_features(scene, training);
    return head_forward(enhance_stage(fuse_stage(maps, scene.ego, counter)));
}

std::vector<Box3D> Model::decode(const HeadOutputs& head) const {
    const auto hw = head.height * head.width;
    std::vector<Box3D> dets;
    for (std::size_t ai = 0; ai < anchors_.size(); ++ai) {
        const auto& anchor = anchors_[ai];
        const auto c = static_cast<std::size_t>(anchor.box.cls);
        // anchors iterate cell-major, then class, then yaw
        const auto cell = static_cast<std::int64_t>(ai) / (kNumClasses * 2);
        const double logit = head.cls[c].at(anchor.yaw_idx * hw + cell);
        const double score = 1.0 / (1.0 + std::exp(-logit));
        if (score < cfg_.score_threshold) continue;
        std::array<double, 7> delta{};
        for (int k = 0; k < 7; ++k) delta[static_cast<std::size_t>(k)] = head.reg[c].at((anchor.yaw_idx * 7 + k) * hw + cell);
        const double d0 = head.dir[c].at((anchor.yaw_idx * 2 + 0) * hw + cell);
        const double d1 = head.dir[c].at((anchor.yaw_idx * 2 + 1) * hw + cell);
        Box3D box = decode_boxes(delta, d1 > d0 ? 1 : 0, anchor.box);
        box.score = score;
        dets.push_back(box);
    }
    return nms_per_class(dets, cfg_.nms_iou);
}

std::vector<Box3D> Model::forward(const Scene& scene, MacCounter* counter) const {
    return decode(forward_features(scene, false, counter));
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("pillar.w", &pillar_w);
    out.emplace_back("pillar.b", &pillar_b);
    for (std::size_t i = 0; i < backbone.size(); ++i) {
        const std::string base = "backbone." + std::to_string(i);
        auto add_layer = [&](const std::string& name, ConvLayer& layer) {
            out.emplace_back(base + "." + name + ".w", &layer.w);
            out.emplace_back(base + "." + name + ".scale", &layer.norm.scale);
            out.emplace_back(base + "." + name + ".shift", &layer.norm.shift);
        };
        add_layer("down", backbone[i].down);
        add_layer("keep1", backbone[i].keep1);
        add_layer("keep2", backbone[i].keep2);
    }
    for (std::size_t s = 0; s < attention.scales.size(); ++s) {
        const std::string base = "attention.scale" + std::to_string(s);
        auto& sc = attention.scales[s];
        out.emplace_back(base + ".wq", &sc.wq);
        out.emplace_back(base + ".wk", &sc.wk);
        out.emplace_back(base + ".wv", &sc.wv);
        out.emplace_back(base + ".bq", &sc.bq);
        out.emplace_back(base + ".bv", &sc.bv);
        out.emplace_back(base + ".wo", &sc.wo);
        out.emplace_back(base + ".bo", &sc.bo);
        out.emplace_back(base + ".bias_table", &sc.bias_table);
    }
    out.emplace_back("attention.router.w", &attention.router.weight);
    out.emplace_back("attention.router.b", &attention.router.bias);
    auto add_path = [&](const std::string& base, GroupPathParams& p) {
        out.emplace_back(base + ".proj_w", &p.proj_w);
        out.emplace_back(base + ".proj_b", &p.proj_b);
        out.emplace_back(base + ".wq", &p.wq);
        out.emplace_back(base + ".wk", &p.wk);
        out.emplace_back(base + ".wv", &p.wv);
        out.emplace_back(base + ".wo", &p.wo);
        out.emplace_back(base + ".bo", &p.bo);
    };
    add_path("fusion.small", fusion.small);
    add_path("fusion.large", fusion.large);
    out.emplace_back("fusion.fuse_w", &fusion.fuse_w);
    out.emplace_back("fusion.fuse_b", &fusion.fuse_b);
    if (single_path.proj_w.defined()) add_path("fusion.single", single_path);
    for (std::size_t i = 0; i < enhancement.aspp.branch_w.size(); ++i) {
        out.emplace_back("enhance.aspp.branch" + std::to_string(i) + ".w", &enhancement.aspp.branch_w[i]);
        out.emplace_back("enhance.aspp.branch" + std::to_string(i) + ".b", &enhancement.aspp.branch_b[i]);
    }
    out.emplace_back("enhance.aspp.pool_w", &enhancement.aspp.pool_w);
    out.emplace_back("enhance.aspp.pool_b", &enhancement.aspp.pool_b);
    out.emplace_back("enhance.aspp.proj_w", &enhancement.aspp.proj_w);
    out.emplace_back("enhance.aspp.proj_b", &enhancement.aspp.proj_b);
    out.emplace_back("enhance.aspp.norm_scale", &enhancement.aspp.norm_scale);
    out.emplace_back("enhance.aspp.norm_shift", &enhancement.aspp.norm_shift);
    out.emplace_back("enhance.se.w1", &enhancement.se.w1);
    out.emplace_back("enhance.se.b1", &enhancement.se.b1);
    out.emplace_back("enhance.se.w2", &enhancement.se.w2);
    out.emplace_back("enhance.se.b2", &enhancement.se.b2);
    for (int c = 0; c < kNumClasses; ++c) {
        const std::string base = std::string("head.") + class_name(static_cast<ObjectClass>(c));
        auto& h = heads[static_cast<std::size_t>(c)];
        out.emplace_back(base + ".cls_w", &h.cls_w);
        out.emplace_back(base + ".cls_b", &h.cls_b);
        out.emplace_back(base + ".reg_w", &h.reg_w);
        out.emplace_back(base + ".reg_b", &h.reg_b);
        out.emplace_back(base + ".dir_w", &h.dir_w);
        out.emplace_back(base + ".dir_b", &h.dir_b);
    }
    return out;
}

std::int64_t Model::param_count() const {
    std::int64_t total = 0;
    for (const auto& [name, t] : const_cast<Model*>(this)->named_params()) total += t->size();
    return total;
}

std::vector<std::pair<std::string, std::int64_t>> Model::param_counts_by_module() const {
    std::vector<std::pair<std::string, std::int64_t>> out;
    for (const auto& [name, t] : const_cast<Model*>(this)->named_params()) {
        const std::string module = name.substr(0, name.find('.'));
        auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == module; });
        if (it == out.end())
            out.emplace_back(module, t->size());
        else
            it->second += t->size();
    }
    return out;
}

// ---- config JSON ----

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

std::array<double, kNumClasses> class_weights_from(const json& j, const char* key,
                                                   std::array<double, kNumClasses> defaults) {
    if (!j.contains(key)) return defaults;
    const auto& jw = j.at(key);
    expect_keys(jw, {"pedestrian", "car", "truck"}, key);
    std::array<double, kNumClasses> out = defaults;
    for (int c = 0; c < kNumClasses; ++c)
        if (jw.contains(class_name(static_cast<ObjectClass>(c))))
            out[static_cast<std::size_t>(c)] = jw.at(class_name(static_cast<ObjectClass>(c))).get<double>();
    return out;
}

json class_weights_to(const std::array<double, kNumClasses>& w) {
    json j;
    for (int c = 0; c < kNumClasses; ++c)
        j[class_name(static_cast<ObjectClass>(c))] = w[static_cast<std::size_t>(c)];
    return j;
}

}  // namespace

ModelConfig model_config_from_json_obj(const json& j) {
    ModelConfig cfg;
    expect_keys(j,
                {"grid", "max_points_per_pillar", "max_pillars_train", "max_pillars_eval",
                 "pillar_channels", "backbone_widths", "backbone_strides", "feature_dim", "window",
                 "groups", "aspp_branch_channels", "se_reduction", "anchors", "loss",
                 "score_threshold", "nms_iou", "m1", "m2", "m3", "fusion_baseline", "precision",
                 "max_agents"},
                "model");
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        expect_keys(g, {"x_min", "x_max", "y_min", "y_max", "cell"}, "model.grid");
        maybe(g, "x_min", cfg.x_min);
        maybe(g, "x_max", cfg.x_max);
        maybe(g, "y_min", cfg.y_min);
        maybe(g, "y_max", cfg.y_max);
        maybe(g, "cell", cfg.cell);
    }
    maybe(j, "max_points_per_pillar", cfg.max_points_per_pillar);
    maybe(j, "max_pillars_train", cfg.max_pillars_train);
    maybe(j, "max_pillars_eval", cfg.max_pillars_eval);
    maybe(j, "pillar_channels", cfg.pillar_channels);
    maybe(j, "backbone_widths", cfg.backbone_widths);
    maybe(j, "backbone_strides", cfg.backbone_strides);
    maybe(j, "feature_dim", cfg.feature_dim);
    if (j.contains("window")) {
        const auto& w = j.at("window");
        expect_keys(w, {"sizes", "heads", "head_dims"}, "model.window");
        maybe(w, "sizes", cfg.window.sizes);
        maybe(w, "heads", cfg.window.heads);
        maybe(w, "head_dims", cfg.window.head_dims);
    }
    if (j.contains("groups")) {
        const auto& g = j.at("groups");
        expect_keys(g, {"small_heads", "small_dim", "large_heads", "large_dim", "large_downsample"},
                    "model.groups");
        maybe(g, "small_heads", cfg.groups.small_heads);
        maybe(g, "small_dim", cfg.groups.small_dim);
        maybe(g, "large_heads", cfg.groups.large_heads);
        maybe(g, "large_dim", cfg.groups.large_dim);
        maybe(g, "large_downsample", cfg.groups.large_downsample);
    }
    maybe(j, "aspp_branch_channels", cfg.aspp_branch_channels);
    maybe(j, "se_reduction", cfg.se_reduction);
    if (j.contains("anchors")) {
        const auto& a = j.at("anchors");
        expect_keys(a, {"pedestrian", "car", "truck"}, "model.anchors");
        for (int c = 0; c < kNumClasses; ++c) {
            const char* name = class_name(static_cast<ObjectClass>(c));
            if (!a.contains(name)) continue;
            const auto& ja = a.at(name);
            expect_keys(ja, {"size", "pos_iou", "neg_iou"}, std::string("model.anchors.") + name);
            auto& spec = cfg.anchors.per_class[static_cast<std::size_t>(c)];
            if (ja.contains("size")) {
                auto v = ja.at("size").get<std::vector<double>>();
                if (v.size() != 3) throw ParseError("config: anchor size needs 3 extents");
                spec.size = {v[0], v[1], v[2]};
            }
            maybe(ja, "pos_iou", spec.pos_iou);
            maybe(ja, "neg_iou", spec.neg_iou);
        }
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        expect_keys(l, {"cls", "reg", "dir", "terms", "focal_alpha", "focal_gamma", "smooth_l1_sigma"},
                    "model.loss");
        cfg.loss.cls = class_weights_from(l, "cls", cfg.loss.cls);
        cfg.loss.reg = class_weights_from(l, "reg", cfg.loss.reg);
        cfg.loss.dir = class_weights_from(l, "dir", cfg.loss.dir);
        if (l.contains("terms")) {
            auto v = l.at("terms").get<std::vector<double>>();
            if (v.size() != 3) throw ParseError("config: loss terms needs 3 weights");
            cfg.loss.terms = {v[0], v[1], v[2]};
        }
        maybe(l, "focal_alpha", cfg.loss.focal_alpha);
        maybe(l, "focal_gamma", cfg.loss.focal_gamma);
        maybe(l, "smooth_l1_sigma", cfg.loss.smooth_l1_sigma);
    }
    maybe(j, "score_threshold", cfg.score_threshold);
    maybe(j, "nms_iou", cfg.nms_iou);
    maybe(j, "m1", cfg.m1);
    maybe(j, "m2", cfg.m2);
    maybe(j, "m3", cfg.m3);
    if (j.contains("fusion_baseline"))
        cfg.fusion_baseline = baseline_mode_from_name(j.at("fusion_baseline").get<std::string>());
    if (j.contains("precision")) {
        const auto p = j.at("precision").get<std::string>();
        if (p == "f32")
            cfg.precision = Precision::f32;
        else if (p == "f64")
            cfg.precision = Precision::f64;
        else
            throw ParseError("config: precision must be f32 or f64");
    }
    maybe(j, "max_agents", cfg.max_agents);
    cfg.validate();
    return cfg;
}

json model_config_to_json_obj(const ModelConfig& cfg) {
    json j;
    j["grid"] = {{"x_min", cfg.x_min}, {"x_max", cfg.x_max}, {"y_min", cfg.y_min},
                 {"y_max", cfg.y_max}, {"cell", cfg.cell}};
    j["max_points_per_pillar"] = cfg.max_points_per_pillar;
    j["max_pillars_train"] = cfg.max_pillars_train;
    j["max_pillars_eval"] = cfg.max_pillars_eval;
    j["pillar_channels"] = cfg.pillar_channels;
    j["backbone_widths"] = cfg.backbone_widths;
    j["backbone_strides"] = cfg.backbone_strides;
    j["feature_dim"] = cfg.feature_dim;
    j["window"] = {{"sizes", cfg.window.sizes}, {"heads", cfg.window.heads},
                   {"head_dims", cfg.window.head_dims}};
    j["groups"] = {{"small_heads", cfg.groups.small_heads}, {"small_dim", cfg.groups.small_dim},
                   {"large_heads", cfg.groups.large_heads}, {"large_dim", cfg.groups.large_dim},
                   {"large_downsample", cfg.groups.large_downsample}};
    j["aspp_branch_channels"] = cfg.aspp_branch_channels;
    j["se_reduction"] = cfg.se_reduction;
    json anchors;
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& spec = cfg.anchors.per_class[static_cast<std::size_t>(c)];
        anchors[class_name(static_cast<ObjectClass>(c))] = {
            {"size", {spec.size[0], spec.size[1], spec.size[2]}},
            {"pos_iou", spec.pos_iou},
            {"neg_iou", spec.neg_iou}};
    }
    j["anchors"] = anchors;
    j["loss"] = {{"cls", class_weights_to(cfg.loss.cls)},
                 {"reg", class_weights_to(cfg.loss.reg)},
                 {"dir", class_weights_to(cfg.loss.dir)},
                 {"terms", {cfg.loss.terms[0], cfg.loss.terms[1], cfg.loss.terms[2]}},
                 {"focal_alpha", cfg.loss.focal_alpha},
                 {"focal_gamma", cfg.loss.focal_gamma},
                 {"smooth_l1_sigma", cfg.loss.smooth_l1_sigma}};
    j["score_threshold"] = cfg.score_threshold;
    j["nms_iou"] = cfg.nms_iou;
    j["m1"] = cfg.m1;
    j["m2"] = cfg.m2;
    j["m3"] = cfg.m3;
    j["fusion_baseline"] = baseline_mode_name(cfg.fusion_baseline);
    j["precision"] = cfg.precision == Precision::f32 ? "f32" : "f64";
    j["max_agents"] = cfg.max_agents;
    return j;
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    return model_config_from_json_obj(j);
}

std::string model_config_to_json(const ModelConfig& cfg) { return model_config_to_json_obj(cfg).dump(2); }

}  // namespace coopdet
