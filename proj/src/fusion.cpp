#include "coopdet/fusion.hpp"

#include <cmath>

namespace coopdet {

void GroupConfig::validate() const {
    if (channels < 1) throw DomainError("group config: channels must be positive");
    if (small_heads < 1 || small_dim < 1 || large_heads < 1 || large_dim < 1)
        throw DomainError("group config: head settings must be positive");
    for (int c = 0; c < kNumClasses; ++c)
        if (group_of[static_cast<std::size_t>(c)] != 0 && group_of[static_cast<std::size_t>(c)] != 1)
            throw DomainError("group config: every class must map to the small or large group");
}

GroupPathParams init_path_params(std::int64_t channels, std::int64_t heads, std::int64_t dim, Rng& rng,
                                 Precision prec) {
    GroupPathParams p;
    const auto inner = heads * dim;
    const double b_proj = std::sqrt(6.0 / static_cast<double>(2 * channels));
    const double b_attn = std::sqrt(6.0 / static_cast<double>(channels + inner));
    p.proj_w = Tensor::uniform({channels, channels}, b_proj, rng, prec).set_requires_grad(true);
    p.proj_b = Tensor::zeros({channels}, prec).set_requires_grad(true);
    p.wq = Tensor::uniform({channels, inner}, b_attn, rng, prec).set_requires_grad(true);
    p.wk = Tensor::uniform({channels, inner}, b_attn, rng, prec).set_requires_grad(true);
    p.wv = Tensor::uniform({channels, inner}, b_attn, rng, prec).set_requires_grad(true);
    p.wo = Tensor::uniform({inner, channels}, b_attn, rng, prec).set_requires_grad(true);
    p.bo = Tensor::zeros({channels}, prec).set_requires_grad(true);
    return p;
}

GroupParams init_group_params(const GroupConfig& cfg, Rng& rng, Precision prec) {
    cfg.validate();
    GroupParams p;
    p.small = init_path_params(cfg.channels, cfg.small_heads, cfg.small_dim, rng, prec);
    p.large = init_path_params(cfg.channels, cfg.large_heads, cfg.large_dim, rng, prec);
    const double b_fuse = std::sqrt(6.0 / static_cast<double>(3 * cfg.channels));
    p.fuse_w = Tensor::uniform({cfg.channels, 2 * cfg.channels, 1, 1}, b_fuse, rng, prec)
                   .set_requires_grad(true);
    p.fuse_b = Tensor::zeros({cfg.channels}, prec).set_requires_grad(true);
    return p;
}

namespace {

Tensor map_to_tokens(const Tensor& f) {  // (D,H,W) -> (HW,D)
    return transpose2d(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

Tensor tokens_to_map(const Tensor& x, std::int64_t h, std::int64_t w) {  // (HW,D) -> (D,H,W)
    return reshape(transpose2d(x), {x.dim(1), h, w});
}

std::vector<std::int64_t> col_slice_idx(std::int64_t rows, std::int64_t cols, std::int64_t start,
                                        std::int64_t len) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rows * len));
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < len; ++j)
            idx[static_cast<std::size_t>(i * len + j)] = i * cols + start + j;
    return idx;
}

}  // namespace

Tensor project_group_features(const Tensor& f, const GroupPathParams& path) {
    if (f.rank() != 3) throw ShapeError("project_group_features: expects (C,H,W)");
    auto x = map_to_tokens(f);
    return tokens_to_map(add_rowvec(matmul(x, path.proj_w), path.proj_b), f.dim(1), f.dim(2));
}

Tensor cross_agent_attention(const std::vector<Tensor>& agent_maps, std::size_t ego,
                             const GroupPathParams& path, std::int64_t heads, std::int64_t dim,
                             std::vector<Tensor>* weights_out) {
    const auto n_agents = agent_maps.size();
    if (n_agents == 0) throw DomainError("cross_agent_attention: no agents");
    if (n_agents > 4) throw DomainError("cross_agent_attention: more than 4 agents");
    if (ego >= n_agents) throw DomainError("cross_agent_attention: ego index out of range");
    const auto& shape = agent_maps[ego].shape();
    for (const auto& m : agent_maps)
        if (m.shape() != shape) throw ShapeError("cross_agent_attention: agent maps differ in shape");

    const auto h = shape[1], w = shape[2];
    const auto hw = h * w;
    const auto inner = heads * dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));

    Tensor q = matmul(map_to_tokens(agent_maps[ego]), path.wq);  // (HW, inner)
    std::vector<Tensor> ks, vs;
    ks.reserve(n_agents);
    vs.reserve(n_agents);
    for (const auto& m : agent_maps) {
        auto x = map_to_tokens(m);
        ks.push_back(matmul(x, path.wk));
        vs.push_back(matmul(x, path.wv));
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t hd = 0; hd < heads; ++hd) {
        const auto cols = col_slice_idx(hw, inner, hd * dim, dim);
        Tensor qh = gather_flat(q, cols, {hw, dim});
        std::vector<Tensor> logits;
        logits.reserve(n_agents);
        for (std::size_t i = 0; i < n_agents; ++i)
            logits.push_back(mul_scalar(row_sum(mul(qh, gather_flat(ks[i], cols, {hw, dim}))), scale));
        Tensor alpha = softmax_lastdim(concat_cols(logits));  // (HW, N)
        if (weights_out != nullptr) weights_out->push_back(alpha);
        Tensor acc;
        for (std::size_t i = 0; i < n_agents; ++i) {
            std::vector<std::int64_t> col(static_cast<std::size_t>(hw));
            for (std::int64_t r = 0; r < hw; ++r)
                col[static_cast<std::size_t>(r)] = r * static_cast<std::int64_t>(n_agents) + static_cast<std::int64_t>(i);
            Tensor term = scale_rows(gather_flat(vs[i], cols, {hw, dim}), gather_flat(alpha, col, {hw}));
            acc = acc.defined() ? add(acc, term) : term;
        }
        head_outs.push_back(acc);
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return tokens_to_map(add_rowvec(matmul(merged, path.wo), path.bo), h, w);
}

Tensor fuse_groups(const Tensor& small_map, const Tensor& large_map, const Tensor& fuse_w,
                   const Tensor& fuse_b) {
    if (small_map.shape() != large_map.shape()) throw ShapeError("fuse_groups: group maps differ in shape");
    auto cat = concat_channels({small_map, large_map});
    return add_channel_bias(conv2d(cat, fuse_w, {.stride = 1, .dilation = 1, .pad = 0}), fuse_b);
}

Tensor class_specific_fuse(const std::vector<Tensor>& routed_maps, std::size_t ego,
                           const GroupConfig& cfg, const GroupParams& params) {
    cfg.validate();
    if (routed_maps.empty()) throw DomainError("class_specific_fuse: no agents");
    const auto h = routed_maps[0].dim(1), w = routed_maps[0].dim(2);

    std::vector<Tensor> small_maps, large_maps;
    small_maps.reserve(routed_maps.size());
    large_maps.reserve(routed_maps.size());
    for (const auto& m : routed_maps) {
        small_maps.push_back(project_group_features(m, params.small));
        Tensor lg = project_group_features(m, params.large);
        large_maps.push_back(cfg.large_downsample ? avg_pool2(lg) : lg);
    }
    Tensor small_fused =
        cross_agent_attention(small_maps, ego, params.small, cfg.small_heads, cfg.small_dim);
    Tensor large_fused =
        cross_agent_attention(large_maps, ego, params.large, cfg.large_heads, cfg.large_dim);
    if (cfg.large_downsample) large_fused = bilinear_upsample(large_fused, h, w);
    return fuse_groups(small_fused, large_fused, params.fuse_w, params.fuse_b);
}

BaselineMode baseline_mode_from_name(const std::string& name) {
    if (name == "max") return BaselineMode::max;
    if (name == "avg" || name == "average") return BaselineMode::average;
    if (name == "single" || name == "single_path_attention") return BaselineMode::single_path_attention;
    throw ParseError("unknown fusion mode: " + name);
}

const char* baseline_mode_name(BaselineMode mode) {
    switch (mode) {
        case BaselineMode::max: return "max";
        case BaselineMode::average: return "avg";
        case BaselineMode::single_path_attention: return "single";
    }
    throw DomainError("unknown fusion mode");
}

Tensor baseline_fuse(const std::vector<Tensor>& maps, BaselineMode mode, std::size_t ego,
                     const GroupPathParams* single_path, std::int64_t heads, std::int64_t dim) {
    if (maps.empty()) throw DomainError("baseline_fuse: no agents");
    for (const auto& m : maps)
        if (m.shape() != maps[0].shape()) throw ShapeError("baseline_fuse: maps differ in shape");
    switch (mode) {
        case BaselineMode::max: {
            Tensor acc = maps[0];
            for (std::size_t i = 1; i < maps.size(); ++i) acc = maximum(acc, maps[i]);
            return acc;
        }
        case BaselineMode::average: {
            Tensor acc = maps[0];
            for (std::size_t i = 1; i < maps.size(); ++i) acc = add(acc, maps[i]);
            return mul_scalar(acc, 1.0 / static_cast<double>(maps.size()));
        }
        case BaselineMode::single_path_attention: {
            if (single_path == nullptr)
                throw DomainError("baseline_fuse: single-path mode needs its parameters");
            std::vector<Tensor> projected;
            projected.reserve(maps.size());
            for (const auto& m : maps) projected.push_back(project_group_features(m, *single_path));
            return cross_agent_attention(projected, ego, *single_path, heads, dim);
        }
    }
    throw DomainError("baseline_fuse: unknown mode");
}

std::int64_t path_param_count(const GroupPathParams& path) {
    std::int64_t total = 0;
    for (const Tensor* t : {&path.proj_w, &path.proj_b, &path.wq, &path.wk, &path.wv, &path.wo, &path.bo})
        total += t->size();
    return total;
}

std::int64_t group_param_count(const GroupParams& params) {
    return path_param_count(params.small) + path_param_count(params.large) + params.fuse_w.size() +
           params.fuse_b.size();
}

}  // namespace coopdet
