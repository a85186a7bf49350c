#include "coopdet/enhance.hpp"

#include <cmath>

namespace coopdet {

AsppParams init_aspp_params(std::int64_t channels, std::int64_t branch_channels, Rng& rng,
                            Precision prec) {
    if (channels < 1 || branch_channels < 1) throw DomainError("aspp: channel extents must be positive");
    AsppParams p;
    const double b_conv = std::sqrt(6.0 / static_cast<double>(channels * 9 + branch_channels));
    for (std::size_t i = 0; i < p.rates.size(); ++i) {
        p.branch_w.push_back(
            Tensor::uniform({branch_channels, channels, 3, 3}, b_conv, rng, prec).set_requires_grad(true));
        p.branch_b.push_back(Tensor::zeros({branch_channels}, prec).set_requires_grad(true));
    }
    const double b_pool = std::sqrt(6.0 / static_cast<double>(channels + branch_channels));
    p.pool_w = Tensor::uniform({channels, branch_channels}, b_pool, rng, prec).set_requires_grad(true);
    p.pool_b = Tensor::zeros({branch_channels}, prec).set_requires_grad(true);
    const auto cat = static_cast<std::int64_t>(p.rates.size() + 1) * branch_channels;
    const double b_proj = std::sqrt(6.0 / static_cast<double>(cat + channels));
    p.proj_w = Tensor::uniform({channels, cat, 1, 1}, b_proj, rng, prec).set_requires_grad(true);
    p.proj_b = Tensor::zeros({channels}, prec).set_requires_grad(true);
    p.norm_scale = Tensor::full({channels}, 1.0, prec).set_requires_grad(true);
    p.norm_shift = Tensor::zeros({channels}, prec).set_requires_grad(true);
    return p;
}

SeParams init_se_params(std::int64_t channels, std::int64_t reduction, Rng& rng, Precision prec) {
    if (reduction < 1 || channels % reduction != 0)
        throw DomainError("se: reduction must divide the channel extent");
    const auto mid = channels / reduction;
    SeParams p;
    const double b1 = std::sqrt(6.0 / static_cast<double>(channels + mid));
    p.w1 = Tensor::uniform({channels, mid}, b1, rng, prec).set_requires_grad(true);
    p.b1 = Tensor::zeros({mid}, prec).set_requires_grad(true);
    p.w2 = Tensor::uniform({mid, channels}, b1, rng, prec).set_requires_grad(true);
    p.b2 = Tensor::zeros({channels}, prec).set_requires_grad(true);
    return p;
}

std::vector<Tensor> aspp_branches(const Tensor& f, const AsppParams& params) {
    if (f.rank() != 3) throw ShapeError("aspp: expects (C,H,W)");
    if (params.branch_w.size() != params.rates.size() || params.branch_b.size() != params.rates.size())
        throw ShapeError("aspp: branch parameter count does not match rates");
    const auto h = f.dim(1), w = f.dim(2);
    std::vector<Tensor> branches;
    branches.reserve(params.rates.size() + 1);
    for (std::size_t i = 0; i < params.rates.size(); ++i) {
        const auto r = params.rates[i];
        branches.push_back(add_channel_bias(
            conv2d(f, params.branch_w[i], {.stride = 1, .dilation = r, .pad = same_pad(3, r)}),
            params.branch_b[i]));
    }
    // pooled scene context, broadcast back over space
    Tensor z = reshape(global_avg_pool(f), {1, f.dim(0)});
    Tensor g = add_rowvec(matmul(z, params.pool_w), params.pool_b);
    branches.push_back(broadcast_spatial(reshape(g, {params.pool_b.dim(0)}), h, w));
    return branches;
}

Tensor aspp_forward(const Tensor& f, const AsppParams& params) {
    auto branches = aspp_branches(f, params);
    Tensor cat = concat_channels(branches);
    if (cat.dim(0) != params.proj_w.dim(1))
        throw ShapeError("aspp: projection input extent mismatch");
    Tensor proj = add_channel_bias(conv2d(cat, params.proj_w, {.stride = 1, .dilation = 1, .pad = 0}),
                                   params.proj_b);
    return relu(channel_norm(proj, params.norm_scale, params.norm_shift));
}

Tensor se_gates(const Tensor& f, const SeParams& params) {
    if (f.rank() != 3) throw ShapeError("se_gates: expects (C,H,W)");
    Tensor z = reshape(global_avg_pool(f), {1, f.dim(0)});
    Tensor mid = relu(add_rowvec(matmul(z, params.w1), params.b1));
    Tensor s = sigmoid(add_rowvec(matmul(mid, params.w2), params.b2));
    return reshape(s, {f.dim(0)});
}

Tensor enhance_forward(const Tensor& f, const EnhanceParams& params) {
    Tensor proj = aspp_forward(f, params.aspp);
    Tensor gates = se_gates(proj, params.se);
    return add(f, channel_scale(proj, gates));
}

std::int64_t se_param_count(const SeParams& params) {
    return params.w1.size() + params.b1.size() + params.w2.size() + params.b2.size();
}

std::int64_t enhance_param_count(const EnhanceParams& params) {
    std::int64_t total = se_param_count(params.se);
    for (const auto& t : params.aspp.branch_w) total += t.size();
    for (const auto& t : params.aspp.branch_b) total += t.size();
    total += params.aspp.pool_w.size() + params.aspp.pool_b.size();
    total += params.aspp.proj_w.size() + params.aspp.proj_b.size();
    total += params.aspp.norm_scale.size() + params.aspp.norm_shift.size();
    return total;
}

}  // namespace coopdet
