#include "coopdet/attention.hpp"

#include <cmath>

namespace coopdet {

void WindowConfig::validate() const {
    if (sizes.empty() || sizes.size() != heads.size() || sizes.size() != head_dims.size())
        throw DomainError("window config: sizes/heads/head_dims must have equal length");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] < 1 || heads[i] < 1 || head_dims[i] < 1)
            throw DomainError("window config: non-positive entry");
        if (i > 0 && sizes[i] <= sizes[i - 1])
            throw DomainError("window config: window sizes must be strictly increasing");
    }
    if (channels < 1) throw DomainError("window config: channels must be positive");
}

AttentionParams init_attention_params(const WindowConfig& cfg, Rng& rng, Precision prec) {
    cfg.validate();
    AttentionParams p;
    const auto d = cfg.channels;
    for (std::size_t s = 0; s < cfg.num_scales(); ++s) {
        const auto inner = cfg.heads[s] * cfg.head_dims[s];
        const double bound_in = std::sqrt(6.0 / static_cast<double>(d + inner));
        ScaleAttentionParams sp;
        sp.wq = Tensor::uniform({d, inner}, bound_in, rng, prec).set_requires_grad(true);
        sp.wk = Tensor::uniform({d, inner}, bound_in, rng, prec).set_requires_grad(true);
        sp.wv = Tensor::uniform({d, inner}, bound_in, rng, prec).set_requires_grad(true);
        sp.bq = Tensor::zeros({inner}, prec).set_requires_grad(true);
        sp.bv = Tensor::zeros({inner}, prec).set_requires_grad(true);
        sp.wo = Tensor::uniform({inner, d}, bound_in, rng, prec).set_requires_grad(true);
        sp.bo = Tensor::zeros({d}, prec).set_requires_grad(true);
        const auto rel = (2 * cfg.sizes[s] - 1) * (2 * cfg.sizes[s] - 1);
        sp.bias_table = Tensor::zeros({cfg.heads[s] * rel}, prec).set_requires_grad(true);
        p.scales.push_back(std::move(sp));
    }
    const auto n_scales = static_cast<std::int64_t>(cfg.num_scales());
    p.router.weight = Tensor::uniform({d, n_scales}, std::sqrt(6.0 / static_cast<double>(d + n_scales)),
                                      rng, prec)
                          .set_requires_grad(true);
    p.router.bias = Tensor::zeros({n_scales}, prec).set_requires_grad(true);
    return p;
}

WindowPartition partition_windows(const Tensor& f, std::int64_t win, std::int64_t offset) {
    if (f.rank() != 3) throw ShapeError("partition_windows: expects (C,H,W)");
    if (win < 1) throw DomainError("partition_windows: window size must be >= 1");
    if (offset != 0 && offset != win / 2)
        throw DomainError("partition_windows: offset must be 0 or floor(win/2)");

    WindowPartition part;
    part.channels = f.dim(0);
    part.h = f.dim(1);
    part.w = f.dim(2);
    part.win = win;
    part.offset = offset;
    part.hp = (part.h + win - 1) / win * win;
    part.wp = (part.w + win - 1) / win * win;

    Tensor g = offset != 0 ? roll_spatial(f, -offset, -offset) : f;
    if (part.hp != part.h || part.wp != part.w) g = pad_spatial(g, part.hp, part.wp);

    const auto c = part.channels;
    for (std::int64_t wy = 0; wy < part.hp / win; ++wy) {
        for (std::int64_t wx = 0; wx < part.wp / win; ++wx) {
            std::vector<std::int64_t> idx(static_cast<std::size_t>(win * win * c));
            for (std::int64_t t = 0; t < win * win; ++t) {
                const std::int64_t y = wy * win + t / win;
                const std::int64_t x = wx * win + t % win;
                for (std::int64_t ci = 0; ci < c; ++ci)
                    idx[static_cast<std::size_t>(t * c + ci)] = (ci * part.hp + y) * part.wp + x;
            }
            part.windows.push_back(gather_flat(g, idx, {win * win, c}));
        }
    }
    return part;
}

Tensor merge_windows(const WindowPartition& part, const std::vector<Tensor>& windows) {
    if (windows.size() != part.windows.size()) throw ShapeError("merge_windows: window count mismatch");
    const auto c = part.channels;
    const auto win = part.win;
    const auto nwx = part.wp / win;
    Tensor stacked = concat_rows(windows);  // (nW*win*win, c)
    std::vector<std::int64_t> idx(static_cast<std::size_t>(c * part.h * part.w));
    auto wrap = [](std::int64_t v, std::int64_t n) { return ((v % n) + n) % n; };
    for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t y = 0; y < part.h; ++y) {
            for (std::int64_t x = 0; x < part.w; ++x) {
                // invert the crop and the cyclic displacement
                const std::int64_t yg = wrap(y - part.offset, part.h);
                const std::int64_t xg = wrap(x - part.offset, part.w);
                const std::int64_t widx = (yg / win) * nwx + xg / win;
                const std::int64_t t = (yg % win) * win + xg % win;
                idx[static_cast<std::size_t>((ci * part.h + y) * part.w + x)] =
                    (widx * win * win + t) * c + ci;
            }
        }
    }
    return gather_flat(stacked, idx, {c, part.h, part.w});
}

namespace {

std::vector<std::int64_t> col_slice_idx(std::int64_t rows, std::int64_t cols, std::int64_t start,
                                        std::int64_t len) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rows * len));
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < len; ++j)
            idx[static_cast<std::size_t>(i * len + j)] = i * cols + start + j;
    return idx;
}

// Relative-position bias lookup: token pair (i,j) of a win*win window maps
// to table entry ((dy+win-1)*(2win-1) + dx+win-1) of head h.
std::vector<std::int64_t> bias_idx(std::int64_t win, std::int64_t head) {
    const std::int64_t n = win * win;
    const std::int64_t span = 2 * win - 1;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t dy = i / win - j / win + win - 1;
            const std::int64_t dx = i % win - j % win + win - 1;
            idx[static_cast<std::size_t>(i * n + j)] = head * span * span + dy * span + dx;
        }
    return idx;
}

}  // namespace

std::vector<Tensor> window_self_attention(const std::vector<Tensor>& windows,
                                          const ScaleAttentionParams& params, std::int64_t win,
                                          std::int64_t heads, std::int64_t dim, MacCounter* counter) {
    const std::int64_t n = win * win;
    const std::int64_t inner = heads * dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<Tensor> out;
    out.reserve(windows.size());
    for (const auto& tokens : windows) {
        if (tokens.rank() != 2 || tokens.dim(0) != n)
            throw ShapeError("window_self_attention: token count must be win*win");
        if (tokens.dim(1) != params.wq.dim(0))
            throw ShapeError("window_self_attention: channel extent does not match projections");
        Tensor q = add_rowvec(matmul(tokens, params.wq), params.bq);
        Tensor k = matmul(tokens, params.wk);
        Tensor v = add_rowvec(matmul(tokens, params.wv), params.bv);
        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (std::int64_t h = 0; h < heads; ++h) {
            const auto cols = col_slice_idx(n, inner, h * dim, dim);
            Tensor qh = gather_flat(q, cols, {n, dim});
            Tensor kh = gather_flat(k, cols, {n, dim});
            Tensor vh = gather_flat(v, cols, {n, dim});
            Tensor logits;
            {
                MacScope ms(counter);
                logits = matmul(qh, transpose2d(kh));
            }
            logits = mul_scalar(logits, scale);
            logits = add(logits, gather_flat(params.bias_table, bias_idx(win, h), {n, n}));
            head_outs.push_back(matmul(softmax_lastdim(logits), vh));
        }
        Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
        out.push_back(add_rowvec(matmul(merged, params.wo), params.bo));
    }
    return out;
}

Tensor scale_router(const Tensor& f, const RouterParams& router) {
    if (f.rank() != 3) throw ShapeError("scale_router: expects (C,H,W)");
    const auto d = f.dim(0), h = f.dim(1), w = f.dim(2);
    const auto s = router.weight.dim(1);
    Tensor x = transpose2d(reshape(f, {d, h * w}));                      // (HW, D)
    Tensor logits = add_rowvec(matmul(x, router.weight), router.bias);  // (HW, S)
    return reshape(transpose2d(softmax_lastdim(logits)), {s, h, w});
}

Tensor msw_forward(const Tensor& f, const WindowConfig& cfg, const AttentionParams& params,
                   MacCounter* counter) {
    cfg.validate();
    if (params.scales.size() != cfg.num_scales())
        throw ShapeError("msw_forward: parameter scale count mismatch");
    const auto h = f.dim(1), w = f.dim(2);
    Tensor omega = scale_router(f, params.router);  // (S,H,W)
    Tensor out;
    for (std::size_t s = 0; s < cfg.num_scales(); ++s) {
        const auto win = cfg.sizes[s];
        Tensor branch = f;
        for (const std::int64_t offset : {std::int64_t{0}, win / 2}) {
            auto part = partition_windows(branch, win, offset);
            auto attended = window_self_attention(part.windows, params.scales[s], win, cfg.heads[s],
                                                  cfg.head_dims[s], counter);
            branch = add(branch, merge_windows(part, attended));
        }
        std::vector<std::int64_t> idx(static_cast<std::size_t>(h * w));
        for (std::int64_t i = 0; i < h * w; ++i)
            idx[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(s) * h * w + i;
        Tensor term = scale_spatial(branch, gather_flat(omega, idx, {h, w}));
        out = out.defined() ? add(out, term) : term;
    }
    return out;
}

std::int64_t attention_param_count(const AttentionParams& params) {
    std::int64_t total = 0;
    for (const auto& s : params.scales)
        for (const Tensor* t : {&s.wq, &s.wk, &s.wv, &s.bq, &s.bv, &s.wo, &s.bo, &s.bias_table})
            total += t->size();
    return total + params.router.weight.size() + params.router.bias.size();
}

}  // namespace coopdet
