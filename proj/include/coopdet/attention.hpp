#pragma once

#include <cstdint>
#include <vector>

#include "coopdet/rng.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

// Window pyramid over the BEV map. Each scale runs its own multi-head
// self-attention inside non-overlapping windows; heads*head_dim is the
// inner projection extent of that scale.
struct WindowConfig {
    std::vector<std::int64_t> sizes{2, 4, 8, 16};
    std::vector<std::int64_t> heads{16, 16, 8, 4};
    std::vector<std::int64_t> head_dims{16, 16, 32, 64};
    std::int64_t channels = 256;

    std::size_t num_scales() const { return sizes.size(); }
    void validate() const;
};

struct ScaleAttentionParams {
    Tensor wq, wk, wv;   // (D, heads*dim)
    Tensor bq, bv;       // (heads*dim); keys carry no bias, softmax cancels it
    Tensor wo;           // (heads*dim, D)
    Tensor bo;           // (D)
    Tensor bias_table;   // (heads * (2w-1)^2), zero-initialized
};

// 1x1 convolution producing one logit per scale at every BEV location,
// softmaxed over scales.
struct RouterParams {
    Tensor weight;  // (D, S)
    Tensor bias;    // (S)
};

struct AttentionParams {
    std::vector<ScaleAttentionParams> scales;
    RouterParams router;
};

AttentionParams init_attention_params(const WindowConfig& cfg, Rng& rng,
                                      Precision prec = Precision::f64);

// Result of cutting a map into windows; carries what merge needs to invert
// the roll/pad/partition exactly.
struct WindowPartition {
    std::vector<Tensor> windows;  // each (w*w, D), token order row-major in the window
    std::int64_t channels = 0;
    std::int64_t h = 0, w = 0;    // original extents
    std::int64_t hp = 0, wp = 0;  // padded extents
    std::int64_t win = 0;
    std::int64_t offset = 0;
};

// Every cell lands in exactly one window. Non-divisible extents are
// zero-padded (cropped again on merge); the shift is a cyclic displacement
// applied before the cut and undone by merge.
WindowPartition partition_windows(const Tensor& f, std::int64_t win, std::int64_t offset);
Tensor merge_windows(const WindowPartition& part, const std::vector<Tensor>& windows);

// Multi-head self-attention within each window: logits scaled by
// 1/sqrt(dim), plus the learned relative-position bias, then the output
// projection. The optional counter accumulates Q*K^T multiply-adds.
std::vector<Tensor> window_self_attention(const std::vector<Tensor>& windows,
                                          const ScaleAttentionParams& params, std::int64_t win,
                                          std::int64_t heads, std::int64_t dim,
                                          MacCounter* counter = nullptr);

// Per-location softmax over scales; returns (S,H,W).
Tensor scale_router(const Tensor& f, const RouterParams& router);

// Full multi-scale pass: per scale an unshifted then a shifted attention
// layer (each with a residual connection), combined as the router-weighted
// per-location sum. Shape preserving.
Tensor msw_forward(const Tensor& f, const WindowConfig& cfg, const AttentionParams& params,
                   MacCounter* counter = nullptr);

std::int64_t attention_param_count(const AttentionParams& params);

}  // namespace coopdet
