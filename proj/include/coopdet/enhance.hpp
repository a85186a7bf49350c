#pragma once

#include <cstdint>
#include <vector>

#include "coopdet/rng.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

// Context aggregation over five parallel branches: four 3x3 dilated
// convolutions plus a pooled global branch, concatenated and projected
// back to D channels with per-channel normalization and ReLU.
struct AsppParams {
    std::vector<std::int64_t> rates{1, 3, 6, 12};
    std::vector<Tensor> branch_w;  // (D', D, 3, 3) per rate
    std::vector<Tensor> branch_b;  // (D')
    Tensor pool_w;                 // (D, D') applied to the pooled vector
    Tensor pool_b;                 // (D')
    Tensor proj_w;                 // (D, 5*D', 1, 1)
    Tensor proj_b;                 // (D)
    Tensor norm_scale;             // (D)
    Tensor norm_shift;             // (D)
};

// Channel gating from pooled statistics through a bottleneck of D/r.
struct SeParams {
    Tensor w1;  // (D, D/r)
    Tensor b1;  // (D/r)
    Tensor w2;  // (D/r, D)
    Tensor b2;  // (D)
};

struct EnhanceParams {
    AsppParams aspp;
    SeParams se;
};

AsppParams init_aspp_params(std::int64_t channels, std::int64_t branch_channels, Rng& rng,
                            Precision prec = Precision::f64);
SeParams init_se_params(std::int64_t channels, std::int64_t reduction, Rng& rng,
                        Precision prec = Precision::f64);

// The five branch maps before concatenation, each (D', H, W).
std::vector<Tensor> aspp_branches(const Tensor& f, const AsppParams& params);

// Branches -> concat (5*D') -> 1x1 projection -> norm -> ReLU.
Tensor aspp_forward(const Tensor& f, const AsppParams& params);

// sigmoid(W2 relu(W1 mean(f))) in (0,1) per channel.
Tensor se_gates(const Tensor& f, const SeParams& params);

// f + gates (.) aspp_forward(f), gates broadcast over space.
Tensor enhance_forward(const Tensor& f, const EnhanceParams& params);

std::int64_t enhance_param_count(const EnhanceParams& params);
std::int64_t se_param_count(const SeParams& params);

}  // namespace coopdet
