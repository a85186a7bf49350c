#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopdet/geometry.hpp"
#include "coopdet/rng.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

// Two fusion pathways split by object scale. The small pathway runs at
// native resolution with more heads of smaller dimension; the large
// pathway attends on 2x-downsampled maps and is upsampled bilinearly
// after fusion.
struct GroupConfig {
    std::array<int, kNumClasses> group_of{0, 1, 1};  // pedestrian -> small; car, truck -> large
    std::int64_t channels = 256;
    std::int64_t small_heads = 8;
    std::int64_t small_dim = 32;
    std::int64_t large_heads = 4;
    std::int64_t large_dim = 64;
    bool large_downsample = true;

    void validate() const;
};

struct GroupPathParams {
    Tensor proj_w;  // (D,D) per-group feature derivation, applied as a 1x1 projection
    Tensor proj_b;  // (D)
    Tensor wq, wk, wv;  // (D, heads*dim)
    Tensor wo;          // (heads*dim, D)
    Tensor bo;          // (D)
};

struct GroupParams {
    GroupPathParams small;
    GroupPathParams large;
    Tensor fuse_w;  // (D, 2D, 1, 1) shared refinement after channel concat
    Tensor fuse_b;  // (D)
};

GroupParams init_group_params(const GroupConfig& cfg, Rng& rng, Precision prec = Precision::f64);
GroupPathParams init_path_params(std::int64_t channels, std::int64_t heads, std::int64_t dim, Rng& rng,
                                 Precision prec = Precision::f64);

// Per-group 1x1 projection of the shared routed features; shape preserved.
Tensor project_group_features(const Tensor& f, const GroupPathParams& path);

// Per-location softmax attention over agents: the ego map provides the
// query, every agent (ego included) provides keys and values. When
// weights_out is non-null it receives one (HW, N) softmax matrix per head.
Tensor cross_agent_attention(const std::vector<Tensor>& agent_maps, std::size_t ego,
                             const GroupPathParams& path, std::int64_t heads, std::int64_t dim,
                             std::vector<Tensor>* weights_out = nullptr);

// Channel concat of the two group outputs refined back to D channels.
Tensor fuse_groups(const Tensor& small_map, const Tensor& large_map, const Tensor& fuse_w,
                   const Tensor& fuse_b);

// Full class-specific fusion over routed per-agent maps.
Tensor class_specific_fuse(const std::vector<Tensor>& routed_maps, std::size_t ego,
                           const GroupConfig& cfg, const GroupParams& params);

enum class BaselineMode { max, average, single_path_attention };
BaselineMode baseline_mode_from_name(const std::string& name);
const char* baseline_mode_name(BaselineMode mode);

// Class-agnostic stand-ins: elementwise max, mean, or one shared
// cross-attention pathway without grouping.
Tensor baseline_fuse(const std::vector<Tensor>& maps, BaselineMode mode, std::size_t ego = 0,
                     const GroupPathParams* single_path = nullptr, std::int64_t heads = 0,
                     std::int64_t dim = 0);

std::int64_t path_param_count(const GroupPathParams& path);
std::int64_t group_param_count(const GroupParams& params);

}  // namespace coopdet
