#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coopdet/attention.hpp"
#include "coopdet/detection.hpp"
#include "coopdet/enhance.hpp"
#include "coopdet/fusion.hpp"
#include "coopdet/geometry.hpp"
#include "coopdet/simulator.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

struct ModelConfig {
    // metric grid of the pillar stage
    double x_min = -25.6, x_max = 25.6;
    double y_min = -6.4, y_max = 6.4;
    double cell = 0.4;

    std::int64_t max_points_per_pillar = 32;
    std::int64_t max_pillars_train = 64000;
    std::int64_t max_pillars_eval = 70000;
    std::int64_t pillar_channels = 64;

    std::vector<std::int64_t> backbone_widths{64, 128, 256};
    std::vector<std::int64_t> backbone_strides{2, 2, 2};
    std::int64_t feature_dim = 256;

    WindowConfig window;          // channels synced to feature_dim on validate
    GroupConfig groups;           // likewise
    std::int64_t aspp_branch_channels = 64;
    std::int64_t se_reduction = 16;

    AnchorConfig anchors;
    LossWeights loss;

    double score_threshold = 0.1;
    double nms_iou = 0.15;

    bool m1 = true;
    bool m2 = true;
    bool m3 = true;
    BaselineMode fusion_baseline = BaselineMode::max;

    Precision precision = Precision::f32;
    int max_agents = 4;

    void validate();  // also syncs sub-config channel extents
    BevGrid pillar_grid() const;
    BevGrid feature_grid() const;  // post-backbone, cell scaled by the stride product
    std::int64_t stride_product() const;
};

struct NormAffine {
    Tensor scale, shift;
};

struct ConvLayer {
    Tensor w;  // (out, in, 3, 3); norm follows, so no conv bias
    NormAffine norm;
};

struct BackboneBlock {
    ConvLayer down;  // stride per config
    ConvLayer keep1;
    ConvLayer keep2;
};

struct ClassHead {
    Tensor cls_w, cls_b;  // (2, D, 1, 1), (2)
    Tensor reg_w, reg_b;  // (14, D, 1, 1), (14)
    Tensor dir_w, dir_b;  // (4, D, 1, 1), (4)
};

// The full pipeline: pillar encoder, convolutional backbone, multi-scale
// window attention with class-specific fusion (or a baseline fuser), BEV
// enhancement, and per-class anchor heads. Ablation switches are
// behavior-isolating: m1 off swaps in baseline_fuse, m2 off is an exact
// pass-through, m3 off trains with uniform class weights.
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<Anchor>& anchors() const { return anchors_; }

    // stages, exposed for tests and ablation checks
    Tensor encode_agent(const PointCloud& ego_frame_points, bool training) const;
    Tensor backbone_forward(const Tensor& pillar_map) const;
    std::vector<Tensor> agent_features(const Scene& scene, bool training) const;
    Tensor fuse_stage(const std::vector<Tensor>& maps, std::size_t ego,
                      MacCounter* counter = nullptr) const;
    Tensor enhance_stage(const Tensor& fused) const;
    HeadOutputs head_forward(const Tensor& bev) const;

    HeadOutputs forward_features(const Scene& scene, bool training,
                                 MacCounter* counter = nullptr) const;
    std::vector<Box3D> decode(const HeadOutputs& head) const;  // threshold + per-class NMS
    std::vector<Box3D> forward(const Scene& scene, MacCounter* counter = nullptr) const;

    std::vector<std::pair<std::string, Tensor*>> named_params();
    std::int64_t param_count() const;
    // per top-level module (pillar, backbone, attention, fusion, enhance, head)
    std::vector<std::pair<std::string, std::int64_t>> param_counts_by_module() const;

    // parameter blocks (checkpoint and optimizer reach in directly)
    Tensor pillar_w, pillar_b;
    std::vector<BackboneBlock> backbone;
    AttentionParams attention;
    GroupParams fusion;
    GroupPathParams single_path;  // allocated only for the single-path baseline
    EnhanceParams enhancement;
    std::vector<ClassHead> heads;

private:
    ModelConfig cfg_;
    std::vector<Anchor> anchors_;
};

// JSON round trip for configs; unknown keys are rejected.
ModelConfig model_config_from_json(const std::string& text);
std::string model_config_to_json(const ModelConfig& cfg);

}  // namespace coopdet
