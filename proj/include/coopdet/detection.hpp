#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "coopdet/geometry.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

// One anchor per (location, class, yaw in {0, pi/2}), placed at BEV cell
// centers. Matching thresholds ride along per class.
struct AnchorSpec {
    std::array<double, 3> size{4.0, 2.0, 1.6};  // l, w, h meters
    double pos_iou = 0.5;
    double neg_iou = 0.35;
};

struct AnchorConfig {
    // indexed by ObjectClass: pedestrian, car, truck
    std::array<AnchorSpec, kNumClasses> per_class{
        AnchorSpec{{0.6, 0.6, 1.7}, 0.35, 0.2},
        AnchorSpec{{4.0, 2.0, 1.6}, 0.5, 0.35},
        AnchorSpec{{9.6, 2.6, 3.5}, 0.5, 0.35},
    };
    void validate() const;
};

struct Anchor {
    Box3D box;        // box.cls carries the class; cz = h/2 (ground supported)
    int yaw_idx = 0;  // 0 -> yaw 0, 1 -> yaw pi/2
};

// Deterministic order: cell row-major outermost, then class, then yaw.
std::vector<Anchor> generate_anchors(const BevGrid& grid, const AnchorConfig& config);

enum class MatchLabel { positive, negative, ignored };

struct Assignment {
    MatchLabel label = MatchLabel::negative;
    std::int64_t gt = -1;  // set for positives
};

// IoU-threshold assignment against same-class ground truth, then each GT
// forces its best-IoU anchor positive if that anchor is not already one.
std::vector<Assignment> match_anchors(const std::vector<Anchor>& anchors,
                                      const std::vector<Box3D>& gt, const AnchorConfig& config);

struct BoxResiduals {
    std::array<double, 7> delta{};  // dx, dy, dz, dl, dw, dh, dyaw
    int dir_bin = 0;                // 1 when the wrapped heading lies in [0, pi)
};

BoxResiduals encode_boxes(const Box3D& gt, const Box3D& anchor);
Box3D decode_boxes(const std::array<double, 7>& delta, int dir_bin, const Box3D& anchor);

// -alpha (1-p)^gamma log p for the probability of the true class.
double focal_loss(double p, double alpha = 0.25, double gamma = 2.0);
// 0.5 sigma^2 d^2 below |d| = 1/sigma^2, |d| - 0.5/sigma^2 above.
double smooth_l1_loss(double d, double sigma = 3.0);

// (1-beta)/(1-beta^n_c), normalized to mean 1.
std::array<double, kNumClasses> effective_number_weights(
    const std::array<std::int64_t, kNumClasses>& counts, double beta);

struct LossWeights {
    // indexed by ObjectClass (pedestrian, car, truck)
    std::array<double, kNumClasses> cls{3.0, 1.0, 1.5};
    std::array<double, kNumClasses> reg{2.0, 1.0, 1.0};
    std::array<double, kNumClasses> dir{1.0, 1.0, 1.0};
    std::array<double, 3> terms{1.0, 2.0, 0.2};  // lambda for cls, reg, dir
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double smooth_l1_sigma = 3.0;

    static LossWeights uniform();  // every class weight 1 (term weights kept)
};

// Raw per-class head maps over the final BEV grid: objectness per yaw,
// 7 box residuals per yaw, and a 2-way heading bin per yaw.
struct HeadOutputs {
    std::array<Tensor, kNumClasses> cls;  // (2, H, W)
    std::array<Tensor, kNumClasses> reg;  // (14, H, W)
    std::array<Tensor, kNumClasses> dir;  // (4, H, W)
    std::int64_t height = 0;
    std::int64_t width = 0;
};

struct LossTargets {
    struct PerClass {
        std::vector<std::int64_t> pos_cells;  // flat cell index of each positive
        std::vector<int> pos_yaw;
        std::vector<BoxResiduals> residuals;
        std::vector<std::int64_t> neg_cells;
        std::vector<int> neg_yaw;
    };
    std::array<PerClass, kNumClasses> per_class;
};

LossTargets build_targets(const std::vector<Anchor>& anchors,
                          const std::vector<Assignment>& assignments, const std::vector<Box3D>& gt,
                          const BevGrid& grid);

struct LossBreakdown {
    std::array<double, kNumClasses> cls{};
    std::array<double, kNumClasses> reg{};
    std::array<double, kNumClasses> dir{};
    std::array<std::int64_t, kNumClasses> positives{};
    double total = 0.0;
};

struct LossResult {
    Tensor total;  // scalar, differentiable
    LossBreakdown breakdown;
};

// sum_c lambda_cls w_c^cls L_focal^c + lambda_reg w_c^reg L_reg^c +
// lambda_dir w_c^dir L_dir^c. Focal runs over positives and negatives
// normalized by the positive count (min 1); regression and heading only
// over positives.
LossResult total_loss(const HeadOutputs& head, const LossTargets& targets, const LossWeights& weights);

// Greedy per-class suppression on rotated BEV IoU; stable score order with
// index tiebreak. Suppression never crosses classes.
std::vector<Box3D> nms_per_class(const std::vector<Box3D>& detections, double iou_threshold = 0.15);

}  // namespace coopdet
