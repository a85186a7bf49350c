#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coopdet/geometry.hpp"

namespace coopdet {

enum class IouFlavor { rotated_bev, full_3d };

enum class ApInterp { exact, eleven_point, forty_point };

struct EvalConfig {
    double x_min = -100.0, x_max = 100.0;
    double y_min = -40.0, y_max = 40.0;
    std::vector<double> iou_thresholds{0.3, 0.5};
    std::vector<double> range_edges{0.0, 30.0, 60.0, 100.0};  // bins [0,30) [30,60) [60,100]
    IouFlavor flavor = IouFlavor::rotated_bev;
    ApInterp interp = ApInterp::exact;

    void validate() const;
};

// Keep boxes whose center lies inside the region; upper bounds half-open.
std::vector<Box3D> filter_region(const std::vector<Box3D>& boxes, const EvalConfig& config);

struct MatchEntry {
    double score = 0.0;
    bool tp = false;
    std::int64_t gt = -1;  // matched GT index (TPs only)
    std::int64_t det = -1;
};

// Single class: detections in descending score greedily claim the
// highest-IoU unmatched GT at or above the threshold.
std::vector<MatchEntry> greedy_match(const std::vector<Box3D>& dets, const std::vector<Box3D>& gts,
                                     double iou_threshold, IouFlavor flavor);

// Area under the precision envelope over recall; empty ground truth is
// reported absent rather than zero.
std::optional<double> average_precision(const std::vector<MatchEntry>& matches, std::int64_t n_gt,
                                        ApInterp interp = ApInterp::exact);

struct ClassEval {
    std::optional<double> ap;
    std::int64_t tp = 0;
    std::int64_t fp = 0;
};

struct RangeEval {
    std::string key;  // "0-30", "30-60", "60-100"
    std::array<std::optional<double>, kNumClasses> ap;
    std::array<std::int64_t, kNumClasses> n_gt{};
    std::array<std::int64_t, kNumClasses> tp{};
    std::optional<double> map;
};

struct EvalReport {
    // outer: one entry per IoU threshold, same order as config
    std::vector<double> thresholds;
    std::vector<std::array<ClassEval, kNumClasses>> per_class;
    std::array<std::int64_t, kNumClasses> n_gt{};
    std::vector<std::optional<double>> map;  // per threshold, mean over present classes
    std::vector<RangeEval> ranges;           // at the last (strictest) threshold... see eval_scenes
    std::string flavor = "bev";
};

// One (dets, gts) pair per scene, all ego frame. Ranges are stratified at
// range_iou (0.5 by default).
EvalReport eval_scenes(const std::vector<std::vector<Box3D>>& dets,
                       const std::vector<std::vector<Box3D>>& gts, const EvalConfig& config,
                       double range_iou = 0.5);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

double map_of(const std::vector<std::optional<double>>& aps);

}  // namespace coopdet
