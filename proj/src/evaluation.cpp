#include "coopdet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace coopdet {

using nlohmann::json;

void EvalConfig::validate() const {
    if (x_max <= x_min || y_max <= y_min) throw DomainError("eval config: empty region");
    if (iou_thresholds.empty()) throw DomainError("eval config: no IoU thresholds");
    for (std::size_t i = 1; i < range_edges.size(); ++i)
        if (range_edges[i] <= range_edges[i - 1])
            throw DomainError("eval config: range edges must increase");
}

std::vector<Box3D> filter_region(const std::vector<Box3D>& boxes, const EvalConfig& config) {
    std::vector<Box3D> out;
    out.reserve(boxes.size());
    for (const auto& b : boxes)
        if (b.cx >= config.x_min && b.cx < config.x_max && b.cy >= config.y_min && b.cy < config.y_max)
            out.push_back(b);
    return out;
}

std::vector<MatchEntry> greedy_match(const std::vector<Box3D>& dets, const std::vector<Box3D>& gts,
                                     double iou_threshold, IouFlavor flavor) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score != dets[b].score ? dets[a].score > dets[b].score : a < b;
    });
    std::vector<bool> claimed(gts.size(), false);
    std::vector<MatchEntry> out;
    out.reserve(dets.size());
    for (const auto di : order) {
        double best = 0.0;
        std::int64_t best_gt = -1;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (claimed[gi]) continue;
            const double iou = flavor == IouFlavor::rotated_bev ? bev_iou_rotated(dets[di], gts[gi])
                                                                : iou3d(dets[di], gts[gi]);
            if (iou >= iou_threshold && iou > best) {
                best = iou;
                best_gt = static_cast<std::int64_t>(gi);
            }
        }
        MatchEntry e;
        e.score = dets[di].score;
        e.det = static_cast<std::int64_t>(di);
        if (best_gt >= 0) {
            e.tp = true;
            e.gt = best_gt;
            claimed[static_cast<std::size_t>(best_gt)] = true;
        }
        out.push_back(e);
    }
    return out;
}

std::optional<double> average_precision(const std::vector<MatchEntry>& matches, std::int64_t n_gt,
                                        ApInterp interp) {
    if (n_gt < 0) throw DomainError("average_precision: negative ground-truth count");
    if (n_gt == 0) return std::nullopt;
    std::vector<MatchEntry> sorted = matches;
    std::stable_sort(sorted.begin(), sorted.end(), [](const MatchEntry& a, const MatchEntry& b) {
        return a.score != b.score ? a.score > b.score : a.det < b.det;
    });
    std::vector<double> precision, recall;
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i].tp) ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    // precision envelope: running max from the right
    std::vector<double> envelope = precision;
    for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);

    auto env_at = [&](double r) {
        for (std::size_t i = 0; i < recall.size(); ++i)
            if (recall[i] >= r - 1e-12) return envelope[i];
        return 0.0;
    };

    switch (interp) {
        case ApInterp::exact: {
            double ap = 0.0, prev = 0.0;
            for (std::size_t i = 0; i < recall.size(); ++i) {
                ap += (recall[i] - prev) * envelope[i];
                prev = recall[i];
            }
            return ap;
        }
        case ApInterp::eleven_point: {
            double ap = 0.0;
            for (int i = 0; i <= 10; ++i) ap += env_at(static_cast<double>(i) / 10.0);
            return ap / 11.0;
        }
        case ApInterp::forty_point: {
            double ap = 0.0;
            for (int i = 1; i <= 40; ++i) ap += env_at(static_cast<double>(i) / 40.0);
            return ap / 40.0;
        }
    }
    throw DomainError("average_precision: unknown interpolation");
}

double map_of(const std::vector<std::optional<double>>& aps) {
    double sum = 0.0;
    int n = 0;
    for (const auto& ap : aps)
        if (ap) {
            sum += *ap;
            ++n;
        }
    if (n == 0) throw DomainError("map_of: no classes present");
    return sum / n;
}

namespace {

std::optional<double> map_or_absent(const std::array<std::optional<double>, kNumClasses>& aps) {
    double sum = 0.0;
    int n = 0;
    for (const auto& ap : aps)
        if (ap) {
            sum += *ap;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / n;
}

}  // namespace

EvalReport eval_scenes(const std::vector<std::vector<Box3D>>& dets,
                       const std::vector<std::vector<Box3D>>& gts, const EvalConfig& config,
                       double range_iou) {
    config.validate();
    if (dets.size() != gts.size()) throw ShapeError("eval: scene counts differ");
    EvalReport report;
    report.flavor = config.flavor == IouFlavor::rotated_bev ? "bev" : "3d";
    report.thresholds = config.iou_thresholds;

    // region-filtered, class-split views per scene
    const auto n_scenes = dets.size();
    std::vector<std::array<std::vector<Box3D>, kNumClasses>> dets_by(n_scenes), gts_by(n_scenes);
    for (std::size_t s = 0; s < n_scenes; ++s) {
        for (const auto& d : filter_region(dets[s], config))
            dets_by[s][static_cast<std::size_t>(d.cls)].push_back(d);
        for (const auto& g : filter_region(gts[s], config))
            gts_by[s][static_cast<std::size_t>(g.cls)].push_back(g);
    }
    for (std::size_t s = 0; s < n_scenes; ++s)
        for (int c = 0; c < kNumClasses; ++c)
            report.n_gt[static_cast<std::size_t>(c)] +=
                static_cast<std::int64_t>(gts_by[s][static_cast<std::size_t>(c)].size());

    for (const double thr : config.iou_thresholds) {
        std::array<ClassEval, kNumClasses> per_class;
        std::array<std::optional<double>, kNumClasses> aps;
        for (int c = 0; c < kNumClasses; ++c) {
            std::vector<MatchEntry> merged;
            std::int64_t det_offset = 0;
            for (std::size_t s = 0; s < n_scenes; ++s) {
                const auto& sd = dets_by[s][static_cast<std::size_t>(c)];
                const auto& sg = gts_by[s][static_cast<std::size_t>(c)];
                for (auto e : greedy_match(sd, sg, thr, config.flavor)) {
                    e.det += det_offset;  // keep the cross-scene tiebreak deterministic
                    merged.push_back(e);
                }
                det_offset += static_cast<std::int64_t>(sd.size());
            }
            ClassEval ce;
            for (const auto& e : merged) (e.tp ? ce.tp : ce.fp)++;
            ce.ap = average_precision(merged, report.n_gt[static_cast<std::size_t>(c)], config.interp);
            aps[static_cast<std::size_t>(c)] = ce.ap;
            per_class[static_cast<std::size_t>(c)] = ce;
        }
        report.per_class.push_back(per_class);
        report.map.push_back(map_or_absent(aps));
    }

    // range stratification at the fixed range IoU
    const auto& edges = config.range_edges;
    const auto n_bins = edges.size() - 1;
    auto bin_of = [&](double dist) -> int {
        for (std::size_t b = 0; b < n_bins; ++b) {
            const bool last = b + 1 == n_bins;
            if (dist >= edges[b] && (dist < edges[b + 1] || (last && dist <= edges[b + 1])))
                return static_cast<int>(b);
        }
        return -1;
    };
    std::vector<RangeEval> ranges(n_bins);
    std::vector<std::array<std::vector<MatchEntry>, kNumClasses>> bin_matches(n_bins);
    for (std::size_t b = 0; b < n_bins; ++b) {
        std::ostringstream key;
        key << edges[b] << "-" << edges[b + 1];
        ranges[b].key = key.str();
    }
    for (int c = 0; c < kNumClasses; ++c) {
        std::int64_t det_offset = 0;
        for (std::size_t s = 0; s < n_scenes; ++s) {
            const auto& sd = dets_by[s][static_cast<std::size_t>(c)];
            const auto& sg = gts_by[s][static_cast<std::size_t>(c)];
            for (const auto& g : sg) {
                const int b = bin_of(std::hypot(g.cx, g.cy));
                if (b >= 0) ranges[static_cast<std::size_t>(b)].n_gt[static_cast<std::size_t>(c)]++;
            }
            for (auto e : greedy_match(sd, sg, range_iou, config.flavor)) {
                // TPs inherit the matched GT's bin; FPs bin by their own center
                const auto& ref = e.tp ? sg[static_cast<std::size_t>(e.gt)] : sd[static_cast<std::size_t>(e.det)];
                const int b = bin_of(std::hypot(ref.cx, ref.cy));
                e.det += det_offset;
                if (b >= 0) bin_matches[static_cast<std::size_t>(b)][static_cast<std::size_t>(c)].push_back(e);
            }
            det_offset += static_cast<std::int64_t>(sd.size());
        }
    }
    for (std::size_t b = 0; b < n_bins; ++b) {
        for (int c = 0; c < kNumClasses; ++c) {
            const auto& m = bin_matches[b][static_cast<std::size_t>(c)];
            for (const auto& e : m)
                if (e.tp) ranges[b].tp[static_cast<std::size_t>(c)]++;
            ranges[b].ap[static_cast<std::size_t>(c)] =
                average_precision(m, ranges[b].n_gt[static_cast<std::size_t>(c)], config.interp);
        }
        ranges[b].map = map_or_absent(ranges[b].ap);
    }
    report.ranges = std::move(ranges);
    return report;
}

namespace {

json opt_to_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
    json j;
    j["flavor"] = report.flavor;
    j["thresholds"] = report.thresholds;
    json classes = json::object();
    for (int c = 0; c < kNumClasses; ++c) {
        json jc;
        json ap = json::array(), tp = json::array(), fp = json::array();
        for (std::size_t t = 0; t < report.per_class.size(); ++t) {
            const auto& ce = report.per_class[t][static_cast<std::size_t>(c)];
            ap.push_back(opt_to_json(ce.ap));
            tp.push_back(ce.tp);
            fp.push_back(ce.fp);
        }
        jc["ap"] = ap;
        jc["tp"] = tp;
        jc["fp"] = fp;
        jc["gt"] = report.n_gt[static_cast<std::size_t>(c)];
        classes[class_name(static_cast<ObjectClass>(c))] = jc;
    }
    j["classes"] = classes;
    json map = json::array();
    for (const auto& m : report.map) map.push_back(opt_to_json(m));
    j["map"] = map;
    json ranges = json::object();
    for (const auto& r : report.ranges) {
        json jr;
        for (int c = 0; c < kNumClasses; ++c) {
            jr[class_name(static_cast<ObjectClass>(c))] = opt_to_json(r.ap[static_cast<std::size_t>(c)]);
            jr["gt_" + std::string(class_name(static_cast<ObjectClass>(c)))] =
                r.n_gt[static_cast<std::size_t>(c)];
            jr["tp_" + std::string(class_name(static_cast<ObjectClass>(c)))] =
                r.tp[static_cast<std::size_t>(c)];
        }
        jr["map"] = opt_to_json(r.map);
        ranges[r.key] = jr;
    }
    j["ranges"] = ranges;
    return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("report: ") + e.what());
    }
    EvalReport report;
    report.flavor = j.at("flavor").get<std::string>();
    report.thresholds = j.at("thresholds").get<std::vector<double>>();
    const auto& classes = j.at("classes");
    report.per_class.resize(report.thresholds.size());
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& jc = classes.at(class_name(static_cast<ObjectClass>(c)));
        report.n_gt[static_cast<std::size_t>(c)] = jc.at("gt").get<std::int64_t>();
        for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
            auto& ce = report.per_class[t][static_cast<std::size_t>(c)];
            ce.ap = opt_from_json(jc.at("ap").at(t));
            ce.tp = jc.at("tp").at(t).get<std::int64_t>();
            ce.fp = jc.at("fp").at(t).get<std::int64_t>();
        }
    }
    for (const auto& m : j.at("map")) report.map.push_back(opt_from_json(m));
    for (const auto& [key, jr] : j.at("ranges").items()) {
        RangeEval r;
        r.key = key;
        for (int c = 0; c < kNumClasses; ++c) {
            r.ap[static_cast<std::size_t>(c)] = opt_from_json(jr.at(class_name(static_cast<ObjectClass>(c))));
            r.n_gt[static_cast<std::size_t>(c)] =
                jr.at("gt_" + std::string(class_name(static_cast<ObjectClass>(c)))).get<std::int64_t>();
            r.tp[static_cast<std::size_t>(c)] =
                jr.at("tp_" + std::string(class_name(static_cast<ObjectClass>(c)))).get<std::int64_t>();
        }
        r.map = opt_from_json(jr.at("map"));
        report.ranges.push_back(std::move(r));
    }
    std::sort(report.ranges.begin(), report.ranges.end(), [](const RangeEval& a, const RangeEval& b) {
        return std::stod(a.key.substr(0, a.key.find('-'))) < std::stod(b.key.substr(0, b.key.find('-')));
    });
    return report;
}

}  // namespace coopdet
