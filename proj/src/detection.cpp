#include "coopdet/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace coopdet {

void AnchorConfig::validate() const {
    for (const auto& spec : per_class) {
        for (double s : spec.size)
            if (s <= 0.0) throw DomainError("anchor config: sizes must be positive");
        if (spec.pos_iou <= spec.neg_iou || spec.pos_iou > 1.0 || spec.neg_iou < 0.0)
            throw DomainError("anchor config: need 0 <= neg_iou < pos_iou <= 1");
    }
}

std::vector<Anchor> generate_anchors(const BevGrid& grid, const AnchorConfig& config) {
    config.validate();
    std::vector<Anchor> anchors;
    anchors.reserve(static_cast<std::size_t>(grid.height() * grid.width() * kNumClasses * 2));
    for (std::int64_t row = 0; row < grid.height(); ++row) {
        for (std::int64_t col = 0; col < grid.width(); ++col) {
            for (int c = 0; c < kNumClasses; ++c) {
                const auto& spec = config.per_class[static_cast<std::size_t>(c)];
                for (int yaw_idx = 0; yaw_idx < 2; ++yaw_idx) {
                    Anchor a;
                    a.box = Box3D(grid.cell_center_x(col), grid.cell_center_y(row), spec.size[2] / 2.0,
                                  spec.size[0], spec.size[1], spec.size[2],
                                  yaw_idx == 0 ? 0.0 : kPi / 2.0, static_cast<ObjectClass>(c), 1.0);
                    a.yaw_idx = yaw_idx;
                    anchors.push_back(a);
                }
            }
        }
    }
    return anchors;
}

namespace {

// Quick reject before the exact polygon IoU.
bool bev_disjoint(const Box3D& a, const Box3D& b) {
    const double ra = 0.5 * std::hypot(a.l, a.w);
    const double rb = 0.5 * std::hypot(b.l, b.w);
    return std::hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb;
}

}  // namespace

std::vector<Assignment> match_anchors(const std::vector<Anchor>& anchors,
                                      const std::vector<Box3D>& gt, const AnchorConfig& config) {
    config.validate();
    std::vector<Assignment> out(anchors.size());
    std::vector<double> best_iou(anchors.size(), 0.0);
    std::vector<std::int64_t> best_gt(anchors.size(), -1);
    std::vector<double> gt_best_iou(gt.size(), -1.0);
    std::vector<std::int64_t> gt_best_anchor(gt.size(), -1);

    for (std::size_t ai = 0; ai < anchors.size(); ++ai) {
        const auto& anchor = anchors[ai];
        for (std::size_t gi = 0; gi < gt.size(); ++gi) {
            if (gt[gi].cls != anchor.box.cls) continue;
            const double iou = bev_disjoint(anchor.box, gt[gi]) ? 0.0 : bev_iou_rotated(anchor.box, gt[gi]);
            if (iou > best_iou[ai]) {
                best_iou[ai] = iou;
                best_gt[ai] = static_cast<std::int64_t>(gi);
            }
            if (iou > gt_best_iou[gi]) {
                gt_best_iou[gi] = iou;
                gt_best_anchor[gi] = static_cast<std::int64_t>(ai);
            }
        }
    }

    for (std::size_t ai = 0; ai < anchors.size(); ++ai) {
        const auto& spec = config.per_class[static_cast<std::size_t>(anchors[ai].box.cls)];
        if (best_gt[ai] >= 0 && best_iou[ai] >= spec.pos_iou) {
            out[ai] = {MatchLabel::positive, best_gt[ai]};
        } else if (best_iou[ai] < spec.neg_iou) {
            out[ai] = {MatchLabel::negative, -1};
        } else {
            out[ai] = {MatchLabel::ignored, -1};
        }
    }

    // Force rule: every GT claims its best anchor unless that anchor is
    // already positive; competing claims resolve by IoU, then GT index.
    std::vector<double> forced_iou(anchors.size(), -1.0);
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
        const auto ai = gt_best_anchor[gi];
        if (ai < 0) continue;  // no same-class anchors exist
        const auto a = static_cast<std::size_t>(ai);
        if (out[a].label == MatchLabel::positive) continue;
        if (gt_best_iou[gi] > forced_iou[a]) {
            forced_iou[a] = gt_best_iou[gi];
            out[a].gt = static_cast<std::int64_t>(gi);
        }
    }
    for (std::size_t ai = 0; ai < anchors.size(); ++ai)
        if (forced_iou[ai] >= 0.0) out[ai].label = MatchLabel::positive;
    return out;
}

BoxResiduals encode_boxes(const Box3D& gt, const Box3D& anchor) {
    if (gt.l <= 0 || gt.w <= 0 || gt.h <= 0 || anchor.l <= 0 || anchor.w <= 0 || anchor.h <= 0)
        throw DomainError("encode: box extents must be positive");
    const double diag = std::hypot(anchor.l, anchor.w);
    BoxResiduals r;
    r.delta[0] = (gt.cx - anchor.cx) / diag;
    r.delta[1] = (gt.cy - anchor.cy) / diag;
    r.delta[2] = (gt.cz - anchor.cz) / anchor.h;
    r.delta[3] = std::log(gt.l / anchor.l);
    r.delta[4] = std::log(gt.w / anchor.w);
    r.delta[5] = std::log(gt.h / anchor.h);
    r.delta[6] = wrap_half_pi(gt.yaw - anchor.yaw);
    r.dir_bin = wrap_two_pi(gt.yaw) < kPi ? 1 : 0;
    return r;
}

Box3D decode_boxes(const std::array<double, 7>& delta, int dir_bin, const Box3D& anchor) {
    const double diag = std::hypot(anchor.l, anchor.w);
    const double cx = anchor.cx + delta[0] * diag;
    const double cy = anchor.cy + delta[1] * diag;
    const double cz = anchor.cz + delta[2] * anchor.h;
    const double l = anchor.l * std::exp(delta[3]);
    const double w = anchor.w * std::exp(delta[4]);
    const double h = anchor.h * std::exp(delta[5]);
    double yaw = wrap_two_pi(anchor.yaw + delta[6]);
    // the regressed heading is modulo pi; the bin restores the half-turn
    const bool in_upper = yaw < kPi;
    if ((dir_bin == 1) != in_upper) yaw = wrap_two_pi(yaw + kPi);
    return Box3D(cx, cy, cz, l, w, h, yaw, anchor.cls, anchor.score);
}

double focal_loss(double p, double alpha, double gamma) {
    if (p <= 0.0 || p > 1.0) throw DomainError("focal_loss: p must lie in (0,1]");
    return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
}

double smooth_l1_loss(double d, double sigma) {
    if (sigma <= 0.0) throw DomainError("smooth_l1: sigma must be positive");
    const double s2 = sigma * sigma;
    return std::abs(d) < 1.0 / s2 ? 0.5 * s2 * d * d : std::abs(d) - 0.5 / s2;
}

std::array<double, kNumClasses> effective_number_weights(
    const std::array<std::int64_t, kNumClasses>& counts, double beta) {
    if (beta < 0.0 || beta >= 1.0) throw DomainError("effective number: beta must lie in [0,1)");
    std::array<double, kNumClasses> w{};
    double sum = 0.0;
    for (std::size_t c = 0; c < w.size(); ++c) {
        if (counts[c] < 1) throw DomainError("effective number: counts must be >= 1");
        w[c] = beta == 0.0 ? 1.0
                           : (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(counts[c])));
        sum += w[c];
    }
    for (auto& v : w) v = v * static_cast<double>(w.size()) / sum;  // mean 1
    return w;
}

LossWeights LossWeights::uniform() {
    LossWeights w;
    w.cls = {1.0, 1.0, 1.0};
    w.reg = {1.0, 1.0, 1.0};
    w.dir = {1.0, 1.0, 1.0};
    return w;
}

LossTargets build_targets(const std::vector<Anchor>& anchors,
                          const std::vector<Assignment>& assignments, const std::vector<Box3D>& gt,
                          const BevGrid& grid) {
    if (anchors.size() != assignments.size()) throw ShapeError("build_targets: assignment count mismatch");
    LossTargets t;
    const auto w = grid.width();
    for (std::size_t ai = 0; ai < anchors.size(); ++ai) {
        const auto& anchor = anchors[ai];
        auto& pc = t.per_class[static_cast<std::size_t>(anchor.box.cls)];
        std::int64_t row, col;
        if (!grid.locate(anchor.box.cx, anchor.box.cy, row, col))
            throw ShapeError("build_targets: anchor outside grid");
        const auto cell = row * w + col;
        switch (assignments[ai].label) {
            case MatchLabel::positive: {
                pc.pos_cells.push_back(cell);
                pc.pos_yaw.push_back(anchor.yaw_idx);
                pc.residuals.push_back(encode_boxes(gt.at(static_cast<std::size_t>(assignments[ai].gt)),
                                                    anchor.box));
                break;
            }
            case MatchLabel::negative:
                pc.neg_cells.push_back(cell);
                pc.neg_yaw.push_back(anchor.yaw_idx);
                break;
            case MatchLabel::ignored:
                break;
        }
    }
    return t;
}

namespace {

// -alpha (1-p)^gamma log p with p = sigmoid(sign * z), composed from
// numerically stable pieces: 1-p = sigmoid(-sign z), -log p = softplus(-sign z).
Tensor focal_term(const Tensor& z, double sign, double alpha, double gamma) {
    Tensor flipped = mul_scalar(z, -sign);
    return mul_scalar(mul(pow_scalar(sigmoid(flipped), gamma), softplus(flipped)), alpha);
}

}  // namespace

LossResult total_loss(const HeadOutputs& head, const LossTargets& targets, const LossWeights& weights) {
    const auto hw = head.height * head.width;
    if (hw <= 0) throw ShapeError("total_loss: head extents not set");
    const Precision prec = head.cls[0].precision();
    Tensor total = Tensor::scalar(0.0, prec);
    LossBreakdown breakdown;

    for (int c = 0; c < kNumClasses; ++c) {
        const auto& pc = targets.per_class[static_cast<std::size_t>(c)];
        const auto& cls_map = head.cls[static_cast<std::size_t>(c)];
        const auto& reg_map = head.reg[static_cast<std::size_t>(c)];
        const auto& dir_map = head.dir[static_cast<std::size_t>(c)];
        const auto n_pos = static_cast<std::int64_t>(pc.pos_cells.size());
        breakdown.positives[static_cast<std::size_t>(c)] = n_pos;
        const double norm = 1.0 / static_cast<double>(std::max<std::int64_t>(1, n_pos));

        // classification: positives and negatives
        Tensor cls_term = Tensor::scalar(0.0, prec);
        if (!pc.pos_cells.empty()) {
            std::vector<std::int64_t> idx(pc.pos_cells.size());
            for (std::size_t i = 0; i < idx.size(); ++i)
                idx[i] = pc.pos_yaw[i] * hw + pc.pos_cells[i];
            Tensor z = gather_flat(cls_map, idx, {static_cast<std::int64_t>(idx.size())});
            cls_term = add(cls_term, sum_all(focal_term(z, 1.0, weights.focal_alpha, weights.focal_gamma)));
        }
        if (!pc.neg_cells.empty()) {
            std::vector<std::int64_t> idx(pc.neg_cells.size());
            for (std::size_t i = 0; i < idx.size(); ++i)
                idx[i] = pc.neg_yaw[i] * hw + pc.neg_cells[i];
            Tensor z = gather_flat(cls_map, idx, {static_cast<std::int64_t>(idx.size())});
            cls_term = add(cls_term, sum_all(focal_term(z, -1.0, weights.focal_alpha, weights.focal_gamma)));
        }
        cls_term = mul_scalar(cls_term, norm);

        // regression and heading: positives only
        Tensor reg_term = Tensor::scalar(0.0, prec);
        Tensor dir_term = Tensor::scalar(0.0, prec);
        if (n_pos > 0) {
            std::vector<std::int64_t> reg_idx;
            std::vector<double> reg_target;
            reg_idx.reserve(static_cast<std::size_t>(7 * n_pos));
            for (std::size_t i = 0; i < pc.pos_cells.size(); ++i) {
                for (int k = 0; k < 7; ++k) {
                    reg_idx.push_back((pc.pos_yaw[i] * 7 + k) * hw + pc.pos_cells[i]);
                    reg_target.push_back(pc.residuals[i].delta[static_cast<std::size_t>(k)]);
                }
            }
            Tensor pred = gather_flat(reg_map, reg_idx, {static_cast<std::int64_t>(reg_idx.size())});
            Tensor tgt = Tensor::of({static_cast<std::int64_t>(reg_target.size())}, reg_target, prec);
            reg_term = mul_scalar(sum_all(huber(sub(pred, tgt), weights.smooth_l1_sigma)), norm);

            std::vector<std::int64_t> true_idx, false_idx;
            for (std::size_t i = 0; i < pc.pos_cells.size(); ++i) {
                const int b = pc.residuals[i].dir_bin;
                true_idx.push_back((pc.pos_yaw[i] * 2 + b) * hw + pc.pos_cells[i]);
                false_idx.push_back((pc.pos_yaw[i] * 2 + (1 - b)) * hw + pc.pos_cells[i]);
            }
            Tensor zt = gather_flat(dir_map, true_idx, {n_pos});
            Tensor zf = gather_flat(dir_map, false_idx, {n_pos});
            // 2-way softmax cross-entropy reduces to softplus of the logit gap
            dir_term = mul_scalar(sum_all(softplus(sub(zf, zt))), norm);
        }

        breakdown.cls[static_cast<std::size_t>(c)] = cls_term.value();
        breakdown.reg[static_cast<std::size_t>(c)] = reg_term.value();
        breakdown.dir[static_cast<std::size_t>(c)] = dir_term.value();

        total = add(total, mul_scalar(cls_term, weights.terms[0] * weights.cls[static_cast<std::size_t>(c)]));
        total = add(total, mul_scalar(reg_term, weights.terms[1] * weights.reg[static_cast<std::size_t>(c)]));
        total = add(total, mul_scalar(dir_term, weights.terms[2] * weights.dir[static_cast<std::size_t>(c)]));
    }
    breakdown.total = total.value();
    return {total, breakdown};
}

std::vector<Box3D> nms_per_class(const std::vector<Box3D>& detections, double iou_threshold) {
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (detections[a].score != detections[b].score) return detections[a].score > detections[b].score;
        return a < b;
    });
    std::vector<bool> suppressed(detections.size(), false);
    std::vector<Box3D> kept;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const auto i = order[oi];
        if (suppressed[i]) continue;
        kept.push_back(detections[i]);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const auto j = order[oj];
            if (suppressed[j] || detections[j].cls != detections[i].cls) continue;
            if (!bev_disjoint(detections[i], detections[j]) &&
                bev_iou_rotated(detections[i], detections[j]) > iou_threshold)
                suppressed[j] = true;
        }
    }
    return kept;
}

}  // namespace coopdet
