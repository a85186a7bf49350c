#include "coopdet/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace coopdet {

const char* class_name(ObjectClass c) {
    switch (c) {
        case ObjectClass::pedestrian: return "pedestrian";
        case ObjectClass::car: return "car";
        case ObjectClass::truck: return "truck";
    }
    throw DomainError("unknown class");
}

ObjectClass class_from_name(const std::string& name) {
    if (name == "pedestrian") return ObjectClass::pedestrian;
    if (name == "car") return ObjectClass::car;
    if (name == "truck") return ObjectClass::truck;
    throw ParseError("unknown class name: " + name);
}

Pose Pose::inverse() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    // R^T * (p - t)
    return Pose(-(c * x + s * y), -(-s * x + c * y), -z, -yaw);
}

Pose Pose::compose(const Pose& other) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return Pose(x + c * other.x - s * other.y, y + s * other.x + c * other.y, z + other.z,
                yaw + other.yaw);
}

std::array<double, 3> Pose::apply(double px, double py, double pz) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {x + c * px - s * py, y + s * px + c * py, z + pz};
}

Box3D::Box3D(double cx_, double cy_, double cz_, double l_, double w_, double h_, double yaw_,
             ObjectClass cls_, double score_)
    : cx(cx_), cy(cy_), cz(cz_), l(l_), w(w_), h(h_), yaw(wrap_two_pi(yaw_)), cls(cls_), score(score_) {
    if (l <= 0.0 || w <= 0.0 || h <= 0.0) throw DomainError("box extents must be positive");
}

std::array<std::array<double, 2>, 4> Box3D::bev_corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double hl = 0.5 * l, hw = 0.5 * w;
    std::array<std::array<double, 2>, 4> out{};
    // counterclockwise; the polygon clipper relies on this orientation
    const double dx[4] = {hl, -hl, -hl, hl};
    const double dy[4] = {hw, hw, -hw, -hw};
    for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = {cx + c * dx[i] - s * dy[i], cy + s * dx[i] + c * dy[i]};
    return out;
}

void PointCloud::require_finite() const {
    for (const auto& p : points)
        for (double v : p)
            if (!std::isfinite(v)) throw NumericError("point cloud contains non-finite values");
}

BevGrid::BevGrid(double x_min_, double x_max_, double y_min_, double y_max_, double cell_)
    : x_min(x_min_), x_max(x_max_), y_min(y_min_), y_max(y_max_), cell(cell_) {
    if (cell <= 0.0) throw DomainError("grid cell size must be positive");
    if (x_max <= x_min || y_max <= y_min) throw DomainError("grid extents must be positive");
    const double nx = (x_max - x_min) / cell;
    const double ny = (y_max - y_min) / cell;
    nx_ = static_cast<std::int64_t>(std::llround(nx));
    ny_ = static_cast<std::int64_t>(std::llround(ny));
    if (std::abs(nx - static_cast<double>(nx_)) > 1e-9 || std::abs(ny - static_cast<double>(ny_)) > 1e-9)
        throw DomainError("grid extents must be divisible by the cell size");
}

bool BevGrid::locate(double x, double y, std::int64_t& row, std::int64_t& col) const {
    if (x < x_min || x >= x_max || y < y_min || y >= y_max) return false;
    col = static_cast<std::int64_t>(std::floor((x - x_min) / cell));
    row = static_cast<std::int64_t>(std::floor((y - y_min) / cell));
    col = std::clamp<std::int64_t>(col, 0, nx_ - 1);
    row = std::clamp<std::int64_t>(row, 0, ny_ - 1);
    return true;
}

PointCloud transform_points(const Pose& pose, const PointCloud& pc) {
    PointCloud out;
    out.points.reserve(pc.points.size());
    for (const auto& p : pc.points) {
        const auto q = pose.apply(p[0], p[1], p[2]);
        out.points.push_back({q[0], q[1], q[2], p[3]});
    }
    return out;
}

namespace {

using Poly = std::vector<std::array<double, 2>>;

double shoelace(const Poly& poly) {
    double a = 0.0;
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = poly[i];
        const auto& q = poly[(i + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    return 0.5 * std::abs(a);
}

// Sutherland-Hodgman clip of a convex polygon against the half-plane on the
// left of edge a->b.
Poly clip_edge(const Poly& poly, const std::array<double, 2>& a, const std::array<double, 2>& b) {
    Poly out;
    const std::size_t n = poly.size();
    auto side = [&](const std::array<double, 2>& p) {
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    };
    for (std::size_t i = 0; i < n; ++i) {
        const auto& cur = poly[i];
        const auto& nxt = poly[(i + 1) % n];
        const double sc = side(cur), sn = side(nxt);
        if (sc >= 0.0) out.push_back(cur);
        if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
            const double t = sc / (sc - sn);
            out.push_back({cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])});
        }
    }
    return out;
}

double bev_intersection_area(const Box3D& a, const Box3D& b) {
    const auto ca = a.bev_corners();
    const auto cb = b.bev_corners();
    Poly poly(ca.begin(), ca.end());
    for (int i = 0; i < 4 && !poly.empty(); ++i)
        poly = clip_edge(poly, cb[static_cast<std::size_t>(i)], cb[static_cast<std::size_t>((i + 1) % 4)]);
    if (poly.size() < 3) return 0.0;
    return shoelace(poly);
}

void require_nondegenerate(const Box3D& a, const Box3D& b) {
    if (a.bev_area() <= 0.0 || b.bev_area() <= 0.0 || a.h <= 0.0 || b.h <= 0.0)
        throw DomainError("iou: degenerate box");
}

}  // namespace

double bev_iou_rotated(const Box3D& a, const Box3D& b) {
    require_nondegenerate(a, b);
    const double inter = bev_intersection_area(a, b);
    const double uni = a.bev_area() + b.bev_area() - inter;
    return uni <= 0.0 ? 0.0 : std::clamp(inter / uni, 0.0, 1.0);
}

double iou3d(const Box3D& a, const Box3D& b) {
    require_nondegenerate(a, b);
    const double inter_bev = bev_intersection_area(a, b);
    const double z_lo = std::max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h);
    const double z_hi = std::min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h);
    const double inter = inter_bev * std::max(0.0, z_hi - z_lo);
    const double uni = a.volume() + b.volume() - inter;
    return uni <= 0.0 ? 0.0 : std::clamp(inter / uni, 0.0, 1.0);
}

PillarSet pillarize_and_encode(const PointCloud& pc, const BevGrid& grid, std::int64_t max_points,
                               std::int64_t max_pillars) {
    pc.require_finite();
    if (max_points < 1) throw DomainError("pillarize: max_points must be >= 1");

    struct Bucket {
        std::int64_t row, col;
        std::vector<std::array<double, 4>> pts;
        std::int64_t dropped = 0;
    };
    std::vector<Bucket> buckets;
    std::vector<std::int64_t> cell_to_bucket(static_cast<std::size_t>(grid.height() * grid.width()), -1);

    PillarSet out;
    for (const auto& p : pc.points) {
        std::int64_t row, col;
        if (!grid.locate(p[0], p[1], row, col)) {
            ++out.out_of_grid_points;
            continue;
        }
        auto& slot = cell_to_bucket[static_cast<std::size_t>(row * grid.width() + col)];
        if (slot < 0) {
            slot = static_cast<std::int64_t>(buckets.size());
            buckets.push_back({row, col, {}, 0});
        }
        auto& b = buckets[static_cast<std::size_t>(slot)];
        if (static_cast<std::int64_t>(b.pts.size()) < max_points) {
            b.pts.push_back(p);
        } else {
            ++b.dropped;  // beyond max_points, dropped in input order
        }
    }

    // Pillars beyond the cap are dropped by descending point count; ties keep
    // the earlier cell.
    std::vector<std::size_t> order(buckets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (max_pillars > 0 && static_cast<std::int64_t>(buckets.size()) > max_pillars) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
            return buckets[i].pts.size() > buckets[j].pts.size();
        });
        for (std::size_t i = static_cast<std::size_t>(max_pillars); i < order.size(); ++i) {
            const auto& b = buckets[order[i]];
            out.truncated_points += static_cast<std::int64_t>(b.pts.size()) + b.dropped;
        }
        order.resize(static_cast<std::size_t>(max_pillars));
        std::sort(order.begin(), order.end());  // deterministic pillar order by cell discovery
    }

    for (const auto oi : order) {
        const auto& b = buckets[oi];
        out.truncated_points += b.dropped;
        Pillar pil;
        pil.row = b.row;
        pil.col = b.col;
        double mx = 0.0, my = 0.0, mz = 0.0;
        for (const auto& p : b.pts) {
            mx += p[0];
            my += p[1];
            mz += p[2];
        }
        const double inv = 1.0 / static_cast<double>(b.pts.size());
        mx *= inv;
        my *= inv;
        mz *= inv;
        const double ccx = grid.cell_center_x(b.col);
        const double ccy = grid.cell_center_y(b.row);
        for (const auto& p : b.pts) {
            pil.features.push_back({p[0], p[1], p[2], p[3], p[0] - mx, p[1] - my, p[2] - mz,
                                    p[0] - ccx, p[1] - ccy});
        }
        out.kept_points += static_cast<std::int64_t>(b.pts.size());
        out.pillars.push_back(std::move(pil));
    }
    return out;
}

Scene augment_scene(const Scene& scene, const Augmentation& aug) {
    if (aug.scale <= 0.0) throw DomainError("augment: scale must be positive");
    const double s = aug.scale;
    const double c = std::cos(aug.rotation), sn = std::sin(aug.rotation);

    auto xf_world = [&](double x, double y, double z) -> std::array<double, 3> {
        double yy = aug.flip ? -y : y;
        const double rx = c * x - sn * yy;
        const double ry = sn * x + c * yy;
        return {s * rx, s * ry, s * z};
    };
    auto xf_yaw = [&](double yaw) { return wrap_two_pi((aug.flip ? -yaw : yaw) + aug.rotation); };

    Scene out;
    out.seed = scene.seed;
    out.ego = scene.ego;
    out.agents.reserve(scene.agents.size());
    for (const auto& agent : scene.agents) {
        AgentObservation a;
        const auto t = xf_world(agent.pose.x, agent.pose.y, agent.pose.z);
        a.pose = Pose(t[0], t[1], t[2], xf_yaw(agent.pose.yaw));
        // World transform folded into the local frame: mirror local points
        // when flipping and apply the scale; the rotation lives in the pose.
        a.cloud.points.reserve(agent.cloud.points.size());
        for (const auto& p : agent.cloud.points) {
            const double ly = aug.flip ? -p[1] : p[1];
            a.cloud.points.push_back({s * p[0], s * ly, s * p[2], p[3]});
        }
        out.agents.push_back(std::move(a));
    }
    out.gt.reserve(scene.gt.size());
    for (const auto& g : scene.gt) {
        const auto t = xf_world(g.cx, g.cy, g.cz);
        out.gt.emplace_back(t[0], t[1], t[2], s * g.l, s * g.w, s * g.h, xf_yaw(g.yaw), g.cls, g.score);
    }
    return out;
}

}  // namespace coopdet
