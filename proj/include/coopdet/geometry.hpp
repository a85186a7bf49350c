#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopdet/common.hpp"

namespace coopdet {

enum class ObjectClass : int { pedestrian = 0, car = 1, truck = 2 };
constexpr int kNumClasses = 3;

const char* class_name(ObjectClass c);
ObjectClass class_from_name(const std::string& name);

// Ground-plane rigid transform: planar rotation about the vertical axis
// plus a 3D translation. Roll and pitch are not modeled.
struct Pose {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double yaw = 0.0;  // normalized to [0, 2*pi)

    Pose() = default;
    Pose(double x_, double y_, double z_, double yaw_) : x(x_), y(y_), z(z_), yaw(wrap_two_pi(yaw_)) {}

    Pose inverse() const;
    Pose compose(const Pose& other) const;  // this applied after other
    std::array<double, 3> apply(double px, double py, double pz) const;
};

// Oriented 3D box: center, size (length along heading, width, height), yaw.
struct Box3D {
    double cx = 0.0, cy = 0.0, cz = 0.0;
    double l = 0.0, w = 0.0, h = 0.0;
    double yaw = 0.0;
    ObjectClass cls = ObjectClass::car;
    double score = 1.0;  // 1.0 for ground truth

    Box3D() = default;
    Box3D(double cx_, double cy_, double cz_, double l_, double w_, double h_, double yaw_,
          ObjectClass cls_ = ObjectClass::car, double score_ = 1.0);

    std::array<std::array<double, 2>, 4> bev_corners() const;
    double bev_area() const { return l * w; }
    double volume() const { return l * w * h; }
};

struct PointCloud {
    // rows of (x, y, z, intensity)
    std::vector<std::array<double, 4>> points;

    std::size_t size() const { return points.size(); }
    void require_finite() const;
};

// Metric BEV grid with half-open cells [lo, lo + cell).
struct BevGrid {
    double x_min = 0.0, x_max = 0.0;
    double y_min = 0.0, y_max = 0.0;
    double cell = 0.0;

    BevGrid() = default;
    BevGrid(double x_min_, double x_max_, double y_min_, double y_max_, double cell_);

    std::int64_t height() const { return ny_; }  // rows, along y
    std::int64_t width() const { return nx_; }   // cols, along x
    // Cell of a point; false when outside the grid.
    bool locate(double x, double y, std::int64_t& row, std::int64_t& col) const;
    double cell_center_x(std::int64_t col) const { return x_min + (static_cast<double>(col) + 0.5) * cell; }
    double cell_center_y(std::int64_t row) const { return y_min + (static_cast<double>(row) + 0.5) * cell; }

private:
    std::int64_t nx_ = 0, ny_ = 0;
};

PointCloud transform_points(const Pose& pose, const PointCloud& pc);

// Area of the convex polygon intersection of the two BEV footprints over
// the union area. Degenerate (zero-area) boxes raise DomainError.
double bev_iou_rotated(const Box3D& a, const Box3D& b);
double iou3d(const Box3D& a, const Box3D& b);

struct Pillar {
    std::int64_t row = 0;
    std::int64_t col = 0;
    // per point: x, y, z, intensity, offsets to pillar mean (3), offsets to
    // cell center (2)
    std::vector<std::array<double, 9>> features;
};

struct PillarSet {
    std::vector<Pillar> pillars;
    std::int64_t kept_points = 0;
    std::int64_t truncated_points = 0;     // dropped by per-pillar or pillar-count caps
    std::int64_t out_of_grid_points = 0;
};

PillarSet pillarize_and_encode(const PointCloud& pc, const BevGrid& grid, std::int64_t max_points = 32,
                               std::int64_t max_pillars = 0 /* 0 = unlimited */);

struct AgentObservation {
    Pose pose;        // agent frame -> world frame
    PointCloud cloud; // in the agent's local frame
};

struct Scene {
    std::uint64_t seed = 0;
    std::size_t ego = 0;
    std::vector<AgentObservation> agents;
    std::vector<Box3D> gt;  // world frame
};

struct Augmentation {
    bool flip = false;       // mirror about the world x axis
    double rotation = 0.0;   // radians about the world origin
    double scale = 1.0;
};

Scene augment_scene(const Scene& scene, const Augmentation& aug);

}  // namespace coopdet
