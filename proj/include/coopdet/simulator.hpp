#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopdet/geometry.hpp"
#include "coopdet/rng.hpp"

namespace coopdet {

struct SensorModel {
    double base_rate = 120.0;   // expected points for 1 m^2 of visible surface at 1 m
    double max_range = 60.0;    // meters; objects beyond produce nothing
    double noise_sigma = 0.02;  // per-coordinate Gaussian noise, meters
    double min_range = 1.0;     // density clamp to avoid blowups next to the sensor
};

struct ClassModel {
    std::array<double, 3> mean_size;  // l, w, h meters
    double jitter = 0.1;              // +- fraction of the mean, uniform
};

struct SceneConfig {
    int n_agents = 2;                                  // 1..4
    std::array<std::int64_t, kNumClasses> counts{6, 10, 2};  // pedestrian, car, truck
    std::array<ClassModel, kNumClasses> classes{
        ClassModel{{0.6, 0.6, 1.7}, 0.1},
        ClassModel{{4.0, 2.0, 1.6}, 0.1},
        ClassModel{{9.6, 2.6, 3.5}, 0.1},
    };
    double x_min = -20.0, x_max = 20.0;
    double y_min = -10.0, y_max = 10.0;
    SensorModel sensor;
    std::int64_t clutter_points = 60;  // ground returns per agent
    double sensor_height = 1.8;
    bool occlusion = false;
    int placement_retries = 200;

    void validate() const;
};

// Fully determined by (config, seed): object placement without BEV
// overlap, agent poses, and per-agent point clouds in local frames.
Scene gen_scene(const SceneConfig& config, std::uint64_t seed);

// Expected count = base * visible surface area / r^2 over the two
// sensor-facing side faces plus the top; Poisson-sampled, uniform on the
// faces, Gaussian coordinate noise.
PointCloud sample_object_points(const Box3D& box, const Pose& sensor_pose, const SensorModel& model,
                                Rng& rng);

void write_dataset(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> read_dataset(const std::string& path);

std::string scene_to_json_line(const Scene& scene);
Scene scene_from_json_line(const std::string& line, std::size_t line_number);

}  // namespace coopdet
