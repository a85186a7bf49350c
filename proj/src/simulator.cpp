#include "coopdet/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace coopdet {

using nlohmann::json;

void SceneConfig::validate() const {
    if (n_agents < 1 || n_agents > 4) throw DomainError("scene config: agents must be 1..4");
    for (auto c : counts)
        if (c < 0) throw DomainError("scene config: negative object count");
    if (x_max <= x_min || y_max <= y_min) throw DomainError("scene config: empty placement region");
    if (sensor.noise_sigma < 0) throw DomainError("scene config: negative noise sigma");
    if (sensor.base_rate < 0 || sensor.max_range <= 0) throw DomainError("scene config: bad sensor model");
    if (clutter_points < 0) throw DomainError("scene config: negative clutter count");
}

namespace {

// Stream ids for per-scene substreams.
enum : std::uint64_t { kPlacement = 1, kAgents = 2, kCloud = 3 };

bool footprints_overlap(const Box3D& a, const Box3D& b) {
    return bev_iou_rotated(a, b) > 0.0;
}

struct Face {
    // rectangle in world space: origin corner plus two edge vectors
    std::array<double, 3> origin;
    std::array<double, 3> eu, ev;
    double area;
};

// The two side faces turned toward the sensor, plus the top face.
std::vector<Face> visible_faces(const Box3D& box, double sx, double sy) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    // local axes in world coordinates
    const double ax[2] = {c, s};    // along length
    const double ay[2] = {-s, c};   // along width
    std::vector<Face> faces;
    const double hl = box.l / 2, hw = box.w / 2;
    const double dx = sx - box.cx, dy = sy - box.cy;
    const double du = dx * ax[0] + dy * ax[1];  // sensor offset in box frame
    const double dv = dx * ay[0] + dy * ay[1];
    const double z0 = box.cz - box.h / 2;

    // face at +u or -u (normal along length axis)
    {
        const double sign = du >= 0 ? 1.0 : -1.0;
        Face f;
        f.origin = {box.cx + sign * hl * ax[0] - hw * ay[0], box.cy + sign * hl * ax[1] - hw * ay[1], z0};
        f.eu = {2 * hw * ay[0], 2 * hw * ay[1], 0.0};
        f.ev = {0.0, 0.0, box.h};
        f.area = box.w * box.h;
        faces.push_back(f);
    }
    // face at +v or -v (normal along width axis)
    {
        const double sign = dv >= 0 ? 1.0 : -1.0;
        Face f;
        f.origin = {box.cx + sign * hw * ay[0] - hl * ax[0], box.cy + sign * hw * ay[1] - hl * ax[1], z0};
        f.eu = {2 * hl * ax[0], 2 * hl * ax[1], 0.0};
        f.ev = {0.0, 0.0, box.h};
        f.area = box.l * box.h;
        faces.push_back(f);
    }
    // top face
    {
        Face f;
        f.origin = {box.cx - hl * ax[0] - hw * ay[0], box.cy - hl * ax[1] - hw * ay[1], z0 + box.h};
        f.eu = {2 * hl * ax[0], 2 * hl * ax[1], 0.0};
        f.ev = {2 * hw * ay[0], 2 * hw * ay[1], 0.0};
        f.area = box.l * box.w;
        faces.push_back(f);
    }
    return faces;
}

}  // namespace

PointCloud sample_object_points(const Box3D& box, const Pose& sensor_pose, const SensorModel& model,
                                Rng& rng) {
    PointCloud out;
    const double r = std::max(model.min_range,
                              std::hypot(box.cx - sensor_pose.x, box.cy - sensor_pose.y));
    if (r > model.max_range) return out;
    auto faces = visible_faces(box, sensor_pose.x, sensor_pose.y);
    double total_area = 0.0;
    for (const auto& f : faces) total_area += f.area;
    const double expected = model.base_rate * total_area / (r * r);
    const auto count = rng.poisson(expected);
    for (std::uint64_t i = 0; i < count; ++i) {
        // pick a face proportional to its area
        double pick = rng.uniform(0.0, total_area);
        const Face* face = &faces.back();
        for (const auto& f : faces) {
            if (pick < f.area) {
                face = &f;
                break;
            }
            pick -= f.area;
        }
        const double u = rng.uniform(0, 1), v = rng.uniform(0, 1);
        std::array<double, 3> p{face->origin[0] + u * face->eu[0] + v * face->ev[0],
                                face->origin[1] + u * face->eu[1] + v * face->ev[1],
                                face->origin[2] + u * face->eu[2] + v * face->ev[2]};
        for (auto& coord : p) coord += model.noise_sigma * rng.gaussian();
        out.points.push_back({p[0], p[1], p[2], rng.uniform(0.1, 1.0)});
    }
    return out;
}

Scene gen_scene(const SceneConfig& config, std::uint64_t seed) {
    config.validate();
    Rng root(seed);
    Scene scene;
    scene.seed = seed;
    scene.ego = 0;

    // placement: rejection-sample non-overlapping footprints, largest
    // class first so big objects still find room; an exhausted object
    // re-rolls the whole layout from a derived stream a bounded number of
    // times before the scene counts as saturated
    std::array<int, kNumClasses> class_order{0, 1, 2};
    std::sort(class_order.begin(), class_order.end(), [&](int a, int b) {
        const auto& ma = config.classes[static_cast<std::size_t>(a)].mean_size;
        const auto& mb = config.classes[static_cast<std::size_t>(b)].mean_size;
        return ma[0] * ma[1] > mb[0] * mb[1];
    });
    constexpr int kLayoutRerolls = 32;
    bool layout_done = false;
    for (int reroll = 0; reroll < kLayoutRerolls && !layout_done; ++reroll) {
        Rng place = root.derive(kPlacement + static_cast<std::uint64_t>(reroll) * 1009);
        scene.gt.clear();
        layout_done = true;
        for (const int c : class_order) {
            const auto& model = config.classes[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < config.counts[static_cast<std::size_t>(c)] && layout_done; ++i) {
                bool placed = false;
                for (int attempt = 0; attempt < config.placement_retries; ++attempt) {
                    const double l = model.mean_size[0] * place.uniform(1 - model.jitter, 1 + model.jitter);
                    const double w = model.mean_size[1] * place.uniform(1 - model.jitter, 1 + model.jitter);
                    const double h = model.mean_size[2] * place.uniform(1 - model.jitter, 1 + model.jitter);
                    const double margin = 0.5 * std::hypot(l, w);
                    if (config.x_max - config.x_min <= 2 * margin ||
                        config.y_max - config.y_min <= 2 * margin)
                        continue;
                    Box3D box(place.uniform(config.x_min + margin, config.x_max - margin),
                              place.uniform(config.y_min + margin, config.y_max - margin), h / 2, l, w, h,
                              place.uniform(0, 2 * kPi), static_cast<ObjectClass>(c), 1.0);
                    bool clash = false;
                    for (const auto& other : scene.gt)
                        if (footprints_overlap(box, other)) {
                            clash = true;
                            break;
                        }
                    if (!clash) {
                        scene.gt.push_back(box);
                        placed = true;
                        break;
                    }
                }
                if (!placed) layout_done = false;
            }
        }
    }
    if (!layout_done) throw CapacityError("gen_scene: placement saturated after bounded retries");

    // agent poses: ego at the origin, others inside the region
    Rng agents = root.derive(kAgents);
    for (int a = 0; a < config.n_agents; ++a) {
        Pose pose(0, 0, config.sensor_height, 0);
        if (a > 0)
            pose = Pose(agents.uniform(config.x_min, config.x_max),
                        agents.uniform(config.y_min, config.y_max), config.sensor_height,
                        agents.uniform(0, 2 * kPi));
        scene.agents.push_back({pose, {}});
    }

    // per-agent clouds: object surfaces plus ground clutter, all in the
    // agent's local frame
    for (std::size_t a = 0; a < scene.agents.size(); ++a) {
        Rng cloud = root.derive(kCloud + a);
        auto& agent = scene.agents[a];
        PointCloud world;
        std::vector<std::size_t> owner;  // object index per point, for occlusion
        for (std::size_t gi = 0; gi < scene.gt.size(); ++gi) {
            auto pts = sample_object_points(scene.gt[gi], agent.pose, config.sensor, cloud);
            for (const auto& p : pts.points) {
                world.points.push_back(p);
                owner.push_back(gi);
            }
        }
        for (std::int64_t i = 0; i < config.clutter_points; ++i) {
            world.points.push_back({cloud.uniform(config.x_min, config.x_max),
                                    cloud.uniform(config.y_min, config.y_max),
                                    cloud.uniform(-0.05, 0.05), cloud.uniform(0.0, 0.3)});
            owner.push_back(static_cast<std::size_t>(-1));
        }
        if (config.occlusion) {
            // 1-degree angular z-buffer per sensor: the nearest object wins
            // its bin; clutter is ground-level and exempt.
            constexpr int kBins = 360;
            std::vector<double> nearest(kBins, 1e30);
            std::vector<std::size_t> winner(kBins, static_cast<std::size_t>(-1));
            auto bin_of = [&](double x, double y) {
                const double ang = std::atan2(y - agent.pose.y, x - agent.pose.x);
                int b = static_cast<int>(std::floor((ang + kPi) / (2 * kPi) * kBins));
                return std::clamp(b, 0, kBins - 1);
            };
            for (std::size_t i = 0; i < world.points.size(); ++i) {
                if (owner[i] == static_cast<std::size_t>(-1)) continue;
                const auto& p = world.points[i];
                const double r = std::hypot(p[0] - agent.pose.x, p[1] - agent.pose.y);
                const int b = bin_of(p[0], p[1]);
                if (r < nearest[static_cast<std::size_t>(b)]) {
                    nearest[static_cast<std::size_t>(b)] = r;
                    winner[static_cast<std::size_t>(b)] = owner[i];
                }
            }
            PointCloud kept;
            for (std::size_t i = 0; i < world.points.size(); ++i) {
                const auto& p = world.points[i];
                if (owner[i] == static_cast<std::size_t>(-1) ||
                    winner[static_cast<std::size_t>(bin_of(p[0], p[1]))] == owner[i])
                    kept.points.push_back(p);
            }
            world = std::move(kept);
        }
        agent.cloud = transform_points(agent.pose.inverse(), world);
    }
    return scene;
}

std::string scene_to_json_line(const Scene& scene) {
    json j;
    j["seed"] = scene.seed;
    j["ego"] = scene.ego;
    json agents = json::array();
    for (const auto& a : scene.agents) {
        json ja;
        ja["pose"] = {{"x", a.pose.x}, {"y", a.pose.y}, {"z", a.pose.z}, {"yaw", a.pose.yaw}};
        json pts = json::array();
        for (const auto& p : a.cloud.points) pts.push_back({p[0], p[1], p[2], p[3]});
        ja["points"] = pts;
        agents.push_back(ja);
    }
    j["agents"] = agents;
    json gt = json::array();
    for (const auto& b : scene.gt) {
        json jb;
        jb["c"] = {b.cx, b.cy, b.cz};
        jb["s"] = {b.l, b.w, b.h};
        jb["yaw"] = b.yaw;
        jb["class"] = class_name(b.cls);
        gt.push_back(jb);
    }
    j["gt"] = gt;
    return j.dump();
}

Scene scene_from_json_line(const std::string& line, std::size_t line_number) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError("dataset line " + std::to_string(line_number) + ": " + e.what());
    }
    try {
        Scene scene;
        scene.seed = j.at("seed").get<std::uint64_t>();
        scene.ego = j.at("ego").get<std::size_t>();
        for (const auto& ja : j.at("agents")) {
            AgentObservation a;
            const auto& pose = ja.at("pose");
            a.pose = Pose(pose.at("x").get<double>(), pose.at("y").get<double>(),
                          pose.at("z").get<double>(), pose.at("yaw").get<double>());
            for (const auto& p : ja.at("points"))
                a.cloud.points.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                                          p.at(2).get<double>(), p.at(3).get<double>()});
            scene.agents.push_back(std::move(a));
        }
        for (const auto& jb : j.at("gt")) {
            const auto& c = jb.at("c");
            const auto& s = jb.at("s");
            scene.gt.emplace_back(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(),
                                  s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>(),
                                  jb.at("yaw").get<double>(),
                                  class_from_name(jb.at("class").get<std::string>()));
        }
        if (scene.ego >= scene.agents.size() && !scene.agents.empty())
            throw ParseError("dataset line " + std::to_string(line_number) + ": ego index out of range");
        return scene;
    } catch (const json::exception& e) {
        throw ParseError("dataset line " + std::to_string(line_number) + ": " + e.what());
    }
}

void write_dataset(const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& scene : scenes) out << scene_to_json_line(scene) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

std::vector<Scene> read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<Scene> scenes;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.empty()) continue;
        scenes.push_back(scene_from_json_line(line, line_number));
    }
    return scenes;
}

}  // namespace coopdet
