#include "occ4d/toyworld.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "occ4d/errors.hpp"

namespace occ4d::toyworld {

namespace {

// Road corridor geometry, in world cells.
constexpr int kRoadHalf = 2;      // |wy| <= 2 is road (5 cells wide)
constexpr int kSidewalkOut = 3;   // |wy| == 3 is sidewalk
constexpr int kBlock = 4;         // static-content block side

// toy8 label indices
constexpr uint8_t kEmpty = 0, kRoad = 1, kSidewalk = 2, kCar = 3, kBuilding = 4,
                  kVegetation = 5;

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t hash_coords(uint64_t seed, uint64_t tag, int64_t a, int64_t b) {
    uint64_t h = mix64(seed ^ (tag * 0x9e3779b97f4a7c15ULL));
    h = mix64(h ^ static_cast<uint64_t>(a) * 0xff51afd7ed558ccdULL);
    h = mix64(h ^ static_cast<uint64_t>(b) * 0xc4ceb9fe1a85ec53ULL);
    return h;
}

double unit_real(uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

int64_t floor_div(int64_t a, int64_t b) {
    int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

int nearest_cell(double meters, double cell) {
    return static_cast<int>(std::floor(meters / cell + 0.5));
}

struct StaticBlock {
    bool building = false;
    bool vegetation = false;
    int height = 0;  // occupied depth cells starting at d = 0
};

// Block content is a pure function of (seed, block coords, density).
StaticBlock block_content(const WorldConfig& cfg, int64_t bx, int64_t by, double p_obstacle) {
    StaticBlock blk;
    const int64_t y0 = by * kBlock, y1 = by * kBlock + kBlock - 1;
    const bool clear_of_road = (y0 > kSidewalkOut) || (y1 < -kSidewalkOut);
    if (!clear_of_road) return blk;
    const uint64_t h = hash_coords(cfg.seed, 1, bx, by);
    const double r = unit_real(h);
    if (r < 0.6 * p_obstacle) {
        blk.building = true;
        blk.height = 2 + static_cast<int>((h >> 20) % std::max(1, cfg.dims.D - 2));
        blk.height = std::min(blk.height, cfg.dims.D);
    } else if (r < p_obstacle) {
        blk.vegetation = true;
        blk.height = 1 + static_cast<int>((h >> 24) % 2);
        blk.height = std::min(blk.height, cfg.dims.D);
    }
    return blk;
}

uint8_t static_label(const WorldConfig& cfg, int64_t wx, int64_t wy, int d, double p_obstacle) {
    if (d == 0) {
        const int64_t ay = wy < 0 ? -wy : wy;
        if (ay <= kRoadHalf) return kRoad;
        if (ay == kSidewalkOut) return kSidewalk;
    }
    const int64_t bx = floor_div(wx, kBlock), by = floor_div(wy, kBlock);
    const StaticBlock blk = block_content(cfg, bx, by, p_obstacle);
    if (blk.height == 0 || d >= blk.height) return kEmpty;
    const int64_t lx = wx - bx * kBlock, ly = wy - by * kBlock;
    if (blk.building && lx >= 1 && lx <= 2 && ly >= 1 && ly <= 2) return kBuilding;
    if (blk.vegetation && lx >= 1 && lx <= 2 && ly >= 1 && ly <= 2) return kVegetation;
    return kEmpty;
}

struct DynamicCar {
    double x0 = 0.0;   // meters, world frame at t = 0
    double vx = 0.0;   // meters per frame, world frame
    int lane_y = 0;    // low wy of the 2-cell-wide car
};

DynamicCar car_params(const WorldConfig& cfg, int i) {
    DynamicCar car;
    const uint64_t h = hash_coords(cfg.seed, 2, i, 0);
    const double span = cfg.dims.H * cfg.cell_size;
    car.x0 = -span + unit_real(h) * 3.0 * span;
    const bool right_lane = (h >> 13) & 1;
    // two-way road: right lane drives +x, left lane -x
    car.lane_y = right_lane ? -2 : 1;
    const double speed = cfg.cell_size * (1.0 + unit_real(mix64(h)) * 2.0);
    car.vx = right_lane ? speed : -speed;
    return car;
}

}  // namespace

TrajectoryKind TrajectoryKind::straight(double speed) {
    return {TrajectoryKindTag::straight, speed, 0.0, 0.0};
}
TrajectoryKind TrajectoryKind::turn_right(double speed, double yaw_rate) {
    return {TrajectoryKindTag::turn_right, speed, yaw_rate, 0.0};
}
TrajectoryKind TrajectoryKind::motionless() { return {TrajectoryKindTag::motionless, 0, 0, 0}; }
TrajectoryKind TrajectoryKind::accelerate(double a0, double rate) {
    return {TrajectoryKindTag::accelerate, a0, 0.0, rate};
}

std::string TrajectoryKind::name() const {
    switch (tag) {
        case TrajectoryKindTag::straight: return "straight";
        case TrajectoryKindTag::turn_right: return "turn_right";
        case TrajectoryKindTag::motionless: return "motionless";
        case TrajectoryKindTag::accelerate: return "accelerate";
    }
    return "unknown";
}

TrajectoryKind TrajectoryKind::parse(const std::string& name, double speed, double yaw_rate,
                                     double accel) {
    if (name == "straight") return straight(speed);
    if (name == "turn_right") return turn_right(speed, yaw_rate);
    if (name == "motionless") return motionless();
    if (name == "accelerate") return accelerate(speed, accel);
    throw ConfigError("unknown trajectory kind: " + name);
}

core::Trajectory make_trajectory(const TrajectoryKind& kind, int T, double dt) {
    if (T < 2) throw ConfigError("trajectory needs T >= 2");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("trajectory dt must be positive");
    if (!std::isfinite(kind.speed) || !std::isfinite(kind.yaw_rate) || !std::isfinite(kind.accel))
        throw ConfigError("trajectory parameters must be finite");

    core::Trajectory traj;
    traj.positions.reserve(T);
    switch (kind.tag) {
        case TrajectoryKindTag::motionless:
            traj.positions.assign(T, {0.0, 0.0});
            break;
        case TrajectoryKindTag::straight:
            for (int t = 0; t < T; ++t) traj.positions.push_back({kind.speed * t * dt, 0.0});
            break;
        case TrajectoryKindTag::accelerate:
            for (int t = 0; t < T; ++t) {
                const double s = t * dt;
                traj.positions.push_back({kind.speed * s + 0.5 * kind.accel * s * s, 0.0});
            }
            break;
        case TrajectoryKindTag::turn_right: {
            double x = 0.0, y = 0.0;
            traj.positions.push_back({0.0, 0.0});
            for (int t = 0; t + 1 < T; ++t) {
                const double theta = -kind.yaw_rate * t * dt;
                x += kind.speed * dt * std::cos(theta);
                y += kind.speed * dt * std::sin(theta);
                traj.positions.push_back({x, y});
            }
            break;
        }
    }
    return traj;
}

core::OccupancySequence generate_scene(const WorldConfig& cfg, const core::Trajectory& traj) {
    const core::GridDims& d = cfg.dims;
    if (static_cast<int>(traj.size()) != d.T)
        throw DataError("trajectory length does not match cfg.T");
    if (!traj.all_finite()) throw DataError("trajectory has non-finite coordinates");
    if (d.T < 2 || !(cfg.cell_size > 0.0)) throw ConfigError("invalid world config");

    // obstacle probability per qualifying block, from the target count in one window
    const int qual_cols = std::max(1, (d.W / kBlock) / 2 * 2 - 2);
    const int qual_blocks = std::max(1, (d.H / kBlock) * std::max(1, qual_cols));
    const double p_obstacle =
        std::min(1.0, static_cast<double>(cfg.n_static_obstacles) / qual_blocks);

    std::vector<DynamicCar> cars;
    for (int i = 0; i < cfg.n_dynamic_cars; ++i) cars.push_back(car_params(cfg, i));

    std::vector<uint8_t> labels(d.voxels(), kEmpty);
    const double x0 = traj.positions[0][0], y0 = traj.positions[0][1];
    for (int t = 0; t < d.T; ++t) {
        // nearest-cell ego offset; the sub-cell residual is implicit in the rounding
        const int ox = nearest_cell(traj.positions[t][0] - x0, cfg.cell_size);
        const int oy = nearest_cell(traj.positions[t][1] - y0, cfg.cell_size);

        for (int h = 0; h < d.H; ++h) {
            const int64_t wx = h - d.H / 2 + ox;
            for (int w = 0; w < d.W; ++w) {
                const int64_t wy = w - d.W / 2 + oy;
                for (int dep = 0; dep < d.D; ++dep) {
                    const size_t off = ((((size_t)t * d.H + h) * d.W + w) * d.D) + dep;
                    labels[off] = static_label(cfg, wx, wy, dep, p_obstacle);
                }
            }
        }

        // dynamic cars: 4x2x1 boxes one cell above the road plane,
        // constant world-frame velocity, re-rasterized each frame
        for (const auto& car : cars) {
            const double x_m = car.x0 + car.vx * static_cast<double>(t);
            const int cx = nearest_cell(x_m, cfg.cell_size);
            for (int lx = cx - 2; lx <= cx + 1; ++lx) {
                const int h = static_cast<int>(lx - ox + d.H / 2);
                if (h < 0 || h >= d.H) continue;
                for (int ly = car.lane_y; ly < car.lane_y + 2; ++ly) {
                    const int w = static_cast<int>(ly - oy + d.W / 2);
                    if (w < 0 || w >= d.W) continue;
                    const size_t off = ((((size_t)t * d.H + h) * d.W + w) * d.D) + 1;
                    labels[off] = kCar;
                }
            }
        }
    }

    return core::OccupancySequence(d, std::move(labels), core::ClassVocabulary::toy8());
}

std::string Manifest::path() const {
    return (std::filesystem::path(dir) / "manifest.csv").string();
}

Manifest generate_dataset(const WorldConfig& cfg, const std::vector<TrajectoryKind>& kinds,
                          int clips_per_kind, double dt, const std::string& out_dir,
                          int workers) {
    std::filesystem::create_directories(out_dir);
    Manifest manifest;
    manifest.dir = out_dir;

    struct Task {
        TrajectoryKind kind;
        core::Trajectory traj;
        int within_kind;
        uint64_t seed;
    };
    std::vector<Task> tasks;
    int clip_index = 0;
    for (const auto& kind : kinds) {
        const core::Trajectory traj = make_trajectory(kind, cfg.dims.T, dt);
        for (int i = 0; i < clips_per_kind; ++i, ++clip_index)
            tasks.push_back({kind, traj, i, cfg.seed + static_cast<uint64_t>(clip_index)});
    }

    auto run_task = [&](const Task& task) {
        WorldConfig clip_cfg = cfg;
        clip_cfg.seed = task.seed;
        const core::OccupancySequence seq = generate_scene(clip_cfg, task.traj);
        char name[64];
        std::snprintf(name, sizeof(name), "clip_%s_%03d.occv", task.kind.name().c_str(),
                      task.within_kind);
        core::write_clip(seq, task.traj, (std::filesystem::path(out_dir) / name).string());
        return std::string(name);
    };

    std::vector<std::string> names(tasks.size());
    const int n_workers = std::min<int>(std::max(workers, 1), static_cast<int>(tasks.size()));
    if (n_workers <= 1) {
        for (size_t i = 0; i < tasks.size(); ++i) names[i] = run_task(tasks[i]);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < n_workers; ++w)
            pool.emplace_back([&, w]() {
                for (size_t i = w; i < tasks.size(); i += n_workers) names[i] = run_task(tasks[i]);
            });
        for (auto& t : pool) t.join();
    }
    for (size_t i = 0; i < tasks.size(); ++i)
        manifest.rows.push_back({names[i], tasks[i].kind.name(), tasks[i].seed});

    std::ofstream out(manifest.path(), std::ios::trunc);
    if (!out) throw DataError("cannot write manifest: " + manifest.path());
    out << "file,kind,seed\n";
    for (const auto& row : manifest.rows)
        out << row.file << "," << row.kind << "," << row.seed << "\n";
    return manifest;
}

Manifest read_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open manifest: " + manifest_path);
    Manifest manifest;
    manifest.dir = std::filesystem::path(manifest_path).parent_path().string();
    std::string line;
    if (!std::getline(in, line) || line != "file,kind,seed")
        throw DataError("bad manifest header in " + manifest_path);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        ManifestRow row;
        std::string seed;
        if (!std::getline(ss, row.file, ',') || !std::getline(ss, row.kind, ',') ||
            !std::getline(ss, seed))
            throw DataError("bad manifest row: " + line);
        row.seed = std::stoull(seed);
        manifest.rows.push_back(std::move(row));
    }
    return manifest;
}

}  // namespace occ4d::toyworld
