// Deterministic synthetic 4D occupancy generator: an infinite procedural
// world (road corridor along +x, buildings/vegetation in blocks, dynamic
// cars) sampled through an ego-centric window that follows the trajectory.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "occ4d/core.hpp"

namespace occ4d::toyworld {

struct WorldConfig {
    core::GridDims dims{8, 16, 16, 4};
    double cell_size = 0.5;  // meters per cell
    int n_static_obstacles = 6;
    int n_dynamic_cars = 2;
    uint64_t seed = 0;
};

enum class TrajectoryKindTag { straight, turn_right, motionless, accelerate };

struct TrajectoryKind {
    TrajectoryKindTag tag = TrajectoryKindTag::motionless;
    double speed = 0.0;     // m/s (straight, turn_right) / initial speed (accelerate)
    double yaw_rate = 0.0;  // rad/s, right turn (turn_right)
    double accel = 0.0;     // m/s^2 (accelerate)

    static TrajectoryKind straight(double speed);
    static TrajectoryKind turn_right(double speed, double yaw_rate);
    static TrajectoryKind motionless();
    static TrajectoryKind accelerate(double a0, double rate);

    std::string name() const;
    static TrajectoryKind parse(const std::string& name, double speed, double yaw_rate,
                                double accel);
};

// positions[0] = (0,0). straight: x = speed*t*dt. accelerate:
// x = a0*t*dt + 0.5*rate*(t*dt)^2. turn_right: heading is held constant within
// each frame at theta_t = -yaw_rate*t*dt and the position advances by
// speed*dt along it.
core::Trajectory make_trajectory(const TrajectoryKind& kind, int T, double dt);

// Pure function of (cfg, traj); ego fixed at the window center, world content
// shifted opposite to ego displacement (nearest cell, residual carried).
core::OccupancySequence generate_scene(const WorldConfig& cfg, const core::Trajectory& traj);

struct ManifestRow {
    std::string file;  // relative to the manifest directory
    std::string kind;
    uint64_t seed = 0;
};

struct Manifest {
    std::string dir;
    std::vector<ManifestRow> rows;
    std::string path() const;
};

// Writes clips_per_kind OCCV clips per kind (per-clip seed = cfg.seed + i with
// i the global clip index) plus a `manifest.csv` with rows `file,kind,seed`.
// Clip generation is pure per clip, so workers > 1 parallelizes it without
// changing any output byte.
Manifest generate_dataset(const WorldConfig& cfg, const std::vector<TrajectoryKind>& kinds,
                          int clips_per_kind, double dt, const std::string& out_dir,
                          int workers = 1);

Manifest read_manifest(const std::string& manifest_path);

}  // namespace occ4d::toyworld
