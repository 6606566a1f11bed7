// Operator surface: one JSON config of record per experiment, plus command
// implementations for dataset generation, both training stages, generation,
// evaluation, and rendering. The occ4d binary wires these to argv.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "occ4d/core.hpp"
#include "occ4d/diffusion.hpp"
#include "occ4d/sampler.hpp"
#include "occ4d/tokenizer.hpp"
#include "occ4d/toyworld.hpp"

namespace occ4d::cli {

struct OptimSection {
    double lr = 1e-3;
    double weight_decay = 0.01;
    int batch_size = 4;
    int steps = 1000;
    int eval_interval = 200;    // tokenizer: held-out IoU/mIoU logging cadence
    double stage_split = 0.8;   // diffusion: fraction of steps on L_simple
};

struct RunConfig {
    uint64_t seed = 0;
    toyworld::WorldConfig world;

    double traj_dt = 0.5;
    int clips_per_kind = 50;
    std::vector<std::string> kind_names{"straight", "turn_right", "motionless", "accelerate"};
    double straight_speed = 2.0;
    double turn_speed = 2.0;
    double turn_yaw_rate = 0.4;
    double accel_initial_speed = 1.0;
    double accel_rate = 1.0;

    tok::TokenizerConfig tokenizer;

    int dit_width = 128;
    int dit_blocks = 6;
    int dit_heads = 4;
    int dit_mlp_ratio = 4;
    bool learned_sigma = true;
    double lambda_vlb = 1e-3;

    int schedule_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 2e-2;

    OptimSection opt_tokenizer;
    OptimSection opt_diffusion;

    std::string data_dir = "data";
    std::string checkpoint_dir = "checkpoints";
    std::string output_dir = "out";

    static RunConfig load(const std::string& path);
    void validate() const;  // throws ConfigError naming the offending field

    std::vector<toyworld::TrajectoryKind> kinds() const;
    toyworld::TrajectoryKind kind_by_name(const std::string& name) const;
    core::Trajectory trajectory_for(const std::string& kind_name) const;
    diff::DenoiserConfig denoiser_config() const;
    diff::DiffusionSchedule schedule() const;
    std::string manifest_path() const;
};

int worker_count();  // capped by OCC4D_THREADS

struct MakeDataResult {
    std::string manifest_path;
    int clip_count = 0;
};
MakeDataResult cmd_make_data(const RunConfig& cfg);

struct TrainResult {
    std::string checkpoint_path;
    std::string loss_csv_path;
    long long steps = 0;
    double final_loss = 0.0;
};
TrainResult cmd_train_tokenizer(const RunConfig& cfg, const std::string& resume_path = "",
                                bool dry_run = false);
TrainResult cmd_train_diffusion(const RunConfig& cfg, const std::string& tokenizer_ckpt,
                                const std::string& resume_path = "", bool dry_run = false);

struct GenerateOptions {
    std::string trajectory_kind;  // one of the config kinds, or
    std::string trajectory_file;  // CSV with T rows "x,y"
    int steps = 0;                // 0: use the checkpoint's schedule
    double ratio = 1.0;
    uint64_t seed = 0;
    std::string out_path;
    bool render = false;
};
std::string cmd_generate(const RunConfig& cfg, const std::string& tokenizer_ckpt,
                         const std::string& denoiser_ckpt, const GenerateOptions& opt);

struct EvalOptions {
    int n_gen = 20;
    std::string out_path;  // defaults to output_dir/metrics.json
    std::vector<double> sweep_ratios;
    std::vector<int> sweep_steps;
};
std::string cmd_eval(const RunConfig& cfg, const std::string& tokenizer_ckpt,
                     const std::string& denoiser_ckpt, const EvalOptions& opt);

std::vector<std::string> cmd_render(const std::string& clip_path, const std::string& out_dir);

// argv-level entry used by the occ4d tool; returns the process exit code
// (0 ok, 2 config error, 3 data error, 4 numerical failure)
int run_cli(int argc, char** argv);

}  // namespace occ4d::cli
