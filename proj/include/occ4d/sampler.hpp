// Ancestral reverse-process sampling with configurable step counts and
// partial denoising ratios, plus the end-to-end generate pipeline
// (noise + trajectory -> tokens -> decoded occupancy).
#pragma once

#include <cstdint>
#include <vector>

#include "occ4d/core.hpp"
#include "occ4d/diffusion.hpp"
#include "occ4d/tokenizer.hpp"

namespace occ4d::sampler {

struct SamplingSpec {
    int steps_G = 100;           // must match the schedule's G
    double denoise_ratio = 1.0;  // r in (0, 1]
    uint64_t seed = 0;
    core::Trajectory trajectory;
};

struct SampleStats {
    int denoiser_evals = 0;
    // per noisy step, the smallest injected variance (per-dim when learned)
    std::vector<double> injected_variances;
};

// Runs ceil(r*G) reverse steps starting from x_G ~ N(0, I); the final executed
// step injects no noise. The result is snapped to the nearest codebook codes
// unless snap_to_codebook is false.
tok::TokenGrid sample_tokens(const SamplingSpec& spec, const diff::Denoiser& model,
                             const diff::DiffusionSchedule& sched, const nn::Tensor& codebook,
                             bool snap_to_codebook = true, SampleStats* stats = nullptr);

struct GeneratedClip {
    core::OccupancySequence seq;
    core::Trajectory traj;
};

GeneratedClip generate_clip(const SamplingSpec& spec, const tok::Tokenizer& tokenizer,
                            const diff::Denoiser& denoiser, const diff::DiffusionSchedule& sched,
                            bool snap_to_codebook = true, SampleStats* stats = nullptr);

}  // namespace occ4d::sampler
