// Trajectory-conditioned diffusion transformer over flattened token grids:
// sinusoidal positional embedding, condition vector g = nu(step) + delta(traj),
// forward noising, the denoiser with per-block adaptive-normalization
// modulation (zero-initialized gates), and the L_simple / variational-bound
// training losses with an optional learned per-dim variance.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "occ4d/core.hpp"
#include "occ4d/nn/autodiff.hpp"
#include "occ4d/nn/optim.hpp"
#include "occ4d/nn/rng.hpp"

namespace occ4d::diff {

struct DiffusionSchedule {
    int G = 0;
    std::vector<double> betas_;  // betas_[g-1] is beta_g, g in [1, G]
    std::vector<double> alpha_bars_;  // alpha_bars_[g] with [0] = 1

    static DiffusionSchedule linear(int G, double beta_start = 1e-4, double beta_end = 2e-2);

    double beta(int g) const { return betas_.at(g - 1); }
    double alpha(int g) const { return 1.0 - beta(g); }
    double alpha_bar(int g) const { return alpha_bars_.at(g); }  // g in [0, G]

    // posterior q(x_{g-1} | x_g, x0): mean = coef_x0 * x0 + coef_xg * x_g
    double posterior_variance(int g) const;
    double posterior_mean_coef_x0(int g) const;
    double posterior_mean_coef_xg(int g) const;
    // ln posterior variance with the g=1 value replaced by the g=2 one
    double posterior_logvar_clipped(int g) const;

    void check_step(int g) const;
};

// x_g = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps
nn::Tensor forward_noise(const nn::Tensor& x0, const nn::Tensor& noise, double alpha_bar);
nn::Tensor forward_noise_step(const nn::Tensor& x0, int g, const nn::Tensor& noise,
                              const DiffusionSchedule& sched);

// Spec-facing positional embedding (C, M); rows 2k hold sin, 2k+1 cos.
nn::Tensor positional_embedding(int C, int M);

struct DenoiserConfig {
    int token_channels = 16;               // c
    std::array<int, 3> token_dims{2, 4, 4};  // (t', h', w')
    int traj_len = 8;                       // trajectory frames t
    int width = 128;
    int blocks = 6;
    int heads = 4;
    int mlp_ratio = 4;
    bool learned_sigma = true;
    double traj_scale = 4.0;  // meters; delta() sees (p_i - p_0) / traj_scale

    int token_cells() const { return token_dims[0] * token_dims[1] * token_dims[2]; }
    void validate() const;
};

struct DenoiserBlockParams {
    nn::NodePtr qkv_w, qkv_b, out_w, out_b;
    nn::NodePtr mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    nn::NodePtr ada_w, ada_b;  // width -> 6*width, zero-initialized
};

class Denoiser {
public:
    static Denoiser init(const DenoiserConfig& cfg, uint64_t seed);

    const DenoiserConfig& config() const { return cfg_; }
    std::vector<nn::NodePtr> parameters() const;
    nn::Tensor& positional_table() { return pos_table_; }  // (M, width), fixed buffer

    // g = nu(step) + delta(traj), shape (1, width)
    nn::NodePtr condition_graph(const core::Trajectory& traj, int step) const;
    nn::Tensor condition_vector(const core::Trajectory& traj, int step) const;

    struct Prediction {
        nn::NodePtr eps;     // (c, M)
        nn::NodePtr logvar;  // (c, M) when learned_sigma and a schedule is given
    };
    // x is the noised flat token tensor (c, M).
    Prediction predict_graph(const nn::NodePtr& x, const core::Trajectory& traj, int step,
                             const DiffusionSchedule* sched) const;
    Prediction predict(const nn::Tensor& x, const core::Trajectory& traj, int step,
                       const DiffusionSchedule* sched) const;

private:
    DenoiserConfig cfg_;
    nn::NodePtr in_w_, in_b_;
    nn::Tensor pos_table_;
    nn::NodePtr t_w1_, t_b1_, t_w2_, t_b2_;      // nu MLP over the step embedding
    nn::NodePtr traj_w1_, traj_b1_, traj_w2_, traj_b2_;  // delta MLP
    std::vector<DenoiserBlockParams> blocks_;
    nn::NodePtr final_ada_w_, final_ada_b_;  // width -> 2*width, zero-initialized
    nn::NodePtr head_w_, head_b_;            // width -> c (or 2c), zero-initialized
};

// mean of the reverse transition: (x_g - beta_g/sqrt(1-abar_g) * eps) / sqrt(alpha_g)
nn::Tensor posterior_mu_from_eps(const nn::Tensor& x_g, const nn::Tensor& eps, int g,
                                 const DiffusionSchedule& sched);

// 1/2 * mean((eps_hat - eps)^2)
nn::NodePtr loss_simple_graph(const Denoiser& model, const nn::Tensor& x0,
                              const core::Trajectory& traj, int g, const nn::Tensor& noise,
                              const DiffusionSchedule& sched);
double loss_simple(const Denoiser& model, const nn::Tensor& x0, const core::Trajectory& traj,
                   int g, const nn::Tensor& noise, const DiffusionSchedule& sched);

// Per-step variational-bound term in nats/dim: KL(q* || p_theta) for g >= 2,
// Gaussian NLL of x0 under p_theta at g = 1. The mean path is detached; only
// the variance head trains through this loss.
nn::NodePtr loss_vlb_graph(const Denoiser& model, const nn::Tensor& x0,
                           const core::Trajectory& traj, int g, const nn::Tensor& noise,
                           const DiffusionSchedule& sched);
double loss_vlb(const Denoiser& model, const nn::Tensor& x0, const core::Trajectory& traj,
                int g, const nn::Tensor& noise, const DiffusionSchedule& sched);

// closed-form diagonal-Gaussian KL per dimension
double gaussian_kl(double mu_q, double var_q, double mu_p, double var_p);

enum class TrainStage { simple, full };

struct DiffusionTrainRecord {
    long long step = 0;
    TrainStage stage = TrainStage::simple;
    double l_simple = 0, l_vlb = 0, total = 0;
};

struct TokenSample {
    nn::Tensor tokens;  // (c, M) or (c, t', h', w')
    core::Trajectory traj;
};

class DiffusionTrainer {
public:
    DiffusionTrainer(Denoiser model, DiffusionSchedule sched, double lr, double weight_decay,
                     double lambda_vlb, uint64_t seed);

    Denoiser& model() { return model_; }
    const Denoiser& model() const { return model_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    nn::AdamW& optimizer() { return opt_; }
    long long step_count() const { return step_; }

    DiffusionTrainRecord step(const std::vector<const TokenSample*>& batch, TrainStage stage);

    // ODM1 container; saving rounds the live state through float32
    void save_checkpoint(const std::string& path);
    static DiffusionTrainer load_checkpoint(const std::string& path);

private:
    Denoiser model_;
    DiffusionSchedule sched_;
    nn::AdamW opt_;
    nn::Rng rng_;
    double lambda_vlb_ = 1e-3;
    long long step_ = 0;
};

}  // namespace occ4d::diff
