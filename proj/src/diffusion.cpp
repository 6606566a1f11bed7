#include "occ4d/diffusion.hpp"

#include <cmath>

#include "json.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/nn/checkpoint.hpp"

namespace occ4d::diff {

using nn::NodePtr;
using nn::Rng;
using nn::Tensor;

DiffusionSchedule DiffusionSchedule::linear(int G, double beta_start, double beta_end) {
    if (G < 1) throw ConfigError("schedule: G must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ConfigError("schedule: betas must satisfy 0 < start <= end < 1");
    DiffusionSchedule s;
    s.G = G;
    s.betas_.resize(G);
    for (int g = 1; g <= G; ++g)
        s.betas_[g - 1] =
            G == 1 ? beta_end
                   : beta_start + (beta_end - beta_start) * static_cast<double>(g - 1) / (G - 1);
    s.alpha_bars_.resize(G + 1);
    s.alpha_bars_[0] = 1.0;
    for (int g = 1; g <= G; ++g) s.alpha_bars_[g] = s.alpha_bars_[g - 1] * (1.0 - s.betas_[g - 1]);
    return s;
}

void DiffusionSchedule::check_step(int g) const {
    if (g < 1 || g > G)
        throw NumericError("diffusion step " + std::to_string(g) + " outside [1, " +
                           std::to_string(G) + "]");
}

double DiffusionSchedule::posterior_variance(int g) const {
    check_step(g);
    return (1.0 - alpha_bar(g - 1)) / (1.0 - alpha_bar(g)) * beta(g);
}

double DiffusionSchedule::posterior_mean_coef_x0(int g) const {
    check_step(g);
    return std::sqrt(alpha_bar(g - 1)) * beta(g) / (1.0 - alpha_bar(g));
}

double DiffusionSchedule::posterior_mean_coef_xg(int g) const {
    check_step(g);
    return std::sqrt(alpha(g)) * (1.0 - alpha_bar(g - 1)) / (1.0 - alpha_bar(g));
}

double DiffusionSchedule::posterior_logvar_clipped(int g) const {
    check_step(g);
    if (G == 1) return std::log(beta(1));
    return std::log(posterior_variance(std::max(g, 2)));
}

Tensor forward_noise(const Tensor& x0, const Tensor& noise, double alpha_bar) {
    if (!x0.same_shape(noise)) throw DataError("forward_noise: noise shape mismatch");
    const double a = std::sqrt(alpha_bar);
    const double b = std::sqrt(1.0 - alpha_bar);
    Tensor out = x0;
    for (long long i = 0; i < out.numel(); ++i) out.v[i] = a * x0.v[i] + b * noise.v[i];
    return out;
}

Tensor forward_noise_step(const Tensor& x0, int g, const Tensor& noise,
                          const DiffusionSchedule& sched) {
    sched.check_step(g);
    return forward_noise(x0, noise, sched.alpha_bar(g));
}

Tensor positional_embedding(int C, int M) { return nn::sinusoidal_table(C, M); }

void DenoiserConfig::validate() const {
    if (token_channels < 1) throw ConfigError("diffusion.token_channels must be positive");
    for (int d : token_dims)
        if (d < 1) throw ConfigError("diffusion.token_dims must be positive");
    if (traj_len < 2) throw ConfigError("diffusion.traj_len must be >= 2");
    if (width < 2 || width % 2 != 0) throw ConfigError("diffusion.width must be even and >= 2");
    if (heads < 1 || width % heads != 0)
        throw ConfigError("diffusion.heads must divide diffusion.width");
    if (blocks < 1) throw ConfigError("diffusion.blocks must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("diffusion.mlp_ratio must be >= 1");
    if (!(traj_scale > 0.0)) throw ConfigError("diffusion.traj_scale must be positive");
}

namespace {

NodePtr make_weight(Rng& rng, std::vector<int> shape, double stddev, const std::string& name) {
    Tensor t(shape);
    rng.fill_normal(t.data(), t.v.size(), stddev);
    return nn::param(std::move(t), name);
}

NodePtr make_zeros(std::vector<int> shape, const std::string& name) {
    return nn::param(Tensor(std::move(shape)), name);
}

// (1, width) sinusoidal embedding of an integer step
Tensor step_embedding(int g, int width) {
    Tensor out({1, width});
    for (int k = 0; 2 * k < width; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * k) / width);
        out.v[2 * k] = std::sin(g * freq);
        out.v[2 * k + 1] = std::cos(g * freq);
    }
    return out;
}

NodePtr linear_rows(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
    return nn::add_rowvec(nn::matmul(x, w), b);
}

// h * (1 + scale) + shift, scale/shift broadcast over rows
NodePtr modulate(const NodePtr& h, const NodePtr& scale_row, const NodePtr& shift_row) {
    return nn::add_rowvec(nn::mul_rowvec(h, nn::add_scalar(scale_row, 1.0)), shift_row);
}

}  // namespace

Denoiser Denoiser::init(const DenoiserConfig& cfg, uint64_t seed) {
    cfg.validate();
    Denoiser d;
    d.cfg_ = cfg;
    Rng rng(seed);
    const int w = cfg.width;
    const int c = cfg.token_channels;
    const double in_std = std::sqrt(1.0 / c);
    const double w_std = std::sqrt(1.0 / w);

    d.in_w_ = make_weight(rng, {c, w}, in_std, "in.w");
    d.in_b_ = make_zeros({w}, "in.b");

    // transpose of the (C, M) spec table: rows are token positions
    Tensor pos = nn::sinusoidal_table(w, cfg.token_cells());
    d.pos_table_ = Tensor({cfg.token_cells(), w});
    for (int i = 0; i < cfg.token_cells(); ++i)
        for (int j = 0; j < w; ++j) d.pos_table_.v[(size_t)i * w + j] = pos.v[(size_t)j * cfg.token_cells() + i];

    d.t_w1_ = make_weight(rng, {w, w}, w_std, "tstep.w1");
    d.t_b1_ = make_zeros({w}, "tstep.b1");
    d.t_w2_ = make_weight(rng, {w, w}, w_std, "tstep.w2");
    d.t_b2_ = make_zeros({w}, "tstep.b2");

    d.traj_w1_ = make_weight(rng, {2 * cfg.traj_len, w}, std::sqrt(1.0 / (2.0 * cfg.traj_len)),
                             "traj.w1");
    d.traj_b1_ = make_zeros({w}, "traj.b1");
    d.traj_w2_ = make_weight(rng, {w, w}, w_std, "traj.w2");
    d.traj_b2_ = make_zeros({w}, "traj.b2");

    for (int bl = 0; bl < cfg.blocks; ++bl) {
        const std::string p = "block" + std::to_string(bl);
        DenoiserBlockParams b;
        b.qkv_w = make_weight(rng, {w, 3 * w}, w_std, p + ".qkv.w");
        b.qkv_b = make_zeros({3 * w}, p + ".qkv.b");
        b.out_w = make_weight(rng, {w, w}, w_std, p + ".out.w");
        b.out_b = make_zeros({w}, p + ".out.b");
        b.mlp_w1 = make_weight(rng, {w, cfg.mlp_ratio * w}, w_std, p + ".mlp.w1");
        b.mlp_b1 = make_zeros({cfg.mlp_ratio * w}, p + ".mlp.b1");
        b.mlp_w2 = make_weight(rng, {cfg.mlp_ratio * w, w},
                               std::sqrt(1.0 / (cfg.mlp_ratio * w)), p + ".mlp.w2");
        b.mlp_b2 = make_zeros({w}, p + ".mlp.b2");
        // zero-initialized modulation: every block starts as the identity
        b.ada_w = make_zeros({w, 6 * w}, p + ".ada.w");
        b.ada_b = make_zeros({6 * w}, p + ".ada.b");
        d.blocks_.push_back(std::move(b));
    }

    d.final_ada_w_ = make_zeros({w, 2 * w}, "final.ada.w");
    d.final_ada_b_ = make_zeros({2 * w}, "final.ada.b");
    const int out_ch = cfg.learned_sigma ? 2 * c : c;
    d.head_w_ = make_zeros({w, out_ch}, "head.w");
    d.head_b_ = make_zeros({out_ch}, "head.b");
    return d;
}

std::vector<NodePtr> Denoiser::parameters() const {
    std::vector<NodePtr> out{in_w_, in_b_, t_w1_, t_b1_, t_w2_, t_b2_,
                             traj_w1_, traj_b1_, traj_w2_, traj_b2_};
    for (const auto& b : blocks_)
        out.insert(out.end(), {b.qkv_w, b.qkv_b, b.out_w, b.out_b, b.mlp_w1, b.mlp_b1, b.mlp_w2,
                               b.mlp_b2, b.ada_w, b.ada_b});
    out.insert(out.end(), {final_ada_w_, final_ada_b_, head_w_, head_b_});
    return out;
}

NodePtr Denoiser::condition_graph(const core::Trajectory& traj, int step) const {
    if (static_cast<int>(traj.size()) != cfg_.traj_len)
        throw DataError("condition: trajectory length does not match configured t");
    if (!traj.all_finite()) throw DataError("condition: non-finite trajectory");

    NodePtr nu = nn::constant(step_embedding(step, cfg_.width));
    nu = nn::silu(linear_rows(nu, t_w1_, t_b1_));
    nu = linear_rows(nu, t_w2_, t_b2_);

    // relative, scale-normalized coordinates make delta translation-invariant
    Tensor flat({1, 2 * cfg_.traj_len});
    for (int i = 0; i < cfg_.traj_len; ++i) {
        flat.v[2 * i] = (traj.positions[i][0] - traj.positions[0][0]) / cfg_.traj_scale;
        flat.v[2 * i + 1] = (traj.positions[i][1] - traj.positions[0][1]) / cfg_.traj_scale;
    }
    NodePtr delta = nn::silu(linear_rows(nn::constant(std::move(flat)), traj_w1_, traj_b1_));
    delta = linear_rows(delta, traj_w2_, traj_b2_);

    return nn::add(nu, delta);
}

Tensor Denoiser::condition_vector(const core::Trajectory& traj, int step) const {
    return condition_graph(traj, step)->value;
}

Denoiser::Prediction Denoiser::predict_graph(const NodePtr& x, const core::Trajectory& traj,
                                             int step, const DiffusionSchedule* sched) const {
    const int c = cfg_.token_channels;
    const int M = cfg_.token_cells();
    if (x->value.rank() != 2 || x->value.shape[0] != c || x->value.shape[1] != M)
        throw DataError("denoise: input must be (c, M) = (" + std::to_string(c) + ", " +
                        std::to_string(M) + "), got " + x->value.shape_str());

    const int w = cfg_.width;
    const int heads = cfg_.heads;
    const int dh = w / heads;

    NodePtr cond = condition_graph(traj, step);

    NodePtr h = linear_rows(nn::transpose2(x), in_w_, in_b_);  // (M, width)
    h = nn::add(h, nn::constant(pos_table_));

    int block_index = 0;
    for (const auto& b : blocks_) {
        NodePtr ada = linear_rows(cond, b.ada_w, b.ada_b);  // (1, 6w)
        auto chunk = [&](int i) {
            return nn::reshape(nn::slice_cols(ada, i * w, (i + 1) * w), {w});
        };
        NodePtr shift_attn = chunk(0), scale_attn = chunk(1), gate_attn = chunk(2);
        NodePtr shift_mlp = chunk(3), scale_mlp = chunk(4), gate_mlp = chunk(5);

        NodePtr m = modulate(nn::layernorm_rows(h), scale_attn, shift_attn);
        NodePtr qkv = linear_rows(m, b.qkv_w, b.qkv_b);
        auto split_heads = [&](int i) {
            NodePtr part = nn::slice_cols(qkv, i * w, (i + 1) * w);
            return nn::permute3(nn::reshape(part, {M, heads, dh}), {1, 0, 2});
        };
        NodePtr q = split_heads(0), k = split_heads(1), v = split_heads(2);
        NodePtr scores = nn::scale(nn::bmm(q, nn::permute3(k, {0, 2, 1})),
                                   1.0 / std::sqrt(static_cast<double>(dh)));
        NodePtr mix = nn::bmm(nn::softmax_rows(scores), v);
        NodePtr merged = nn::reshape(nn::permute3(mix, {1, 0, 2}), {M, w});
        NodePtr attn_out = linear_rows(merged, b.out_w, b.out_b);
        h = nn::add(h, nn::mul_rowvec(attn_out, gate_attn));

        NodePtr m2 = modulate(nn::layernorm_rows(h), scale_mlp, shift_mlp);
        NodePtr f = nn::silu(linear_rows(m2, b.mlp_w1, b.mlp_b1));
        f = linear_rows(f, b.mlp_w2, b.mlp_b2);
        h = nn::add(h, nn::mul_rowvec(f, gate_mlp));

        if (!h->value.all_finite())
            throw NumericError("non-finite activations in transformer block " +
                               std::to_string(block_index));
        ++block_index;
    }

    NodePtr fada = linear_rows(cond, final_ada_w_, final_ada_b_);
    NodePtr shift_o = nn::reshape(nn::slice_cols(fada, 0, w), {w});
    NodePtr scale_o = nn::reshape(nn::slice_cols(fada, w, 2 * w), {w});
    NodePtr out = modulate(nn::layernorm_rows(h), scale_o, shift_o);
    out = linear_rows(out, head_w_, head_b_);  // (M, c) or (M, 2c)

    Prediction pred;
    pred.eps = nn::transpose2(nn::slice_cols(out, 0, c));
    if (cfg_.learned_sigma && sched != nullptr) {
        sched->check_step(step);
        NodePtr vraw = nn::transpose2(nn::slice_cols(out, c, 2 * c));
        // logvar = v*ln(beta) + (1-v)*ln(beta_tilde), the learned-covariance
        // interpolation; v = 0 at init gives the posterior variance
        const double lb = std::log(sched->beta(step));
        const double lbt = sched->posterior_logvar_clipped(step);
        pred.logvar = nn::add_scalar(nn::scale(vraw, lb - lbt), lbt);
    }
    return pred;
}

Denoiser::Prediction Denoiser::predict(const Tensor& x, const core::Trajectory& traj, int step,
                                       const DiffusionSchedule* sched) const {
    return predict_graph(nn::constant(x), traj, step, sched);
}

Tensor posterior_mu_from_eps(const Tensor& x_g, const Tensor& eps, int g,
                             const DiffusionSchedule& sched) {
    sched.check_step(g);
    const double coef = sched.beta(g) / std::sqrt(1.0 - sched.alpha_bar(g));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(g));
    Tensor mu = x_g;
    for (long long i = 0; i < mu.numel(); ++i)
        mu.v[i] = (x_g.v[i] - coef * eps.v[i]) * inv_sqrt_alpha;
    return mu;
}

NodePtr loss_simple_graph(const Denoiser& model, const Tensor& x0, const core::Trajectory& traj,
                          int g, const Tensor& noise, const DiffusionSchedule& sched) {
    const Tensor x_g = forward_noise_step(x0, g, noise, sched);
    auto pred = model.predict_graph(nn::constant(x_g), traj, g, &sched);
    return nn::scale(nn::mse(pred.eps, nn::constant(noise)), 0.5);
}

double loss_simple(const Denoiser& model, const Tensor& x0, const core::Trajectory& traj, int g,
                   const Tensor& noise, const DiffusionSchedule& sched) {
    return loss_simple_graph(model, x0, traj, g, noise, sched)->value.v[0];
}

namespace {

NodePtr vlb_term_from_prediction(const Denoiser::Prediction& pred, const Tensor& x0,
                                 const Tensor& x_g, int g, const DiffusionSchedule& sched) {
    if (!pred.logvar)
        throw ConfigError("loss_vlb requires learned_sigma = true");

    // variance-only training: the mean path is detached
    const Tensor mu_p = posterior_mu_from_eps(x_g, pred.eps->value, g, sched);
    NodePtr logvar = pred.logvar;

    if (g == 1) {
        // Gaussian NLL of x0 under p_theta
        Tensor sq(x0.shape);
        for (long long i = 0; i < sq.numel(); ++i) {
            const double d = x0.v[i] - mu_p.v[i];
            sq.v[i] = d * d;
        }
        NodePtr t1 = nn::add_scalar(logvar, std::log(2.0 * 3.14159265358979323846));
        NodePtr t2 = nn::mul(nn::constant(std::move(sq)), nn::exp_ew(nn::scale(logvar, -1.0)));
        return nn::scale(nn::mean_all(nn::add(t1, t2)), 0.5);
    }

    const double var_q = sched.posterior_variance(g);
    const double c0 = sched.posterior_mean_coef_x0(g);
    const double cg = sched.posterior_mean_coef_xg(g);
    Tensor gap(x0.shape);
    for (long long i = 0; i < gap.numel(); ++i) {
        const double mu_q = c0 * x0.v[i] + cg * x_g.v[i];
        const double d = mu_q - mu_p.v[i];
        gap.v[i] = var_q + d * d;
    }
    // KL = 1/2 (logvar_p - ln var_q + (var_q + gap^2)/var_p - 1) per dim
    NodePtr a = nn::add_scalar(logvar, -std::log(var_q) - 1.0);
    NodePtr b = nn::mul(nn::constant(std::move(gap)), nn::exp_ew(nn::scale(logvar, -1.0)));
    return nn::scale(nn::mean_all(nn::add(a, b)), 0.5);
}

}  // namespace

NodePtr loss_vlb_graph(const Denoiser& model, const Tensor& x0, const core::Trajectory& traj,
                       int g, const Tensor& noise, const DiffusionSchedule& sched) {
    const Tensor x_g = forward_noise_step(x0, g, noise, sched);
    auto pred = model.predict_graph(nn::constant(x_g), traj, g, &sched);
    return vlb_term_from_prediction(pred, x0, x_g, g, sched);
}

double loss_vlb(const Denoiser& model, const Tensor& x0, const core::Trajectory& traj, int g,
                const Tensor& noise, const DiffusionSchedule& sched) {
    return loss_vlb_graph(model, x0, traj, g, noise, sched)->value.v[0];
}

double gaussian_kl(double mu_q, double var_q, double mu_p, double var_p) {
    const double d = mu_q - mu_p;
    return 0.5 * (std::log(var_p / var_q) + (var_q + d * d) / var_p - 1.0);
}

// ------------------------------------------------------------------ trainer

DiffusionTrainer::DiffusionTrainer(Denoiser model, DiffusionSchedule sched, double lr,
                                   double weight_decay, double lambda_vlb, uint64_t seed)
    : model_(std::move(model)), sched_(std::move(sched)), rng_(seed), lambda_vlb_(lambda_vlb) {
    opt_.lr = lr;
    opt_.weight_decay = weight_decay;
    opt_.init(model_.parameters());
}

DiffusionTrainRecord DiffusionTrainer::step(const std::vector<const TokenSample*>& batch,
                                            TrainStage stage) {
    if (batch.empty()) throw DataError("diffusion train step: empty batch");
    const auto params = model_.parameters();
    nn::zero_grads(params);

    const int c = model_.config().token_channels;
    const int M = model_.config().token_cells();

    NodePtr total;
    DiffusionTrainRecord rec;
    for (const auto* item : batch) {
        Tensor x0 = item->tokens;
        if (x0.numel() != (long long)c * M)
            throw DataError("diffusion train step: token grid size mismatch");
        x0.shape = {c, M};

        const int g = 1 + static_cast<int>(rng_.uniform_index(sched_.G));
        Tensor noise(x0.shape);
        rng_.fill_normal(noise.data(), noise.v.size());

        const Tensor x_g = forward_noise_step(x0, g, noise, sched_);
        auto pred = model_.predict_graph(nn::constant(x_g), item->traj, g, &sched_);
        NodePtr simple = nn::scale(nn::mse(pred.eps, nn::constant(noise)), 0.5);
        rec.l_simple += simple->value.v[0];

        NodePtr item_loss = simple;
        if (stage == TrainStage::full) {
            NodePtr vlb = vlb_term_from_prediction(pred, x0, x_g, g, sched_);
            rec.l_vlb += vlb->value.v[0];
            item_loss = nn::add(simple, nn::scale(vlb, lambda_vlb_));
        }
        total = total ? nn::add(total, item_loss) : item_loss;
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    total = nn::scale(total, inv_b);
    rec.l_simple *= inv_b;
    rec.l_vlb *= inv_b;
    rec.total = total->value.v[0];
    rec.stage = stage;
    if (!std::isfinite(rec.total)) throw NumericError("diffusion loss is non-finite");

    nn::backward(total);
    opt_.step(params);
    ++step_;
    rec.step = step_;
    return rec;
}

namespace {

nlohmann::json denoiser_config_to_json(const DenoiserConfig& c) {
    return {{"token_channels", c.token_channels},
            {"token_dims", {c.token_dims[0], c.token_dims[1], c.token_dims[2]}},
            {"traj_len", c.traj_len},
            {"width", c.width},
            {"blocks", c.blocks},
            {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},
            {"learned_sigma", c.learned_sigma},
            {"traj_scale", c.traj_scale}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.token_channels = j.at("token_channels");
    c.token_dims = {j.at("token_dims")[0], j.at("token_dims")[1], j.at("token_dims")[2]};
    c.traj_len = j.at("traj_len");
    c.width = j.at("width");
    c.blocks = j.at("blocks");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.learned_sigma = j.at("learned_sigma");
    c.traj_scale = j.at("traj_scale");
    return c;
}

}  // namespace

void DiffusionTrainer::save_checkpoint(const std::string& path) {
    nn::CheckpointData data;
    nlohmann::json j;
    j["denoiser"] = denoiser_config_to_json(model_.config());
    j["schedule"] = {{"G", sched_.G},
                     {"beta_start", sched_.betas_.front()},
                     {"beta_end", sched_.betas_.back()}};
    j["lr"] = opt_.lr;
    j["weight_decay"] = opt_.weight_decay;
    j["lambda_vlb"] = lambda_vlb_;
    j["step"] = step_;
    j["opt_step"] = opt_.step_count();
    data.config_json = j.dump();
    data.rng_state = rng_.serialize();

    const auto params = model_.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        nn::round_to_f32(params[i]->value);
        data.tensors.push_back({params[i]->name, params[i]->value});
    }
    for (size_t i = 0; i < params.size(); ++i) {
        nn::round_to_f32(opt_.moments_m()[i]);
        nn::round_to_f32(opt_.moments_v()[i]);
        data.tensors.push_back({"opt.m." + params[i]->name, opt_.moments_m()[i]});
        data.tensors.push_back({"opt.v." + params[i]->name, opt_.moments_v()[i]});
    }
    nn::write_checkpoint(path, "ODM1", data);
}

DiffusionTrainer DiffusionTrainer::load_checkpoint(const std::string& path) {
    nn::CheckpointData data = nn::read_checkpoint(path, "ODM1");
    nlohmann::json j = nlohmann::json::parse(data.config_json);
    DenoiserConfig cfg = denoiser_config_from_json(j.at("denoiser"));
    DiffusionSchedule sched = DiffusionSchedule::linear(
        j.at("schedule").at("G"), j.at("schedule").at("beta_start"),
        j.at("schedule").at("beta_end"));

    DiffusionTrainer trainer(Denoiser::init(cfg, 0), std::move(sched), j.at("lr"),
                             j.at("weight_decay"), j.at("lambda_vlb"), 0);
    trainer.step_ = j.at("step");
    trainer.opt_.set_step_count(j.at("opt_step"));
    if (!trainer.rng_.deserialize(data.rng_state.data(), data.rng_state.size()))
        throw DataError("bad RNG state in checkpoint " + path);

    auto params = trainer.model_.parameters();
    auto find = [&data, &path](const std::string& name) -> const Tensor& {
        for (const auto& nt : data.tensors)
            if (nt.name == name) return nt.t;
        throw DataError("checkpoint " + path + " is missing tensor " + name);
    };
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = find(params[i]->name);
        if (!(t.shape == params[i]->value.shape))
            throw DataError("checkpoint tensor shape mismatch for " + params[i]->name);
        params[i]->value = t;
        const Tensor& m = find("opt.m." + params[i]->name);
        const Tensor& v = find("opt.v." + params[i]->name);
        if (!(m.shape == t.shape) || !(v.shape == t.shape))
            throw DataError("checkpoint moment shape mismatch for " + params[i]->name);
        trainer.opt_.moments_m()[i] = m;
        trainer.opt_.moments_v()[i] = v;
    }
    return trainer;
}

}  // namespace occ4d::diff
