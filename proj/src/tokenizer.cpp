#include "occ4d/tokenizer.hpp"

#include <cmath>

#include "json.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/nn/checkpoint.hpp"

namespace occ4d::tok {

using nn::NodePtr;
using nn::Rng;
using nn::Tensor;

std::array<int, 3> TokenizerConfig::encoded_cells(const std::array<int, 3>& thw, int levels) {
    std::array<int, 3> out = thw;
    for (auto& d : out) d >>= levels;
    return out;
}

void TokenizerConfig::validate(const core::GridDims& dims) const {
    const int div = 1 << levels;
    auto check_div = [&](int v, const char* field) {
        if (v % div != 0)
            throw ConfigError(std::string("tokenizer: ") + field + "=" + std::to_string(v) +
                              " is not divisible by 2^levels=" + std::to_string(div));
        if (v / div < 1)
            throw ConfigError(std::string("tokenizer: ") + field + " collapses to zero cells");
    };
    check_div(dims.T, "world.dims.T");
    check_div(dims.H, "world.dims.H");
    check_div(dims.W, "world.dims.W");
    if (dims.D != grid_depth) throw ConfigError("tokenizer.grid_depth must equal world.dims.D");
    if (latent_channels < 1) throw ConfigError("tokenizer.latent_channels must be positive");
    if (codebook_size < 2) throw ConfigError("tokenizer.codebook_size must be >= 2");
    if (class_embed_dim < 1) throw ConfigError("tokenizer.class_embed_dim must be positive");
    if (deep_channels() % attn_groups != 0)
        throw ConfigError("tokenizer.attn_groups must divide the deepest channel count");
}

double compression_ratio(const std::array<int, 3>& input_thw,
                         const std::array<int, 3>& token_thw) {
    long long num = 1, den = 1;
    for (int i = 0; i < 3; ++i) {
        if (input_thw[i] <= 0 || token_thw[i] <= 0)
            throw ConfigError("compression_ratio: dims must be positive");
        num *= input_thw[i];
        den *= token_thw[i];
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

namespace {

NodePtr make_weight(Rng& rng, std::vector<int> shape, double stddev, const std::string& name) {
    Tensor t(shape);
    rng.fill_normal(t.data(), t.v.size(), stddev);
    return nn::param(std::move(t), name);
}

NodePtr make_bias(std::vector<int> shape, const std::string& name) {
    return nn::param(Tensor(std::move(shape)), name);
}

NodePtr res_block(const NodePtr& x, const ResBlockParams& p) {
    NodePtr h = nn::conv3d(x, p.w1, p.b1, 1);
    h = nn::silu(h);
    h = nn::conv3d(h, p.w2, p.b2, 1);
    return nn::add(x, h);
}

NodePtr maybe_dropout(const NodePtr& x, double rate, bool training, Rng* rng) {
    if (!training || rate <= 0.0 || rng == nullptr) return x;
    return nn::dropout(x, rate, *rng);
}

std::vector<int> labels_as_int(const core::OccupancySequence& seq) {
    std::vector<int> out(seq.labels().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = seq.labels()[i];
    return out;
}

}  // namespace

Tokenizer Tokenizer::init(const TokenizerConfig& cfg, uint64_t seed) {
    Tokenizer t;
    t.cfg_ = cfg;
    Rng rng(seed);

    t.class_embed_ = make_weight(rng, {cfg.num_classes, cfg.class_embed_dim}, 1.0, "class_embed");

    int ch = cfg.base_channels();
    for (int l = 0; l < cfg.levels; ++l) {
        const int out_ch = ch * 2;
        ConvStage s;
        const std::string p = "enc" + std::to_string(l);
        s.w = make_weight(rng, {out_ch, ch, 3, 3, 3}, std::sqrt(2.0 / (ch * 27.0)), p + ".down.w");
        s.b = make_bias({out_ch}, p + ".down.b");
        s.res.w1 = make_weight(rng, {out_ch, out_ch, 3, 3, 3}, std::sqrt(2.0 / (out_ch * 27.0)),
                               p + ".res.w1");
        s.res.b1 = make_bias({out_ch}, p + ".res.b1");
        s.res.w2 = make_weight(rng, {out_ch, out_ch, 3, 3, 3}, std::sqrt(2.0 / (out_ch * 27.0)),
                               p + ".res.w2");
        s.res.b2 = make_bias({out_ch}, p + ".res.b2");
        t.enc_.push_back(std::move(s));
        ch = out_ch;
    }

    const int deep = cfg.deep_channels();
    const int dg = deep / cfg.attn_groups;
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(dg));
    t.enc_attn_ = {make_weight(rng, {dg, dg}, attn_std, "enc.attn.wq"),
                   make_weight(rng, {dg, dg}, attn_std, "enc.attn.wk"),
                   make_weight(rng, {dg, dg}, attn_std, "enc.attn.wv"),
                   make_weight(rng, {dg, dg}, attn_std, "enc.attn.wo")};

    t.enc_proj_w_ = make_weight(rng, {cfg.latent_channels, deep}, std::sqrt(1.0 / deep),
                                "enc.proj.w");
    t.enc_proj_b_ = make_bias({cfg.latent_channels}, "enc.proj.b");

    t.codebook_ = make_weight(rng, {cfg.codebook_size, cfg.latent_channels}, 1.0, "codebook");

    t.dec_proj_w_ = make_weight(rng, {deep, cfg.latent_channels},
                                std::sqrt(1.0 / cfg.latent_channels), "dec.proj.w");
    t.dec_proj_b_ = make_bias({deep}, "dec.proj.b");
    t.dec_attn_ = {make_weight(rng, {dg, dg}, attn_std, "dec.attn.wq"),
                   make_weight(rng, {dg, dg}, attn_std, "dec.attn.wk"),
                   make_weight(rng, {dg, dg}, attn_std, "dec.attn.wv"),
                   make_weight(rng, {dg, dg}, attn_std, "dec.attn.wo")};

    ch = deep;
    for (int l = 0; l < cfg.levels; ++l) {
        const int out_ch = ch / 2;
        ConvStage s;
        const std::string p = "dec" + std::to_string(l);
        s.w = make_weight(rng, {ch, out_ch, 3, 3, 3}, std::sqrt(2.0 / (ch * 27.0)), p + ".up.w");
        s.b = make_bias({out_ch}, p + ".up.b");
        s.res.w1 = make_weight(rng, {out_ch, out_ch, 3, 3, 3}, std::sqrt(2.0 / (out_ch * 27.0)),
                               p + ".res.w1");
        s.res.b1 = make_bias({out_ch}, p + ".res.b1");
        s.res.w2 = make_weight(rng, {out_ch, out_ch, 3, 3, 3}, std::sqrt(2.0 / (out_ch * 27.0)),
                               p + ".res.w2");
        s.res.b2 = make_bias({out_ch}, p + ".res.b2");
        t.dec_.push_back(std::move(s));
        ch = out_ch;
    }

    t.head_w_ = make_weight(rng, {cfg.grid_depth * cfg.num_classes, cfg.base_channels()},
                            std::sqrt(1.0 / cfg.base_channels()), "head.w");
    t.head_b_ = make_bias({cfg.grid_depth * cfg.num_classes}, "head.b");

    t.usage_counts_.assign(cfg.codebook_size, 0);
    t.steps_since_use_.assign(cfg.codebook_size, 0);
    return t;
}

std::vector<NodePtr> Tokenizer::parameters() const {
    std::vector<NodePtr> out{class_embed_};
    auto push_stage = [&out](const ConvStage& s) {
        out.insert(out.end(), {s.w, s.b, s.res.w1, s.res.b1, s.res.w2, s.res.b2});
    };
    for (const auto& s : enc_) push_stage(s);
    out.insert(out.end(), {enc_attn_.wq, enc_attn_.wk, enc_attn_.wv, enc_attn_.wo});
    out.insert(out.end(), {enc_proj_w_, enc_proj_b_, codebook_, dec_proj_w_, dec_proj_b_});
    out.insert(out.end(), {dec_attn_.wq, dec_attn_.wk, dec_attn_.wv, dec_attn_.wo});
    for (const auto& s : dec_) push_stage(s);
    out.insert(out.end(), {head_w_, head_b_});
    return out;
}

NodePtr Tokenizer::embed_categories(const core::OccupancySequence& seq) const {
    const auto& d = seq.dims();
    if (seq.vocab().size() != cfg_.num_classes)
        throw DataError("tokenizer: clip vocabulary size does not match config");
    return nn::embed_grid(class_embed_, seq.labels(), d.T, d.H, d.W, d.D);
}

namespace {

// cross-channel attention: channel groups attend to each other at every
// spatio-temporal site, shared projections, residual merge
NodePtr attention_with(const NodePtr& x, const AttnParams& p, int groups) {
    const int C = x->value.shape[0];
    const long long S = x->value.numel() / C;
    const int dg = C / groups;
    auto original_shape = x->value.shape;

    NodePtr xs = nn::reshape(x, {groups, dg, static_cast<int>(S)});
    NodePtr xp = nn::permute3(xs, {2, 0, 1});  // (S, G, d)
    NodePtr q = nn::bmm_shared(xp, p.wq);
    NodePtr k = nn::bmm_shared(xp, p.wk);
    NodePtr v = nn::bmm_shared(xp, p.wv);
    NodePtr scores = nn::scale(nn::bmm(q, nn::permute3(k, {0, 2, 1})),
                               1.0 / std::sqrt(static_cast<double>(dg)));
    NodePtr mix = nn::bmm(nn::softmax_rows(scores), v);
    NodePtr o = nn::bmm_shared(mix, p.wo);
    NodePtr res = nn::add(xp, o);
    NodePtr back = nn::permute3(res, {1, 2, 0});  // (G, d, S)
    return nn::reshape(back, original_shape);
}

}  // namespace

NodePtr Tokenizer::encode_graph(const core::OccupancySequence& seq, bool training,
                                Rng* rng) const {
    cfg_.validate(seq.dims());
    NodePtr x = embed_categories(seq);
    for (const auto& s : enc_) {
        x = nn::silu(nn::conv3d(x, s.w, s.b, 2));
        x = res_block(x, s.res);
        x = maybe_dropout(x, cfg_.dropout, training, rng);
    }
    x = attention_with(x, enc_attn_, cfg_.attn_groups);
    x = maybe_dropout(x, cfg_.dropout, training, rng);

    const auto cells = TokenizerConfig::encoded_cells({seq.dims().T, seq.dims().H, seq.dims().W},
                                                      cfg_.levels);
    const int S = cells[0] * cells[1] * cells[2];
    NodePtr flat = nn::reshape(x, {cfg_.deep_channels(), S});
    NodePtr lat = nn::add_colvec(nn::matmul(enc_proj_w_, flat), enc_proj_b_);
    return nn::reshape(lat, {cfg_.latent_channels, cells[0], cells[1], cells[2]});
}

Tensor Tokenizer::encode(const core::OccupancySequence& seq) const {
    return encode_graph(seq, false, nullptr)->value;
}

TokenGrid Tokenizer::quantize(const nn::Tensor& latent) const {
    if (latent.rank() != 4 || latent.shape[0] != cfg_.latent_channels)
        throw DataError("quantize: latent must be (c, t', h', w')");
    const int S = static_cast<int>(latent.numel() / cfg_.latent_channels);
    Tensor flat = Tensor::from({cfg_.latent_channels, S}, latent.v);
    TokenGrid grid;
    grid.code_indices = nn::nearest_codes(flat, codebook_->value);
    grid.values = Tensor(latent.shape);
    const int c = cfg_.latent_channels;
    for (int s = 0; s < S; ++s) {
        const double* code = codebook_->value.data() + (size_t)grid.code_indices[s] * c;
        for (int j = 0; j < c; ++j) grid.values.v[(size_t)j * S + s] = code[j];
    }
    return grid;
}

NodePtr Tokenizer::decode_graph(const NodePtr& tokens, bool training, Rng* rng) const {
    if (tokens->value.rank() != 4 || tokens->value.shape[0] != cfg_.latent_channels)
        throw DataError("decode: tokens must be (c, t', h', w')");
    const int tc = tokens->value.shape[1], hc = tokens->value.shape[2],
              wc = tokens->value.shape[3];
    const int S = tc * hc * wc;

    NodePtr flat = nn::reshape(tokens, {cfg_.latent_channels, S});
    NodePtr x = nn::add_colvec(nn::matmul(dec_proj_w_, flat), dec_proj_b_);
    x = nn::reshape(x, {cfg_.deep_channels(), tc, hc, wc});
    x = attention_with(x, dec_attn_, cfg_.attn_groups);
    x = maybe_dropout(x, cfg_.dropout, training, rng);
    for (const auto& s : dec_) {
        x = nn::silu(nn::conv3d_transpose(x, s.w, s.b, 2));
        x = res_block(x, s.res);
        x = maybe_dropout(x, cfg_.dropout, training, rng);
    }

    const int T = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    NodePtr hf = nn::reshape(x, {cfg_.base_channels(), T * H * W});
    NodePtr logits = nn::add_colvec(nn::matmul(head_w_, hf), head_b_);
    logits = nn::reshape(logits, {cfg_.grid_depth * cfg_.num_classes, T, H, W});
    return nn::depth_unfold(logits, cfg_.grid_depth, cfg_.num_classes);
}

Tensor Tokenizer::decode(const TokenGrid& tokens) const {
    return decode_graph(nn::constant(tokens.values), false, nullptr)->value;
}

core::OccupancySequence Tokenizer::logits_to_sequence(const Tensor& logits,
                                                      const core::ClassVocabulary& vocab) const {
    if (logits.rank() != 5) throw DataError("logits must be (K, T, H, W, D)");
    const int K = logits.shape[0];
    core::GridDims d{logits.shape[1], logits.shape[2], logits.shape[3], logits.shape[4]};
    const long long V = d.voxels();
    std::vector<uint8_t> labels(V);
    for (long long v = 0; v < V; ++v) {
        int best = 0;
        double best_val = logits.v[v];
        for (int k = 1; k < K; ++k) {
            const double val = logits.v[(size_t)k * V + v];
            if (val > best_val) {  // strict > keeps the lowest index on ties
                best_val = val;
                best = k;
            }
        }
        labels[v] = static_cast<uint8_t>(best);
    }
    return core::OccupancySequence(d, std::move(labels), vocab);
}

core::OccupancySequence Tokenizer::reconstruct(const core::OccupancySequence& seq) const {
    const TokenGrid grid = quantize(encode(seq));
    return logits_to_sequence(decode(grid), seq.vocab());
}

Tokenizer::LossGraph Tokenizer::loss_graph(const core::OccupancySequence& seq, bool training,
                                           Rng* rng) const {
    LossGraph g;
    NodePtr latent4 = encode_graph(seq, training, rng);
    const int S = static_cast<int>(latent4->value.numel() / cfg_.latent_channels);
    g.latent = nn::reshape(latent4, {cfg_.latent_channels, S});

    g.values = nn::vq_straight_through(g.latent, codebook_->value, g.indices);
    NodePtr tokens = nn::reshape(g.values, latent4->value.shape);
    NodePtr logits = decode_graph(tokens, training, rng);

    const auto& d = seq.dims();
    NodePtr logits2 = nn::reshape(logits, {cfg_.num_classes, static_cast<int>(d.voxels())});
    g.recon = nn::cross_entropy_mean(logits2, labels_as_int(seq));

    NodePtr codes = nn::transpose2(nn::gather_rows(codebook_, g.indices));  // (c, S)
    g.codebook = nn::mse(nn::detach(g.latent), codes);
    g.commit = nn::scale(nn::mse(g.latent, nn::detach(codes)), cfg_.commitment_beta);

    g.total = nn::add(nn::add(g.recon, g.codebook), g.commit);
    if (!std::isfinite(g.total->value.v[0]))
        throw NumericError("tokenizer loss is non-finite");
    return g;
}

Tokenizer::LossParts Tokenizer::loss(const core::OccupancySequence& seq) const {
    const LossGraph g = loss_graph(seq, false, nullptr);
    return {g.recon->value.v[0], g.codebook->value.v[0], g.commit->value.v[0],
            g.total->value.v[0]};
}

// ----------------------------------------------------------------- trainer

TokenizerTrainer::TokenizerTrainer(Tokenizer model, double lr, double weight_decay,
                                   uint64_t seed)
    : model_(std::move(model)), rng_(seed) {
    opt_.lr = lr;
    opt_.weight_decay = weight_decay;
    opt_.init(model_.parameters());
}

TokenizerTrainRecord TokenizerTrainer::step(
    const std::vector<const core::OccupancySequence*>& batch) {
    if (batch.empty()) throw DataError("tokenizer train step: empty batch");
    const auto params = model_.parameters();
    nn::zero_grads(params);

    NodePtr total;
    TokenizerTrainRecord rec;
    std::vector<std::vector<int>> batch_indices;
    std::vector<Tensor> batch_latents;
    for (const auto* clip : batch) {
        auto g = model_.loss_graph(*clip, true, &rng_);
        rec.recon += g.recon->value.v[0];
        rec.codebook += g.codebook->value.v[0];
        rec.commit += g.commit->value.v[0];
        batch_indices.push_back(std::move(g.indices));
        batch_latents.push_back(g.latent->value);
        total = total ? nn::add(total, g.total) : g.total;
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    total = nn::scale(total, inv_b);
    rec.recon *= inv_b;
    rec.codebook *= inv_b;
    rec.commit *= inv_b;
    rec.total = total->value.v[0];

    nn::backward(total);
    opt_.step(params);
    ++step_;
    rec.step = step_;

    // usage bookkeeping and dead-code refresh
    auto& used = model_.usage_counts();
    auto& idle = model_.steps_since_use();
    std::vector<uint8_t> seen(used.size(), 0);
    for (const auto& idx : batch_indices)
        for (int i : idx) {
            ++used[i];
            seen[i] = 1;
        }
    for (size_t n = 0; n < idle.size(); ++n) idle[n] = seen[n] ? 0 : idle[n] + 1;

    const int window = model_.config().dead_code_steps;
    if (window > 0) {
        // codebook param index in parameters(): locate by name once
        NodePtr cb = model_.codebook();
        size_t cb_pos = 0;
        for (size_t i = 0; i < params.size(); ++i)
            if (params[i] == cb) cb_pos = i;
        const int c = model_.config().latent_channels;
        for (size_t n = 0; n < idle.size(); ++n) {
            if (idle[n] < window) continue;
            // reinitialize to a random encoder output from the current batch
            const auto& lat = batch_latents[rng_.uniform_index(batch_latents.size())];
            const long long S = lat.numel() / c;
            const long long s = static_cast<long long>(rng_.uniform_index(S));
            for (int j = 0; j < c; ++j) {
                cb->value.v[n * c + j] = lat.v[(size_t)j * S + s];
                opt_.moments_m()[cb_pos].v[n * c + j] = 0.0;
                opt_.moments_v()[cb_pos].v[n * c + j] = 0.0;
            }
            idle[n] = 0;
        }
    }
    return rec;
}

namespace {

nlohmann::json config_to_json(const TokenizerConfig& c) {
    return {{"num_classes", c.num_classes},
            {"grid_depth", c.grid_depth},
            {"class_embed_dim", c.class_embed_dim},
            {"levels", c.levels},
            {"latent_channels", c.latent_channels},
            {"codebook_size", c.codebook_size},
            {"attn_groups", c.attn_groups},
            {"commitment_beta", c.commitment_beta},
            {"dropout", c.dropout},
            {"dead_code_steps", c.dead_code_steps}};
}

TokenizerConfig config_from_json(const nlohmann::json& j) {
    TokenizerConfig c;
    c.num_classes = j.at("num_classes");
    c.grid_depth = j.at("grid_depth");
    c.class_embed_dim = j.at("class_embed_dim");
    c.levels = j.at("levels");
    c.latent_channels = j.at("latent_channels");
    c.codebook_size = j.at("codebook_size");
    c.attn_groups = j.at("attn_groups");
    c.commitment_beta = j.at("commitment_beta");
    c.dropout = j.at("dropout");
    c.dead_code_steps = j.at("dead_code_steps");
    return c;
}

}  // namespace

void TokenizerTrainer::save_checkpoint(const std::string& path) {
    nn::CheckpointData data;
    nlohmann::json j;
    j["tokenizer"] = config_to_json(model_.config());
    j["lr"] = opt_.lr;
    j["weight_decay"] = opt_.weight_decay;
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
    Tensor usage({model_.config().codebook_size});
    Tensor idle({model_.config().codebook_size});
    for (int n = 0; n < model_.config().codebook_size; ++n) {
        usage.v[n] = static_cast<double>(model_.usage_counts()[n]);
        idle.v[n] = static_cast<double>(model_.steps_since_use()[n]);
    }
    data.tensors.push_back({"codebook.usage", usage});
    data.tensors.push_back({"codebook.idle", idle});

    nn::write_checkpoint(path, "OTK1", data);
}

TokenizerTrainer TokenizerTrainer::load_checkpoint(const std::string& path) {
    nn::CheckpointData data = nn::read_checkpoint(path, "OTK1");
    nlohmann::json j = nlohmann::json::parse(data.config_json);
    const TokenizerConfig cfg = config_from_json(j.at("tokenizer"));

    Tokenizer model = Tokenizer::init(cfg, 0);
    TokenizerTrainer trainer(std::move(model), j.at("lr"), j.at("weight_decay"), 0);
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
    const Tensor& usage = find("codebook.usage");
    const Tensor& idle = find("codebook.idle");
    for (int n = 0; n < cfg.codebook_size; ++n) {
        trainer.model_.usage_counts()[n] = static_cast<long long>(usage.v[n]);
        trainer.model_.steps_since_use()[n] = static_cast<int>(idle.v[n]);
    }
    return trainer;
}

}  // namespace occ4d::tok
