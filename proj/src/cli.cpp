#include "occ4d/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "json.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/metrics.hpp"
#include "occ4d/nn/checkpoint.hpp"

namespace occ4d::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file for hashing: " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a(buf.data(), buf.size());
}

// batch choice is a pure function of (seed, step); resume draws the same
// batches as an uninterrupted run
nn::Rng step_batch_rng(uint64_t seed, uint64_t tag, long long step) {
    uint64_t h = seed ^ (tag * 0x9e3779b97f4a7c15ULL);
    h ^= static_cast<uint64_t>(step) * 0xff51afd7ed558ccdULL;
    return nn::Rng(h);
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
    const json j = load_json(path);
    RunConfig c;

    if (!j.contains("seed")) throw ConfigError("config missing required field: seed");
    c.seed = j.at("seed").get<uint64_t>();

    if (j.contains("world")) {
        const json& w = j.at("world");
        if (w.contains("dims")) {
            const auto dims = w.at("dims").get<std::vector<int>>();
            if (dims.size() != 4) throw ConfigError("world.dims must be [T, H, W, D]");
            c.world.dims = {dims[0], dims[1], dims[2], dims[3]};
        }
        c.world.cell_size = get_or(w, "cell_size", c.world.cell_size);
        c.world.n_static_obstacles = get_or(w, "n_static_obstacles", c.world.n_static_obstacles);
        c.world.n_dynamic_cars = get_or(w, "n_dynamic_cars", c.world.n_dynamic_cars);
    }
    c.world.seed = c.seed;

    if (j.contains("trajectories")) {
        const json& t = j.at("trajectories");
        c.traj_dt = get_or(t, "dt", c.traj_dt);
        c.clips_per_kind = get_or(t, "clips_per_kind", c.clips_per_kind);
        if (t.contains("kinds")) c.kind_names = t.at("kinds").get<std::vector<std::string>>();
        c.straight_speed = get_or(t, "straight_speed", c.straight_speed);
        c.turn_speed = get_or(t, "turn_speed", c.turn_speed);
        c.turn_yaw_rate = get_or(t, "turn_yaw_rate", c.turn_yaw_rate);
        c.accel_initial_speed = get_or(t, "accel_initial_speed", c.accel_initial_speed);
        c.accel_rate = get_or(t, "accel_rate", c.accel_rate);
    }

    if (j.contains("tokenizer")) {
        const json& t = j.at("tokenizer");
        c.tokenizer.class_embed_dim = get_or(t, "class_embed_dim", c.tokenizer.class_embed_dim);
        c.tokenizer.levels = get_or(t, "levels", c.tokenizer.levels);
        c.tokenizer.latent_channels = get_or(t, "latent_channels", c.tokenizer.latent_channels);
        c.tokenizer.codebook_size = get_or(t, "codebook_size", c.tokenizer.codebook_size);
        c.tokenizer.attn_groups = get_or(t, "attn_groups", c.tokenizer.attn_groups);
        c.tokenizer.commitment_beta = get_or(t, "commitment_beta", c.tokenizer.commitment_beta);
        c.tokenizer.dropout = get_or(t, "dropout", c.tokenizer.dropout);
        c.tokenizer.dead_code_steps = get_or(t, "dead_code_steps", c.tokenizer.dead_code_steps);
    }
    c.tokenizer.num_classes = core::ClassVocabulary::toy8().size();
    c.tokenizer.grid_depth = c.world.dims.D;

    if (j.contains("diffusion")) {
        const json& d = j.at("diffusion");
        c.dit_width = get_or(d, "width", c.dit_width);
        c.dit_blocks = get_or(d, "blocks", c.dit_blocks);
        c.dit_heads = get_or(d, "heads", c.dit_heads);
        c.dit_mlp_ratio = get_or(d, "mlp_ratio", c.dit_mlp_ratio);
        c.learned_sigma = get_or(d, "learned_sigma", c.learned_sigma);
        c.lambda_vlb = get_or(d, "lambda_vlb", c.lambda_vlb);
    }

    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        c.schedule_steps = get_or(s, "steps", c.schedule_steps);
        c.beta_start = get_or(s, "beta_start", c.beta_start);
        c.beta_end = get_or(s, "beta_end", c.beta_end);
    }

    auto read_optim = [](const json& o, OptimSection& s) {
        s.lr = get_or(o, "lr", s.lr);
        s.weight_decay = get_or(o, "weight_decay", s.weight_decay);
        s.batch_size = get_or(o, "batch_size", s.batch_size);
        s.steps = get_or(o, "steps", s.steps);
        s.eval_interval = get_or(o, "eval_interval", s.eval_interval);
        s.stage_split = get_or(o, "stage_split", s.stage_split);
    };
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        if (o.contains("tokenizer")) read_optim(o.at("tokenizer"), c.opt_tokenizer);
        if (o.contains("diffusion")) read_optim(o.at("diffusion"), c.opt_diffusion);
    }

    if (j.contains("paths")) {
        const json& p = j.at("paths");
        c.data_dir = get_or<std::string>(p, "data_dir", c.data_dir);
        c.checkpoint_dir = get_or<std::string>(p, "checkpoint_dir", c.checkpoint_dir);
        c.output_dir = get_or<std::string>(p, "output_dir", c.output_dir);
    }

    c.validate();
    return c;
}

void RunConfig::validate() const {
    tokenizer.validate(world.dims);          // names the offending dims field
    denoiser_config().validate();
    if (world.dims.T < 2) throw ConfigError("world.dims.T must be >= 2");
    if (!(world.cell_size > 0.0)) throw ConfigError("world.cell_size must be positive");
    if (!(traj_dt > 0.0)) throw ConfigError("trajectories.dt must be positive");
    if (clips_per_kind < 0) throw ConfigError("trajectories.clips_per_kind must be >= 0");
    if (kind_names.empty()) throw ConfigError("trajectories.kinds must not be empty");
    for (const auto& k : kind_names) kind_by_name(k);  // throws on unknown names
    if (schedule_steps < 1) throw ConfigError("schedule.steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ConfigError("schedule.beta_start/beta_end must satisfy 0 < start <= end < 1");
    if (opt_tokenizer.batch_size < 1 || opt_diffusion.batch_size < 1)
        throw ConfigError("optimizer.batch_size must be >= 1");
    if (opt_tokenizer.steps < 1 || opt_diffusion.steps < 1)
        throw ConfigError("optimizer.steps must be >= 1");
    if (opt_diffusion.stage_split < 0.0 || opt_diffusion.stage_split > 1.0)
        throw ConfigError("optimizer.diffusion.stage_split must be in [0, 1]");
}

std::vector<toyworld::TrajectoryKind> RunConfig::kinds() const {
    std::vector<toyworld::TrajectoryKind> out;
    for (const auto& name : kind_names) out.push_back(kind_by_name(name));
    return out;
}

toyworld::TrajectoryKind RunConfig::kind_by_name(const std::string& name) const {
    if (name == "straight") return toyworld::TrajectoryKind::straight(straight_speed);
    if (name == "turn_right") return toyworld::TrajectoryKind::turn_right(turn_speed, turn_yaw_rate);
    if (name == "motionless") return toyworld::TrajectoryKind::motionless();
    if (name == "accelerate")
        return toyworld::TrajectoryKind::accelerate(accel_initial_speed, accel_rate);
    throw ConfigError("unknown trajectory kind: " + name);
}

core::Trajectory RunConfig::trajectory_for(const std::string& kind_name) const {
    return toyworld::make_trajectory(kind_by_name(kind_name), world.dims.T, traj_dt);
}

diff::DenoiserConfig RunConfig::denoiser_config() const {
    diff::DenoiserConfig d;
    d.token_channels = tokenizer.latent_channels;
    d.token_dims = tok::TokenizerConfig::encoded_cells(
        {world.dims.T, world.dims.H, world.dims.W}, tokenizer.levels);
    d.traj_len = world.dims.T;
    d.width = dit_width;
    d.blocks = dit_blocks;
    d.heads = dit_heads;
    d.mlp_ratio = dit_mlp_ratio;
    d.learned_sigma = learned_sigma;
    d.traj_scale = 0.5 * std::max(world.dims.H, world.dims.W) * world.cell_size;
    return d;
}

diff::DiffusionSchedule RunConfig::schedule() const {
    return diff::DiffusionSchedule::linear(schedule_steps, beta_start, beta_end);
}

std::string RunConfig::manifest_path() const {
    return (fs::path(data_dir) / "manifest.csv").string();
}

int worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("OCC4D_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1) hw = std::min<unsigned>(hw, static_cast<unsigned>(cap));
    }
    return static_cast<int>(hw);
}

MakeDataResult cmd_make_data(const RunConfig& cfg) {
    const auto manifest = toyworld::generate_dataset(cfg.world, cfg.kinds(), cfg.clips_per_kind,
                                                     cfg.traj_dt, cfg.data_dir, worker_count());
    return {manifest.path(), static_cast<int>(manifest.rows.size())};
}

namespace {

std::vector<core::OccupancySequence> load_dataset(const RunConfig& cfg,
                                                  std::vector<std::string>* kinds_out = nullptr,
                                                  std::vector<core::Trajectory>* trajs = nullptr) {
    const auto manifest = toyworld::read_manifest(cfg.manifest_path());
    if (manifest.rows.empty()) throw DataError("dataset manifest is empty: " + cfg.manifest_path());
    std::vector<core::OccupancySequence> clips;
    clips.reserve(manifest.rows.size());
    for (const auto& row : manifest.rows) {
        auto [seq, traj] = core::read_clip((fs::path(manifest.dir) / row.file).string());
        clips.push_back(std::move(seq));
        if (kinds_out) kinds_out->push_back(row.kind);
        if (trajs) trajs->push_back(std::move(traj));
    }
    return clips;
}

// deterministic split: last 10% (at least 1) held out when the dataset is
// large enough to spare clips, otherwise evaluate on the training clips
void split_dataset(size_t n, std::vector<size_t>& train, std::vector<size_t>& held) {
    size_t n_held = n >= 10 ? n / 10 : 0;
    for (size_t i = 0; i < n - n_held; ++i) train.push_back(i);
    for (size_t i = n - n_held; i < n; ++i) held.push_back(i);
    if (held.empty()) held = train;
}

}  // namespace

TrainResult cmd_train_tokenizer(const RunConfig& cfg, const std::string& resume_path,
                                bool dry_run) {
    std::vector<core::OccupancySequence> clips = load_dataset(cfg);
    std::vector<size_t> train_idx, held_idx;
    split_dataset(clips.size(), train_idx, held_idx);

    std::optional<tok::TokenizerTrainer> trainer;
    if (!resume_path.empty()) {
        trainer.emplace(tok::TokenizerTrainer::load_checkpoint(resume_path));
    } else {
        trainer.emplace(tok::Tokenizer::init(cfg.tokenizer, cfg.seed),
                        cfg.opt_tokenizer.lr, cfg.opt_tokenizer.weight_decay, cfg.seed + 1);
    }

    fs::create_directories(cfg.checkpoint_dir);
    const std::string ckpt_path = (fs::path(cfg.checkpoint_dir) / "tokenizer.otk1").string();
    const std::string csv_path = (fs::path(cfg.checkpoint_dir) / "tokenizer_loss.csv").string();
    std::ofstream csv(csv_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!csv) throw DataError("cannot open loss csv: " + csv_path);
    if (resume_path.empty()) csv << "step,recon,codebook,commit,total\n";

    const long long total_steps = dry_run ? trainer->step_count() + 1 : cfg.opt_tokenizer.steps;
    tok::TokenizerTrainRecord rec;
    while (trainer->step_count() < total_steps) {
        nn::Rng batch_rng = step_batch_rng(cfg.seed, 2, trainer->step_count());
        std::vector<const core::OccupancySequence*> batch;
        for (int b = 0; b < cfg.opt_tokenizer.batch_size; ++b)
            batch.push_back(&clips[train_idx[batch_rng.uniform_index(train_idx.size())]]);
        try {
            rec = trainer->step(batch);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at tokenizer step " +
                               std::to_string(trainer->step_count() + 1));
        }
        csv << rec.step << "," << rec.recon << "," << rec.codebook << "," << rec.commit << ","
            << rec.total << "\n";

        if (cfg.opt_tokenizer.eval_interval > 0 &&
            rec.step % cfg.opt_tokenizer.eval_interval == 0) {
            double iou = 0, miou = 0;
            for (size_t i : held_idx) {
                const auto recon = trainer->model().reconstruct(clips[i]);
                iou += metrics::occupancy_iou(recon, clips[i]);
                miou += metrics::class_miou(recon, clips[i]).miou;
            }
            const double inv = 1.0 / static_cast<double>(held_idx.size());
            std::cout << "[tokenizer] step " << rec.step << " total " << rec.total
                      << " held-out iou " << iou * inv << " miou " << miou * inv << "\n";
        }
    }

    trainer->save_checkpoint(ckpt_path);
    return {ckpt_path, csv_path, trainer->step_count(), rec.total};
}

namespace {

struct TokenCache {
    std::vector<diff::TokenSample> samples;
    std::vector<std::string> kinds;
};

std::string token_cache_path(const RunConfig& cfg) {
    return (fs::path(cfg.data_dir) / "token_cache.otc1").string();
}

uint64_t tokenizer_compat_hash(const RunConfig& cfg, const std::string& tokenizer_ckpt) {
    const json tj = {{"levels", cfg.tokenizer.levels},
                     {"latent_channels", cfg.tokenizer.latent_channels},
                     {"class_embed_dim", cfg.tokenizer.class_embed_dim},
                     {"codebook_size", cfg.tokenizer.codebook_size},
                     {"dims", {cfg.world.dims.T, cfg.world.dims.H, cfg.world.dims.W,
                               cfg.world.dims.D}}};
    const std::string s = tj.dump();
    return fnv1a(s.data(), s.size(), file_hash(tokenizer_ckpt));
}

TokenCache build_or_load_token_cache(const RunConfig& cfg, const tok::Tokenizer& tokenizer,
                                     const std::string& tokenizer_ckpt) {
    const std::string path = token_cache_path(cfg);
    const uint64_t want_hash = tokenizer_compat_hash(cfg, tokenizer_ckpt);

    if (fs::exists(path)) {
        try {
            nn::CheckpointData data = nn::read_checkpoint(path, "OTC1");
            const json j = json::parse(data.config_json);
            if (j.at("hash").get<uint64_t>() == want_hash) {
                TokenCache cache;
                const size_t n = j.at("count").get<size_t>();
                cache.kinds = j.at("kinds").get<std::vector<std::string>>();
                for (size_t i = 0; i < n; ++i) {
                    diff::TokenSample sample;
                    sample.tokens = data.tensors.at(2 * i).t;
                    const nn::Tensor& tr = data.tensors.at(2 * i + 1).t;
                    for (int t = 0; t < tr.shape[0]; ++t)
                        sample.traj.positions.push_back(
                            {tr.v[(size_t)t * 2], tr.v[(size_t)t * 2 + 1]});
                    cache.samples.push_back(std::move(sample));
                }
                std::cout << "[diffusion] reusing token cache " << path << "\n";
                return cache;
            }
        } catch (const std::exception&) {
            // stale or unreadable cache: rebuild below
        }
    }

    std::vector<std::string> kinds;
    std::vector<core::Trajectory> trajs;
    std::vector<core::OccupancySequence> clips = load_dataset(cfg, &kinds, &trajs);

    TokenCache cache;
    cache.kinds = kinds;
    nn::CheckpointData data;
    for (size_t i = 0; i < clips.size(); ++i) {
        const tok::TokenGrid grid = tokenizer.quantize(tokenizer.encode(clips[i]));
        diff::TokenSample sample;
        sample.tokens = grid.values;
        sample.traj = trajs[i];
        data.tensors.push_back({"tokens." + std::to_string(i), grid.values});
        nn::Tensor tr({static_cast<int>(trajs[i].size()), 2});
        for (size_t t = 0; t < trajs[i].size(); ++t) {
            tr.v[t * 2] = trajs[i].positions[t][0];
            tr.v[t * 2 + 1] = trajs[i].positions[t][1];
        }
        data.tensors.push_back({"traj." + std::to_string(i), tr});
        cache.samples.push_back(std::move(sample));
    }
    const json j = {{"hash", want_hash}, {"count", cache.samples.size()}, {"kinds", cache.kinds}};
    data.config_json = j.dump();
    nn::write_checkpoint(path, "OTC1", data);

    // the cache stores float32; reload so training sees exactly the cached values
    for (size_t i = 0; i < cache.samples.size(); ++i)
        nn::round_to_f32(cache.samples[i].tokens);
    return cache;
}

}  // namespace

TrainResult cmd_train_diffusion(const RunConfig& cfg, const std::string& tokenizer_ckpt,
                                const std::string& resume_path, bool dry_run) {
    tok::TokenizerTrainer tok_trainer = tok::TokenizerTrainer::load_checkpoint(tokenizer_ckpt);
    const tok::Tokenizer& tokenizer = tok_trainer.model();
    if (tokenizer.config().latent_channels != cfg.tokenizer.latent_channels ||
        tokenizer.config().levels != cfg.tokenizer.levels)
        throw DataError("tokenizer checkpoint is incompatible with this config");

    const TokenCache cache = build_or_load_token_cache(cfg, tokenizer, tokenizer_ckpt);

    std::optional<diff::DiffusionTrainer> trainer;
    if (!resume_path.empty()) {
        trainer.emplace(diff::DiffusionTrainer::load_checkpoint(resume_path));
    } else {
        trainer.emplace(diff::Denoiser::init(cfg.denoiser_config(), cfg.seed + 10),
                        cfg.schedule(), cfg.opt_diffusion.lr, cfg.opt_diffusion.weight_decay,
                        cfg.lambda_vlb, cfg.seed + 11);
    }

    fs::create_directories(cfg.checkpoint_dir);
    const std::string ckpt_path = (fs::path(cfg.checkpoint_dir) / "diffusion.odm1").string();
    const std::string csv_path = (fs::path(cfg.checkpoint_dir) / "diffusion_loss.csv").string();
    std::ofstream csv(csv_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!csv) throw DataError("cannot open loss csv: " + csv_path);
    if (resume_path.empty()) csv << "step,stage,l_simple,l_vlb,total\n";

    const long long total_steps = dry_run ? trainer->step_count() + 1 : cfg.opt_diffusion.steps;
    const long long simple_steps =
        static_cast<long long>(cfg.opt_diffusion.stage_split * cfg.opt_diffusion.steps);
    diff::DiffusionTrainRecord rec;
    while (trainer->step_count() < total_steps) {
        nn::Rng batch_rng = step_batch_rng(cfg.seed, 12, trainer->step_count());
        std::vector<const diff::TokenSample*> batch;
        for (int b = 0; b < cfg.opt_diffusion.batch_size; ++b)
            batch.push_back(&cache.samples[batch_rng.uniform_index(cache.samples.size())]);
        const auto stage = (!cfg.learned_sigma || trainer->step_count() < simple_steps)
                               ? diff::TrainStage::simple
                               : diff::TrainStage::full;
        try {
            rec = trainer->step(batch, stage);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at diffusion step " +
                               std::to_string(trainer->step_count() + 1));
        }
        csv << rec.step << "," << (rec.stage == diff::TrainStage::simple ? "simple" : "full")
            << "," << rec.l_simple << "," << rec.l_vlb << "," << rec.total << "\n";
        if (rec.step % 500 == 0)
            std::cout << "[diffusion] step " << rec.step << " l_simple " << rec.l_simple << "\n";
    }

    trainer->save_checkpoint(ckpt_path);
    return {ckpt_path, csv_path, trainer->step_count(), rec.total};
}

namespace {

core::Trajectory trajectory_from_csv(const std::string& path, int expected_len) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open trajectory file: " + path);
    core::Trajectory traj;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) throw DataError("bad trajectory row: " + line);
        try {
            traj.positions.push_back(
                {std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
        } catch (const std::exception&) {
            throw DataError("bad trajectory row: " + line);
        }
    }
    if (static_cast<int>(traj.size()) != expected_len)
        throw DataError("trajectory file has " + std::to_string(traj.size()) + " rows, expected " +
                        std::to_string(expected_len));
    if (!traj.all_finite()) throw DataError("trajectory file has non-finite coordinates");
    return traj;
}

}  // namespace

std::string cmd_generate(const RunConfig& cfg, const std::string& tokenizer_ckpt,
                         const std::string& denoiser_ckpt, const GenerateOptions& opt) {
    if (!(opt.ratio > 0.0) || opt.ratio > 1.0)
        throw ConfigError("generate: --ratio must be in (0, 1]");

    tok::TokenizerTrainer tok_trainer = tok::TokenizerTrainer::load_checkpoint(tokenizer_ckpt);
    diff::DiffusionTrainer dm_trainer = diff::DiffusionTrainer::load_checkpoint(denoiser_ckpt);

    sampler::SamplingSpec spec;
    spec.denoise_ratio = opt.ratio;
    spec.seed = opt.seed;
    if (!opt.trajectory_file.empty())
        spec.trajectory =
            trajectory_from_csv(opt.trajectory_file, dm_trainer.model().config().traj_len);
    else if (!opt.trajectory_kind.empty())
        spec.trajectory = cfg.trajectory_for(opt.trajectory_kind);
    else
        throw ConfigError("generate: pass --trajectory <kind> or --trajectory-file <csv>");

    diff::DiffusionSchedule sched =
        opt.steps > 0 ? diff::DiffusionSchedule::linear(opt.steps, cfg.beta_start, cfg.beta_end)
                      : dm_trainer.schedule();
    spec.steps_G = sched.G;

    const auto gen = sampler::generate_clip(spec, tok_trainer.model(), dm_trainer.model(), sched);

    fs::create_directories(fs::path(opt.out_path).parent_path().empty()
                               ? "."
                               : fs::path(opt.out_path).parent_path().string());
    core::write_clip(gen.seq, gen.traj, opt.out_path);
    if (opt.render) {
        const std::string dir = opt.out_path + "_frames";
        core::render_clip_frames(gen.seq, dir);
    }
    return opt.out_path;
}

std::string cmd_eval(const RunConfig& cfg, const std::string& tokenizer_ckpt,
                     const std::string& denoiser_ckpt, const EvalOptions& opt) {
    if (opt.n_gen < 2) throw ConfigError("eval: --n-gen must be >= 2");

    tok::TokenizerTrainer tok_trainer = tok::TokenizerTrainer::load_checkpoint(tokenizer_ckpt);
    diff::DiffusionTrainer dm_trainer = diff::DiffusionTrainer::load_checkpoint(denoiser_ckpt);
    const tok::Tokenizer& tokenizer = tok_trainer.model();

    std::vector<std::string> kinds;
    std::vector<core::OccupancySequence> clips = load_dataset(cfg, &kinds);

    // reconstruction quality, averaged over clips
    double iou = 0, miou = 0;
    std::map<int, double> per_class_sum;
    std::map<int, int> per_class_n;
    for (const auto& clip : clips) {
        const auto recon = tokenizer.reconstruct(clip);
        iou += metrics::occupancy_iou(recon, clip);
        const auto mr = metrics::class_miou(recon, clip);
        miou += mr.miou;
        for (const auto& [k, v] : mr.per_class) {
            per_class_sum[k] += v;
            per_class_n[k] += 1;
        }
    }
    const double inv_clips = 1.0 / static_cast<double>(clips.size());
    iou *= inv_clips;
    miou *= inv_clips;

    // real-feature statistics from the full dataset; the extraction map runs
    // on workers, the accumulation keeps a fixed (dataset) order
    const int feat_dim = tokenizer.config().latent_channels;
    std::vector<std::vector<double>> feats(clips.size());
    const int n_workers = std::min<int>(worker_count(), static_cast<int>(clips.size()));
    if (n_workers <= 1) {
        for (size_t i = 0; i < clips.size(); ++i)
            feats[i] = metrics::extract_features(clips[i], tokenizer);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < n_workers; ++w)
            pool.emplace_back([&, w]() {
                for (size_t i = w; i < clips.size(); i += n_workers)
                    feats[i] = metrics::extract_features(clips[i], tokenizer);
            });
        for (auto& t : pool) t.join();
    }
    metrics::FeatureStats real_stats(feat_dim);
    for (const auto& f : feats) real_stats.add(f);

    // trajectories for generation are resampled from the dataset's kinds
    auto fid_at = [&](int steps, double ratio) {
        const diff::DiffusionSchedule sched =
            steps == dm_trainer.schedule().G
                ? dm_trainer.schedule()
                : diff::DiffusionSchedule::linear(steps, cfg.beta_start, cfg.beta_end);
        metrics::FeatureStats gen_stats(feat_dim);
        for (int i = 0; i < opt.n_gen; ++i) {
            sampler::SamplingSpec spec;
            spec.steps_G = sched.G;
            spec.denoise_ratio = ratio;
            spec.seed = cfg.seed + 1000 + static_cast<uint64_t>(i);
            spec.trajectory = cfg.trajectory_for(kinds[i % kinds.size()]);
            const auto gen = sampler::generate_clip(spec, tokenizer, dm_trainer.model(), sched);
            gen_stats.add(metrics::extract_features(gen.seq, tokenizer));
        }
        return metrics::fid_proxy(real_stats, gen_stats);
    };

    json report;
    report["iou"] = iou;
    report["miou"] = miou;
    json per_class = json::object();
    for (const auto& [k, sum] : per_class_sum)
        per_class[clips.front().vocab().name(k)] = sum / per_class_n[k];
    report["per_class"] = per_class;
    report["n_real"] = clips.size();
    report["n_gen"] = opt.n_gen;
    report["fid_proxy"] = fid_at(dm_trainer.schedule().G, 1.0);

    if (!opt.sweep_ratios.empty()) {
        json rows = json::array();
        for (double r : opt.sweep_ratios)
            rows.push_back({{"ratio", r}, {"fid_proxy", fid_at(dm_trainer.schedule().G, r)}});
        report["sweep_ratio"] = rows;
    }
    if (!opt.sweep_steps.empty()) {
        json rows = json::array();
        for (int s : opt.sweep_steps)
            rows.push_back({{"steps", s}, {"fid_proxy", fid_at(s, 1.0)}});
        report["sweep_steps"] = rows;
    }

    const std::string out_path =
        opt.out_path.empty() ? (fs::path(cfg.output_dir) / "metrics.json").string() : opt.out_path;
    fs::create_directories(fs::path(out_path).parent_path().empty()
                               ? "."
                               : fs::path(out_path).parent_path().string());
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw DataError("cannot write metrics report: " + out_path);
    out << report.dump(2) << "\n";
    return out_path;
}

std::vector<std::string> cmd_render(const std::string& clip_path, const std::string& out_dir) {
    auto [seq, traj] = core::read_clip(clip_path);
    return core::render_clip_frames(seq, out_dir);
}

}  // namespace occ4d::cli
