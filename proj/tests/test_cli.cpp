#include <filesystem>
#include <map>
#include <fstream>

#include "doctest.h"
#include "occ4d/cli.hpp"
#include "occ4d/errors.hpp"
#include "support.hpp"

using namespace occ4d;
namespace fs = std::filesystem;

namespace {

// a deliberately tiny pipeline so CLI paths run in seconds
std::string write_config(const std::string& dir, int clips_per_kind = 2) {
    const std::string path = dir + "/config.json";
    std::ofstream out(path);
    out << R"({
  "seed": 11,
  "world": {"dims": [4, 8, 8, 4], "cell_size": 0.5, "n_static_obstacles": 4, "n_dynamic_cars": 1},
  "trajectories": {"dt": 0.5, "clips_per_kind": )"
        << clips_per_kind << R"(, "kinds": ["straight", "motionless"]},
  "tokenizer": {"class_embed_dim": 2, "levels": 2, "latent_channels": 6, "codebook_size": 8,
                 "attn_groups": 4, "commitment_beta": 0.25, "dropout": 0.0, "dead_code_steps": 0},
  "diffusion": {"width": 8, "blocks": 1, "heads": 2, "mlp_ratio": 2, "learned_sigma": true},
  "schedule": {"steps": 5, "beta_start": 0.0001, "beta_end": 0.02},
  "optimizer": {
    "tokenizer": {"lr": 0.002, "weight_decay": 0.01, "batch_size": 2, "steps": 3, "eval_interval": 2},
    "diffusion": {"lr": 0.001, "weight_decay": 0.01, "batch_size": 2, "steps": 3, "stage_split": 0.5}
  },
  "paths": {"data_dir": ")"
        << dir << R"(/data", "checkpoint_dir": ")" << dir << R"(/ckpt", "output_dir": ")" << dir
        << R"(/out"}
})";
    return path;
}

}  // namespace

TEST_CASE("run config validation") {
    const std::string dir = test::scratch_dir("cli_cfg");

    SUBCASE("well-formed config loads") {
        const auto cfg = cli::RunConfig::load(write_config(dir));
        CHECK(cfg.seed == 11);
        CHECK(cfg.world.dims.H == 8);
        CHECK(cfg.kind_names.size() == 2);
        CHECK(cfg.denoiser_config().token_dims == std::array<int, 3>{1, 2, 2});
    }

    SUBCASE("missing seed is a config error") {
        const std::string path = dir + "/noseed.json";
        std::ofstream(path) << R"({"world": {"dims": [4,8,8,4]}})";
        CHECK_THROWS_WITH_AS(cli::RunConfig::load(path), doctest::Contains("seed"), ConfigError);
    }

    SUBCASE("indivisible dims name the offending field") {
        const std::string path = dir + "/baddims.json";
        std::ofstream(path) << R"({"seed": 1, "world": {"dims": [4, 9, 8, 4]},
            "tokenizer": {"levels": 2, "attn_groups": 4, "latent_channels": 6}})";
        CHECK_THROWS_WITH_AS(cli::RunConfig::load(path), doctest::Contains("world.dims.H"),
                             ConfigError);
    }

    SUBCASE("unknown trajectory kind is rejected") {
        const std::string path = dir + "/badkind.json";
        std::ofstream(path) << R"({"seed": 1, "world": {"dims": [4,8,8,4]},
            "tokenizer": {"levels": 2, "attn_groups": 4, "latent_channels": 6},
            "diffusion": {"width": 8, "blocks": 1, "heads": 2},
            "trajectories": {"kinds": ["zigzag"]}})";
        CHECK_THROWS_WITH_AS(cli::RunConfig::load(path), doctest::Contains("zigzag"), ConfigError);
    }

    SUBCASE("missing file is a config error") {
        CHECK_THROWS_AS(cli::RunConfig::load(dir + "/nope.json"), ConfigError);
    }
}

TEST_CASE("make-data counts clips and is deterministic") {
    const std::string dir = test::scratch_dir("cli_mkdata");
    const auto cfg = cli::RunConfig::load(write_config(dir));

    const auto res = cli::cmd_make_data(cfg);
    CHECK(res.clip_count == 4);  // 2 kinds x 2 clips
    CHECK(fs::exists(res.manifest_path));

    std::vector<std::pair<std::string, uint64_t>> hashes;
    for (const auto& e : fs::directory_iterator(dir + "/data"))
        hashes.push_back({e.path().string(), test::hash_file(e.path().string())});
    REQUIRE(hashes.size() == 5);  // 4 clips + manifest

    cli::cmd_make_data(cfg);  // rerun into the same directory
    for (const auto& [path, h] : hashes) CHECK(test::hash_file(path) == h);
}

TEST_CASE("training dry-runs execute one step and write artifacts") {
    const std::string dir = test::scratch_dir("cli_dry");
    const auto cfg = cli::RunConfig::load(write_config(dir));
    cli::cmd_make_data(cfg);

    const auto tok_res = cli::cmd_train_tokenizer(cfg, "", true);
    CHECK(tok_res.steps == 1);
    CHECK(fs::exists(tok_res.checkpoint_path));
    CHECK(fs::exists(tok_res.loss_csv_path));
    {
        std::ifstream csv(tok_res.loss_csv_path);
        std::string header;
        std::getline(csv, header);
        CHECK(header == "step,recon,codebook,commit,total");
    }

    const auto dm_res = cli::cmd_train_diffusion(cfg, tok_res.checkpoint_path, "", true);
    CHECK(dm_res.steps == 1);
    CHECK(fs::exists(dm_res.checkpoint_path));
    {
        std::ifstream csv(dm_res.loss_csv_path);
        std::string header;
        std::getline(csv, header);
        CHECK(header == "step,stage,l_simple,l_vlb,total");
    }

    // the token cache was written and is reused on a second run
    CHECK(fs::exists(dir + "/data/token_cache.otc1"));
    const uint64_t cache_hash = test::hash_file(dir + "/data/token_cache.otc1");
    cli::cmd_train_diffusion(cfg, tok_res.checkpoint_path, "", true);
    CHECK(test::hash_file(dir + "/data/token_cache.otc1") == cache_hash);
}

TEST_CASE("generate and eval run end to end on a tiny pipeline") {
    const std::string dir = test::scratch_dir("cli_gen");
    const auto cfg = cli::RunConfig::load(write_config(dir));
    cli::cmd_make_data(cfg);
    const auto tok_res = cli::cmd_train_tokenizer(cfg);
    const auto dm_res = cli::cmd_train_diffusion(cfg, tok_res.checkpoint_path);

    SUBCASE("generate by kind, deterministic, optional render") {
        cli::GenerateOptions opt;
        opt.trajectory_kind = "straight";
        opt.seed = 7;
        opt.ratio = 1.0;
        opt.out_path = dir + "/out/gen.occv";
        opt.render = true;
        const std::string p1 = cli::cmd_generate(cfg, tok_res.checkpoint_path,
                                                 dm_res.checkpoint_path, opt);
        CHECK(fs::exists(p1));
        CHECK(fs::exists(dir + "/out/gen.occv_frames/frame_0000.ppm"));
        const uint64_t h1 = test::hash_file(p1);

        opt.out_path = dir + "/out/gen2.occv";
        const std::string p2 = cli::cmd_generate(cfg, tok_res.checkpoint_path,
                                                 dm_res.checkpoint_path, opt);
        CHECK(test::hash_file(p2) == h1);  // same seed, same bytes

        const auto [seq, traj] = core::read_clip(p1);
        CHECK(seq.dims() == cfg.world.dims);
    }

    SUBCASE("generate from a trajectory file") {
        const std::string csv = dir + "/traj.csv";
        std::ofstream(csv) << "0,0\n1,0\n2,0\n3,0\n";
        cli::GenerateOptions opt;
        opt.trajectory_file = csv;
        opt.seed = 3;
        opt.out_path = dir + "/out/gen_file.occv";
        const std::string p = cli::cmd_generate(cfg, tok_res.checkpoint_path,
                                                dm_res.checkpoint_path, opt);
        const auto [seq, traj] = core::read_clip(p);
        CHECK(traj.positions[3][0] == 3.0f);

        std::ofstream(dir + "/short.csv") << "0,0\n1,0\n";
        opt.trajectory_file = dir + "/short.csv";
        CHECK_THROWS_AS(
            cli::cmd_generate(cfg, tok_res.checkpoint_path, dm_res.checkpoint_path, opt),
            DataError);
    }

    SUBCASE("generate rejects bad options") {
        cli::GenerateOptions opt;
        opt.trajectory_kind = "sideways";
        opt.seed = 1;
        opt.out_path = dir + "/out/x.occv";
        CHECK_THROWS_AS(
            cli::cmd_generate(cfg, tok_res.checkpoint_path, dm_res.checkpoint_path, opt),
            ConfigError);
        opt.trajectory_kind = "straight";
        opt.ratio = 1.5;
        CHECK_THROWS_AS(
            cli::cmd_generate(cfg, tok_res.checkpoint_path, dm_res.checkpoint_path, opt),
            ConfigError);
    }

    SUBCASE("eval writes a report with the expected keys and sweep rows") {
        cli::EvalOptions opt;
        opt.n_gen = 3;
        opt.sweep_ratios = {0.5, 1.0};
        opt.sweep_steps = {5};
        const std::string report_path =
            cli::cmd_eval(cfg, tok_res.checkpoint_path, dm_res.checkpoint_path, opt);
        std::ifstream in(report_path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        for (const char* key :
             {"\"iou\"", "\"miou\"", "\"per_class\"", "\"fid_proxy\"", "\"n_real\"", "\"n_gen\"",
              "\"sweep_ratio\"", "\"sweep_steps\""})
            CHECK(text.find(key) != std::string::npos);

        cli::EvalOptions bad;
        bad.n_gen = 1;
        CHECK_THROWS_AS(cli::cmd_eval(cfg, tok_res.checkpoint_path, dm_res.checkpoint_path, bad),
                        ConfigError);
    }

    SUBCASE("render command reproduces frames from a clip file") {
        cli::GenerateOptions opt;
        opt.trajectory_kind = "motionless";
        opt.seed = 9;
        opt.out_path = dir + "/out/r.occv";
        cli::cmd_generate(cfg, tok_res.checkpoint_path, dm_res.checkpoint_path, opt);
        const auto frames = cli::cmd_render(dir + "/out/r.occv", dir + "/out/r_frames");
        CHECK(frames.size() == 4);
        for (const auto& f : frames) CHECK(fs::exists(f));
    }
}

namespace {

// step -> total loss from a loss CSV (last column)
std::map<long long, double> read_loss_csv(const std::string& path) {
    std::ifstream in(path);
    std::map<long long, double> out;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t first = line.find(',');
        const size_t last = line.rfind(',');
        out[std::stoll(line.substr(0, first))] = std::stod(line.substr(last + 1));
    }
    return out;
}

}  // namespace

TEST_CASE("tokenizer resume continues the pre-save loss trajectory within 1e-6") {
    const std::string dir = test::scratch_dir("cli_resume");
    auto cfg = cli::RunConfig::load(write_config(dir));
    cli::cmd_make_data(cfg);

    // full short run in one go
    cfg.opt_tokenizer.steps = 6;
    const auto full = cli::cmd_train_tokenizer(cfg);
    const auto full_losses = read_loss_csv(full.loss_csv_path);

    // same run split across a save/load boundary
    const std::string dir2 = test::scratch_dir("cli_resume2");
    auto cfg2 = cli::RunConfig::load(write_config(dir2));
    cli::cmd_make_data(cfg2);
    cfg2.opt_tokenizer.steps = 3;
    const auto half = cli::cmd_train_tokenizer(cfg2);
    cfg2.opt_tokenizer.steps = 6;
    const auto resumed = cli::cmd_train_tokenizer(cfg2, half.checkpoint_path);
    CHECK(resumed.steps == 6);
    const auto resumed_losses = read_loss_csv(resumed.loss_csv_path);

    REQUIRE(resumed_losses.size() == 6);  // the csv keeps steps 1..3 and appends 4..6
    for (long long s = 1; s <= 6; ++s) {
        REQUIRE(full_losses.count(s) == 1);
        CHECK(resumed_losses.at(s) == doctest::Approx(full_losses.at(s)).epsilon(1e-6));
    }
}

TEST_CASE("run_cli maps errors to documented exit codes") {
    const std::string dir = test::scratch_dir("cli_exit");
    const std::string cfg_path = write_config(dir);

    auto run = [](std::vector<std::string> args) {
        std::vector<char*> argv;
        args.insert(args.begin(), "occ4d");
        for (auto& a : args) argv.push_back(a.data());
        return cli::run_cli(static_cast<int>(argv.size()), argv.data());
    };

    CHECK(run({"make-data", "--config", cfg_path}) == 0);
    CHECK(run({"make-data", "--config", dir + "/missing.json"}) == 2);
    CHECK(run({"train-tokenizer", "--config", cfg_path, "--resume", dir + "/nope.otk1"}) == 3);
    CHECK(run({"bogus-verb"}) == 2);

    // dims failure inside a real config file
    const std::string bad = dir + "/bad.json";
    std::ofstream(bad) << R"({"seed": 1, "world": {"dims": [4, 9, 8, 4]},
        "tokenizer": {"levels": 2, "attn_groups": 4, "latent_channels": 6}})";
    CHECK(run({"make-data", "--config", bad}) == 2);
}
