#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "occ4d/cli.hpp"
#include "occ4d/errors.hpp"

namespace occ4d::cli {

namespace {

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"occ4d: 4D occupancy tokenizer + trajectory-conditioned diffusion"};
    app.require_subcommand(1);

    std::string config_path, tokenizer_ckpt, denoiser_ckpt, resume_path;
    bool dry_run = false;

    auto* make_data = app.add_subcommand("make-data", "generate the synthetic dataset");
    make_data->add_option("--config", config_path, "run config JSON")->required();

    auto* train_tok = app.add_subcommand("train-tokenizer", "train the scene tokenizer");
    train_tok->add_option("--config", config_path)->required();
    train_tok->add_option("--resume", resume_path, "resume from an OTK1 checkpoint");
    train_tok->add_flag("--dry-run", dry_run, "validate shapes, run one step, exit");

    auto* train_dm = app.add_subcommand("train-diffusion", "train the diffusion world model");
    train_dm->add_option("--config", config_path)->required();
    train_dm->add_option("--tokenizer", tokenizer_ckpt, "OTK1 checkpoint")->required();
    train_dm->add_option("--resume", resume_path, "resume from an ODM1 checkpoint");
    train_dm->add_flag("--dry-run", dry_run);

    GenerateOptions gen_opt;
    auto* generate = app.add_subcommand("generate", "sample a clip from noise + trajectory");
    generate->add_option("--config", config_path)->required();
    generate->add_option("--tokenizer", tokenizer_ckpt)->required();
    generate->add_option("--denoiser", denoiser_ckpt)->required();
    generate->add_option("--trajectory", gen_opt.trajectory_kind, "trajectory kind name");
    generate->add_option("--trajectory-file", gen_opt.trajectory_file, "CSV with rows x,y");
    generate->add_option("--steps", gen_opt.steps, "denoising steps (0: checkpoint schedule)");
    generate->add_option("--ratio", gen_opt.ratio, "denoising ratio in (0, 1]");
    generate->add_option("--seed", gen_opt.seed)->required();
    generate->add_option("--out", gen_opt.out_path, "output OCCV path")->required();
    generate->add_flag("--render", gen_opt.render, "also write PPM frames");

    EvalOptions eval_opt;
    std::string sweep_ratio_str, sweep_steps_str;
    auto* eval = app.add_subcommand("eval", "reconstruction metrics + FID proxy");
    eval->add_option("--config", config_path)->required();
    eval->add_option("--tokenizer", tokenizer_ckpt)->required();
    eval->add_option("--denoiser", denoiser_ckpt)->required();
    eval->add_option("--n-gen", eval_opt.n_gen, "generated clips per FID row");
    eval->add_option("--out", eval_opt.out_path, "metrics report path");
    eval->add_option("--sweep-ratio", sweep_ratio_str, "comma list of denoise ratios");
    eval->add_option("--sweep-steps", sweep_steps_str, "comma list of step counts");

    std::string clip_path, render_dir;
    auto* render = app.add_subcommand("render", "render an OCCV clip to PPM frames");
    render->add_option("--clip", clip_path)->required();
    render->add_option("--out", render_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // bad flags are config errors
    }

    try {
        if (*make_data) {
            const RunConfig cfg = RunConfig::load(config_path);
            const auto res = cmd_make_data(cfg);
            std::cout << "manifest: " << res.manifest_path << "\nclips: " << res.clip_count
                      << "\n";
        } else if (*train_tok) {
            const RunConfig cfg = RunConfig::load(config_path);
            const auto res = cmd_train_tokenizer(cfg, resume_path, dry_run);
            std::cout << "checkpoint: " << res.checkpoint_path << "\nloss_csv: "
                      << res.loss_csv_path << "\n";
        } else if (*train_dm) {
            const RunConfig cfg = RunConfig::load(config_path);
            const auto res = cmd_train_diffusion(cfg, tokenizer_ckpt, resume_path, dry_run);
            std::cout << "checkpoint: " << res.checkpoint_path << "\nloss_csv: "
                      << res.loss_csv_path << "\n";
        } else if (*generate) {
            const RunConfig cfg = RunConfig::load(config_path);
            const std::string out = cmd_generate(cfg, tokenizer_ckpt, denoiser_ckpt, gen_opt);
            std::cout << "clip: " << out << "\n";
        } else if (*eval) {
            const RunConfig cfg = RunConfig::load(config_path);
            if (!sweep_ratio_str.empty()) eval_opt.sweep_ratios = parse_double_list(sweep_ratio_str);
            if (!sweep_steps_str.empty()) eval_opt.sweep_steps = parse_int_list(sweep_steps_str);
            const std::string out = cmd_eval(cfg, tokenizer_ckpt, denoiser_ckpt, eval_opt);
            std::cout << "report: " << out << "\n";
        } else if (*render) {
            const auto frames = cmd_render(clip_path, render_dir);
            std::cout << "frames: " << frames.size() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace occ4d::cli
