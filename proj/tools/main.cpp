#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "microvla/checkpoint.hpp"
#include "microvla/harness.hpp"
#include "microvla/heatmap.hpp"

namespace fs = std::filesystem;
using namespace microvla;

namespace {

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) {
        RunConfig rc;
        rc.validate();
        return rc;
    }
    return parse_run_config(path);
}

// The checkpoint format stores parameters only; the resolved run config is
// written next to it by `train`.
RunConfig config_for_checkpoint(const std::string& ckpt_path, const std::string& explicit_config) {
    if (!explicit_config.empty()) return parse_run_config(explicit_config);
    const fs::path sibling = fs::path(ckpt_path).parent_path() / "config.txt";
    if (!fs::exists(sibling)) {
        throw std::runtime_error("no config found: pass --config or keep config.txt next to the checkpoint");
    }
    return parse_run_config(sibling.string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy vision-language-action policy bench"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, ckpt_path, grid_path;
    int seed = 0;
    int episodes = 200;
    double noise = -1.0;
    bool has_seed_flag = false;

    auto* gen = app.add_subcommand("gen", "generate an expert demonstration dataset");
    gen->add_option("--config", config_path, "run config file");
    gen->add_option("--seed", seed, "dataset seed")->required();
    gen->add_option("--out", out_path, "output dataset path")->required();

    auto* train = app.add_subcommand("train", "behavior-clone one policy variant");
    train->add_option("--config", config_path, "run config file");
    train->add_option("--data", data_path, "dataset path")->required();
    train->add_option("--out", out_path, "output directory")->required();
    train->add_flag_callback("--quiet", [] {});
    auto* train_seed = train->add_option("--seed", seed, "override the config seed");

    auto* eval = app.add_subcommand("eval", "closed-loop success rate of a checkpoint");
    eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    eval->add_option("--episodes", episodes, "number of evaluation episodes")->required();
    eval->add_option("--noise", noise, "noise-injection probability override");
    eval->add_option("--config", config_path, "run config (default: config.txt beside the checkpoint)");

    auto* ablate = app.add_subcommand("ablate", "run a variants x seeds ablation grid");
    ablate->add_option("--grid", grid_path, "grid config file")->required();
    ablate->add_option("--out", out_path, "output directory")->required();

    auto* attnmap = app.add_subcommand("attnmap", "dump attention heatmaps for one scene");
    attnmap->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    attnmap->add_option("--seed", seed, "scene seed")->required();
    attnmap->add_option("--out", out_path, "output directory")->required();
    attnmap->add_option("--config", config_path, "run config (default: config.txt beside the checkpoint)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            RunConfig rc = load_config_or_default(config_path);
            Dataset ds = generate_dataset(rc.bench, rc.chunk_len, rc.train_episodes, dataset_seed_for(seed));
            save_dataset(out_path, ds);
            std::cout << "wrote " << ds.episodes.size() << " episodes (" << ds.total_steps() << " steps) to "
                      << out_path << "\n";
        } else if (train->parsed()) {
            RunConfig rc = load_config_or_default(config_path);
            if (train_seed->count()) rc.seed = seed;
            has_seed_flag = train_seed->count() > 0;
            (void)has_seed_flag;
            Dataset ds = load_dataset(data_path);
            CellResult cell = train_cell(rc, ds, out_path);
            std::cout << "variant=" << cell.variant << " seed=" << cell.seed
                      << " final_success=" << format_double(cell.final_success)
                      << " best_success=" << format_double(cell.best_success) << " best_step=" << cell.best_step
                      << " steps_to_threshold=" << cell.steps_to_threshold << " wall_ms=" << cell.wall_ms << "\n";
        } else if (eval->parsed()) {
            RunConfig rc = config_for_checkpoint(ckpt_path, config_path);
            PolicyBundle bundle = build_bundle(rc);
            load_checkpoint(ckpt_path, bundle.trainable());
            const double p_noise = noise >= 0.0 ? noise : rc.bench.p_noise;
            EvalResult ev = evaluate_policy(bundle, rc, episodes, p_noise, rc.eval_seed);
            std::cout << "success_rate=" << format_double(ev.rate) << " stderr=" << format_double(ev.stderr_)
                      << " (" << ev.successes << "/" << ev.episodes << ")\n";
        } else if (ablate->parsed()) {
            RunConfig base = parse_run_config(grid_path);
            std::vector<CellResult> cells = run_ablation(base, out_path);
            std::cout << summary_csv(cells);
            for (const CellResult& c : cells) {
                if (c.failed) std::cerr << "cell " << c.variant << "_s" << c.seed << " failed: " << c.error << "\n";
            }
        } else if (attnmap->parsed()) {
            RunConfig rc = config_for_checkpoint(ckpt_path, config_path);
            PolicyBundle bundle = build_bundle(rc);
            load_checkpoint(ckpt_path, bundle.trainable());
            const int written = dump_attention(bundle, rc, static_cast<std::uint64_t>(seed), out_path);
            std::cout << "wrote " << written << " heatmaps to " << out_path << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
