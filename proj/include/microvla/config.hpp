#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microvla/bench.hpp"
#include "microvla/policy.hpp"

namespace microvla {

// Shortest-round-trip decimal rendering (std::to_chars).
std::string format_double(double v);

// One experiment cell description plus the grid axes (`variants`, `seeds`)
// used by the ablation runner. Parsed from flat `key = value` text, one key
// per line, `#` comments.
struct RunConfig {
    std::string variant = "cascaded";
    int seed = 0;

    BenchConfig bench;

    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int n_action_queries = 8;
    int chunk_len = 4;
    int action_dim = 3;
    int pyramid_layers = 4;
    std::uint64_t pyramid_seed = 1234;
    int instr_embed_dim = 32;
    double k_frac = 0.5;
    bool use_layer_norm = true;

    int train_steps = 3000;
    int batch_size = 32;
    double lr = 2e-4;
    int warmup_steps = 100;
    double lr_final_frac = 0.1;  // cosine decay floor as a fraction of lr
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int eval_every = 250;
    int eval_episodes = 200;
    int train_episodes = 2500;
    std::uint64_t eval_seed = 777;
    int chunk_execute = 0;  // 0 executes the full chunk before re-planning
    double success_threshold = 0.8;

    std::vector<std::string> variants;
    std::vector<int> seeds{0, 1, 2, 3, 4};
    int workers = 1;

    void validate() const;
};

// Architecture presets, one per analysis/ablation row. `cascaded_focus`
// accepts a retained-token percentage suffix: cascaded_focus@25.
struct VariantSpec {
    std::string name = "cascaded";
    LayerVariant layer = LayerVariant::Cascaded;
    GateKind gate = GateKind::None;
    bool focus = false;
    double k_frac_override = -1.0;
    bool pool = false;
    bool use_visual = true;
};

VariantSpec parse_variant(const std::string& token);
std::vector<std::string> known_variants();

PolicyConfig make_policy_config(const RunConfig& rc, const VariantSpec& spec);

void apply_config_entry(RunConfig& rc, const std::string& key, const std::string& value);
RunConfig parse_run_config(const std::string& path);
RunConfig parse_run_config_text(const std::string& text);
std::string run_config_to_text(const RunConfig& rc);

}  // namespace microvla
