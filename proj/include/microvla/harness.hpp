#pragma once

#include <memory>
#include <string>
#include <vector>

#include "microvla/config.hpp"
#include "microvla/dataset.hpp"
#include "microvla/policy.hpp"

namespace microvla {

struct MetricsRow {
    std::string variant;
    int seed = 0;
    int step = 0;
    double train_loss = 0.0;
    double eval_success = 0.0;
    std::int64_t wall_ms = 0;
};

std::string metrics_csv_header();
std::string metrics_to_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& path);
// Canonical form for byte comparisons: wall-clock column dropped.
std::string strip_wall_column(const std::string& csv_text);

// Policy + trainable instruction encoder + frozen feature pyramid for one
// experiment cell.
struct PolicyBundle {
    VariantSpec spec;
    std::unique_ptr<Policy> policy;
    std::unique_ptr<InstructionEncoder> encoder;
    std::unique_ptr<FeaturePyramid> pyramid;

    std::vector<Parameter*> trainable() const;
};

PolicyBundle build_bundle(const RunConfig& rc);

ConditionPyramid encode_conditions(const FeaturePyramid& pyramid, const InstructionEncoder& encoder,
                                   const Tensor& raw_features, const std::vector<Instruction>& instructions,
                                   int grid_p);

struct RolloutResult {
    bool success = false;
    int env_steps = 0;
    std::vector<std::vector<LayerRecord>> plans;  // per policy invocation
};

RolloutResult rollout(const PolicyBundle& bundle, const GridScene& scene, const Instruction& instruction,
                      const BenchConfig& bench, int chunk_execute, bool record = false);

struct EvalResult {
    int successes = 0;
    int episodes = 0;
    double rate = 0.0;
    double stderr_ = 0.0;
};

// Fresh scenes seeded from (scene_seed, episode index); p_noise overrides the
// bench noise probability.
EvalResult evaluate_policy(const PolicyBundle& bundle, const RunConfig& rc, int n_episodes, double p_noise,
                           std::uint64_t scene_seed);

struct CellResult {
    std::string variant;
    int seed = 0;
    std::vector<MetricsRow> metrics;
    double final_success = 0.0;
    double best_success = 0.0;
    int best_step = 0;
    int steps_to_threshold = -1;  // -1: never reached
    std::int64_t wall_ms = 0;
    bool failed = false;
    std::string error;
};

// Behavior cloning on L1 chunk error with AdamW; evaluates closed-loop every
// eval_every steps and tracks the best checkpoint by success rate. Writes
// config.txt / metrics.csv / checkpoint_{best,final}.fvck when out_dir is
// non-empty.
CellResult train_cell(const RunConfig& rc, const Dataset& dataset, const std::string& out_dir = "");

// Expands variants x seeds against a shared per-seed dataset (paired
// comparisons) and writes per-cell streams plus summary.csv / cells.csv.
// A failing cell is marked failed and the rest proceed.
std::vector<CellResult> run_ablation(const RunConfig& base, const std::string& out_dir);

std::string cells_csv(const std::vector<CellResult>& cells);
std::string summary_csv(const std::vector<CellResult>& cells);

std::uint64_t dataset_seed_for(int cell_seed);

}  // namespace microvla
