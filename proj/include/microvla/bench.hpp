#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "microvla/nn.hpp"
#include "microvla/rng.hpp"
#include "microvla/tensor.hpp"

namespace microvla {

// Distractor-grid manipulation bench. Each patch feature vector is
// [color one-hot | shape one-hot | occupancy | cell-center coords | agent bit
// | noise channels].
struct BenchConfig {
    int grid_p = 8;
    int colors = 4;
    int shapes = 4;
    int distractors = 6;
    double step_max = 0.5;
    double eps_grasp = 0.25;
    int horizon = 24;
    double p_noise = 0.0;
    int noise_patches = 4;
    double noise_amp = 5.0;
    int noise_channels = 4;

    int tokens() const { return grid_p * grid_p; }
    int d_raw() const { return colors + shapes + 1 + 2 + 1 + noise_channels; }
    void validate() const;
};

struct SceneObject {
    int cell = 0;
    int color = 0;
    int shape = 0;
};

struct Instruction {
    int color = 0;
    int shape = 0;
};

struct GridScene {
    int grid_p = 8;
    std::vector<SceneObject> objects;
    int target_index = 0;
    float agent_x = 0.0f;
    float agent_y = 0.0f;
    std::vector<int> noise_cells;
    std::vector<float> noise_values;  // noise_cells.size() x noise_channels

    const SceneObject& target() const { return objects[target_index]; }
    double target_x() const { return (target().cell % grid_p) + 0.5; }
    double target_y() const { return (target().cell / grid_p) + 0.5; }
};

// Places the instructed target plus `distractors` decoys on distinct cells.
// No distractor matches the instruction on both attributes; several share one
// attribute with the target so identification needs both channels.
std::pair<GridScene, Instruction> sample_scene(Rng& rng, const BenchConfig& cfg);

// [tokens * d_raw] patch features for the given agent position.
std::vector<float> render_patch_features(const GridScene& scene, double agent_x, double agent_y,
                                         const BenchConfig& cfg);

struct Action {
    double dx = 0.0;
    double dy = 0.0;
    double grasp = -1.0;
};

class Environment {
public:
    Environment(GridScene scene, const BenchConfig& cfg);

    // Analytic oracle: step toward the target center, clamped to step_max;
    // grasp once within eps_grasp.
    Action expert_action() const;

    struct StepResult {
        bool done = false;
        bool success = false;
    };
    StepResult step(const Action& action);

    double agent_x() const { return x_; }
    double agent_y() const { return y_; }
    int t() const { return t_; }
    bool done() const { return done_; }
    bool success() const { return success_; }
    std::array<float, 3> robot_state() const;
    const GridScene& scene() const { return scene_; }
    std::vector<float> features(const BenchConfig& cfg) const {
        return render_patch_features(scene_, x_, y_, cfg);
    }

private:
    GridScene scene_;
    BenchConfig cfg_;
    double x_ = 0.0, y_ = 0.0;
    int t_ = 0;
    bool done_ = false;
    bool success_ = false;
};

struct EpisodeStep {
    std::array<float, 3> state{};        // x/P, y/P, t/horizon
    std::vector<float> features;         // tokens * d_raw
    std::vector<float> chunk;            // chunk_len * 3
};

struct Episode {
    GridScene scene;
    Instruction instruction;
    std::vector<EpisodeStep> steps;
    bool success = false;
};

// Rolls the expert through a fresh scene, recording per-step features and
// sliding expert chunks (padded past success with stay-and-grasp actions).
Episode generate_episode(std::uint64_t seed, const BenchConfig& cfg, int chunk_len);

// Frozen random feature stack standing in for per-layer backbone features:
// c0 = raw W_e + b_e, c_t = tanh(c_{t-1} W_t). Never trained.
class FeaturePyramid {
public:
    FeaturePyramid(int d_raw, int d_model, int n_layers, std::uint64_t seed);

    // raw: [B, Tv, d_raw] (or [Tv, d_raw]); returns {c0, c1, .., cL}.
    std::vector<Tensor> encode(const Tensor& raw) const;

    int n_layers() const { return static_cast<int>(layer_w_.size()); }
    int d_model() const { return embed_w_.size(1); }
    std::vector<const Tensor*> frozen_weights() const;

private:
    Tensor embed_w_, embed_b_;
    std::vector<Tensor> layer_w_;
};

// Trainable map from the (color, shape) instruction to per-layer action-query
// tokens. Sees no visual input.
class InstructionEncoder {
public:
    InstructionEncoder(int colors, int shapes, int embed_dim, int n_layers, int n_queries, int d_model,
                       std::uint64_t seed);

    // One [B, Tq, d] tensor per pyramid layer.
    std::vector<Tensor> encode(const std::vector<Instruction>& batch) const;

    std::vector<Parameter*> parameters();
    Parameter& color_embedding() { return color_embed_; }
    Parameter& shape_embedding() { return shape_embed_; }

private:
    int n_queries_;
    int d_model_;
    Parameter color_embed_, shape_embed_;
    std::vector<Linear> query_maps_;
};

}  // namespace microvla
