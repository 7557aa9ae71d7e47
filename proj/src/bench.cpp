#include "microvla/bench.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace microvla {

void BenchConfig::validate() const {
    if (grid_p < 2) throw std::invalid_argument("BenchConfig: grid_p must be >= 2");
    if (colors < 1 || shapes < 1) throw std::invalid_argument("BenchConfig: colors/shapes must be positive");
    if (distractors < 0) throw std::invalid_argument("BenchConfig: distractors must be >= 0");
    if (colors * shapes <= distractors) {
        throw std::invalid_argument("BenchConfig: need colors*shapes > distractors for distinct identities");
    }
    if (tokens() < distractors + 1) {
        throw std::invalid_argument("BenchConfig: grid too small for " + std::to_string(distractors + 1) +
                                    " objects");
    }
    if (step_max <= 0.0 || eps_grasp <= 0.0) throw std::invalid_argument("BenchConfig: step_max/eps_grasp > 0");
    if (horizon < 1) throw std::invalid_argument("BenchConfig: horizon must be >= 1");
    if (p_noise < 0.0 || p_noise > 1.0) throw std::invalid_argument("BenchConfig: p_noise must be in [0, 1]");
}

namespace {

// k distinct values in [0, n) by partial Fisher-Yates on the index vector.
std::vector<int> sample_distinct(Rng& rng, int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) {
        const int j = i + rng.uniform_int(n - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

template <typename T>
void shuffle_vec(Rng& rng, std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
        std::swap(v[i], v[rng.uniform_int(i + 1)]);
    }
}

}  // namespace

std::pair<GridScene, Instruction> sample_scene(Rng& rng, const BenchConfig& cfg) {
    cfg.validate();
    const int n_objects = cfg.distractors + 1;

    GridScene scene;
    scene.grid_p = cfg.grid_p;
    const std::vector<int> cells = sample_distinct(rng, cfg.tokens(), n_objects);

    const int target_color = rng.uniform_int(cfg.colors);
    const int target_shape = rng.uniform_int(cfg.shapes);

    // Distractor identities: distinct, never matching the target on both
    // attributes, biased toward sharing exactly one of them.
    std::vector<std::pair<int, int>> same_color, same_shape, others;
    for (int c = 0; c < cfg.colors; ++c) {
        for (int s = 0; s < cfg.shapes; ++s) {
            if (c == target_color && s == target_shape) continue;
            if (c == target_color) same_color.emplace_back(c, s);
            else if (s == target_shape) same_shape.emplace_back(c, s);
            else others.emplace_back(c, s);
        }
    }
    shuffle_vec(rng, same_color);
    shuffle_vec(rng, same_shape);

    std::vector<std::pair<int, int>> identities;
    const int want_color = std::min<int>({1, cfg.distractors, static_cast<int>(same_color.size())});
    for (int i = 0; i < want_color; ++i) identities.push_back(same_color[i]);
    const int want_shape =
        std::min<int>({1, cfg.distractors - want_color, static_cast<int>(same_shape.size())});
    for (int i = 0; i < want_shape; ++i) identities.push_back(same_shape[i]);

    std::vector<std::pair<int, int>> remaining(same_color.begin() + want_color, same_color.end());
    remaining.insert(remaining.end(), same_shape.begin() + want_shape, same_shape.end());
    remaining.insert(remaining.end(), others.begin(), others.end());
    shuffle_vec(rng, remaining);
    for (int i = 0; static_cast<int>(identities.size()) < cfg.distractors; ++i) {
        identities.push_back(remaining[i]);
    }
    shuffle_vec(rng, identities);

    scene.objects.reserve(n_objects);
    scene.objects.push_back({cells[0], target_color, target_shape});
    for (int i = 0; i < cfg.distractors; ++i) {
        scene.objects.push_back({cells[i + 1], identities[i].first, identities[i].second});
    }
    scene.target_index = 0;

    scene.agent_x = static_cast<float>(rng.uniform(0.0, cfg.grid_p));
    scene.agent_y = static_cast<float>(rng.uniform(0.0, cfg.grid_p));

    if (cfg.p_noise > 0.0 && rng.uniform() < cfg.p_noise) {
        std::vector<int> free_cells;
        std::vector<bool> occupied(cfg.tokens(), false);
        for (const SceneObject& o : scene.objects) occupied[o.cell] = true;
        for (int c = 0; c < cfg.tokens(); ++c) {
            if (!occupied[c]) free_cells.push_back(c);
        }
        shuffle_vec(rng, free_cells);
        const int n_noise = std::min<int>(cfg.noise_patches, static_cast<int>(free_cells.size()));
        for (int i = 0; i < n_noise; ++i) {
            scene.noise_cells.push_back(free_cells[i]);
            for (int ch = 0; ch < cfg.noise_channels; ++ch) {
                scene.noise_values.push_back(static_cast<float>(rng.uniform(-cfg.noise_amp, cfg.noise_amp)));
            }
        }
    }

    return {std::move(scene), Instruction{target_color, target_shape}};
}

std::vector<float> render_patch_features(const GridScene& scene, double agent_x, double agent_y,
                                         const BenchConfig& cfg) {
    const int p = cfg.grid_p;
    const int d = cfg.d_raw();
    std::vector<float> out(static_cast<size_t>(cfg.tokens()) * d, 0.0f);

    const int coord_off = cfg.colors + cfg.shapes + 1;
    const int agent_off = coord_off + 2;
    const int noise_off = agent_off + 1;

    for (int cell = 0; cell < cfg.tokens(); ++cell) {
        float* f = out.data() + static_cast<size_t>(cell) * d;
        f[coord_off] = static_cast<float>(((cell % p) + 0.5) / p);
        f[coord_off + 1] = static_cast<float>(((cell / p) + 0.5) / p);
    }
    for (const SceneObject& o : scene.objects) {
        float* f = out.data() + static_cast<size_t>(o.cell) * d;
        f[o.color] = 1.0f;
        f[cfg.colors + o.shape] = 1.0f;
        f[cfg.colors + cfg.shapes] = 1.0f;  // occupancy
    }
    const int ax = std::clamp(static_cast<int>(agent_x), 0, p - 1);
    const int ay = std::clamp(static_cast<int>(agent_y), 0, p - 1);
    out[static_cast<size_t>(ay * p + ax) * d + agent_off] = 1.0f;

    for (size_t i = 0; i < scene.noise_cells.size(); ++i) {
        float* f = out.data() + static_cast<size_t>(scene.noise_cells[i]) * d;
        for (int ch = 0; ch < cfg.noise_channels; ++ch) {
            f[noise_off + ch] = scene.noise_values[i * cfg.noise_channels + ch];
        }
    }
    return out;
}

Environment::Environment(GridScene scene, const BenchConfig& cfg)
    : scene_(std::move(scene)), cfg_(cfg), x_(scene_.agent_x), y_(scene_.agent_y) {}

Action Environment::expert_action() const {
    const double dx = scene_.target_x() - x_;
    const double dy = scene_.target_y() - y_;
    const double dist = std::hypot(dx, dy);
    if (dist <= cfg_.eps_grasp) return {0.0, 0.0, 1.0};
    const double clamp = std::min(1.0, cfg_.step_max / dist);
    return {dx * clamp, dy * clamp, -1.0};
}

Environment::StepResult Environment::step(const Action& action) {
    if (done_) return {true, success_};
    if (!std::isfinite(action.dx) || !std::isfinite(action.dy) || !std::isfinite(action.grasp)) {
        throw std::invalid_argument("Environment::step: non-finite action");
    }
    double dx = action.dx;
    double dy = action.dy;
    const double norm = std::hypot(dx, dy);
    if (norm > cfg_.step_max && norm > 0.0) {
        const double s = cfg_.step_max / norm;
        dx *= s;
        dy *= s;
    }
    x_ = std::clamp(x_ + dx, 0.0, cfg_.grid_p - 1e-9);
    y_ = std::clamp(y_ + dy, 0.0, cfg_.grid_p - 1e-9);
    ++t_;

    if (action.grasp > 0.0) {
        const double dist = std::hypot(scene_.target_x() - x_, scene_.target_y() - y_);
        done_ = true;
        success_ = dist <= cfg_.eps_grasp;
        return {done_, success_};
    }
    if (t_ >= cfg_.horizon) {
        done_ = true;
        success_ = false;
    }
    return {done_, success_};
}

std::array<float, 3> Environment::robot_state() const {
    return {static_cast<float>(x_ / cfg_.grid_p), static_cast<float>(y_ / cfg_.grid_p),
            static_cast<float>(static_cast<double>(t_) / cfg_.horizon)};
}

Episode generate_episode(std::uint64_t seed, const BenchConfig& cfg, int chunk_len) {
    if (chunk_len < 1) throw std::invalid_argument("generate_episode: chunk_len must be >= 1");
    Rng rng(mix_seed(seed, 0x5e9d0deull));
    auto [scene, instruction] = sample_scene(rng, cfg);

    Environment env(scene, cfg);
    std::vector<Action> actions;
    std::vector<std::array<float, 3>> states;
    std::vector<std::vector<float>> features;
    while (!env.done()) {
        states.push_back(env.robot_state());
        features.push_back(env.features(cfg));
        const Action a = env.expert_action();
        actions.push_back(a);
        env.step(a);
    }
    if (!env.success()) {
        throw std::logic_error("generate_episode: expert failed within the horizon");
    }
    for (int i = 0; i < chunk_len - 1; ++i) actions.push_back({0.0, 0.0, 1.0});

    Episode ep;
    ep.scene = std::move(scene);
    ep.instruction = instruction;
    ep.success = true;
    ep.steps.resize(states.size());
    for (size_t s = 0; s < states.size(); ++s) {
        EpisodeStep& step = ep.steps[s];
        step.state = states[s];
        step.features = std::move(features[s]);
        step.chunk.resize(static_cast<size_t>(chunk_len) * 3);
        for (int k = 0; k < chunk_len; ++k) {
            const Action& a = actions[s + k];
            step.chunk[k * 3 + 0] = static_cast<float>(a.dx);
            step.chunk[k * 3 + 1] = static_cast<float>(a.dy);
            step.chunk[k * 3 + 2] = static_cast<float>(a.grasp);
        }
    }
    return ep;
}

FeaturePyramid::FeaturePyramid(int d_raw, int d_model, int n_layers, std::uint64_t seed) {
    if (d_raw < 1 || d_model < 1 || n_layers < 1) {
        throw std::invalid_argument("FeaturePyramid: dimensions must be positive");
    }
    Rng rng(mix_seed(seed, 0xf3a7u));
    NoGradGuard frozen;
    embed_w_ = init_tensor({d_raw, d_model}, InitKind::Normal, rng, 1.0 / std::sqrt(static_cast<double>(d_raw)));
    embed_b_ = init_tensor({d_model}, InitKind::Normal, rng, 0.2);
    layer_w_.reserve(n_layers);
    // scaled random rotations: every direction survives the depth, so the
    // per-layer features stay decodable
    for (int t = 0; t < n_layers; ++t) {
        layer_w_.push_back(scale(random_orthogonal(d_model, rng), 0.9));
    }
}

std::vector<Tensor> FeaturePyramid::encode(const Tensor& raw) const {
    NoGradGuard frozen;
    std::vector<Tensor> levels;
    levels.reserve(layer_w_.size() + 1);
    levels.push_back(add(matmul(raw, embed_w_), embed_b_));
    for (const Tensor& w : layer_w_) {
        levels.push_back(tanh(matmul(levels.back(), w)));
    }
    return levels;
}

std::vector<const Tensor*> FeaturePyramid::frozen_weights() const {
    std::vector<const Tensor*> out{&embed_w_, &embed_b_};
    for (const Tensor& w : layer_w_) out.push_back(&w);
    return out;
}

InstructionEncoder::InstructionEncoder(int colors, int shapes, int embed_dim, int n_layers, int n_queries,
                                       int d_model, std::uint64_t seed)
    : n_queries_(n_queries), d_model_(d_model) {
    if (colors < 1 || shapes < 1 || embed_dim < 1 || n_layers < 1 || n_queries < 1 || d_model < 1) {
        throw std::invalid_argument("InstructionEncoder: dimensions must be positive");
    }
    Rng rng(mix_seed(seed, 0x1c0deull));
    color_embed_ = Parameter("instr.color_embed", init_tensor({colors, embed_dim}, InitKind::Normal, rng, 0.5));
    shape_embed_ = Parameter("instr.shape_embed", init_tensor({shapes, embed_dim}, InitKind::Normal, rng, 0.5));
    query_maps_.reserve(n_layers);
    for (int t = 0; t < n_layers; ++t) {
        query_maps_.emplace_back("instr.queries" + std::to_string(t), 2 * embed_dim, n_queries * d_model, rng);
    }
}

std::vector<Tensor> InstructionEncoder::encode(const std::vector<Instruction>& batch) const {
    if (batch.empty()) throw std::invalid_argument("InstructionEncoder: empty batch");
    const int B = static_cast<int>(batch.size());
    std::vector<int> color_ids(B), shape_ids(B);
    for (int i = 0; i < B; ++i) {
        color_ids[i] = batch[i].color;
        shape_ids[i] = batch[i].shape;
    }
    Tensor embedded = concat_last_dim(
        {embedding_rows(color_embed_.value, color_ids), embedding_rows(shape_embed_.value, shape_ids)});
    std::vector<Tensor> out;
    out.reserve(query_maps_.size());
    for (const Linear& map : query_maps_) {
        out.push_back(reshape(map(embedded), {B, n_queries_, d_model_}));
    }
    return out;
}

std::vector<Parameter*> InstructionEncoder::parameters() {
    std::vector<Parameter*> out{&color_embed_, &shape_embed_};
    for (Linear& map : query_maps_) map.collect(out);
    return out;
}

}  // namespace microvla
