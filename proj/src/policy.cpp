#include "microvla/policy.hpp"

#include <cmath>
#include <stdexcept>

namespace microvla {

void PolicyConfig::validate() const {
    attn.validate();
    if (n_layers < 1) throw std::invalid_argument("PolicyConfig: n_layers must be >= 1");
    if (chunk_len < 1) throw std::invalid_argument("PolicyConfig: chunk_len must be >= 1");
    if (action_dim < 1 || n_action_queries < 1 || state_dim < 1) {
        throw std::invalid_argument("PolicyConfig: dimensions must be positive");
    }
    if (focus && variant == LayerVariant::Mixed) {
        throw std::invalid_argument("PolicyConfig: focus requires the cascaded variant");
    }
    if (pool_visual && variant != LayerVariant::Mixed) {
        throw std::invalid_argument("PolicyConfig: pooling is a mixed-attention variant");
    }
}

int Policy::pyramid_index(int t, int n_layers, int depth) {
    const double pos = static_cast<double>(t + 1) * depth / n_layers;
    int idx = static_cast<int>(std::lround(pos)) - 1;
    if (idx < 0) idx = 0;
    if (idx >= depth) idx = depth - 1;
    return idx;
}

Policy::Policy(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x90110c7ull));
    const int d = cfg_.attn.d_model;
    latent_embed_ = Parameter("latent_embed", init_tensor({cfg_.chunk_len, d}, InitKind::Normal, rng, 1.0));
    state_proj_ = Linear("state_proj", cfg_.state_dim, d, rng);
    layers_.reserve(cfg_.n_layers);
    for (int t = 0; t < cfg_.n_layers; ++t) {
        layers_.emplace_back("layer" + std::to_string(t), cfg_.variant, cfg_.attn, cfg_.gate, cfg_.focus,
                             cfg_.use_visual, cfg_.use_layer_norm, rng);
    }
    head1_ = Linear("head.hidden", d, d, rng);
    head2_ = Linear("head.out", d, cfg_.action_dim, rng, InitKind::Zero);

    std::vector<Parameter*> params = parameters();
    check_unique_names(params);
}

std::vector<Parameter*> Policy::parameters() {
    std::vector<Parameter*> out;
    out.push_back(&latent_embed_);
    state_proj_.collect(out);
    for (PolicyLayer& layer : layers_) layer.collect(out);
    head1_.collect(out);
    head2_.collect(out);
    return out;
}

Tensor Policy::init_action_latent(const Tensor& robot_state) const {
    if (robot_state.dim() != 2 || robot_state.size(1) != cfg_.state_dim) {
        throw std::invalid_argument("init_action_latent: expected [B, " + std::to_string(cfg_.state_dim) +
                                    "] robot state, got " + shape_str(robot_state.shape()));
    }
    const int B = robot_state.size(0);
    Tensor projected = reshape(state_proj_(robot_state), {B, 1, cfg_.attn.d_model});
    return add(projected, latent_embed_.value);
}

Tensor Policy::action_head(const Tensor& a) const {
    return head2_(gelu(head1_(a)));
}

PolicyForward Policy::forward(const ConditionPyramid& pyramid, const Tensor& robot_state, bool record) const {
    const int depth = pyramid.depth();
    if (depth < cfg_.n_layers) {
        throw std::invalid_argument("policy_forward: pyramid depth " + std::to_string(depth) +
                                    " is shallower than " + std::to_string(cfg_.n_layers) + " policy layers");
    }
    if (cfg_.use_visual) {
        if (static_cast<int>(pyramid.visual.size()) != depth || !pyramid.visual_raw.defined()) {
            throw std::invalid_argument("policy_forward: visual pyramid does not match action-query depth");
        }
        const int tv = pyramid.visual[0].size(1);
        if (pyramid.grid_p * pyramid.grid_p != tv) {
            throw std::invalid_argument("policy_forward: grid " + std::to_string(pyramid.grid_p) + "x" +
                                        std::to_string(pyramid.grid_p) + " does not cover " + std::to_string(tv) +
                                        " visual tokens");
        }
    }

    std::vector<Tensor> visual(cfg_.use_visual ? pyramid.visual.size() : 0);
    Tensor visual_raw;
    if (cfg_.use_visual) {
        if (cfg_.pool_visual) {
            const int p = pyramid.grid_p;
            const int d = cfg_.attn.d_model;
            auto pool_tokens = [&](const Tensor& x) {
                const int B = x.size(0);
                Tensor grid = reshape(x, {B, p, p, d});
                Tensor pooled = pool_visual_2x2(grid);
                return reshape(pooled, {B, (p / 2) * (p / 2), d});
            };
            for (size_t i = 0; i < pyramid.visual.size(); ++i) visual[i] = pool_tokens(pyramid.visual[i]);
            visual_raw = pool_tokens(pyramid.visual_raw);
        } else {
            visual = pyramid.visual;
            visual_raw = pyramid.visual_raw;
        }
    }

    PolicyForward result;
    if (record) result.records.resize(cfg_.n_layers);

    Tensor a = init_action_latent(robot_state);
    for (int t = 0; t < cfg_.n_layers; ++t) {
        const int idx = pyramid_index(t, cfg_.n_layers, depth);
        a = layers_[t].forward(a, cfg_.use_visual ? visual[idx] : Tensor{}, cfg_.use_visual ? visual_raw : Tensor{},
                               pyramid.action_queries[idx], record ? &result.records[t] : nullptr);
    }
    result.chunk = action_head(a);
    return result;
}

std::vector<double> extract_attention_map(const LayerRecord& record, int grid_p, int sample) {
    if (!record.has_visual) {
        throw std::invalid_argument("extract_attention_map: layer has no visual attention stream");
    }
    const Shape& ws = record.weights_shape;
    if (ws.size() != 4) throw std::invalid_argument("extract_attention_map: expected [B, H, Tq, Tk] weights");
    const int B = ws[0], H = ws[1], Tq = ws[2], Tk = ws[3];
    const int tv = record.visual_count;
    if (sample < 0 || sample >= B) throw std::invalid_argument("extract_attention_map: sample out of range");
    if (grid_p * grid_p != tv) {
        throw std::invalid_argument("extract_attention_map: grid " + std::to_string(grid_p) + "x" +
                                    std::to_string(grid_p) + " does not cover " + std::to_string(tv) + " tokens");
    }

    std::vector<double> map(tv, 0.0);
    const double* w = record.weights.data() + static_cast<std::int64_t>(sample) * H * Tq * Tk;
    for (int h = 0; h < H; ++h) {
        for (int q = 0; q < Tq; ++q) {
            const double* row = w + (static_cast<std::int64_t>(h) * Tq + q) * Tk + record.visual_offset;
            double rsum = 0.0;
            for (int t = 0; t < tv; ++t) rsum += row[t];
            if (rsum <= 0.0) {
                throw std::runtime_error("extract_attention_map: visual slice carries no attention mass");
            }
            const double inv = 1.0 / rsum;
            for (int t = 0; t < tv; ++t) map[t] += row[t] * inv;
        }
    }
    const double inv = 1.0 / (static_cast<double>(H) * Tq);
    for (double& v : map) v *= inv;
    return map;
}

}  // namespace microvla
