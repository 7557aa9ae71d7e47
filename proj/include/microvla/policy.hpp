#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "microvla/attention.hpp"

namespace microvla {

struct PolicyConfig {
    int n_layers = 4;
    AttnConfig attn{64, 4};
    LayerVariant variant = LayerVariant::Cascaded;
    GateKind gate = GateKind::None;
    std::optional<FocusConfig> focus;
    int chunk_len = 4;
    int action_dim = 3;
    int n_action_queries = 8;
    int state_dim = 3;
    bool use_visual = true;
    bool use_layer_norm = true;
    bool pool_visual = false;

    int effective_grid(int grid_p) const { return pool_visual ? grid_p / 2 : grid_p; }
    void validate() const;
};

// Per-layer conditions: visual features for layers 1..L, the raw backbone
// features, and the action-query tokens, all batched [B, T, d].
struct ConditionPyramid {
    std::vector<Tensor> visual;
    Tensor visual_raw;
    std::vector<Tensor> action_queries;
    int grid_p = 0;

    int depth() const { return static_cast<int>(action_queries.size()); }
};

struct PolicyForward {
    Tensor chunk;  // [B, chunk_len, action_dim]
    std::vector<LayerRecord> records;
};

// The N-layer action policy: a learned action latent refined layer by layer
// against per-layer conditions, then decoded into a continuous action chunk.
class Policy {
public:
    Policy(const PolicyConfig& cfg, std::uint64_t seed);

    // robot_state: [B, state_dim]
    Tensor init_action_latent(const Tensor& robot_state) const;
    Tensor action_head(const Tensor& a) const;
    PolicyForward forward(const ConditionPyramid& pyramid, const Tensor& robot_state, bool record = false) const;

    std::vector<Parameter*> parameters();
    const PolicyConfig& config() const { return cfg_; }

    PolicyLayer& layer(int i) { return layers_[i]; }
    Parameter& latent_embedding() { return latent_embed_; }
    Linear& state_projection() { return state_proj_; }
    Linear& head_hidden() { return head1_; }
    Linear& head_out() { return head2_; }

    // Pyramid layer feeding policy layer t (0-based), for a depth-L pyramid.
    static int pyramid_index(int t, int n_layers, int depth);

private:
    PolicyConfig cfg_;
    Parameter latent_embed_;  // [chunk_len, d]
    Linear state_proj_;
    std::vector<PolicyLayer> layers_;
    Linear head1_, head2_;
};

// Mean over heads and queries of the visual-token attention weights, with
// each row renormalized over the visual slice first. Returns grid_p * grid_p
// values in row-major patch order.
std::vector<double> extract_attention_map(const LayerRecord& record, int grid_p, int sample = 0);

}  // namespace microvla
