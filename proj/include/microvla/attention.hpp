#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "microvla/nn.hpp"
#include "microvla/tensor.hpp"

namespace microvla {

struct AttnConfig {
    int d_model = 64;
    int n_heads = 4;

    int head_dim() const { return d_model / n_heads; }
    double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }
    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
            throw std::invalid_argument("AttnConfig: d_model must be a positive multiple of n_heads");
        }
    }
};

enum class GateKind { None, Scalar, HeadWise, ElementWise };

std::string gate_kind_name(GateKind kind);
GateKind gate_kind_from_name(const std::string& name);

// The scalar gate multiplies visual logits by tanh(g); head/element gates
// multiply attention outputs by a sigmoid of the query stream.
struct Gate {
    GateKind kind = GateKind::None;
    Parameter scalar_g;  // [1], starts at 0
    Linear proj;         // element-wise: d -> d, head-wise: d -> n_heads

    Gate() = default;
    Gate(const std::string& name, GateKind kind, const AttnConfig& cfg, Rng& rng);
    void collect(std::vector<Parameter*>& out);
};

struct FocusConfig {
    int k_tokens = 0;
    bool use_raw_values = true;  // values come from the backbone features
};

struct StreamProjections {
    Linear q, k, v, out;
    bool has_out = false;

    StreamProjections() = default;
    StreamProjections(const std::string& name, int d_model, Rng& rng, bool with_out);
    void collect(std::vector<Parameter*>& out);
};

// [B, T, d] -> [B, H, T, hd] and back.
Tensor split_heads(const Tensor& x, const AttnConfig& cfg);
Tensor merge_heads(const Tensor& x);

struct AttentionResult {
    Tensor out;      // [B, Tq, d] (or [Tq, d] for unbatched calls)
    Tensor weights;  // [B, H, Tq, Tk]
    Tensor scores;   // scaled pre-softmax logits, same shape as weights
    std::vector<std::vector<int>> kept;  // per-sample retained tokens when pruning ran
};

// Scaled-dot-product cross attention: per head softmax(scale * q k^T + mask
// bias) v, heads concatenated, output projected. token_mask entries that are
// false contribute -inf logits; masking every token is an error.
AttentionResult multi_head_cross_attention(const Tensor& q_in, const Tensor& kv_keys, const Tensor& kv_values,
                                           const StreamProjections& proj, const AttnConfig& cfg,
                                           const std::vector<bool>* token_mask = nullptr);

// Token relevance is the mean of the scaled scores over heads and queries;
// returns a keep-mask with exactly k true entries (ties keep the lower index).
std::vector<bool> select_topk_tokens(const Tensor& scores, int k);

// Pruned cross attention for the visual stream: keys from the per-layer
// features, values from the raw backbone features, softmax over the retained
// tokens only, then the output gate when one is configured.
AttentionResult focus_cross_attention(const Tensor& a_in, const Tensor& c_v_t, const Tensor& c_v_0,
                                      const StreamProjections& proj, const Gate& gate, const AttnConfig& cfg,
                                      const FocusConfig& focus);

// Output-side gating of [.., Tq, d] by a sigmoid of the query stream;
// head-wise broadcasts one scalar per head over that head's channels.
Tensor apply_gate(const Tensor& h_v, const Tensor& a_in, const Gate& gate, const AttnConfig& cfg);

// Mean over non-overlapping 2x2 spatial blocks of [..., P, P, d].
Tensor pool_visual_2x2(const Tensor& grid);

enum class LayerVariant { Mixed, Cascaded };

std::string layer_variant_name(LayerVariant v);

// Detached per-layer attention snapshot for analysis and heatmap export.
struct LayerRecord {
    bool has_visual = false;
    Shape weights_shape;  // [B, H, Tq, Tk]
    std::vector<double> weights;
    int visual_offset = 0;
    int visual_count = 0;
    std::vector<std::vector<int>> kept;
    Shape visual_logits_shape;
    std::vector<double> visual_logits;
};

// One policy attention block. Mixed: one joint softmax over the concatenated
// visual / action-query / self logits computed from a shared q,k,v triple.
// Cascaded: one attention per modality stream with per-stream projections,
// fused by a linear map. Both end in a residual FFN.
class PolicyLayer {
public:
    PolicyLayer(const std::string& name, LayerVariant variant, const AttnConfig& cfg, GateKind gate_kind,
                std::optional<FocusConfig> focus, bool use_visual, bool use_layer_norm, Rng& rng);

    // a: [B, Ta, d]; c_v / c_v0: [B, Tv, d] (undefined tensors when the layer
    // has no visual stream); c_aq: [B, Tq, d].
    Tensor forward(const Tensor& a, const Tensor& c_v, const Tensor& c_v0, const Tensor& c_aq,
                   LayerRecord* record = nullptr) const;

    void collect(std::vector<Parameter*>& out);

    LayerVariant variant() const { return variant_; }
    bool use_visual() const { return use_visual_; }
    const std::optional<FocusConfig>& focus() const { return focus_; }
    const Gate& gate() const { return gate_; }
    Gate& gate() { return gate_; }
    const AttnConfig& attn_config() const { return cfg_; }

    StreamProjections& shared_proj() { return shared_; }
    StreamProjections& self_proj() { return self_; }
    StreamProjections& aq_proj() { return aq_; }
    StreamProjections& vis_proj() { return vis_; }
    Linear& fusion() { return fusion_; }
    Linear& ffn_in() { return ffn1_; }
    Linear& ffn_out() { return ffn2_; }
    NormParams& norm1() { return norm1_; }
    NormParams& norm2() { return norm2_; }

private:
    Tensor forward_mixed(const Tensor& a, const Tensor& c_v, const Tensor& c_aq, LayerRecord* record) const;
    Tensor forward_cascaded(const Tensor& a, const Tensor& c_v, const Tensor& c_v0, const Tensor& c_aq,
                            LayerRecord* record) const;
    Tensor ffn_residual(const Tensor& fused, const Tensor& a) const;

    LayerVariant variant_;
    AttnConfig cfg_;
    std::optional<FocusConfig> focus_;
    bool use_visual_ = true;
    bool use_norm_ = true;
    Gate gate_;
    StreamProjections shared_;  // mixed
    StreamProjections self_, aq_, vis_;  // cascaded
    Linear fusion_;
    Linear ffn1_, ffn2_;
    NormParams norm1_, norm2_;
};

}  // namespace microvla
