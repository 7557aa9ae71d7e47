#include "microvla/attention.hpp"

#include <algorithm>
#include <limits>

namespace microvla {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor promote_rank3(const Tensor& x) {
    if (x.dim() == 2) return reshape(x, {1, x.size(0), x.size(1)});
    if (x.dim() == 3) return x;
    throw std::invalid_argument("attention: expected rank 2 or 3 input, got " + shape_str(x.shape()));
}

// Per-sample relevance over [B, H, Tq, Tv]: mean of scores across heads and
// queries. Selection is discrete, so this reads values only.
std::vector<std::vector<int>> topk_tokens_per_sample(const Tensor& scores, int k) {
    const int B = scores.size(0);
    const int H = scores.size(1);
    const int Tq = scores.size(2);
    const int Tv = scores.size(3);
    if (k < 1 || k > Tv) {
        throw std::invalid_argument("select_topk_tokens: k=" + std::to_string(k) + " out of range for " +
                                    std::to_string(Tv) + " tokens");
    }
    const double* p = scores.data().data();
    std::vector<std::vector<int>> kept(B);
    std::vector<double> relevance(Tv);
    for (int b = 0; b < B; ++b) {
        std::fill(relevance.begin(), relevance.end(), 0.0);
        const double* sample = p + static_cast<std::int64_t>(b) * H * Tq * Tv;
        for (int h = 0; h < H; ++h) {
            for (int q = 0; q < Tq; ++q) {
                const double* row = sample + (static_cast<std::int64_t>(h) * Tq + q) * Tv;
                for (int t = 0; t < Tv; ++t) relevance[t] += row[t];
            }
        }
        const double inv = 1.0 / (static_cast<double>(H) * Tq);
        for (double& r : relevance) r *= inv;
        kept[b] = topk_indices(relevance, k);
    }
    return kept;
}

Tensor keep_mask_bias(const std::vector<std::vector<int>>& kept, int tv) {
    const int B = static_cast<int>(kept.size());
    std::vector<double> bias(static_cast<size_t>(B) * tv, -kInf);
    for (int b = 0; b < B; ++b) {
        for (int t : kept[b]) bias[static_cast<size_t>(b) * tv + t] = 0.0;
    }
    return Tensor::from_data({B, 1, 1, tv}, std::move(bias));
}

// Shared attention pipeline; `focus` and `gate` widen it to the pruned /
// gated visual stream while the plain path stays byte-compatible.
AttentionResult attention_core(const Tensor& q_in, const Tensor& keys_src, const Tensor& values_src,
                               const Tensor* values_raw, const StreamProjections& proj, const AttnConfig& cfg,
                               const Gate* gate, const FocusConfig* focus, const Tensor* extra_mask_bias) {
    cfg.validate();
    const Tensor q3 = promote_rank3(q_in);
    const Tensor k3 = promote_rank3(keys_src);
    if (q3.size(-1) != cfg.d_model || k3.size(-1) != cfg.d_model) {
        throw std::invalid_argument("attention: feature dim mismatch with d_model=" + std::to_string(cfg.d_model));
    }

    Tensor queries = split_heads(proj.q(q3), cfg);  // [B, H, Tq, hd]
    Tensor keys = split_heads(proj.k(k3), cfg);     // [B, H, Tk, hd]
    Tensor scores = scale(matmul_nt(queries, keys), cfg.scale());

    std::vector<std::vector<int>> kept;
    Tensor logits = scores;
    if (gate && gate->kind == GateKind::Scalar) {
        logits = mul(logits, tanh(gate->scalar_g.value));
    }
    if (focus) {
        kept = topk_tokens_per_sample(scores, focus->k_tokens);
        logits = add(logits, keep_mask_bias(kept, scores.size(3)));
    }
    if (extra_mask_bias) {
        logits = add(logits, *extra_mask_bias);
    }

    Tensor weights = softmax_rows(logits);

    const Tensor& value_source = (focus && focus->use_raw_values && values_raw) ? *values_raw : values_src;
    Tensor values = split_heads(proj.v(promote_rank3(value_source)), cfg);
    Tensor attended = merge_heads(matmul(weights, values));  // [B, Tq, d]

    if (gate && (gate->kind == GateKind::HeadWise || gate->kind == GateKind::ElementWise)) {
        attended = apply_gate(attended, q3, *gate, cfg);
    }
    Tensor out = proj.has_out ? proj.out(attended) : attended;

    AttentionResult result;
    result.weights = weights;
    result.scores = logits;
    result.kept = std::move(kept);
    if (q_in.dim() == 2) {
        result.out = reshape(out, {out.size(1), out.size(2)});
        result.weights = reshape(weights, {weights.size(1), weights.size(2), weights.size(3)});
        result.scores = reshape(result.scores, result.weights.shape());
    } else {
        result.out = out;
    }
    return result;
}

void snapshot_record(LayerRecord* record, const AttentionResult& vis, int visual_offset, int visual_count) {
    if (!record) return;
    record->has_visual = true;
    record->weights_shape = vis.weights.shape();
    record->weights = vis.weights.data();
    record->visual_offset = visual_offset;
    record->visual_count = visual_count;
    record->kept = vis.kept;
}

}  // namespace

std::string gate_kind_name(GateKind kind) {
    switch (kind) {
        case GateKind::None: return "none";
        case GateKind::Scalar: return "scalar";
        case GateKind::HeadWise: return "head";
        case GateKind::ElementWise: return "element";
    }
    return "none";
}

GateKind gate_kind_from_name(const std::string& name) {
    if (name == "none") return GateKind::None;
    if (name == "scalar") return GateKind::Scalar;
    if (name == "head") return GateKind::HeadWise;
    if (name == "element") return GateKind::ElementWise;
    throw std::invalid_argument("unknown gate kind '" + name + "'");
}

std::string layer_variant_name(LayerVariant v) {
    return v == LayerVariant::Mixed ? "mixed" : "cascaded";
}

Gate::Gate(const std::string& name, GateKind k, const AttnConfig& cfg, Rng& rng) : kind(k) {
    switch (kind) {
        case GateKind::None:
            break;
        case GateKind::Scalar:
            scalar_g = Parameter(name + ".g", Tensor::zeros({1}));
            break;
        case GateKind::HeadWise:
            proj = Linear(name + ".head_proj", cfg.d_model, cfg.n_heads, rng);
            break;
        case GateKind::ElementWise:
            proj = Linear(name + ".elem_proj", cfg.d_model, cfg.d_model, rng);
            break;
    }
}

void Gate::collect(std::vector<Parameter*>& out) {
    switch (kind) {
        case GateKind::None:
            break;
        case GateKind::Scalar:
            out.push_back(&scalar_g);
            break;
        case GateKind::HeadWise:
        case GateKind::ElementWise:
            proj.collect(out);
            break;
    }
}

StreamProjections::StreamProjections(const std::string& name, int d_model, Rng& rng, bool with_out)
    : q(name + ".q", d_model, d_model, rng),
      k(name + ".k", d_model, d_model, rng),
      v(name + ".v", d_model, d_model, rng),
      has_out(with_out) {
    if (with_out) out = Linear(name + ".out", d_model, d_model, rng);
}

void StreamProjections::collect(std::vector<Parameter*>& params) {
    q.collect(params);
    k.collect(params);
    v.collect(params);
    if (has_out) out.collect(params);
}

Tensor split_heads(const Tensor& x, const AttnConfig& cfg) {
    const int B = x.size(0);
    const int T = x.size(1);
    Tensor r = reshape(x, {B, T, cfg.n_heads, cfg.head_dim()});
    return transpose(r, {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
    const int B = x.size(0);
    const int H = x.size(1);
    const int T = x.size(2);
    const int hd = x.size(3);
    return reshape(transpose(x, {0, 2, 1, 3}), {B, T, H * hd});
}

AttentionResult multi_head_cross_attention(const Tensor& q_in, const Tensor& kv_keys, const Tensor& kv_values,
                                           const StreamProjections& proj, const AttnConfig& cfg,
                                           const std::vector<bool>* token_mask) {
    Tensor bias;
    if (token_mask) {
        const int tk = kv_keys.size(kv_keys.dim() - 2);
        if (static_cast<int>(token_mask->size()) != tk) {
            throw std::invalid_argument("attention: mask length does not match token count");
        }
        bool any = false;
        std::vector<double> b(tk);
        for (int t = 0; t < tk; ++t) {
            b[t] = (*token_mask)[t] ? 0.0 : -kInf;
            any = any || (*token_mask)[t];
        }
        if (!any) throw std::invalid_argument("attention: every token is masked");
        bias = Tensor::from_data({tk}, std::move(b));
    }
    return attention_core(q_in, kv_keys, kv_values, nullptr, proj, cfg, nullptr, nullptr,
                          bias.defined() ? &bias : nullptr);
}

std::vector<bool> select_topk_tokens(const Tensor& scores, int k) {
    Tensor s = scores;
    if (scores.dim() == 3) s = reshape(scores, {1, scores.size(0), scores.size(1), scores.size(2)});
    if (s.dim() != 4) throw std::invalid_argument("select_topk_tokens: expected [heads, Tq, Tv] scores");
    const auto kept = topk_tokens_per_sample(s, k);
    std::vector<bool> mask(s.size(3), false);
    for (int t : kept[0]) mask[t] = true;
    return mask;
}

AttentionResult focus_cross_attention(const Tensor& a_in, const Tensor& c_v_t, const Tensor& c_v_0,
                                      const StreamProjections& proj, const Gate& gate, const AttnConfig& cfg,
                                      const FocusConfig& focus) {
    const int tv_keys = c_v_t.size(c_v_t.dim() - 2);
    const int tv_vals = c_v_0.size(c_v_0.dim() - 2);
    if (tv_keys != tv_vals) {
        throw std::invalid_argument("focus_cross_attention: key and raw-value token counts differ (" +
                                    std::to_string(tv_keys) + " vs " + std::to_string(tv_vals) + ")");
    }
    const Tensor raw3 = promote_rank3(c_v_0);
    return attention_core(a_in, c_v_t, c_v_t, &raw3, proj, cfg, &gate, &focus, nullptr);
}

Tensor apply_gate(const Tensor& h_v, const Tensor& a_in, const Gate& gate, const AttnConfig& cfg) {
    switch (gate.kind) {
        case GateKind::None:
            return h_v;
        case GateKind::Scalar:
            throw std::invalid_argument("apply_gate: the scalar gate applies to visual logits, not outputs");
        case GateKind::ElementWise:
            return mul(h_v, sigmoid(gate.proj(a_in)));
        case GateKind::HeadWise: {
            Tensor g = sigmoid(gate.proj(a_in));  // [.., Tq, H]
            Shape hs = h_v.shape();
            Shape split = hs;
            split.back() = cfg.n_heads;
            split.push_back(cfg.head_dim());
            Shape gs = g.shape();
            gs.push_back(1);
            Tensor gated = mul(reshape(h_v, split), reshape(g, gs));
            return reshape(gated, hs);
        }
    }
    return h_v;
}

Tensor pool_visual_2x2(const Tensor& grid) {
    const int rank = grid.dim();
    if (rank < 3) throw std::invalid_argument("pool_visual_2x2: expected [..., P, P, d]");
    const int p_rows = grid.size(rank - 3);
    const int p_cols = grid.size(rank - 2);
    if (p_rows != p_cols) {
        throw std::invalid_argument("pool_visual_2x2: spatial dims must match, got " + shape_str(grid.shape()));
    }
    if (p_rows % 2 != 0) {
        throw std::invalid_argument("pool_visual_2x2: grid size " + std::to_string(p_rows) + " is odd");
    }
    const int d = grid.size(rank - 1);

    Shape blocked(grid.shape().begin(), grid.shape().end() - 3);
    blocked.insert(blocked.end(), {p_rows / 2, 2, p_cols / 2, 2, d});
    Tensor y = reshape(grid, blocked);
    const int row_axis = static_cast<int>(blocked.size()) - 4;
    const int col_axis = static_cast<int>(blocked.size()) - 2;

    auto corner = [&](int r, int c) { return narrow(narrow(y, row_axis, r, 1), col_axis, c, 1); };
    Tensor pooled = scale(add(add(corner(0, 0), corner(0, 1)), add(corner(1, 0), corner(1, 1))), 0.25);

    Shape out_shape(grid.shape().begin(), grid.shape().end() - 3);
    out_shape.insert(out_shape.end(), {p_rows / 2, p_cols / 2, d});
    return reshape(pooled, out_shape);
}

PolicyLayer::PolicyLayer(const std::string& name, LayerVariant variant, const AttnConfig& cfg, GateKind gate_kind,
                         std::optional<FocusConfig> focus, bool use_visual, bool use_layer_norm, Rng& rng)
    : variant_(variant), cfg_(cfg), focus_(std::move(focus)), use_visual_(use_visual), use_norm_(use_layer_norm) {
    cfg_.validate();
    if (variant_ == LayerVariant::Mixed && focus_.has_value()) {
        throw std::invalid_argument("PolicyLayer: focus requires the cascaded variant");
    }
    if (focus_ && !use_visual_) {
        throw std::invalid_argument("PolicyLayer: focus requires a visual stream");
    }
    gate_ = Gate(name + ".gate", gate_kind, cfg_, rng);
    const int d = cfg_.d_model;
    if (variant_ == LayerVariant::Mixed) {
        shared_ = StreamProjections(name + ".attn", d, rng, /*with_out=*/false);
    } else {
        self_ = StreamProjections(name + ".attn_self", d, rng, /*with_out=*/true);
        aq_ = StreamProjections(name + ".attn_aq", d, rng, /*with_out=*/true);
        if (use_visual_) vis_ = StreamProjections(name + ".attn_vis", d, rng, /*with_out=*/true);
        const int streams = use_visual_ ? 3 : 2;
        fusion_ = Linear(name + ".fusion", streams * d, d, rng);
    }
    ffn1_ = Linear(name + ".ffn.in", d, 4 * d, rng);
    ffn2_ = Linear(name + ".ffn.out", 4 * d, d, rng);
    if (use_norm_) {
        norm1_ = NormParams(name + ".norm1", d);
        norm2_ = NormParams(name + ".norm2", d);
    }
}

void PolicyLayer::collect(std::vector<Parameter*>& out) {
    gate_.collect(out);
    if (variant_ == LayerVariant::Mixed) {
        shared_.collect(out);
    } else {
        self_.collect(out);
        aq_.collect(out);
        if (use_visual_) vis_.collect(out);
        fusion_.collect(out);
    }
    ffn1_.collect(out);
    ffn2_.collect(out);
    if (use_norm_) {
        norm1_.collect(out);
        norm2_.collect(out);
    }
}

Tensor PolicyLayer::ffn_residual(const Tensor& fused, const Tensor& a) const {
    Tensor h = use_norm_ ? norm2_(fused) : fused;
    Tensor f = ffn2_(gelu(ffn1_(h)));
    return add(f, a);
}

Tensor PolicyLayer::forward(const Tensor& a, const Tensor& c_v, const Tensor& c_v0, const Tensor& c_aq,
                            LayerRecord* record) const {
    if (a.dim() != 3) {
        throw std::invalid_argument("PolicyLayer: expected [B, Ta, d] input, got " + shape_str(a.shape()));
    }
    if (use_visual_ && !c_v.defined()) throw std::invalid_argument("PolicyLayer: missing visual conditions");
    if (record) *record = LayerRecord{};
    if (variant_ == LayerVariant::Mixed) return forward_mixed(a, c_v, c_aq, record);
    return forward_cascaded(a, c_v, c_v0, c_aq, record);
}

Tensor PolicyLayer::forward_mixed(const Tensor& a, const Tensor& c_v, const Tensor& c_aq,
                                  LayerRecord* record) const {
    Tensor a_n = use_norm_ ? norm1_(a) : a;
    Tensor queries = split_heads(shared_.q(a_n), cfg_);
    const double s = cfg_.scale();

    auto block_scores = [&](const Tensor& src) {
        Tensor keys = split_heads(shared_.k(src), cfg_);
        return scale(matmul_nt(queries, keys), s);
    };
    auto block_values = [&](const Tensor& src) { return split_heads(shared_.v(src), cfg_); };

    Tensor s_aq = block_scores(c_aq);
    Tensor s_a = block_scores(a_n);
    Tensor s_v;
    if (use_visual_) {
        s_v = block_scores(c_v);
        if (gate_.kind == GateKind::Scalar) s_v = mul(s_v, tanh(gate_.scalar_g.value));
    }

    std::vector<Tensor> blocks;
    if (use_visual_) blocks.push_back(s_v);
    blocks.push_back(s_aq);
    blocks.push_back(s_a);
    Tensor weights = softmax_rows(concat_last_dim(blocks));

    const int tv = use_visual_ ? c_v.size(1) : 0;
    const int tq = c_aq.size(1);
    const int ta = a.size(1);

    Tensor attended;
    if (use_visual_) {
        Tensor h_v = merge_heads(matmul(narrow(weights, -1, 0, tv), block_values(c_v)));
        if (gate_.kind == GateKind::HeadWise || gate_.kind == GateKind::ElementWise) {
            h_v = apply_gate(h_v, a_n, gate_, cfg_);
        }
        Tensor h_aq = merge_heads(matmul(narrow(weights, -1, tv, tq), block_values(c_aq)));
        Tensor h_a = merge_heads(matmul(narrow(weights, -1, tv + tq, ta), block_values(a_n)));
        attended = add(add(h_v, h_aq), h_a);
    } else {
        Tensor h_aq = merge_heads(matmul(narrow(weights, -1, 0, tq), block_values(c_aq)));
        Tensor h_a = merge_heads(matmul(narrow(weights, -1, tq, ta), block_values(a_n)));
        attended = add(h_aq, h_a);
    }

    if (record) {
        record->has_visual = use_visual_;
        record->weights_shape = weights.shape();
        record->weights = weights.data();
        record->visual_offset = 0;
        record->visual_count = tv;
        if (use_visual_) {
            record->visual_logits_shape = s_v.shape();
            record->visual_logits = s_v.data();
        }
    }
    return ffn_residual(attended, a);
}

Tensor PolicyLayer::forward_cascaded(const Tensor& a, const Tensor& c_v, const Tensor& c_v0, const Tensor& c_aq,
                                     LayerRecord* record) const {
    Tensor a_n = use_norm_ ? norm1_(a) : a;
    AttentionResult self_res = attention_core(a_n, a_n, a_n, nullptr, self_, cfg_, nullptr, nullptr, nullptr);
    AttentionResult aq_res = attention_core(a_n, c_aq, c_aq, nullptr, aq_, cfg_, nullptr, nullptr, nullptr);

    std::vector<Tensor> streams{self_res.out, aq_res.out};
    if (use_visual_) {
        const Tensor* raw = c_v0.defined() ? &c_v0 : nullptr;
        AttentionResult vis_res =
            attention_core(a_n, c_v, c_v, raw, vis_, cfg_, &gate_, focus_ ? &*focus_ : nullptr, nullptr);
        streams.push_back(vis_res.out);
        if (record) {
            snapshot_record(record, vis_res, 0, c_v.size(1));
            record->visual_logits_shape = vis_res.scores.shape();
            record->visual_logits = vis_res.scores.data();
        }
    }
    Tensor fused = fusion_(concat_last_dim(streams));
    return ffn_residual(fused, a);
}

}  // namespace microvla
