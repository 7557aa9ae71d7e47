#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "microvla/grad_check.hpp"
#include "microvla/policy.hpp"
#include "microvla/rng.hpp"

using namespace microvla;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(values));
}

PolicyConfig micro_config() {
    PolicyConfig pc;
    pc.n_layers = 2;
    pc.attn = AttnConfig{8, 2};
    pc.variant = LayerVariant::Cascaded;
    pc.chunk_len = 2;
    pc.action_dim = 3;
    pc.n_action_queries = 2;
    pc.state_dim = 3;
    return pc;
}

ConditionPyramid random_pyramid(int depth, int batch, int grid_p, int tq, int d, Rng& rng) {
    ConditionPyramid cp;
    cp.grid_p = grid_p;
    const int tv = grid_p * grid_p;
    for (int t = 0; t < depth; ++t) {
        cp.visual.push_back(random_tensor({batch, tv, d}, rng));
        cp.action_queries.push_back(random_tensor({batch, tq, d}, rng));
    }
    cp.visual_raw = random_tensor({batch, tv, d}, rng);
    return cp;
}

void zero_linear(Linear& lin) {
    std::fill(lin.weight.value.data().begin(), lin.weight.value.data().end(), 0.0);
    std::fill(lin.bias.value.data().begin(), lin.bias.value.data().end(), 0.0);
}

}  // namespace

TEST_CASE("action latent init: zero state reproduces the embedding table") {
    Policy policy(micro_config(), 1);
    Tensor state = Tensor::zeros({1, 3});
    Tensor a0 = policy.init_action_latent(state);
    REQUIRE(a0.shape() == Shape{1, 2, 8});
    const auto& embed = policy.latent_embedding().value.data();
    for (int i = 0; i < 16; ++i) CHECK(a0.data()[i] == embed[i]);
}

TEST_CASE("action latent init: two states differ by a broadcast rank-1 term") {
    Policy policy(micro_config(), 2);
    Rng rng(5);
    Tensor s1 = random_tensor({1, 3}, rng);
    Tensor s2 = random_tensor({1, 3}, rng);
    Tensor a1 = policy.init_action_latent(s1);
    Tensor a2 = policy.init_action_latent(s2);
    // the difference is identical across chunk positions
    for (int c = 0; c < 8; ++c) {
        const double delta = a1.at({0, 0, c}) - a2.at({0, 0, c});
        CHECK(a1.at({0, 1, c}) - a2.at({0, 1, c}) == doctest::Approx(delta).epsilon(1e-12));
    }
}

TEST_CASE("action latent init: gradients reach both the embedding and the projection") {
    Policy policy(micro_config(), 3);
    Rng rng(7);
    Tensor state = random_tensor({1, 3}, rng);
    Tensor probe = random_tensor({1, 2, 8}, rng);
    std::vector<Parameter*> params{&policy.latent_embedding(), &policy.state_projection().weight,
                                   &policy.state_projection().bias};
    auto f = [&] { return sum(mul(policy.init_action_latent(state), probe)); };
    CHECK(grad_check(f, params).max_rel_err < 1e-5);
}

TEST_CASE("one zeroed layer reduces the policy to action_head(A_0)") {
    PolicyConfig pc = micro_config();
    pc.n_layers = 1;
    Policy policy(pc, 4);
    zero_linear(policy.layer(0).fusion());
    zero_linear(policy.layer(0).ffn_in());
    zero_linear(policy.layer(0).ffn_out());

    Rng rng(11);
    ConditionPyramid cp = random_pyramid(1, 1, 3, 2, 8, rng);
    Tensor state = random_tensor({1, 3}, rng);
    PolicyForward fwd = policy.forward(cp, state);
    Tensor expected = policy.action_head(policy.init_action_latent(state));
    CHECK(fwd.chunk.data() == expected.data());
}

TEST_CASE("policy forward matches calling each layer manually in sequence") {
    PolicyConfig pc = micro_config();
    pc.focus = FocusConfig{4, true};
    pc.gate = GateKind::ElementWise;
    Policy policy(pc, 5);
    Rng rng(13);
    ConditionPyramid cp = random_pyramid(4, 2, 3, 2, 8, rng);  // deeper pyramid than policy
    Tensor state = random_tensor({2, 3}, rng);

    PolicyForward fwd = policy.forward(cp, state);

    Tensor a = policy.init_action_latent(state);
    for (int t = 0; t < pc.n_layers; ++t) {
        const int idx = Policy::pyramid_index(t, pc.n_layers, cp.depth());
        a = policy.layer(t).forward(a, cp.visual[idx], cp.visual_raw, cp.action_queries[idx]);
    }
    Tensor expected = policy.action_head(a);
    REQUIRE(fwd.chunk.numel() == expected.numel());
    for (std::int64_t i = 0; i < expected.numel(); ++i) {
        CHECK(std::fabs(fwd.chunk.data()[i] - expected.data()[i]) < 1e-12);
    }
}

TEST_CASE("paper-scale policy configuration validates") {
    PolicyConfig pc;
    pc.n_layers = 24;
    pc.attn = AttnConfig{896, 8};
    pc.chunk_len = 8;
    pc.n_action_queries = 64;
    pc.variant = LayerVariant::Cascaded;
    pc.focus = FocusConfig{256, true};  // 256 of 512 visual tokens
    pc.validate();
    CHECK(pc.attn.head_dim() == 112);
}

TEST_CASE("pyramid alignment spreads shallow policies over deep pyramids") {
    CHECK(Policy::pyramid_index(0, 4, 4) == 0);
    CHECK(Policy::pyramid_index(3, 4, 4) == 3);
    CHECK(Policy::pyramid_index(0, 1, 4) == 3);   // single layer reads the deepest features
    CHECK(Policy::pyramid_index(0, 2, 4) == 1);
    CHECK(Policy::pyramid_index(1, 2, 4) == 3);
}

TEST_CASE("freshly initialized policies output exactly zero actions") {
    Policy policy(micro_config(), 17);
    Rng rng(17);
    ConditionPyramid cp = random_pyramid(2, 1, 3, 2, 8, rng);
    Tensor state = random_tensor({1, 3}, rng);
    PolicyForward fwd = policy.forward(cp, state);
    for (double v : fwd.chunk.data()) CHECK(v == 0.0);
}

TEST_CASE("action head is position-wise: permuting latent rows permutes chunk rows") {
    PolicyConfig pc = micro_config();
    pc.chunk_len = 3;
    Policy policy(pc, 19);
    Rng rng(19);
    // give the zero-initialized output layer real weights for this check
    for (double& v : policy.head_out().weight.value.data()) v = rng.uniform(-0.5, 0.5);

    Tensor a = random_tensor({1, 3, 8}, rng);
    Tensor out = policy.action_head(a);

    std::vector<double> swapped = a.data();
    for (int c = 0; c < 8; ++c) std::swap(swapped[0 * 8 + c], swapped[2 * 8 + c]);
    Tensor out_swapped = policy.action_head(Tensor::from_data({1, 3, 8}, swapped));
    for (int k = 0; k < 3; ++k) {
        CHECK(out.at({0, 0, k}) == out_swapped.at({0, 2, k}));
        CHECK(out.at({0, 2, k}) == out_swapped.at({0, 0, k}));
        CHECK(out.at({0, 1, k}) == out_swapped.at({0, 1, k}));
    }
}

TEST_CASE("action head gradients") {
    Policy policy(micro_config(), 23);
    Rng rng(23);
    Tensor a = random_tensor({1, 2, 8}, rng);
    Tensor probe = random_tensor({1, 2, 3}, rng);
    std::vector<Parameter*> params{&policy.head_hidden().weight, &policy.head_hidden().bias,
                                   &policy.head_out().weight, &policy.head_out().bias};
    auto f = [&] { return sum(mul(policy.action_head(a), probe)); };
    CHECK(grad_check(f, params).max_rel_err < 1e-5);
}

TEST_CASE("no-visual policies ignore the visual pyramid entirely") {
    PolicyConfig pc = micro_config();
    pc.use_visual = false;
    Policy policy(pc, 29);
    Rng rng(29);
    ConditionPyramid cp_a = random_pyramid(2, 1, 3, 2, 8, rng);
    ConditionPyramid cp_b = cp_a;
    cp_b.visual.clear();
    for (int t = 0; t < 2; ++t) cp_b.visual.push_back(random_tensor({1, 9, 8}, rng));
    cp_b.visual_raw = random_tensor({1, 9, 8}, rng);

    Tensor state = random_tensor({1, 3}, rng);
    PolicyForward fa = policy.forward(cp_a, state);
    PolicyForward fb = policy.forward(cp_b, state);
    CHECK(fa.chunk.data() == fb.chunk.data());
    for (double v : fa.chunk.data()) CHECK(std::isfinite(v));
}

TEST_CASE("forward determinism: identical inputs and parameters give identical chunks") {
    PolicyConfig pc = micro_config();
    Policy p1(pc, 31);
    Policy p2(pc, 31);
    Rng rng(31);
    ConditionPyramid cp = random_pyramid(2, 1, 3, 2, 8, rng);
    Tensor state = random_tensor({1, 3}, rng);
    CHECK(p1.forward(cp, state).chunk.data() == p2.forward(cp, state).chunk.data());
    CHECK(p1.forward(cp, state).chunk.data() == p1.forward(cp, state).chunk.data());
}

TEST_CASE("extract_attention_map: uniform and one-hot cases") {
    LayerRecord rec;
    rec.has_visual = true;
    rec.visual_offset = 0;
    rec.visual_count = 4;
    rec.weights_shape = {1, 2, 3, 4};
    rec.weights.assign(1 * 2 * 3 * 4, 0.25);
    std::vector<double> map = extract_attention_map(rec, 2);
    for (double v : map) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    // one-hot on token 2 in every head and query
    rec.weights.assign(1 * 2 * 3 * 4, 0.0);
    for (int h = 0; h < 2; ++h) {
        for (int q = 0; q < 3; ++q) rec.weights[(h * 3 + q) * 4 + 2] = 1.0;
    }
    map = extract_attention_map(rec, 2);
    CHECK(map[2] == 1.0);
    CHECK(map[0] + map[1] + map[3] == 0.0);
}

TEST_CASE("extract_attention_map renormalizes mixed rows and sums to one") {
    Rng rng(37);
    LayerRecord rec;
    rec.has_visual = true;
    rec.visual_offset = 0;
    rec.visual_count = 9;
    rec.weights_shape = {1, 2, 2, 14};  // 9 visual + 5 other tokens
    rec.weights.resize(1 * 2 * 2 * 14);
    for (int r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int t = 0; t < 14; ++t) {
            rec.weights[r * 14 + t] = rng.uniform(0.0, 1.0);
            s += rec.weights[r * 14 + t];
        }
        for (int t = 0; t < 14; ++t) rec.weights[r * 14 + t] /= s;
    }
    std::vector<double> map = extract_attention_map(rec, 3);
    double total = 0.0;
    for (double v : map) total += v;
    CHECK(std::fabs(total - 1.0) < 1e-9);
}

TEST_CASE("extract_attention_map rejects layers without a visual stream") {
    LayerRecord rec;
    rec.has_visual = false;
    CHECK_THROWS_AS(extract_attention_map(rec, 2), std::invalid_argument);
}

TEST_CASE("pruned tokens never appear with nonzero mass in focus-layer heatmaps") {
    PolicyConfig pc = micro_config();
    pc.n_layers = 1;
    pc.focus = FocusConfig{3, true};
    Policy policy(pc, 41);
    Rng rng(41);
    ConditionPyramid cp = random_pyramid(1, 1, 3, 2, 8, rng);
    Tensor state = random_tensor({1, 3}, rng);
    PolicyForward fwd = policy.forward(cp, state, /*record=*/true);
    REQUIRE(fwd.records.size() == 1);
    const LayerRecord& rec = fwd.records[0];
    REQUIRE(rec.kept.size() == 1);
    REQUIRE(rec.kept[0].size() == 3);

    std::vector<bool> kept(9, false);
    for (int t : rec.kept[0]) kept[t] = true;
    std::vector<double> map = extract_attention_map(rec, 3);
    for (int t = 0; t < 9; ++t) {
        if (!kept[t]) CHECK(map[t] == 0.0);
    }
}

TEST_CASE("policy rejects pyramids shallower than its layer stack") {
    PolicyConfig pc = micro_config();
    pc.n_layers = 3;
    Policy policy(pc, 43);
    Rng rng(43);
    ConditionPyramid cp = random_pyramid(2, 1, 3, 2, 8, rng);
    Tensor state = random_tensor({1, 3}, rng);
    CHECK_THROWS_AS(policy.forward(cp, state), std::invalid_argument);
}

TEST_CASE("end-to-end grad_check on a one-layer policy") {
    PolicyConfig pc = micro_config();
    pc.n_layers = 1;
    pc.focus = FocusConfig{2, true};
    pc.gate = GateKind::ElementWise;
    Policy policy(pc, 47);
    // gradients through the zero-initialized head vanish; give it weights
    Rng wrng(48);
    for (double& v : policy.head_out().weight.value.data()) v = wrng.uniform(-0.4, 0.4);

    Rng rng(47);
    ConditionPyramid cp = random_pyramid(1, 1, 2, 2, 8, rng);
    Tensor state = random_tensor({1, 3}, rng);
    Tensor probe = random_tensor({1, 2, 3}, rng);
    std::vector<Parameter*> params = policy.parameters();
    auto f = [&] { return sum(mul(policy.forward(cp, state).chunk, probe)); };
    auto res = grad_check(f, params, 1e-5);
    CHECK(res.max_rel_err < 1e-5);
}
