#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "microvla/checkpoint.hpp"
#include "microvla/grad_check.hpp"
#include "microvla/nn.hpp"
#include "microvla/optim.hpp"
#include "microvla/rng.hpp"
#include "microvla/tensor.hpp"

using namespace microvla;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(values), requires_grad);
}

// Independent dense oracle: plain triple loop over 2-d operands.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = s;
        }
    }
    return c;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("matmul identity, annihilator, and hand-expanded case") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(eye, a).data() == a.data());

    Rng rng(7);
    Tensor z = Tensor::zeros({2, 3});
    Tensor r = random_tensor({3, 4}, rng);
    Tensor zr = matmul(z, r);
    CHECK(zr.shape() == Shape{2, 4});
    for (double v : zr.data()) CHECK(v == 0.0);

    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul agrees with the triple-loop oracle, including batch broadcast") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 1 + rng.uniform_int(5);
        const int k = 1 + rng.uniform_int(5);
        const int n = 1 + rng.uniform_int(5);
        Tensor a = random_tensor({m, k}, rng);
        Tensor b = random_tensor({k, n}, rng);
        CHECK(max_abs_diff(matmul(a, b).data(), matmul_oracle(a.data(), b.data(), m, k, n)) < 1e-14);
    }

    // [B, H, m, k] x [k, n] broadcasts over the two batch dims.
    const int B = 2, H = 3, m = 4, k = 5, n = 3;
    Tensor a = random_tensor({B, H, m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{B, H, m, n});
    for (int bi = 0; bi < B * H; ++bi) {
        std::vector<double> a_slice(a.data().begin() + bi * m * k, a.data().begin() + (bi + 1) * m * k);
        std::vector<double> c_slice(c.data().begin() + bi * m * n, c.data().begin() + (bi + 1) * m * n);
        CHECK(max_abs_diff(c_slice, matmul_oracle(a_slice, b.data(), m, k, n)) < 1e-14);
    }
}

TEST_CASE("matmul_nt equals matmul against the explicit transpose, values and gradients") {
    Rng rng(12);
    Parameter a("a", random_tensor({2, 3, 4}, rng));
    Parameter b("b", random_tensor({2, 5, 4}, rng));

    Tensor via_nt = matmul_nt(a.value, b.value);
    Tensor via_transpose = matmul(a.value, transpose(b.value, {0, 2, 1}));
    CHECK(via_nt.shape() == Shape{2, 3, 5});
    CHECK(max_abs_diff(via_nt.data(), via_transpose.data()) < 1e-14);

    auto f = [&] { return sum(tanh(matmul_nt(a.value, b.value))); };
    CHECK(grad_check(f, {&a, &b}).max_rel_err < 1e-8);

    CHECK_THROWS_AS(matmul_nt(Tensor::zeros({2, 3}), Tensor::zeros({4, 5})), std::invalid_argument);
}

TEST_CASE("fused linear equals matmul plus bias add, values and gradients") {
    Rng rng(14);
    Parameter w("w", random_tensor({4, 3}, rng));
    Parameter b("b", random_tensor({3}, rng));
    Tensor x = random_tensor({2, 5, 4}, rng);

    Tensor fused = linear(x, w.value, b.value);
    Tensor reference = add(matmul(x, w.value), b.value);
    CHECK(fused.shape() == Shape{2, 5, 3});
    CHECK(max_abs_diff(fused.data(), reference.data()) < 1e-15);

    auto f = [&] { return sum(tanh(linear(x, w.value, b.value))); };
    CHECK(grad_check(f, {&w, &b}).max_rel_err < 1e-8);

    CHECK_THROWS_AS(linear(x, Tensor::zeros({5, 3}), Tensor::zeros({3})), std::invalid_argument);
    CHECK_THROWS_AS(linear(x, w.value, Tensor::zeros({7})), std::invalid_argument);
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 5]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences") {
    Rng rng(13);
    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({4, 2}, rng));
    auto f = [&] { return sum(tanh(matmul(a.value, b.value))); };
    auto res = grad_check(f, {&a, &b});
    CHECK(res.max_rel_err < 1e-8);
}

TEST_CASE("softmax_rows analytic cases") {
    Tensor flat = softmax_rows(Tensor::from_data({1, 4}, {0, 0, 0, 0}));
    for (double v : flat.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    Tensor two = softmax_rows(Tensor::from_data({1, 2}, {std::log(2.0), 0.0}));
    CHECK(std::fabs(two.data()[0] - 2.0 / 3.0) < 1e-12);
    CHECK(std::fabs(two.data()[1] - 1.0 / 3.0) < 1e-12);
}

TEST_CASE("softmax_rows matches the exp/normalize oracle") {
    Rng rng(17);
    Tensor x = random_tensor({1, 9}, rng, -4.0, 4.0);
    Tensor y = softmax_rows(x);
    double z = 0.0;
    for (double v : x.data()) z += std::exp(v);
    for (int j = 0; j < 9; ++j) CHECK(std::fabs(y.data()[j] - std::exp(x.data()[j]) / z) < 1e-12);
}

TEST_CASE("softmax_rows masked entries are exactly zero; all-masked rows throw") {
    Tensor x = Tensor::from_data({1, 3}, {0.5, -kInf, 1.0});
    Tensor y = softmax_rows(x);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[0] + y.data()[2] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor all_masked = Tensor::from_data({1, 2}, {-kInf, -kInf});
    CHECK_THROWS_AS(softmax_rows(all_masked), std::runtime_error);
}

TEST_CASE("softmax_rows fuzz: every row sums to 1 within 1e-9") {
    Rng rng(19);
    for (int trial = 0; trial < 120; ++trial) {
        const int rows = 1 + rng.uniform_int(4);
        const int cols = 1 + rng.uniform_int(12);
        Tensor x = random_tensor({rows, cols}, rng, -30.0, 30.0);
        Tensor y = softmax_rows(x);
        for (int r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < cols; ++c) s += y.data()[r * cols + c];
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("elementwise analytic cases") {
    CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    Tensor p = mul(Tensor::from_data({3}, {1, 2, 3}), Tensor::from_data({3}, {4, 5, 6}));
    CHECK(p.data() == std::vector<double>{4, 10, 18});
}

TEST_CASE("elementwise broadcast: suffix and size-1 dims work, mismatches are rejected") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor bias = Tensor::from_data({3}, {10, 20, 30});
    CHECK(add(x, bias).data() == std::vector<double>{11, 22, 33, 14, 25, 36});

    Tensor col = Tensor::from_data({2, 1}, {100, 200});
    CHECK(add(x, col).data() == std::vector<double>{101, 102, 103, 204, 205, 206});

    CHECK_THROWS_AS(add(x, Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("broadcast gradients reduce over broadcast dims") {
    Rng rng(23);
    Parameter bias("bias", random_tensor({3}, rng));
    Tensor x = random_tensor({4, 3}, rng);
    auto f = [&] { return sum(mul(add(x, bias.value), add(x, bias.value))); };
    CHECK(grad_check(f, {&bias}).max_rel_err < 1e-8);
}

TEST_CASE("concat examples and bit-exact split round-trip") {
    Rng rng(29);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor single = concat_last_dim({a});
    CHECK(single.data() == a.data());

    Tensor c = concat_last_dim({Tensor::zeros({1, 2}), Tensor::full({1, 3}, 1.0)});
    CHECK(c.data() == std::vector<double>{0, 0, 1, 1, 1});

    for (int trial = 0; trial < 30; ++trial) {
        const int rows = 1 + rng.uniform_int(4);
        const int w1 = 1 + rng.uniform_int(5);
        const int w2 = 1 + rng.uniform_int(5);
        const int w3 = 1 + rng.uniform_int(5);
        Tensor joined = concat_last_dim({random_tensor({rows, w1}, rng), random_tensor({rows, w2}, rng),
                                         random_tensor({rows, w3}, rng)});
        Tensor p1 = narrow(joined, -1, 0, w1);
        Tensor p2 = narrow(joined, -1, w1, w2);
        Tensor p3 = narrow(joined, -1, w1 + w2, w3);
        Tensor round = concat_last_dim({p1, p2, p3});
        CHECK(round.data() == joined.data());
    }

    CHECK_THROWS_AS(concat_last_dim({Tensor::zeros({2, 2}), Tensor::zeros({3, 2})}), std::invalid_argument);
    CHECK_THROWS_AS(concat_last_dim({}), std::invalid_argument);
}

TEST_CASE("concat gradient splits back to the parts") {
    Rng rng(31);
    Parameter a("a", random_tensor({2, 2}, rng));
    Parameter b("b", random_tensor({2, 3}, rng));
    auto f = [&] { return sum(tanh(concat_last_dim({a.value, b.value}))); };
    CHECK(grad_check(f, {&a, &b}).max_rel_err < 1e-8);
}

TEST_CASE("layer_norm analytic cases and oracle") {
    const int d = 5;
    Tensor gain = Tensor::full({d}, 1.0);
    Tensor bias = Tensor::zeros({d});

    Tensor constant = Tensor::full({1, d}, 3.25);
    Tensor normed = layer_norm(constant, gain, bias);
    for (double v : normed.data()) CHECK(v == 0.0);

    Tensor g0 = Tensor::zeros({d});
    Tensor b1 = Tensor::from_data({d}, {1, 2, 3, 4, 5});
    Rng rng(37);
    Tensor x = random_tensor({2, d}, rng);
    Tensor only_bias = layer_norm(x, g0, b1);
    CHECK(only_bias.data() == std::vector<double>{1, 2, 3, 4, 5, 1, 2, 3, 4, 5});

    // explicit mean/variance oracle
    Tensor y = layer_norm(x, gain, bias);
    for (int r = 0; r < 2; ++r) {
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x.data()[r * d + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x.data()[r * d + j] - mean) * (x.data()[r * d + j] - mean);
        var /= d;
        for (int j = 0; j < d; ++j) {
            const double want = (x.data()[r * d + j] - mean) / std::sqrt(var + 1e-5);
            CHECK(std::fabs(y.data()[r * d + j] - want) < 1e-12);
        }
    }
}

TEST_CASE("layer_norm gradients") {
    Rng rng(41);
    Parameter gain("gain", Tensor::full({4}, 1.0));
    Parameter bias("bias", Tensor::zeros({4}));
    Parameter x("x", random_tensor({3, 4}, rng));
    auto f = [&] { return sum(mul(layer_norm(x.value, gain.value, bias.value),
                                  layer_norm(x.value, gain.value, bias.value))); };
    CHECK(grad_check(f, {&gain, &bias, &x}).max_rel_err < 1e-7);
}

TEST_CASE("topk_indices selection, ties, and bounds") {
    std::vector<double> all_equal{2.0, 2.0, 2.0, 2.0};
    CHECK(topk_indices(all_equal, 2) == std::vector<int>{0, 1});

    // stable-sort oracle on random data with ties
    Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + rng.uniform_int(10);
        std::vector<double> scores(n);
        for (double& v : scores) v = static_cast<double>(rng.uniform_int(4));
        const int k = 1 + rng.uniform_int(n);
        std::vector<int> oracle(n);
        for (int i = 0; i < n; ++i) oracle[i] = i;
        std::stable_sort(oracle.begin(), oracle.end(), [&](int a, int b) { return scores[a] > scores[b]; });
        oracle.resize(k);
        std::sort(oracle.begin(), oracle.end());
        CHECK(topk_indices(scores, k) == oracle);
    }

    std::vector<double> five{5, 1, 3, 2, 4};
    CHECK(topk_indices(five, 5) == std::vector<int>{0, 1, 2, 3, 4});
    CHECK_THROWS_AS(topk_indices(five, 6), std::invalid_argument);
    CHECK_THROWS_AS(topk_indices(five, 0), std::invalid_argument);

    // table-scale sanity: 256 of 512
    std::vector<double> big(512);
    Rng rng2(47);
    for (double& v : big) v = rng2.uniform();
    CHECK(topk_indices(big, 256).size() == 256);
}

TEST_CASE("topk_indices is invariant under adding a constant to all scores") {
    Rng rng(53);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + rng.uniform_int(12);
        std::vector<double> scores(n);
        for (double& v : scores) v = rng.uniform(-1.0, 1.0);
        const int k = 1 + rng.uniform_int(n);
        std::vector<double> shifted = scores;
        const double c = rng.uniform(-3.0, 3.0);
        for (double& v : shifted) v += c;
        CHECK(topk_indices(scores, k) == topk_indices(shifted, k));
    }
}

TEST_CASE("backward basics: sum gives ones, constants give zeros, non-scalar rejected") {
    Parameter theta("theta", Tensor::from_data({2, 2}, {1, 2, 3, 4}));
    backward(sum(theta.value));
    CHECK(theta.value.grad() == std::vector<double>(4, 1.0));

    theta.value.zero_grad();
    Tensor constant = Tensor::scalar(5.0);
    backward(constant);  // nothing reachable
    CHECK(theta.value.grad() == std::vector<double>(4, 0.0));

    CHECK_THROWS_AS(backward(theta.value), std::invalid_argument);
}

TEST_CASE("backward on a random 2-layer MLP matches central differences") {
    Rng rng(59);
    Parameter w1("w1", random_tensor({3, 5}, rng, -0.8, 0.8));
    Parameter b1("b1", random_tensor({5}, rng, -0.2, 0.2));
    Parameter w2("w2", random_tensor({5, 2}, rng, -0.8, 0.8));
    Parameter b2("b2", random_tensor({2}, rng, -0.2, 0.2));
    Tensor x = random_tensor({4, 3}, rng);
    auto f = [&] {
        Tensor h = tanh(add(matmul(x, w1.value), b1.value));
        Tensor y = add(matmul(h, w2.value), b2.value);
        return mean(mul(y, y));
    };
    CHECK(grad_check(f, {&w1, &b1, &w2, &b2}, 1e-5).max_rel_err < 1e-6);
}

TEST_CASE("grad_check on a linear function sits at machine-epsilon scale") {
    Parameter theta("theta", Tensor::from_data({3}, {0.3, -0.7, 1.1}));
    Tensor coef = Tensor::from_data({3}, {2.0, -1.0, 0.5});
    auto f = [&] { return sum(mul(coef, theta.value)); };
    CHECK(grad_check(f, {&theta}).max_rel_err < 1e-9);
}

TEST_CASE("grad_check through softmax_rows") {
    Rng rng(61);
    Parameter logits("logits", random_tensor({2, 5}, rng, -2.0, 2.0));
    Tensor target = random_tensor({2, 5}, rng);
    auto f = [&] { return sum(mul(softmax_rows(logits.value), target)); };
    CHECK(grad_check(f, {&logits}).max_rel_err < 1e-6);
}

TEST_CASE("fuzzed composites keep grad_check under 1e-5 across random small shapes") {
    Rng rng(67);
    for (int trial = 0; trial < 100; ++trial) {
        const int rows = 1 + rng.uniform_int(3);
        const int d_in = 2 + rng.uniform_int(4);
        const int d_out = 2 + rng.uniform_int(4);
        Parameter w("w", random_tensor({d_in, d_out}, rng, -0.9, 0.9));
        Parameter b("b", random_tensor({d_out}, rng, -0.3, 0.3));
        Parameter gate("gate", random_tensor({d_out}, rng, -0.5, 0.5));
        Parameter gain("gain", random_tensor({d_out}, rng, 0.5, 1.5));
        Parameter bias("bias", random_tensor({d_out}, rng, -0.2, 0.2));
        Tensor x = random_tensor({rows, d_in}, rng);
        auto f = [&] {
            Tensor h = gelu(add(matmul(x, w.value), b.value));
            Tensor n = layer_norm(h, gain.value, bias.value);
            Tensor wgt = softmax_rows(n);
            Tensor gated = mul(wgt, sigmoid(gate.value));
            return mean(abs(concat_last_dim({gated, tanh(h)})));
        };
        auto res = grad_check(f, {&w, &b, &gate, &gain, &bias});
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("adamw: zero grad with zero decay leaves parameters unchanged") {
    Parameter theta("theta", Tensor::from_data({3}, {1.0, -2.0, 0.5}));
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt({&theta}, cfg);
    const std::vector<double> before = theta.value.data();
    theta.value.zero_grad();
    opt.step();
    CHECK(theta.value.data() == before);
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adamw single-scalar step matches the hand-evaluated formula") {
    Parameter theta("theta", Tensor::scalar(1.0));
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.1;
    AdamW opt({&theta}, cfg);
    theta.value.grad()[0] = 0.5;
    opt.step();

    const double g = 0.5;
    const double m = (1.0 - cfg.beta1) * g;
    const double v = (1.0 - cfg.beta2) * g * g;
    const double m_hat = m / (1.0 - cfg.beta1);
    const double v_hat = v / (1.0 - cfg.beta2);
    const double expected = 1.0 - cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * 1.0);
    CHECK(std::fabs(theta.value.data()[0] - expected) < 1e-12);
}

TEST_CASE("adamw validates its configuration and defaults to lr 2e-4") {
    Parameter theta("theta", Tensor::scalar(1.0));
    AdamWConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(AdamW({&theta}, bad), std::invalid_argument);
    bad.lr = -1.0;
    CHECK_THROWS_AS(AdamW({&theta}, bad), std::invalid_argument);
    CHECK(AdamWConfig{}.lr == 2e-4);
}

TEST_CASE("checkpoint round-trip is bit-exact and errors are clean") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "microvla_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "params.fvck").string();

    Rng rng(71);
    Parameter a("layer.w", random_tensor({3, 4}, rng));
    Parameter b("layer.b", random_tensor({4}, rng));
    save_checkpoint(path, {&a, &b});

    Parameter a2("layer.w", Tensor::zeros({3, 4}));
    Parameter b2("layer.b", Tensor::zeros({4}));
    load_checkpoint(path, {&a2, &b2});
    CHECK(a2.value.data() == a.value.data());
    CHECK(b2.value.data() == b.value.data());

    // truncated file
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out((dir / "trunc.fvck").string(), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint((dir / "trunc.fvck").string(), {&a2, &b2}), std::runtime_error);

    // magic mismatch reports expected vs found
    {
        std::ofstream out((dir / "bad.fvck").string(), std::ios::binary);
        out.write("NOPE", 4);
    }
    try {
        load_checkpoint((dir / "bad.fvck").string(), {&a2, &b2});
        FAIL("expected runtime_error");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("FVCK") != std::string::npos);
        CHECK(msg.find("NOPE") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("unreached parameters keep exact zero grads after backward") {
    Rng rng(73);
    Parameter used("used", random_tensor({2}, rng));
    Parameter unused("unused", random_tensor({3}, rng));
    backward(sum(mul(used.value, used.value)));
    CHECK(unused.value.grad() == std::vector<double>(3, 0.0));
    bool any = false;
    for (double v : used.value.grad()) any = any || v != 0.0;
    CHECK(any);
}

TEST_CASE("transpose and reshape round-trip with gradients") {
    Rng rng(79);
    Parameter x("x", random_tensor({2, 3, 4}, rng));
    auto f = [&] {
        Tensor t = transpose(x.value, {1, 0, 2});
        Tensor r = reshape(t, {3, 8});
        return sum(mul(r, r));
    };
    CHECK(grad_check(f, {&x}).max_rel_err < 1e-8);

    Tensor t = transpose(x.value, {2, 0, 1});
    CHECK(t.shape() == Shape{4, 2, 3});
    CHECK(t.at({1, 0, 2}) == x.value.at({0, 2, 1}));
}
