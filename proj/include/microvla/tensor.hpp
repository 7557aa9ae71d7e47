#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace microvla {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched; same length as data afterwards
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Scoped switch that disables graph recording (inference / finite differences).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();
};

// Dense row-major tensor with reverse-mode gradients recorded per op.
// 64-bit values throughout; the graph is a DAG of shared nodes and a
// backward() call replays the recorded closures in reverse topological order.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int dim() const;
    int size(int axis) const;  // negative axes allowed
    std::int64_t numel() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    std::vector<double>& grad();              // allocates zeros on first use
    const std::vector<double>& grad() const;  // throws if never allocated
    bool has_grad() const;
    void zero_grad();

    bool requires_grad() const;
    double item() const;
    double at(const std::vector<int>& index) const;

    // Value copy detached from the graph.
    Tensor detached() const;

    const std::shared_ptr<detail::Node>& impl() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// A named trainable tensor. Gradient buffers exist from construction so that
// parameters never reached by backward() report exact zeros.
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string n, Tensor v);
};

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a [.., m, k] x b [.., n, k] -> [.., m, n]; the attention-score product.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// Fused x W + b over the last dimension: x [.., k], w [k, n], b [n].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);

// Row-max stabilised softmax over the last dimension. -inf entries map to
// exactly zero weight and zero gradient; a row that is entirely -inf throws.
Tensor softmax_rows(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor concat_last_dim(const std::vector<Tensor>& parts);
Tensor narrow(const Tensor& x, int axis, int start, int length);

// Row gather from a 2-d table with scatter-add gradient.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

void backward(const Tensor& loss);

// Indices of the k largest scores, ascending; ties break toward the lower index.
std::vector<int> topk_indices(const std::vector<double>& scores, int k);

}  // namespace microvla
