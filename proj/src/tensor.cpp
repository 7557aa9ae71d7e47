#include "microvla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace microvla {

namespace {

#if defined(__GLIBC__)
// Activation buffers run past the default mmap threshold; keep them on the
// heap so freed graph storage is reused instead of unmapped every step.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
}();
#endif

thread_local int g_no_grad_depth = 0;

constexpr double kInf = std::numeric_limits<double>::infinity();

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> data) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return node;
}

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
    if (NoGradGuard::active()) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void attach(const NodePtr& out, std::initializer_list<NodePtr> parents, std::function<void(detail::Node&)> fn) {
    out->requires_grad = true;
    for (const auto& p : parents) {
        if (p->requires_grad) out->parents.push_back(p);
    }
    out->backward_fn = std::move(fn);
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size());
    std::int64_t acc = 1;
    for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
        strides[d] = acc;
        acc *= shape[d];
    }
    return strides;
}

// Aligns two shapes from the trailing dimension; a dimension may differ only
// if one side is 1 (or absent).
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const int rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (int i = 0; i < rank; ++i) {
        const int da = i < static_cast<int>(a.size()) ? a[a.size() - 1 - i] : 1;
        const int db = i < static_cast<int>(b.size()) ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument(std::string(op) + ": shapes not broadcastable: " + shape_str(a) +
                                        " vs " + shape_str(b));
        }
        out[rank - 1 - i] = std::max(da, db);
    }
    return out;
}

// Per-output-dimension element strides into a source tensor, zero where the
// source is broadcast.
std::vector<std::int64_t> broadcast_strides(const Shape& src, const Shape& out) {
    const int rank = static_cast<int>(out.size());
    const auto src_strides = row_major_strides(src);
    std::vector<std::int64_t> strides(rank, 0);
    for (int i = 0; i < rank; ++i) {
        const int os = out[rank - 1 - i];
        const int ss = i < static_cast<int>(src.size()) ? src[src.size() - 1 - i] : 1;
        if (ss == os && ss != 0) {
            strides[rank - 1 - i] = i < static_cast<int>(src.size()) ? src_strides[src.size() - 1 - i] : 0;
        } else {
            strides[rank - 1 - i] = 0;  // broadcast
        }
    }
    return strides;
}

template <class F>
void for_each_pair(const Shape& out_shape, const std::vector<std::int64_t>& sa,
                   const std::vector<std::int64_t>& sb, F&& f) {
    const int rank = static_cast<int>(out_shape.size());
    const std::int64_t n = shape_numel(out_shape);
    std::vector<int> idx(rank, 0);
    std::int64_t offa = 0, offb = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        f(o, offa, offb);
        for (int d = rank - 1; d >= 0; --d) {
            ++idx[d];
            offa += sa[d];
            offb += sb[d];
            if (idx[d] < out_shape[d]) break;
            offa -= static_cast<std::int64_t>(idx[d]) * sa[d];
            offb -= static_cast<std::int64_t>(idx[d]) * sb[d];
            idx[d] = 0;
        }
    }
}

// True when `inner` is a trailing suffix of `outer` (the bias-broadcast case).
bool is_trailing_suffix(const Shape& inner, const Shape& outer) {
    if (inner.size() > outer.size()) return false;
    for (size_t i = 0; i < inner.size(); ++i) {
        if (inner[inner.size() - 1 - i] != outer[outer.size() - 1 - i]) return false;
    }
    return true;
}

// Elementwise binary op with broadcasting. Fwd/dfa/dfb take (a_val, b_val).
// Same-shape and trailing-suffix operands skip the strided walk.
template <class Fwd, class Dfa, class Dfb>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa, Dfb dfb) {
    const auto& an = a.impl();
    const auto& bn = b.impl();
    const Shape out_shape = broadcast_shapes(an->shape, bn->shape, name);
    const std::int64_t n = shape_numel(out_shape);
    std::vector<double> out(n);

    const bool same = an->shape == bn->shape;
    const bool b_suffix = !same && out_shape == an->shape && is_trailing_suffix(bn->shape, an->shape);
    const std::int64_t suffix_len = b_suffix ? bn->numel() : 0;

    const double* pa = an->data.data();
    const double* pb = bn->data.data();
    if (same) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    } else if (b_suffix) {
        for (std::int64_t base = 0; base < n; base += suffix_len) {
            double* o = out.data() + base;
            const double* va = pa + base;
            for (std::int64_t i = 0; i < suffix_len; ++i) o[i] = fwd(va[i], pb[i]);
        }
    } else {
        const auto sa = broadcast_strides(an->shape, out_shape);
        const auto sb = broadcast_strides(bn->shape, out_shape);
        for_each_pair(out_shape, sa, sb,
                      [&](std::int64_t o, std::int64_t ia, std::int64_t ib) { out[o] = fwd(pa[ia], pb[ib]); });
    }

    auto node = make_node(out_shape, std::move(out));
    if (grad_enabled({&a, &b})) {
        attach(node, {an, bn}, [an, bn, out_shape, same, b_suffix, suffix_len, dfa, dfb](detail::Node& self) {
            const std::int64_t n = self.numel();
            const double* go = self.grad.data();
            const double* pa = an->data.data();
            const double* pb = bn->data.data();
            double* ga = nullptr;
            double* gb = nullptr;
            if (an->requires_grad) {
                an->ensure_grad();
                ga = an->grad.data();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                gb = bn->grad.data();
            }
            if (same) {
                for (std::int64_t i = 0; i < n; ++i) {
                    if (ga) ga[i] += go[i] * dfa(pa[i], pb[i]);
                    if (gb) gb[i] += go[i] * dfb(pa[i], pb[i]);
                }
            } else if (b_suffix) {
                for (std::int64_t base = 0; base < n; base += suffix_len) {
                    const double* g = go + base;
                    const double* va = pa + base;
                    for (std::int64_t i = 0; i < suffix_len; ++i) {
                        if (ga) ga[base + i] += g[i] * dfa(va[i], pb[i]);
                        if (gb) gb[i] += g[i] * dfb(va[i], pb[i]);
                    }
                }
            } else {
                const auto sa = broadcast_strides(an->shape, out_shape);
                const auto sb = broadcast_strides(bn->shape, out_shape);
                for_each_pair(out_shape, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                    if (ga) ga[ia] += go[o] * dfa(pa[ia], pb[ib]);
                    if (gb) gb[ib] += go[o] * dfb(pa[ia], pb[ib]);
                });
            }
        });
    }
    return Tensor(node);
}

// Elementwise unary op; derivative receives (x, y).
template <class Fwd, class Dfx>
Tensor unary_op(const Tensor& x, Fwd fwd, Dfx dfx) {
    const auto& xn = x.impl();
    const std::int64_t n = xn->numel();
    std::vector<double> out(n);
    const double* px = xn->data.data();
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(px[i]);

    auto node = make_node(xn->shape, std::move(out));
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn, dfx](detail::Node& self) {
            xn->ensure_grad();
            const double* go = self.grad.data();
            const double* px = xn->data.data();
            const double* py = self.data.data();
            double* gx = xn->grad.data();
            const std::int64_t n = self.numel();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * dfx(px[i], py[i]);
        });
    }
    return Tensor(node);
}

struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t axis = 1;
    std::int64_t inner = 1;
};

AxisSplit split_at_axis(const Shape& shape, int axis) {
    AxisSplit s;
    for (int d = 0; d < axis; ++d) s.outer *= shape[d];
    s.axis = shape[axis];
    for (int d = axis + 1; d < static_cast<int>(shape.size()); ++d) s.inner *= shape[d];
    return s;
}

int normalize_axis(int axis, int rank, const char* op) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) throw std::invalid_argument(std::string(op) + ": axis out of range");
    return a;
}

}  // namespace

// ---- shape helpers ---------------------------------------------------------

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- NoGradGuard ------------------------------------------------------------

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape(shape);
    const std::int64_t n = shape_numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad && !NoGradGuard::active();
    return Tensor(node);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("from_data: " + shape_str(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
    }
    auto node = make_node(std::move(shape), std::move(values));
    node->requires_grad = requires_grad && !NoGradGuard::active();
    return Tensor(node);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim() const { return static_cast<int>(node_->shape.size()); }

int Tensor::size(int axis) const {
    return node_->shape[normalize_axis(axis, dim(), "size")];
}

std::int64_t Tensor::numel() const { return node_->numel(); }

std::vector<double>& Tensor::data() { return node_->data; }
const std::vector<double>& Tensor::data() const { return node_->data; }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.size() != node_->data.size()) throw std::runtime_error("grad not allocated");
    return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

void Tensor::zero_grad() {
    node_->grad.assign(node_->data.size(), 0.0);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

double Tensor::at(const std::vector<int>& index) const {
    if (static_cast<int>(index.size()) != dim()) throw std::invalid_argument("at: rank mismatch");
    const auto strides = row_major_strides(node_->shape);
    std::int64_t off = 0;
    for (size_t d = 0; d < index.size(); ++d) {
        if (index[d] < 0 || index[d] >= node_->shape[d]) throw std::out_of_range("at: index out of range");
        off += index[d] * strides[d];
    }
    return node_->data[off];
}

Tensor Tensor::detached() const {
    return Tensor::from_data(node_->shape, node_->data, false);
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    value.impl()->requires_grad = true;
    value.zero_grad();
}

// ---- matmul -----------------------------------------------------------------

namespace {

// Four A rows share each B row load; per-element accumulation order is the
// same as the plain i-k-j loop, so results are bit-identical to it.
void matmul_kernel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = a + static_cast<std::int64_t>(i) * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        double* c0 = c + static_cast<std::int64_t>(i) * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        for (int kk = 0; kk < k; ++kk) {
            const double* b_row = b + static_cast<std::int64_t>(kk) * n;
            const double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
            for (int j = 0; j < n; ++j) {
                c0[j] += v0 * b_row[j];
                c1[j] += v1 * b_row[j];
                c2[j] += v2 * b_row[j];
                c3[j] += v3 * b_row[j];
            }
        }
    }
    for (; i < m; ++i) {
        double* c_row = c + static_cast<std::int64_t>(i) * n;
        const double* a_row = a + static_cast<std::int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = a_row[kk];
            const double* b_row = b + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) c_row[j] += av * b_row[j];
        }
    }
}

// Row dot product with eight independent accumulators; the fixed combine
// order keeps results deterministic while letting the lanes vectorize.
inline double row_dot(const double* __restrict__ a, const double* __restrict__ b, int n) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
    }
    for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// dA += dC * B^T
void matmul_grad_a(const double* __restrict__ dc, const double* __restrict__ b, double* __restrict__ da, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* dc_row = dc + static_cast<std::int64_t>(i) * n;
        double* da_row = da + static_cast<std::int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            da_row[kk] += row_dot(dc_row, b + static_cast<std::int64_t>(kk) * n, n);
        }
    }
}

// dB += A^T * dC
void matmul_grad_b(const double* __restrict__ a, const double* __restrict__ dc, double* __restrict__ db, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a_row = a + static_cast<std::int64_t>(i) * k;
        const double* dc_row = dc + static_cast<std::int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = a_row[kk];
            double* db_row = db + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) db_row[j] += av * dc_row[j];
        }
    }
}

// C[i,j] += dot(a_row_i, b_row_j) with both rows contiguous.
void matmul_nt_kernel(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a_row = a + static_cast<std::int64_t>(i) * k;
        double* c_row = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            c_row[j] += row_dot(a_row, b + static_cast<std::int64_t>(j) * k, k);
        }
    }
}

// dB += dC^T * A for C = A B^T
void matmul_nt_grad_b(const double* __restrict__ a, const double* __restrict__ dc, double* __restrict__ db, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a_row = a + static_cast<std::int64_t>(i) * k;
        const double* dc_row = dc + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double v = dc_row[j];
            double* db_row = db + static_cast<std::int64_t>(j) * k;
            for (int kk = 0; kk < k; ++kk) db_row[kk] += v * a_row[kk];
        }
    }
}

struct MatmulGeometry {
    Shape out_shape;
    Shape batch_shape;
    std::vector<std::int64_t> a_batch_strides;  // in matrices
    std::vector<std::int64_t> b_batch_strides;
    int m = 0, k = 0, n = 0;
};

MatmulGeometry matmul_geometry(const Shape& sa, const Shape& sb, bool transpose_b, const char* name) {
    if (sa.size() < 2 || sb.size() < 2) {
        throw std::invalid_argument(std::string(name) + ": operands must have rank >= 2, got " + shape_str(sa) +
                                    " x " + shape_str(sb));
    }
    MatmulGeometry g;
    g.m = sa[sa.size() - 2];
    g.k = sa[sa.size() - 1];
    g.n = transpose_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
    const int b_inner = transpose_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
    if (b_inner != g.k) {
        throw std::invalid_argument(std::string(name) + ": inner dimensions mismatch: " + shape_str(sa) + " x " +
                                    shape_str(sb));
    }
    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    g.batch_shape = broadcast_shapes(batch_a, batch_b, name);
    g.out_shape = g.batch_shape;
    g.out_shape.push_back(g.m);
    g.out_shape.push_back(g.n);
    if (g.batch_shape.empty()) g.batch_shape = {1};
    auto sa_b = broadcast_strides(batch_a, g.batch_shape);
    auto sb_b = broadcast_strides(batch_b, g.batch_shape);
    g.a_batch_strides = std::move(sa_b);
    g.b_batch_strides = std::move(sb_b);
    return g;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& an = a.impl();
    const auto& bn = b.impl();
    const MatmulGeometry g = matmul_geometry(an->shape, bn->shape, false, "matmul");
    const std::int64_t mk = static_cast<std::int64_t>(g.m) * g.k;
    const std::int64_t kn = static_cast<std::int64_t>(g.k) * g.n;
    const std::int64_t mn = static_cast<std::int64_t>(g.m) * g.n;

    std::vector<double> out(shape_numel(g.out_shape), 0.0);
    {
        const double* pa = an->data.data();
        const double* pb = bn->data.data();
        double* pc = out.data();
        std::int64_t batch_index = 0;
        for_each_pair(g.batch_shape, g.a_batch_strides, g.b_batch_strides,
                      [&](std::int64_t, std::int64_t ia, std::int64_t ib) {
                          matmul_kernel(pa + ia * mk, pb + ib * kn, pc + batch_index * mn, g.m, g.k, g.n);
                          ++batch_index;
                      });
    }

    auto node = make_node(g.out_shape, std::move(out));
    if (grad_enabled({&a, &b})) {
        attach(node, {an, bn}, [an, bn, g, mk, kn, mn](detail::Node& self) {
            const double* go = self.grad.data();
            const double* pa = an->data.data();
            const double* pb = bn->data.data();
            double* ga = nullptr;
            double* gb = nullptr;
            if (an->requires_grad) {
                an->ensure_grad();
                ga = an->grad.data();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                gb = bn->grad.data();
            }
            std::int64_t batch_index = 0;
            for_each_pair(g.batch_shape, g.a_batch_strides, g.b_batch_strides,
                          [&](std::int64_t, std::int64_t ia, std::int64_t ib) {
                              const double* dc = go + batch_index * mn;
                              if (ga) matmul_grad_a(dc, pb + ib * kn, ga + ia * mk, g.m, g.k, g.n);
                              if (gb) matmul_grad_b(pa + ia * mk, dc, gb + ib * kn, g.m, g.k, g.n);
                              ++batch_index;
                          });
        });
    }
    return Tensor(node);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const auto& an = a.impl();
    const auto& bn = b.impl();
    const MatmulGeometry g = matmul_geometry(an->shape, bn->shape, true, "matmul_nt");
    const std::int64_t mk = static_cast<std::int64_t>(g.m) * g.k;
    const std::int64_t nk = static_cast<std::int64_t>(g.n) * g.k;
    const std::int64_t mn = static_cast<std::int64_t>(g.m) * g.n;

    std::vector<double> out(shape_numel(g.out_shape), 0.0);
    {
        const double* pa = an->data.data();
        const double* pb = bn->data.data();
        double* pc = out.data();
        std::int64_t batch_index = 0;
        for_each_pair(g.batch_shape, g.a_batch_strides, g.b_batch_strides,
                      [&](std::int64_t, std::int64_t ia, std::int64_t ib) {
                          matmul_nt_kernel(pa + ia * mk, pb + ib * nk, pc + batch_index * mn, g.m, g.k, g.n);
                          ++batch_index;
                      });
    }

    auto node = make_node(g.out_shape, std::move(out));
    if (grad_enabled({&a, &b})) {
        attach(node, {an, bn}, [an, bn, g, mk, nk, mn](detail::Node& self) {
            const double* go = self.grad.data();
            const double* pa = an->data.data();
            const double* pb = bn->data.data();
            double* ga = nullptr;
            double* gb = nullptr;
            if (an->requires_grad) {
                an->ensure_grad();
                ga = an->grad.data();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                gb = bn->grad.data();
            }
            std::int64_t batch_index = 0;
            for_each_pair(g.batch_shape, g.a_batch_strides, g.b_batch_strides,
                          [&](std::int64_t, std::int64_t ia, std::int64_t ib) {
                              const double* dc = go + batch_index * mn;
                              // dA += dC * B (plain product), dB += dC^T * A
                              if (ga) matmul_kernel(dc, pb + ib * nk, ga + ia * mk, g.m, g.n, g.k);
                              if (gb) matmul_nt_grad_b(pa + ia * mk, dc, gb + ib * nk, g.m, g.k, g.n);
                              ++batch_index;
                          });
        });
    }
    return Tensor(node);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const auto& xn = x.impl();
    const auto& wn = w.impl();
    const auto& bn = b.impl();
    if (wn->shape.size() != 2 || bn->shape.size() != 1 || bn->shape[0] != wn->shape[1]) {
        throw std::invalid_argument("linear: weight must be [in, out] with a matching [out] bias");
    }
    const int k = wn->shape[0];
    const int n = wn->shape[1];
    if (xn->shape.empty() || xn->shape.back() != k) {
        throw std::invalid_argument("linear: input " + shape_str(xn->shape) + " does not end in " +
                                    std::to_string(k));
    }
    const std::int64_t rows = xn->numel() / k;

    Shape out_shape = xn->shape;
    out_shape.back() = n;
    std::vector<double> out(rows * n);
    {
        const double* pb = bn->data.data();
        for (std::int64_t i = 0; i < rows; ++i) std::copy(pb, pb + n, out.data() + i * n);
        matmul_kernel(xn->data.data(), wn->data.data(), out.data(), static_cast<int>(rows), k, n);
    }

    auto node = make_node(std::move(out_shape), std::move(out));
    if (grad_enabled({&x, &w, &b})) {
        attach(node, {xn, wn, bn}, [xn, wn, bn, rows, k, n](detail::Node& self) {
            const double* go = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                matmul_grad_a(go, wn->data.data(), xn->grad.data(), static_cast<int>(rows), k, n);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                matmul_grad_b(xn->data.data(), go, wn->grad.data(), static_cast<int>(rows), k, n);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                for (std::int64_t i = 0; i < rows; ++i) {
                    const double* row = go + i * n;
                    for (int j = 0; j < n; ++j) gb[j] += row[j];
                }
            }
        });
    }
    return Tensor(node);
}

// ---- transpose / reshape ----------------------------------------------------

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
    const auto& xn = x.impl();
    const int rank = static_cast<int>(xn->shape.size());
    if (static_cast<int>(perm.size()) != rank) throw std::invalid_argument("transpose: perm rank mismatch");
    std::vector<bool> seen(rank, false);
    Shape out_shape(rank);
    for (int d = 0; d < rank; ++d) {
        if (perm[d] < 0 || perm[d] >= rank || seen[perm[d]]) {
            throw std::invalid_argument("transpose: invalid permutation");
        }
        seen[perm[d]] = true;
        out_shape[d] = xn->shape[perm[d]];
    }

    const auto in_strides = row_major_strides(xn->shape);
    std::vector<std::int64_t> gather(rank);
    for (int d = 0; d < rank; ++d) gather[d] = in_strides[perm[d]];

    const std::int64_t n = xn->numel();
    std::vector<double> out(n);
    {
        const double* px = xn->data.data();
        std::vector<int> idx(rank, 0);
        std::int64_t src = 0;
        for (std::int64_t o = 0; o < n; ++o) {
            out[o] = px[src];
            for (int d = rank - 1; d >= 0; --d) {
                ++idx[d];
                src += gather[d];
                if (idx[d] < out_shape[d]) break;
                src -= static_cast<std::int64_t>(idx[d]) * gather[d];
                idx[d] = 0;
            }
        }
    }

    auto node = make_node(out_shape, std::move(out));
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn, out_shape, gather, rank](detail::Node& self) {
            xn->ensure_grad();
            double* gx = xn->grad.data();
            const double* go = self.grad.data();
            const std::int64_t n = self.numel();
            std::vector<int> idx(rank, 0);
            std::int64_t src = 0;
            for (std::int64_t o = 0; o < n; ++o) {
                gx[src] += go[o];
                for (int d = rank - 1; d >= 0; --d) {
                    ++idx[d];
                    src += gather[d];
                    if (idx[d] < out_shape[d]) break;
                    src -= static_cast<std::int64_t>(idx[d]) * gather[d];
                    idx[d] = 0;
                }
            }
        });
    }
    return Tensor(node);
}

Tensor reshape(const Tensor& x, Shape shape) {
    validate_shape(shape);
    const auto& xn = x.impl();
    if (shape_numel(shape) != xn->numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(xn->shape) + " as " + shape_str(shape));
    }
    auto node = make_node(std::move(shape), xn->data);
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn](detail::Node& self) {
            xn->ensure_grad();
            double* gx = xn->grad.data();
            const double* go = self.grad.data();
            const std::int64_t n = self.numel();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i];
        });
    }
    return Tensor(node);
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary_op(
        x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_op(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
}

Tensor abs(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    const auto& xn = x.impl();
    const int width = xn->shape.back();
    const std::int64_t rows = xn->numel() / width;
    std::vector<double> out(xn->numel());
    const double* px = xn->data.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * width;
        double m = -kInf;
        for (int j = 0; j < width; ++j) m = std::max(m, row[j]);
        if (m == -kInf) {
            throw std::runtime_error("softmax_rows: row " + std::to_string(r) + " is entirely -inf");
        }
        double s = 0.0;
        double* orow = out.data() + r * width;
        for (int j = 0; j < width; ++j) {
            orow[j] = std::exp(row[j] - m);
            s += orow[j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < width; ++j) orow[j] *= inv;
    }

    auto node = make_node(xn->shape, std::move(out));
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn, width, rows](detail::Node& self) {
            xn->ensure_grad();
            double* gx = xn->grad.data();
            const double* go = self.grad.data();
            const double* w = self.data.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* wr = w + r * width;
                const double* gr = go + r * width;
                double dot = 0.0;
                for (int j = 0; j < width; ++j) dot += wr[j] * gr[j];
                double* gxr = gx + r * width;
                for (int j = 0; j < width; ++j) gxr[j] += wr[j] * (gr[j] - dot);
            }
        });
    }
    return Tensor(node);
}

// ---- layer norm -------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const auto& xn = x.impl();
    const auto& gn = gain.impl();
    const auto& bn = bias.impl();
    const int width = xn->shape.back();
    if (gn->shape != Shape{width} || bn->shape != Shape{width}) {
        throw std::invalid_argument("layer_norm: gain/bias must have shape [" + std::to_string(width) + "]");
    }
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");

    const std::int64_t rows = xn->numel() / width;
    std::vector<double> out(xn->numel());
    auto xhat = std::make_shared<std::vector<double>>(xn->numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);

    const double* px = xn->data.data();
    const double* pg = gn->data.data();
    const double* pb = bn->data.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * width;
        double mean = 0.0;
        for (int j = 0; j < width; ++j) mean += row[j];
        mean /= width;
        double var = 0.0;
        for (int j = 0; j < width; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= width;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        double* xh = xhat->data() + r * width;
        double* orow = out.data() + r * width;
        for (int j = 0; j < width; ++j) {
            xh[j] = (row[j] - mean) * inv;
            orow[j] = pg[j] * xh[j] + pb[j];
        }
    }

    auto node = make_node(xn->shape, std::move(out));
    if (grad_enabled({&x, &gain, &bias})) {
        attach(node, {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, width, rows](detail::Node& self) {
            const double* go = self.grad.data();
            const double* pg = gn->data.data();
            const double* xh = xhat->data();
            double* gx = nullptr;
            double* gg = nullptr;
            double* gb = nullptr;
            if (xn->requires_grad) {
                xn->ensure_grad();
                gx = xn->grad.data();
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                gg = gn->grad.data();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                gb = bn->grad.data();
            }
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gr = go + r * width;
                const double* xhr = xh + r * width;
                if (gg || gb) {
                    for (int j = 0; j < width; ++j) {
                        if (gg) gg[j] += gr[j] * xhr[j];
                        if (gb) gb[j] += gr[j];
                    }
                }
                if (gx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < width; ++j) {
                        const double gy = gr[j] * pg[j];
                        m1 += gy;
                        m2 += gy * xhr[j];
                    }
                    m1 /= width;
                    m2 /= width;
                    const double inv = (*inv_std)[r];
                    double* gxr = gx + r * width;
                    for (int j = 0; j < width; ++j) {
                        const double gy = gr[j] * pg[j];
                        gxr[j] += inv * (gy - m1 - xhr[j] * m2);
                    }
                }
            }
        });
    }
    return Tensor(node);
}

// ---- concat / narrow --------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty part list");
    const int rank = parts[0].dim();
    const int ax = normalize_axis(axis, rank, "concat");
    Shape out_shape = parts[0].shape();
    int total_axis = 0;
    for (const Tensor& p : parts) {
        if (p.dim() != rank) throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d != ax && p.shape()[d] != out_shape[d]) {
                throw std::invalid_argument("concat: shape mismatch: " + shape_str(out_shape) + " vs " +
                                            shape_str(p.shape()));
            }
        }
        total_axis += p.shape()[ax];
    }
    out_shape[ax] = total_axis;

    const AxisSplit os = split_at_axis(out_shape, ax);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::int64_t> part_blocks;  // axis_len * inner per part
    part_blocks.reserve(parts.size());
    for (const Tensor& p : parts) part_blocks.push_back(static_cast<std::int64_t>(p.shape()[ax]) * os.inner);

    const std::int64_t out_block = os.axis * os.inner;
    for (std::int64_t o = 0; o < os.outer; ++o) {
        std::int64_t dst = o * out_block;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const double* src = parts[pi].data().data() + o * part_blocks[pi];
            std::copy(src, src + part_blocks[pi], out.data() + dst);
            dst += part_blocks[pi];
        }
    }

    auto node = make_node(out_shape, std::move(out));
    bool any_grad = false;
    for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
    if (any_grad && !NoGradGuard::active()) {
        std::vector<NodePtr> pnodes;
        pnodes.reserve(parts.size());
        for (const Tensor& p : parts) pnodes.push_back(p.impl());
        node->requires_grad = true;
        for (const auto& p : pnodes) {
            if (p->requires_grad) node->parents.push_back(p);
        }
        node->backward_fn = [pnodes, part_blocks, os, out_block](detail::Node& self) {
            const double* go = self.grad.data();
            for (std::int64_t o = 0; o < os.outer; ++o) {
                std::int64_t src = o * out_block;
                for (size_t pi = 0; pi < pnodes.size(); ++pi) {
                    if (pnodes[pi]->requires_grad) {
                        pnodes[pi]->ensure_grad();
                        double* gp = pnodes[pi]->grad.data() + o * part_blocks[pi];
                        const double* g = go + src;
                        for (std::int64_t i = 0; i < part_blocks[pi]; ++i) gp[i] += g[i];
                    }
                    src += part_blocks[pi];
                }
            }
        };
    }
    return Tensor(node);
}

Tensor concat_last_dim(const std::vector<Tensor>& parts) { return concat(parts, -1); }

Tensor narrow(const Tensor& x, int axis, int start, int length) {
    const auto& xn = x.impl();
    const int rank = static_cast<int>(xn->shape.size());
    const int ax = normalize_axis(axis, rank, "narrow");
    if (start < 0 || length <= 0 || start + length > xn->shape[ax]) {
        throw std::invalid_argument("narrow: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + length) + ") out of bounds for " + shape_str(xn->shape));
    }
    Shape out_shape = xn->shape;
    out_shape[ax] = length;
    const AxisSplit is = split_at_axis(xn->shape, ax);
    const std::int64_t in_block = is.axis * is.inner;
    const std::int64_t out_block = static_cast<std::int64_t>(length) * is.inner;
    const std::int64_t offset = static_cast<std::int64_t>(start) * is.inner;

    std::vector<double> out(shape_numel(out_shape));
    const double* px = xn->data.data();
    for (std::int64_t o = 0; o < is.outer; ++o) {
        std::copy(px + o * in_block + offset, px + o * in_block + offset + out_block, out.data() + o * out_block);
    }

    auto node = make_node(out_shape, std::move(out));
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn, is, in_block, out_block, offset](detail::Node& self) {
            xn->ensure_grad();
            double* gx = xn->grad.data();
            const double* go = self.grad.data();
            for (std::int64_t o = 0; o < is.outer; ++o) {
                double* dst = gx + o * in_block + offset;
                const double* src = go + o * out_block;
                for (std::int64_t i = 0; i < out_block; ++i) dst[i] += src[i];
            }
        });
    }
    return Tensor(node);
}

// ---- embedding --------------------------------------------------------------

Tensor embedding_rows(const Tensor& table, const std::vector<int>& rows) {
    const auto& tn = table.impl();
    if (tn->shape.size() != 2) throw std::invalid_argument("embedding_rows: table must be 2-d");
    const int n_rows = tn->shape[0];
    const int width = tn->shape[1];
    if (rows.empty()) throw std::invalid_argument("embedding_rows: empty row list");
    std::vector<double> out(rows.size() * static_cast<size_t>(width));
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= n_rows) throw std::out_of_range("embedding_rows: row index out of range");
        const double* src = tn->data.data() + static_cast<std::int64_t>(rows[i]) * width;
        std::copy(src, src + width, out.data() + i * width);
    }

    auto node = make_node({static_cast<int>(rows.size()), width}, std::move(out));
    if (grad_enabled({&table})) {
        attach(node, {tn}, [tn, rows, width](detail::Node& self) {
            tn->ensure_grad();
            double* gt = tn->grad.data();
            const double* go = self.grad.data();
            for (size_t i = 0; i < rows.size(); ++i) {
                double* dst = gt + static_cast<std::int64_t>(rows[i]) * width;
                const double* src = go + i * width;
                for (int j = 0; j < width; ++j) dst[j] += src[j];
            }
        });
    }
    return Tensor(node);
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
    const auto& xn = x.impl();
    double s = 0.0;
    for (double v : xn->data) s += v;
    auto node = make_node({1}, {s});
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn](detail::Node& self) {
            xn->ensure_grad();
            const double g = self.grad[0];
            for (double& v : xn->grad) v += g;
        });
    }
    return Tensor(node);
}

Tensor mean(const Tensor& x) {
    const auto& xn = x.impl();
    const double n = static_cast<double>(xn->numel());
    double s = 0.0;
    for (double v : xn->data) s += v;
    auto node = make_node({1}, {s / n});
    if (grad_enabled({&x})) {
        attach(node, {xn}, [xn, n](detail::Node& self) {
            xn->ensure_grad();
            const double g = self.grad[0] / n;
            for (double& v : xn->grad) v += g;
        });
    }
    return Tensor(node);
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    const auto& root = loss.impl();
    if (!root->requires_grad) return;  // constant loss: nothing reachable, grads stay zero

    // Iterative post-order DFS over requires-grad parents.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next].get();
            ++next;
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

// ---- topk -------------------------------------------------------------------

std::vector<int> topk_indices(const std::vector<double>& scores, int k) {
    const int n = static_cast<int>(scores.size());
    if (k < 1 || k > n) {
        throw std::invalid_argument("topk_indices: k=" + std::to_string(k) + " out of range for n=" +
                                    std::to_string(n));
    }
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace microvla
