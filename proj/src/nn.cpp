#include "microvla/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace microvla {

Tensor init_tensor(Shape shape, InitKind kind, Rng& rng, double scale) {
    const std::int64_t n = shape_numel(shape);
    std::vector<double> values(n, 0.0);
    switch (kind) {
        case InitKind::Xavier: {
            const int fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : shape.back();
            const int fan_out = shape.back();
            const double a = scale * std::sqrt(6.0 / (fan_in + fan_out));
            for (double& v : values) v = rng.uniform(-a, a);
            break;
        }
        case InitKind::Normal:
            for (double& v : values) v = scale * rng.normal();
            break;
        case InitKind::Zero:
            break;
    }
    return Tensor::from_data(std::move(shape), std::move(values));
}

Linear::Linear(const std::string& name, int in, int out, Rng& rng, InitKind kind, double init_scale)
    : weight(name + ".w", init_tensor({in, out}, kind, rng, init_scale)),
      bias(name + ".b", Tensor::zeros({out})) {}

void Linear::collect(std::vector<Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

NormParams::NormParams(const std::string& name, int width)
    : gain(name + ".gain", Tensor::full({width}, 1.0)), bias(name + ".bias", Tensor::zeros({width})) {}

void NormParams::collect(std::vector<Parameter*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
}

Tensor random_orthogonal(int n, Rng& rng) {
    // modified Gram-Schmidt on a Gaussian draw
    std::vector<std::vector<double>> rows(n, std::vector<double>(n));
    for (auto& row : rows) {
        for (double& v : row) v = rng.normal();
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0.0;
            for (int c = 0; c < n; ++c) dot += rows[i][c] * rows[j][c];
            for (int c = 0; c < n; ++c) rows[i][c] -= dot * rows[j][c];
        }
        double norm = 0.0;
        for (double v : rows[i]) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-9) {
            for (double& v : rows[i]) v = rng.normal();
            norm = 1.0;  // retry-ish; vanishing draws are measure zero
        }
        for (double& v : rows[i]) v /= norm;
    }
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(n) * n);
    for (const auto& row : rows) flat.insert(flat.end(), row.begin(), row.end());
    return Tensor::from_data({n, n}, std::move(flat));
}

void check_unique_names(const std::vector<Parameter*>& params) {
    std::unordered_set<std::string> seen;
    for (const Parameter* p : params) {
        if (!seen.insert(p->name).second) {
            throw std::logic_error("duplicate parameter name '" + p->name + "'");
        }
    }
}

}  // namespace microvla
