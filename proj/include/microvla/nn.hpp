#pragma once

#include <string>
#include <vector>

#include "microvla/rng.hpp"
#include "microvla/tensor.hpp"

namespace microvla {

enum class InitKind { Xavier, Normal, Zero };

Tensor init_tensor(Shape shape, InitKind kind, Rng& rng, double scale = 1.0);

// y = x W + b with W stored [in, out]. Applies over the last dimension of x.
struct Linear {
    Parameter weight;
    Parameter bias;

    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng, InitKind kind = InitKind::Xavier,
           double init_scale = 1.0);

    Tensor operator()(const Tensor& x) const { return linear(x, weight.value, bias.value); }
    void collect(std::vector<Parameter*>& out);
    int in_features() const { return weight.value.shape()[0]; }
    int out_features() const { return weight.value.shape()[1]; }
};

struct NormParams {
    Parameter gain;  // ones
    Parameter bias;  // zeros

    NormParams() = default;
    NormParams(const std::string& name, int width);

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain.value, bias.value); }
    void collect(std::vector<Parameter*>& out);
};

// Uniform random rotation matrix [n, n] (Gram-Schmidt on a Gaussian draw).
Tensor random_orthogonal(int n, Rng& rng);

// Enforces the unique-name invariant across a model's parameters.
void check_unique_names(const std::vector<Parameter*>& params);

}  // namespace microvla
