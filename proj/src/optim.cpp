#include "microvla/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace microvla {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
    if (config_.lr <= 0.0) throw std::invalid_argument("AdamW: lr must be positive");
    if (config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
        throw std::invalid_argument("AdamW: betas must lie in [0, 1)");
    }
    if (config_.eps <= 0.0) throw std::invalid_argument("AdamW: eps must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
        m_.emplace_back(p->value.numel(), 0.0);
        v_.emplace_back(p->value.numel(), 0.0);
    }
}

void AdamW::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        double* __restrict__ theta = params_[pi]->value.data().data();
        const double* __restrict__ grad = params_[pi]->value.grad().data();
        double* __restrict__ m = m_[pi].data();
        double* __restrict__ v = v_[pi].data();
        const size_t n = m_[pi].size();
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double lr = config_.lr, eps = config_.eps, wd = config_.weight_decay;
        for (size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * theta[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) p->value.zero_grad();
}

void AdamW::set_lr(double lr) {
    if (lr <= 0.0) throw std::invalid_argument("AdamW: lr must be positive");
    config_.lr = lr;
}

}  // namespace microvla
