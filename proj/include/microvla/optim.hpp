#pragma once

#include <cstdint>
#include <vector>

#include "microvla/tensor.hpp"

namespace microvla {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// AdamW with bias correction and decoupled weight decay.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig config = {});

    void step();
    void zero_grad();
    std::int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return config_; }
    void set_lr(double lr);

private:
    std::vector<Parameter*> params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t step_ = 0;
};

}  // namespace microvla
