#include "microvla/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "microvla/rng.hpp"

namespace microvla {

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Parameter*>& params,
                           double eps, int max_coords_per_param) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

    for (Parameter* p : params) p->value.zero_grad();
    {
        Tensor loss = f();
        if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss at base point");
        backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->value.grad());

    GradCheckResult result;
    Rng coord_rng(0x6a09e667f3bcc908ull);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        std::vector<double>& theta = p->value.data();
        const std::int64_t n = static_cast<std::int64_t>(theta.size());

        std::vector<std::int64_t> coords;
        if (max_coords_per_param > 0 && n > max_coords_per_param) {
            coords.reserve(max_coords_per_param);
            for (int c = 0; c < max_coords_per_param; ++c) {
                coords.push_back(static_cast<std::int64_t>(coord_rng.uniform_u64(static_cast<std::uint64_t>(n))));
            }
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        } else {
            coords.resize(n);
            for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
        }

        for (std::int64_t i : coords) {
            const double saved = theta[i];
            double plus, minus;
            {
                NoGradGuard no_grad;
                theta[i] = saved + eps;
                plus = f().item();
                theta[i] = saved - eps;
                minus = f().item();
                theta[i] = saved;
            }
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                throw std::runtime_error("grad_check: non-finite output while perturbing parameter '" + p->name +
                                         "' at index " + std::to_string(i));
            }
            const double numeric = (plus - minus) / (2.0 * eps);
            const double rel = std::fabs(analytic[pi][i] - numeric) / std::max(1.0, std::fabs(numeric));
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = p->name;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace microvla
