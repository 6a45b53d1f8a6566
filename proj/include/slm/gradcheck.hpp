#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "slm/common.hpp"
#include "slm/rng.hpp"

namespace slm::numerics {

// One parameter array under test: value storage is perturbed in place, grad
// holds the analytic gradient computed by the caller beforehand.
template <typename T>
struct GradCheckParam {
    std::string name;
    T* value = nullptr;
    const T* grad = nullptr;
    size_t count = 0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t coords_checked = 0;
    std::string worst_param;
    size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central differences against the analytic gradient over a sampled coordinate
// subset (all coordinates when a tensor has at most max_coords_per_param).
// f() must re-evaluate the loss at the current parameter values and be free of
// stochastic branches. Relative error uses max(|a|, |n|, 1e-6) as denominator.
template <typename T>
GradCheckReport grad_check(const std::function<double()>& f,
                           const std::vector<GradCheckParam<T>>& params, double eps,
                           size_t max_coords_per_param, Rng& rng) {
    SLM_REQUIRE(eps > 0.0, "grad_check: eps must be positive");
    GradCheckReport report;
    for (const auto& p : params) {
        std::vector<size_t> coords;
        if (p.count <= max_coords_per_param) {
            coords.resize(p.count);
            for (size_t i = 0; i < p.count; ++i) coords[i] = i;
        } else {
            coords.reserve(max_coords_per_param);
            for (size_t i = 0; i < max_coords_per_param; ++i)
                coords.push_back(rng.uniform_below(p.count));
        }
        for (size_t c : coords) {
            const T saved = p.value[c];
            p.value[c] = saved + static_cast<T>(eps);
            const double f_plus = f();
            p.value[c] = saved - static_cast<T>(eps);
            const double f_minus = f();
            p.value[c] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                fail_numeric("grad_check: non-finite function value at " + p.name);
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double analytic = static_cast<double>(p.grad[c]);
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
            const double rel = std::fabs(analytic - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name;
                report.worst_index = c;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace slm::numerics
