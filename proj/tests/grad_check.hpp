#pragma once

// Central finite-difference gradient verification used across the test
// suites. Independent of the autograd implementation: it only perturbs
// parameter values and re-runs the provided scalar forward function.

#include <cmath>
#include <functional>
#include <vector>

#include "panda/nn.hpp"

namespace panda::testing {

struct GradCheckResult {
    double rel_error = 0.0;     // ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)
    double analytic_norm = 0.0;
    double fd_norm = 0.0;
    int64_t n_params = 0;
};

// forward() must rebuild the graph from current parameter values and return
// the scalar loss value. Analytic gradients must already be accumulated in
// the params before the call.
inline GradCheckResult finite_diff_check(const nn::ParamList<double>& params,
                                         const std::function<double()>& forward,
                                         double h = 1e-6) {
    std::vector<double> analytic, fd;
    for (const auto& p : params) {
        auto& var = *p.var;
        for (int64_t i = 0; i < var.value().numel(); ++i) {
            analytic.push_back(var.grad().numel() == var.value().numel() ? var.grad()[i] : 0.0);
            double orig = var.value()[i];
            var.value()[i] = orig + h;
            double up = forward();
            var.value()[i] = orig - h;
            double down = forward();
            var.value()[i] = orig;
            fd.push_back((up - down) / (2.0 * h));
        }
    }
    double diff2 = 0, a2 = 0, f2 = 0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        double d = analytic[i] - fd[i];
        diff2 += d * d;
        a2 += analytic[i] * analytic[i];
        f2 += fd[i] * fd[i];
    }
    GradCheckResult r;
    r.analytic_norm = std::sqrt(a2);
    r.fd_norm = std::sqrt(f2);
    r.n_params = static_cast<int64_t>(analytic.size());
    double denom = std::max(r.analytic_norm, r.fd_norm);
    r.rel_error = denom > 0 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
    return r;
}

}  // namespace panda::testing
