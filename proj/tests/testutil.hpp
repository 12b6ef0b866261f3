#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gridvl/autograd.hpp"

namespace gridvl::testutil {

// Central-difference gradient check. loss_fn must rebuild the graph from the
// given parameter leaves on every call (their values are perturbed in place).
// Returns the worst relative error over all parameter entries.
inline double max_fd_rel_err(const std::vector<Var>& params,
                             const std::function<Var()>& loss_fn,
                             double h = 1e-5) {
    Var loss = loss_fn();
    for (const auto& p : params) {
        p->zero_grad();
    }
    backward(loss);
    std::vector<Mat> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p->grad_or_zero());
    }
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Mat& v = params[pi]->value;
        for (int i = 0; i < v.rows(); ++i) {
            for (int j = 0; j < v.cols(); ++j) {
                double orig = v(i, j);
                v(i, j) = orig + h;
                double up = loss_fn()->scalar();
                v(i, j) = orig - h;
                double down = loss_fn()->scalar();
                v(i, j) = orig;
                double fd = (up - down) / (2.0 * h);
                double an = analytic[pi](i, j);
                double err = std::abs(fd - an) /
                             std::max({1.0, std::abs(fd), std::abs(an)});
                worst = std::max(worst, err);
            }
        }
    }
    return worst;
}

} // namespace gridvl::testutil
