// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ada/tensor.hpp"

namespace testsupport {

/// Central finite differences against a recorded analytic gradient.
///
/// eval_loss must rebuild the forward pass from the parameter's *current*
/// values and return the scalar loss value; this keeps the oracle independent
/// of the tape machinery it is checking. Relative error uses the larger of
/// the two magnitudes; pairs that are both below `dead_zone` count as exact.
inline double max_rel_grad_error(ada::Tensor param, std::span<const double> analytic,
                                 const std::function<double()>& eval_loss,
                                 double step = 1e-4, double dead_zone = 1e-7) {
    auto& values = param.mutable_values();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + step;
        const double up = eval_loss();
        values[i] = saved - step;
        const double down = eval_loss();
        values[i] = saved;
        const double fd = (up - down) / (2.0 * step);
        const double a = analytic[i];
        const double mag = std::max(std::abs(fd), std::abs(a));
        if (mag < dead_zone) continue;
        worst = std::max(worst, std::abs(fd - a) / mag);
    }
    return worst;
}

/// Uniform random tensor in [-1, 1], handy for small gradient-check inputs.
inline ada::Tensor random_tensor(std::vector<std::size_t> shape, ada::Rng& rng,
                                 bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return ada::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace testsupport
