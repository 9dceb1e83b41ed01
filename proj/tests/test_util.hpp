#pragma once

#include <functional>

#include "sdg/nn.hpp"

namespace sdg_test {

// Central-difference gradient check. `loss_fn` must be a pure function of the
// current parameter values. Relative error is measured per parameter tensor:
// ||fd - analytic||_2 / max(||fd||_2, ||analytic||_2); the worst tensor is
// returned.
inline double max_grad_rel_err(const sdg::nn::ParamList<double>& ps, const sdg::nn::GradBuffer<double>& analytic,
                               const std::function<double()>& loss_fn, double h = 1e-5) {
    double worst = 0;
    for (size_t pi = 0; pi < ps.size(); ++pi) {
        sdg::Tensor<double>& p = ps[pi]->value;
        const sdg::Tensor<double>& ga = analytic.g[pi];
        double diff2 = 0, fd2 = 0, an2 = 0;
        for (int64_t i = 0; i < p.numel(); ++i) {
            double orig = p[i];
            p[i] = orig + h;
            double lp = loss_fn();
            p[i] = orig - h;
            double lm = loss_fn();
            p[i] = orig;
            double fd = (lp - lm) / (2 * h);
            double an = ga[i];
            diff2 += (fd - an) * (fd - an);
            fd2 += fd * fd;
            an2 += an * an;
        }
        double denom = std::max(std::sqrt(fd2), std::sqrt(an2));
        // structurally-zero gradients (e.g. key bias under softmax shift
        // invariance) leave only FD roundoff; both sides are zero, skip
        if (denom < 1e-7) continue;
        worst = std::max(worst, std::sqrt(diff2) / denom);
    }
    return worst;
}

} // namespace sdg_test
