// Adam with the linear warmup / linear decay schedule used by every
// training loop in the library.
#pragma once

#include <cmath>
#include <stdexcept>

#include "knit/autodiff.hpp"

namespace knit {

// Piecewise-linear learning rate: ramp from 0 to `peak` over the warmup
// fraction of total steps, then decay linearly back to 0 at the final step.
inline double scheduled_lr(double peak, long step, long total_steps,
                           double warmup_fraction = 0.06) {
    if (total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
    const double warm = warmup_fraction * static_cast<double>(total_steps);
    const double t = static_cast<double>(step);
    if (warm > 0.0 && t < warm) return peak * (t + 1.0) / warm;
    const double rest = static_cast<double>(total_steps) - warm;
    if (rest <= 0.0) return peak;
    return peak * std::max(0.0, (static_cast<double>(total_steps) - t) / rest);
}

template <typename S>
class AdamOptimizer {
public:
    explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // One update over every parameter in the store at the given rate.
    void step(ParamStore<S>& ps, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps.at(pi);
            for (std::size_t i = 0; i < p.value.v.size(); ++i) {
                const double gr = static_cast<double>(p.grad.v[i]);
                const double m = beta1_ * static_cast<double>(p.adam_m.v[i]) + (1.0 - beta1_) * gr;
                const double v = beta2_ * static_cast<double>(p.adam_v.v[i]) + (1.0 - beta2_) * gr * gr;
                p.adam_m.v[i] = static_cast<S>(m);
                p.adam_v.v[i] = static_cast<S>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                p.value.v[i] = static_cast<S>(static_cast<double>(p.value.v[i]) -
                                              lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

} // namespace knit
