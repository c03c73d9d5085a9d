// Finite-difference verification of reverse-mode gradients.
//
// The analytic sweep runs in the scalar type under test; the numeric side
// always runs in extended (80-bit) precision so that central-difference
// rounding noise stays below the tolerance even for coordinates whose true
// gradient is tiny. The caller supplies two generic callables:
//   setup(store)    — creates and initializes every parameter
//   builder(g, ps)  — assembles the loss graph, returns the scalar loss node
// Both are instantiated once per precision, and the oracle store is
// overwritten with exact casts of the checked store so the two sides are
// differenced at the same point.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "knit/autodiff.hpp"

namespace knit {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t checked = 0;

    bool within(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Probes every parameter element by default; `stride` > 1 samples every
// stride-th element of each tensor (deterministically) to bound runtime.
template <typename S, typename Setup, typename Builder>
GradCheckResult gradient_check(Setup setup, Builder builder, std::size_t stride = 1,
                               double base_step = 1e-5) {
    if (stride == 0) stride = 1;

    ParamStore<S> ps;
    setup(ps);
    Graph<S> g;
    auto loss = builder(g, ps);
    g.backward(loss);

    ParamStore<long double> pd;
    setup(pd);
    pd.copy_cast_from(ps);

    auto eval = [&]() {
        Graph<long double> gd;
        auto l = builder(gd, pd);
        return gd.val_scalar(l);
    };

    GradCheckResult res;
    for (std::size_t pi = 0; pi < pd.size(); ++pi) {
        auto& p = pd.at(pi);
        const auto& grad = ps.at(pi).grad;
        for (std::size_t j = 0; j < p.value.v.size(); j += stride) {
            const long double x0 = p.value.v[j];
            const long double h = base_step * std::max<long double>(1.0L, std::abs(x0));
            p.value.v[j] = x0 + h;
            const long double fp = eval();
            p.value.v[j] = x0 - h;
            const long double fm = eval();
            p.value.v[j] = x0;
            const double numeric = static_cast<double>((fp - fm) / (2.0L * h));
            const double analytic = static_cast<double>(grad.v[j]);
            const double denom =
                std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic - numeric) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = p.name;
                res.worst_index = j;
                res.analytic_at_worst = analytic;
                res.numeric_at_worst = numeric;
            }
        }
    }
    return res;
}

} // namespace knit
