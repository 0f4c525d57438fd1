#pragma once

#include <functional>
#include <vector>

#include "metadenoise/autodiff.hpp"
#include "metadenoise/rng.hpp"
#include "metadenoise/tensor.hpp"

// Finite-difference checking utilities shared by the unit and acceptance
// suites. Everything runs in double.

namespace testsupport {

using metadenoise::Rng;
using metadenoise::Tensor;
namespace ad = metadenoise::ad;

using BuildFn = std::function<ad::node<double>(const std::vector<ad::node<double>>&)>;

inline std::vector<ad::node<double>> wrap_leaves(const std::vector<Tensor<double>>& params) {
    std::vector<ad::node<double>> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(ad::leaf(p));
    return leaves;
}

inline double eval_scalar(const BuildFn& build, const std::vector<Tensor<double>>& params) {
    return ad::scalar_value(build(wrap_leaves(params)));
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// central differences vs reverse-mode gradients
inline GradCheckResult grad_check(const BuildFn& build, std::vector<Tensor<double>> params,
                                  double eps = 1e-5) {
    auto leaves = wrap_leaves(params);
    auto loss = build(leaves);
    auto grads = ad::gradients(loss, leaves);

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::int64_t i = 0; i < params[pi].size(); ++i) {
            const double orig = params[pi][i];
            params[pi][i] = orig + eps;
            const double fp = eval_scalar(build, params);
            params[pi][i] = orig - eps;
            const double fm = eval_scalar(build, params);
            params[pi][i] = orig;

            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = grads[pi]->value[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            const double rel = std::abs(numeric - analytic) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_analytic = analytic;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

// checks d/dparams of sum(grad^2): exercises the backward-of-backward path
inline GradCheckResult second_order_check(const BuildFn& build,
                                          const std::vector<Tensor<double>>& params,
                                          double eps = 1e-5) {
    BuildFn grad_norm = [&build](const std::vector<ad::node<double>>& leaves) {
        auto loss = build(leaves);
        auto grads = ad::gradients(loss, leaves);
        ad::node<double> acc;
        for (const auto& g : grads) {
            auto sq = ad::sum_all(ad::mul(g, g));
            acc = acc ? ad::add(acc, sq) : sq;
        }
        return acc;
    };
    return grad_check(grad_norm, params, eps);
}

inline Tensor<double> random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace testsupport
