#pragma once

// Finite-difference gradient checking used across the unit tests. The model
// under test is expressed as a function from leaf tensors to a scalar; the
// checker compares the tape gradients against central differences.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <doctest.h>

#include "thermosr/autodiff.hpp"

namespace testutil {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "leaf[i]" of the worst element
};

// fn receives leaves (requires_grad=true, same shapes as `inputs`) and must
// return a scalar Var built from them.
inline GradCheckResult grad_check(
    const std::function<thermosr::ad::Var(const std::vector<thermosr::ad::Var>&)>& fn,
    std::vector<thermosr::Tensor> inputs, double h = 1e-5) {
    using namespace thermosr;

    auto eval = [&](const std::vector<Tensor>& vals) {
        std::vector<ad::Var> leaves;
        leaves.reserve(vals.size());
        for (const auto& t : vals) leaves.push_back(ad::leaf(t, true));
        return fn(leaves)->value.data[0];
    };

    // Analytic gradients.
    std::vector<ad::Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(ad::leaf(t, true));
    ad::Var out = fn(leaves);
    REQUIRE(out->value.numel() == 1);
    ad::backward(out);

    GradCheckResult res;
    for (std::size_t li = 0; li < inputs.size(); ++li) {
        for (std::size_t ei = 0; ei < inputs[li].data.size(); ++ei) {
            std::vector<Tensor> plus = inputs;
            std::vector<Tensor> minus = inputs;
            plus[li].data[ei] += h;
            minus[li].data[ei] -= h;
            const double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            const double analytic =
                leaves[li]->grad.data.empty() ? 0.0 : leaves[li]->grad.data[ei];
            const double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic)});
            const double rel = std::fabs(numeric - analytic) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "leaf" + std::to_string(li) + "[" + std::to_string(ei) + "]";
            }
        }
    }
    return res;
}

}  // namespace testutil
