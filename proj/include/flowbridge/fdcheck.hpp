#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "flowbridge/autograd.hpp"
#include "flowbridge/params.hpp"

namespace flowbridge {

// Compares reverse-mode gradients with central finite differences for every
// non-frozen element of the store. build_loss must construct the scalar loss
// on the given tape from the store's current values; it is re-invoked for the
// perturbed evaluations, and must bind parameters under an empty prefix so
// gradient keys match store entry names. Returns the max relative error with
// denominator max(|a|, |b|, 1e-8). Meant to run in 64-bit mode.
template <typename BuildLoss>
double finite_diff_check(BuildLoss&& build_loss, ParameterStore<double>& store, double h) {
    if (!(h > 0)) throw ContractViolation("finite_diff_check: h must be positive");
    GradMap<double> grads;
    {
        Tape<double> tape;
        Var<double> loss = build_loss(tape);
        grads = tape.compute_gradients(loss);
    }
    auto eval = [&]() {
        Tape<double> tape(/*inference=*/true);
        return build_loss(tape).value().at(0);
    };
    double max_rel = 0.0;
    for (auto& e : store.entries()) {
        if (e.frozen) continue;
        auto git = grads.find(e.name);
        for (int64_t i = 0; i < e.tensor.size(); ++i) {
            double saved = e.tensor.at(i);
            e.tensor.at(i) = saved + h;
            double lp = eval();
            e.tensor.at(i) = saved - h;
            double lm = eval();
            e.tensor.at(i) = saved;
            double fd = (lp - lm) / (2.0 * h);
            double an = (git != grads.end()) ? git->second.at(i) : 0.0;
            double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            max_rel = std::max(max_rel, std::abs(fd - an) / denom);
        }
    }
    return max_rel;
}

}  // namespace flowbridge
