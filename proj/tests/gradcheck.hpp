#pragma once

// Central finite-difference gradient checking for tests.

#include "cxrb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace gradcheck {

struct Result {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// Cases dropped because a ReLU or max-pool switch lies within +-h.
    std::size_t kinks = 0;
};

inline double rel_error(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

/// `objective(graph)` must build a scalar from the current values of `wrt`;
/// `evaluate()` recomputes the same scalar in double without recording.
/// Every element of every tensor in `wrt` is checked unless `indices` narrows
/// it to (tensor, element) pairs. A case whose one-sided slopes disagree by
/// more than `kink_tol` straddles a non-differentiable point and is skipped;
/// with `want` > 0 checking stops once that many smooth cases are done.
template <class T>
Result check(const std::function<cxrb::Tensor<T>(cxrb::Graph<T>*)>& objective,
             const std::function<double()>& evaluate, std::vector<cxrb::Tensor<T>> wrt, double h,
             std::vector<std::pair<std::size_t, std::size_t>> indices = {}, std::size_t want = 0,
             double kink_tol = 1e-3)
{
    for (auto& t : wrt) t.zero_grad();
    cxrb::Graph<T> graph;
    auto loss = objective(&graph);
    graph.backward(loss);
    if (indices.empty())
        for (std::size_t t = 0; t < wrt.size(); ++t)
            for (std::size_t i = 0; i < wrt[t].numel(); ++i) indices.emplace_back(t, i);

    Result r;
    const double f0 = evaluate();
    for (auto [t, i] : indices) {
        if (want > 0 && r.checked == want) break;
        const T saved = wrt[t][i];
        wrt[t][i] = static_cast<T>(saved + h);
        const double plus = evaluate();
        const double step_up = static_cast<double>(wrt[t][i]) - saved;
        wrt[t][i] = static_cast<T>(saved - h);
        const double minus = evaluate();
        const double step_down = saved - static_cast<double>(wrt[t][i]);
        wrt[t][i] = saved;
        if (rel_error((plus - f0) / step_up, (f0 - minus) / step_down) > kink_tol) {
            ++r.kinks;
            continue;
        }
        const double numeric = (plus - minus) / (step_up + step_down);
        const double analytic = wrt[t].grad()[i];
        r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic, numeric));
        ++r.checked;
    }
    return r;
}

} // namespace gradcheck
