// SPDX-License-Identifier: Apache-2.0
#include "flylora/routing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flylora {

RoutingDecision select_topk(const std::vector<double>& scores, const std::vector<double>& bias,
                            std::size_t k, SelectionMode mode) {
    const std::size_t r = scores.size();
    if (k < 1 || k > r) {
        throw std::invalid_argument("select_topk: k must be in [1, r], got k=" +
                                    std::to_string(k) + ", r=" + std::to_string(r));
    }
    if (bias.size() != r) {
        throw std::invalid_argument("select_topk: bias length != r");
    }

    std::vector<double> criterion(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double base = (mode == SelectionMode::kSigned) ? scores[i] : std::abs(scores[i]);
        criterion[i] = base + bias[i];
    }

    std::vector<std::size_t> order(r);
    for (std::size_t i = 0; i < r; ++i) {
        order[i] = i;
    }
    // Stable comparison: larger criterion first, lowest index on ties.
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (criterion[a] != criterion[b]) {
                              return criterion[a] > criterion[b];
                          }
                          return a < b;
                      });

    RoutingDecision decision;
    decision.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    decision.scores = scores;
    decision.mask.assign(r, 0);
    for (std::size_t idx : decision.selected) {
        decision.mask[idx] = 1;
    }
    return decision;
}

void record_assignments(BalanceState& state, const RoutingDecision& decision) {
    if (decision.scores.size() != state.rank()) {
        throw std::invalid_argument("record_assignments: decision rank != state rank");
    }
    for (std::size_t idx : decision.selected) {
        state.counts[idx] += 1;
    }
    state.window_tokens += 1;
}

void update_balance_bias(BalanceState& state) {
    const std::size_t r = state.rank();
    if (r == 0) {
        return;
    }
    const double target = state.activated_rank > 0
                              ? static_cast<double>(state.activated_rank) / static_cast<double>(r) *
                                    static_cast<double>(state.window_tokens)
                              : 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        state.expected[i] = target;
        const double delta = target - static_cast<double>(state.counts[i]);
        if (delta > 0.0) {
            state.bias[i] += state.update_rate;
        } else if (delta < 0.0) {
            state.bias[i] -= state.update_rate;
        }
        state.counts[i] = 0;
    }
    state.window_tokens = 0;
}

}  // namespace flylora
