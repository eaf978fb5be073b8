// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace flylora {

enum class SelectionMode : std::uint8_t {
    kSigned,     // k largest (score + bias)_i; the normative rule
    kMagnitude,  // k largest |score|_i + bias_i; diagnostic alternative
};

// Per-expert state for loss-free load balancing: a routing-only bias d that
// nudges under-used experts upward, assignment counters c for the current
// window, and the uniform target c_bar.
struct BalanceState {
    std::vector<double> bias;            // d, added to scores during selection only
    std::vector<std::uint64_t> counts;   // c, assignments in the current window
    std::vector<double> expected;        // c_bar from the last completed window
    double update_rate = 1e-3;           // u
    std::uint64_t window_tokens = 0;
    std::size_t activated_rank = 0;      // k, used for the uniform target k/r

    BalanceState() = default;
    BalanceState(std::size_t r, std::size_t k, double u = 1e-3)
        : bias(r, 0.0), counts(r, 0), expected(r, 0.0), update_rate(u), activated_rank(k) {}

    std::size_t rank() const { return bias.size(); }
};

// Result of one top-k selection: the ordered index set (descending criterion
// value), the raw pre-bias scores, and the binary activation mask.
struct RoutingDecision {
    std::vector<std::size_t> selected;  // k distinct indices in [0, r)
    std::vector<double> scores;         // the Ax values, before bias
    std::vector<std::uint8_t> mask;     // exactly k ones

    std::size_t k() const { return selected.size(); }
};

// Greedy argmax over the biased criterion. Signed mode ranks by score+bias,
// magnitude mode by |score|+bias. Ties break toward the lowest index.
RoutingDecision select_topk(const std::vector<double>& scores, const std::vector<double>& bias,
                            std::size_t k, SelectionMode mode = SelectionMode::kSigned);

// Increments the assignment counters for one routed token.
void record_assignments(BalanceState& state, const RoutingDecision& decision);

// Closes the current window: d_i += u * sign(c_bar_i - c_i) with the uniform
// target c_bar_i = (k / r) * window_tokens, then resets the counters.
// sign(0) = 0, so a perfectly balanced expert keeps its bias.
void update_balance_bias(BalanceState& state);

}  // namespace flylora
