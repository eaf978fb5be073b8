// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flylora/linalg.hpp"
#include "flylora/projection.hpp"
#include "flylora/routing.hpp"

namespace flylora {

enum class AdapterVariant : std::uint8_t {
    kLora,               // dense trainable A and B
    kLoraFa,             // dense frozen A, trainable B
    kSplitLora,          // N expert pairs with a trainable sigmoid router
    kFlyLora,            // frozen sparse A, implicit top-k routing
    kFlyLoraTrainableA,  // ablation: same structure, stored A values trainable
};

std::string variant_name(AdapterVariant v);
AdapterVariant variant_from_name(const std::string& name);

struct AdapterConfig {
    std::size_t m = 0;        // output dimension
    std::size_t n = 0;        // input dimension
    std::size_t r = 0;        // total rank
    std::size_t k = 0;        // activated rank
    double alpha = 0.0;       // scaling factor; 0 means the default 2r
    double rho = 0.25;        // sparsity ratio p/n of the frozen projection
    AdapterVariant variant = AdapterVariant::kFlyLora;
    SelectionMode selection = SelectionMode::kSigned;
    double balance_rate = 1e-3;  // u; 0 disables load balancing

    double effective_alpha() const { return alpha > 0.0 ? alpha : 2.0 * static_cast<double>(r); }
    double scale() const { return effective_alpha() / static_cast<double>(r); }
    std::size_t projection_nnz() const;  // p = round(rho * n), clamped to [1, n)
    void validate() const;
};

// One FlyLoRA instance: frozen sparse down-projection A, trainable
// up-projection B (zero at start so the adapted map equals the base at step
// 0), the load-balancing state, and an optional frozen base W0 (empty means
// zero).
//
// The trainable-A ablation stores A densely instead: unfreezing the tensor
// lets gradients fill in its zeros, so the sparse form only describes its
// initialization.
struct FlyAdapter {
    AdapterConfig config;
    RowSparseMatrix a;
    DenseMatrix a_dense;  // populated for kFlyLoraTrainableA only
    DenseMatrix b;
    BalanceState balance;
    DenseMatrix w0;
    std::uint64_t seed = 0;

    bool has_base() const { return w0.rows() > 0; }
    bool trainable_a() const { return a_dense.rows() > 0; }
    // Projection scores A x for routing and the rank-1 terms.
    std::vector<double> projection_scores(const std::vector<double>& x) const;
    // (alpha/r) * B * densify(A), the effective dense update.
    DenseMatrix effective_update() const;
};

// Dense-A adapter covering the LoRA and LoRA-FA baselines.
struct LoraAdapter {
    AdapterConfig config;
    DenseMatrix a;  // r x n
    DenseMatrix b;  // m x r, zero-initialized
    DenseMatrix w0;
    std::uint64_t seed = 0;

    bool has_base() const { return w0.rows() > 0; }
    DenseMatrix effective_update() const;
};

// MoE-style baseline: N expert pairs of uniform rank r/N plus an explicit
// trainable router W_g with sigmoid gates on the selected experts.
struct SplitAdapter {
    AdapterConfig config;
    std::size_t n_experts = 0;
    std::size_t expert_rank = 0;             // r / N
    std::vector<DenseMatrix> expert_a;       // each expert_rank x n
    std::vector<DenseMatrix> expert_b;       // each m x expert_rank
    DenseMatrix router;                      // W_g, N x n
    DenseMatrix w0;
    std::uint64_t seed = 0;

    bool has_base() const { return w0.rows() > 0; }
    // Activated experts per token: config.k is the activated rank budget and
    // must be a multiple of expert_rank.
    std::size_t active_experts() const { return config.k / expert_rank; }
};

FlyAdapter make_fly_adapter(const AdapterConfig& config, std::uint64_t seed);
LoraAdapter make_lora_adapter(const AdapterConfig& config, std::uint64_t seed);
SplitAdapter make_split_adapter(const AdapterConfig& config, std::size_t n_experts,
                                std::uint64_t seed);

struct ForwardResult {
    std::vector<double> output;
    RoutingDecision decision;
};

// W0 x + (alpha/r) B A x, the dense baseline forward. Pass an empty w0 for a
// zero base.
std::vector<double> lora_forward(const DenseMatrix& w0, const DenseMatrix& b,
                                 const DenseMatrix& a_dense, double alpha, std::size_t r,
                                 const std::vector<double>& x);

// W0 x + (alpha/r) sum over the k selected experts of sigmoid((W_g x)_i) *
// B_i A_i x. Non-selected experts contribute exactly zero.
ForwardResult split_lora_forward(const SplitAdapter& adapter, const std::vector<double>& x,
                                 std::size_t k_experts);

// Scores = A x; top-k selection over scores + balance bias; selected rank-1
// terms enter with gate 1 (the bias never touches the output value). With
// train set, assignments are recorded into the balance window.
ForwardResult flylora_forward(FlyAdapter& adapter, const std::vector<double>& x, bool train);
// Read-only variant for evaluation paths.
ForwardResult flylora_forward(const FlyAdapter& adapter, const std::vector<double>& x);

// W0 x + (alpha/r) sum_i gates_i * b_i a_i x; all-ones gates reproduce the
// dense LoRA forward.
std::vector<double> rankwise_moe_forward(const DenseMatrix& w0, const DenseMatrix& b,
                                         const DenseMatrix& a_dense,
                                         const std::vector<double>& gates, double alpha,
                                         std::size_t r, const std::vector<double>& x);

// Activated trainable parameter count for a square d x d layer:
//   LoRA 2dr, Split-LoRA 2dk + dN, FlyLoRA dk, LoRA-FA dr.
std::size_t count_activated_params(AdapterVariant variant, std::size_t d_hidden, std::size_t r,
                                   std::size_t k, std::size_t n_experts);

// Checkpoint I/O: a JSON manifest carrying the config, variant, seed, the
// balance bias, and FLYMAT v1 payloads for A, B and W0.
void save_adapter(const FlyAdapter& adapter, const std::string& path);
void save_adapter(const LoraAdapter& adapter, const std::string& path);
// Reads either kind; exactly one output is populated, flagged by is_fly.
void load_adapter(const std::string& path, FlyAdapter& fly, LoraAdapter& lora, bool& is_fly);

}  // namespace flylora
