// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "flylora/adapters.hpp"
#include "flylora/linalg.hpp"

namespace flylora {

// Training-free combination of task adapters: effective updates (scaling
// folded in) plus merge weights, default 1/t.
struct MergeSpec {
    std::vector<DenseMatrix> updates;  // each (alpha/r) B_i densify(A_i), shared (m, n)
    std::vector<double> weights;

    void add(const FlyAdapter& adapter) { updates.push_back(adapter.effective_update()); }
    void add(const LoraAdapter& adapter) { updates.push_back(adapter.effective_update()); }
    void use_uniform_weights() {
        weights.assign(updates.size(), 1.0 / static_cast<double>(updates.size()));
    }
    void validate() const;
};

struct InterferenceReport {
    DenseMatrix normalized_inner;  // t x t, diagonal 1
    double cross_term_fraction = 0.0;
    double merged_norm_sq = 0.0;    // ||sum_i w_i dW_i||_F^2, exact
    double weighted_norm_sq = 0.0;  // sum_i w_i^2 ||dW_i||_F^2, exact
    std::vector<double> metric_before;  // per-task metric on own adapter
    std::vector<double> metric_after;   // per-task metric on the merged update
    std::vector<double> delta_percent;  // relative change per task

    std::string to_json() const;
};

// sum_i w_i * dW_i as a single dense update. Adding W0 is the caller's
// choice.
DenseMatrix merge_weight_average(const MergeSpec& spec);

// <dW_i, dW_j>_F / (||dW_i||_F ||dW_j||_F) in [-1, 1]. Throws on a zero
// update.
double pairwise_task_orthogonality(const DenseMatrix& dw_i, const DenseMatrix& dw_j);
double pairwise_task_orthogonality(const FlyAdapter& a, const FlyAdapter& b);
double pairwise_task_orthogonality(const LoraAdapter& a, const LoraAdapter& b);

// Exact norm decomposition of the merged update: fills normalized_inner,
// merged_norm_sq, weighted_norm_sq and the cross-term fraction
// |sum_{i != j} w_i w_j <dW_i, dW_j>| / sum_i w_i^2 ||dW_i||^2.
InterferenceReport merged_norm_decomposition(const MergeSpec& spec);

// Linear centered kernel alignment between two activation matrices
// (samples x features, column-centered). 1 for Y = cX, invariant to
// orthogonal transforms and isotropic scaling.
double linear_cka(const DenseMatrix& x, const DenseMatrix& y);

}  // namespace flylora
