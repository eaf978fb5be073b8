// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flylora/adapters.hpp"
#include "flylora/linalg.hpp"

namespace flylora {

enum class TaskKind : std::uint8_t {
    kLinearTeacher,    // y = T x + noise, squared-error loss
    kGaussianCluster,  // m labeled clusters, softmax cross-entropy loss
};

// Desk-scale synthetic task. Deterministic given the seed; the first
// train_count samples are the training split, the rest the eval split.
struct ToyTask {
    TaskKind kind = TaskKind::kLinearTeacher;
    std::size_t n = 0;
    std::size_t m = 0;
    std::size_t train_count = 0;
    std::size_t eval_count = 0;
    double noise = 0.0;
    std::uint64_t seed = 0;
    // Input covariance spectrum: component j has variance proportional to
    // (1+j)^(-input_decay), normalized to mean 1. Zero means isotropic.
    double input_decay = 0.0;

    DenseMatrix teacher;                     // m x n, linear-teacher only
    std::vector<std::vector<double>> inputs; // train_count + eval_count rows
    DenseMatrix targets;                     // row per sample
    std::vector<std::size_t> labels;         // gaussian-cluster only

    std::size_t total() const { return train_count + eval_count; }
};

ToyTask make_linear_teacher_task(std::size_t n, std::size_t m, std::size_t samples, double noise,
                                 std::uint64_t seed, double input_decay = 1.0);
ToyTask make_gaussian_cluster_task(std::size_t n, std::size_t m, std::size_t samples, double noise,
                                   std::uint64_t seed);

// Gradient of the loss with respect to B for one sample, given the routing
// decision of the matching forward call. Column i is
// (alpha/r) * (a_i x) * upstream when expert i was selected and exactly zero
// otherwise, which is the dense gradient right-multiplied by the activation
// mask.
DenseMatrix backward_B(const FlyAdapter& adapter, const std::vector<double>& x,
                       const std::vector<double>& upstream, const RoutingDecision& decision);

// Max relative error between the analytic gradient of 1/2 ||f(x) - target||^2
// and central finite differences over all entries of B. The routing decision
// is held fixed across perturbations.
double finite_diff_check(const FlyAdapter& adapter, const std::vector<double>& x,
                         const std::vector<double>& target, double step);

struct GradCovEstimate {
    DenseMatrix sigma;           // r x r accumulated covariance
    std::size_t samples = 0;
    double mean_offdiag = 0.0;   // signed mean over i != j
    double mean_offdiag_abs = 0.0;
    double mean_diag = 0.0;
    double offdiag_to_diag = 0.0;  // mean |off-diag| / mean |diag|
};

enum class GradCovMode : std::uint8_t { kDense, kTopkMasked };

struct CovariancePair {
    GradCovEstimate dense;
    GradCovEstimate masked;
    // Signed off-diagonal mean of masked over dense; the co-activation
    // probability k(k-1)/(r(r-1)) in expectation.
    double attenuation = 0.0;
    double expected_attenuation = 0.0;
};

// Synthesizes per-column gradient vectors g_i = z + eta_i (shared signal plus
// independent noise, so the dense off-diagonal expectation is known) and
// accumulates covariance with and without uniform random k-of-r masking.
// Both estimates share the same gradient draws.
CovariancePair estimate_covariance_pair(std::size_t r, std::size_t k, std::size_t samples,
                                        std::uint64_t seed, std::size_t grad_dim = 16);
GradCovEstimate estimate_grad_covariance(std::size_t r, std::size_t k, std::size_t samples,
                                         GradCovMode mode, std::uint64_t seed,
                                         std::size_t grad_dim = 16);

struct CorrelationReport {
    DenseMatrix correlations;          // subset x subset Pearson matrix
    std::vector<std::size_t> columns;  // which B columns were sampled
    std::size_t zero_variance_columns = 0;
};

// Pearson correlations between per-column gradient traces of B accumulated
// over a batch, restricted to `subset` randomly sampled columns.
CorrelationReport gradient_correlation_matrix(const FlyAdapter& adapter, const ToyTask& task,
                                              std::size_t max_samples, std::size_t subset,
                                              std::uint64_t seed);

struct TrainOptions {
    std::size_t epochs = 100;
    double lr = 0.05;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

struct TrainingTrace {
    std::vector<double> train_loss;                       // per epoch
    std::vector<double> eval_loss;                        // per epoch
    std::vector<std::vector<std::uint64_t>> assignments;  // per-epoch expert counts
    double final_metric = 0.0;  // eval mse (linear) or accuracy (cluster)

    std::string to_csv() const;
};

// Plain SGD on the trainable parameters of each variant. Frozen tensors (A
// for FlyLoRA/LoRA-FA, W0 always) are bitwise unchanged afterwards. Throws
// std::runtime_error if the loss diverges to NaN.
TrainingTrace train_adapter(FlyAdapter& adapter, const ToyTask& task, const TrainOptions& opts);
TrainingTrace train_adapter(LoraAdapter& adapter, const ToyTask& task, const TrainOptions& opts);
TrainingTrace train_adapter(SplitAdapter& adapter, const ToyTask& task, const TrainOptions& opts);

// Mean over the eval split of ||f(x) - y||^2 / m (linear teacher) or softmax
// cross-entropy (clusters).
double evaluate_mse(const FlyAdapter& adapter, const ToyTask& task);
double evaluate_mse(const LoraAdapter& adapter, const ToyTask& task);
double evaluate_mse(const SplitAdapter& adapter, const ToyTask& task);
double evaluate_mse_update(const DenseMatrix& delta_w, const DenseMatrix& w0, const ToyTask& task);

// Task-appropriate headline metric: eval mse for linear teachers, eval
// accuracy for clusters.
double evaluate_metric(const FlyAdapter& adapter, const ToyTask& task);
double evaluate_metric(const LoraAdapter& adapter, const ToyTask& task);
double evaluate_metric(const SplitAdapter& adapter, const ToyTask& task);
double evaluate_metric_update(const DenseMatrix& delta_w, const DenseMatrix& w0,
                              const ToyTask& task);

// FNV-1a checksum over the raw bytes; used to assert frozen tensors stay
// untouched by training.
std::uint64_t matrix_checksum(const DenseMatrix& m);
std::uint64_t matrix_checksum(const RowSparseMatrix& m);

}  // namespace flylora
