// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flylora/linalg.hpp"
#include "flylora/rng.hpp"

namespace flylora {

// Parameters of the frozen sparse random down-projection: r rows over n
// columns with exactly p nonzeros per row, nonzero values ~ N(0, 1/r^2).
struct ProjectionSpec {
    std::size_t n = 0;     // input dimension
    std::size_t r = 0;     // projection dimension (total rank)
    std::size_t p = 0;     // nonzeros per row
    std::uint64_t seed = 0;

    double sparsity_ratio() const { return static_cast<double>(p) / static_cast<double>(n); }
    // Second moment of a matrix entry: sigma^2 = p / (n r^2).
    double sigma_squared() const {
        return static_cast<double>(p) /
               (static_cast<double>(n) * static_cast<double>(r) * static_cast<double>(r));
    }
    void validate() const;
};

struct DistortionReport {
    double epsilon = 0.0;
    std::size_t trials = 0;
    double empirical_success_rate = 0.0;
    double theoretical_lower_bound = 0.0;
    std::vector<double> ratios;  // per-trial distortion ratios

    std::string to_json() const;
};

struct OrthogonalityReport {
    std::size_t pairs = 0;
    double epsilon = 0.0;
    double entry_mean = 0.0;
    double entry_mean_stderr = 0.0;
    double entry_variance = 0.0;
    double theoretical_entry_variance = 0.0;  // p^2 / (n r^4)
    double tail_estimate = 0.0;               // P_hat(||A_i A_j^T||_2 >= eps * r)
    double chebyshev_bound = 0.0;             // p^2 / (n r^2 eps^2)
    bool bound_informative = false;           // false when the bound is >= 1
    std::vector<double> spectral_norms;       // per-pair ||A_i A_j^T||_2

    std::string to_json() const;
};

// Draws the frozen projection. Each row gets p distinct columns via seeded
// partial shuffle (sorted ascending) and values from N(0, 1/r^2).
// Deterministic given spec.seed.
RowSparseMatrix make_sparse_projection(const ProjectionSpec& spec);

// ||A(x-y)||^2 / (r sigma^2 ||x-y||^2). Expectation over fresh A is 1.
// Throws std::invalid_argument when x == y.
double distortion_ratio(const RowSparseMatrix& a, const ProjectionSpec& spec,
                        const std::vector<double>& x, const std::vector<double>& y);

// Exact lower bound on the success probability that the distortion ratio lies
// in [1-eps, 1+eps]:
//   1 - exp(-(eps^2 - eps^3) r / 4) - exp(-(eps^2 - eps^3) r / (2 (3p/n + 1)))
double distance_preservation_bound(const ProjectionSpec& spec, double epsilon);

// Monte Carlo check of the distance-preservation bound: a fresh A and a fresh
// standard-normal pair (x, y) per trial, each on its own stream.
DistortionReport verify_distance_preservation(const ProjectionSpec& spec, double epsilon,
                                              std::size_t trials, std::uint64_t seed,
                                              unsigned threads = 1);

// The r x r product A_i A_j^T of two projections sharing (n, r).
DenseMatrix cross_projection_gram(const RowSparseMatrix& a_i, const RowSparseMatrix& a_j);

// Monte Carlo check of cross-projection orthogonality over independently
// seeded pairs: entry moments against p^2/(n r^4) and the spectral-norm tail
// against the Chebyshev bound p^2/(n r^2 eps^2).
OrthogonalityReport verify_orthogonality(const ProjectionSpec& spec, double epsilon,
                                         std::size_t pairs, std::uint64_t seed,
                                         unsigned threads = 1);

// Standard normal vector of length n from the given stream.
std::vector<double> gaussian_vector(std::size_t n, SeededStream& stream);

}  // namespace flylora
