// SPDX-License-Identifier: Apache-2.0
#include "flylora/projection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "flylora/parallel.hpp"
#include "json.hpp"

namespace flylora {

void ProjectionSpec::validate() const {
    if (n == 0 || r == 0 || p == 0) {
        throw std::invalid_argument("ProjectionSpec: dimensions must be positive");
    }
    if (p >= n) {
        throw std::invalid_argument("ProjectionSpec: p must be < n (got p=" +
                                    std::to_string(p) + ", n=" + std::to_string(n) + ")");
    }
}

std::vector<double> gaussian_vector(std::size_t n, SeededStream& stream) {
    std::vector<double> v(n);
    for (auto& vi : v) {
        vi = stream.next_gaussian();
    }
    return v;
}

RowSparseMatrix make_sparse_projection(const ProjectionSpec& spec) {
    spec.validate();
    RowSparseMatrix a(spec.r, spec.n, spec.p);
    SeededStream stream(spec.seed);
    const double value_sigma = 1.0 / static_cast<double>(spec.r);

    // Partial Fisher-Yates with undo keeps per-row cost at O(p) after a single
    // O(n) init, and every row sees an identity permutation.
    std::vector<std::uint32_t> perm(spec.n);
    std::iota(perm.begin(), perm.end(), 0u);
    std::vector<std::size_t> swaps(spec.p);

    for (std::size_t i = 0; i < spec.r; ++i) {
        for (std::size_t j = 0; j < spec.p; ++j) {
            const std::size_t t = j + static_cast<std::size_t>(
                                          stream.next_below(static_cast<std::uint64_t>(spec.n - j)));
            swaps[j] = t;
            std::swap(perm[j], perm[t]);
        }
        std::uint32_t* idx = a.row_indices(i);
        std::copy(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(spec.p), idx);
        for (std::size_t j = spec.p; j-- > 0;) {
            std::swap(perm[j], perm[swaps[j]]);
        }
        std::sort(idx, idx + spec.p);

        double* val = a.row_values(i);
        for (std::size_t j = 0; j < spec.p; ++j) {
            val[j] = value_sigma * stream.next_gaussian();
        }
    }
    return a;
}

double distortion_ratio(const RowSparseMatrix& a, const ProjectionSpec& spec,
                        const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != spec.n || y.size() != spec.n) {
        throw std::invalid_argument("distortion_ratio: vector length != n");
    }
    std::vector<double> diff(spec.n);
    for (std::size_t j = 0; j < spec.n; ++j) {
        diff[j] = x[j] - y[j];
    }
    const double dist2 = norm2_squared(diff);
    if (dist2 == 0.0) {
        throw std::invalid_argument("distortion_ratio: x == y, ratio undefined");
    }
    const std::vector<double> projected = spmv(a, diff);
    return norm2_squared(projected) /
           (static_cast<double>(spec.r) * spec.sigma_squared() * dist2);
}

double distance_preservation_bound(const ProjectionSpec& spec, double epsilon) {
    if (!(epsilon > 0.0) || !(epsilon < 1.0)) {
        throw std::invalid_argument("distance_preservation_bound: epsilon must be in (0,1)");
    }
    const double e2e3 = epsilon * epsilon - epsilon * epsilon * epsilon;
    const double r = static_cast<double>(spec.r);
    const double rho = spec.sparsity_ratio();
    const double first = std::exp(-e2e3 * r / 4.0);
    const double second = std::exp(-e2e3 * r / (2.0 * (3.0 * rho + 1.0)));
    return 1.0 - first - second;
}

DistortionReport verify_distance_preservation(const ProjectionSpec& spec, double epsilon,
                                              std::size_t trials, std::uint64_t seed,
                                              unsigned threads) {
    spec.validate();
    if (trials < 100) {
        throw std::invalid_argument("verify_distance_preservation: trials must be >= 100");
    }
    DistortionReport report;
    report.epsilon = epsilon;
    report.trials = trials;
    report.theoretical_lower_bound = distance_preservation_bound(spec, epsilon);
    report.ratios.assign(trials, 0.0);

    parallel_for_index(trials, threads, [&](std::size_t t) {
        SeededStream trial_stream(seed, t + 1);
        ProjectionSpec trial_spec = spec;
        trial_spec.seed = trial_stream.next_u64();
        const RowSparseMatrix a = make_sparse_projection(trial_spec);
        const std::vector<double> x = gaussian_vector(spec.n, trial_stream);
        const std::vector<double> y = gaussian_vector(spec.n, trial_stream);
        report.ratios[t] = distortion_ratio(a, trial_spec, x, y);
    });

    std::size_t hits = 0;
    for (double ratio : report.ratios) {
        if (ratio >= 1.0 - epsilon && ratio <= 1.0 + epsilon) {
            ++hits;
        }
    }
    report.empirical_success_rate = static_cast<double>(hits) / static_cast<double>(trials);
    return report;
}

DenseMatrix cross_projection_gram(const RowSparseMatrix& a_i, const RowSparseMatrix& a_j) {
    if (a_i.cols() != a_j.cols() || a_i.rows() != a_j.rows()) {
        throw std::invalid_argument("cross_projection_gram: dimension mismatch");
    }
    const std::size_t r = a_i.rows();
    const std::size_t p_i = a_i.nnz_per_row();
    const std::size_t p_j = a_j.nnz_per_row();
    DenseMatrix gram(r, r, 0.0);
    for (std::size_t m = 0; m < r; ++m) {
        const std::uint32_t* mi = a_i.row_indices(m);
        const double* mv = a_i.row_values(m);
        for (std::size_t l = 0; l < r; ++l) {
            const std::uint32_t* li = a_j.row_indices(l);
            const double* lv = a_j.row_values(l);
            // Sorted-index merge.
            double acc = 0.0;
            std::size_t u = 0, w = 0;
            while (u < p_i && w < p_j) {
                if (mi[u] < li[w]) {
                    ++u;
                } else if (mi[u] > li[w]) {
                    ++w;
                } else {
                    acc += mv[u] * lv[w];
                    ++u;
                    ++w;
                }
            }
            gram(m, l) = acc;
        }
    }
    return gram;
}

OrthogonalityReport verify_orthogonality(const ProjectionSpec& spec, double epsilon,
                                         std::size_t pairs, std::uint64_t seed,
                                         unsigned threads) {
    spec.validate();
    if (pairs < 50) {
        throw std::invalid_argument("verify_orthogonality: pairs must be >= 50");
    }
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("verify_orthogonality: epsilon must be positive");
    }
    const double n = static_cast<double>(spec.n);
    const double r = static_cast<double>(spec.r);
    const double p = static_cast<double>(spec.p);

    OrthogonalityReport report;
    report.pairs = pairs;
    report.epsilon = epsilon;
    report.theoretical_entry_variance = p * p / (n * r * r * r * r);
    report.chebyshev_bound = p * p / (n * r * r * epsilon * epsilon);
    report.bound_informative = report.chebyshev_bound < 1.0;
    report.spectral_norms.assign(pairs, 0.0);

    std::vector<double> pair_sum(pairs, 0.0);
    std::vector<double> pair_sumsq(pairs, 0.0);

    parallel_for_index(pairs, threads, [&](std::size_t t) {
        SeededStream pair_stream(seed, t + 1);
        ProjectionSpec spec_i = spec;
        ProjectionSpec spec_j = spec;
        spec_i.seed = pair_stream.next_u64();
        spec_j.seed = pair_stream.next_u64();
        const RowSparseMatrix a_i = make_sparse_projection(spec_i);
        const RowSparseMatrix a_j = make_sparse_projection(spec_j);
        const DenseMatrix gram = cross_projection_gram(a_i, a_j);
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t idx = 0; idx < gram.size(); ++idx) {
            const double v = gram.data()[idx];
            sum += v;
            sumsq += v * v;
        }
        pair_sum[t] = sum;
        pair_sumsq[t] = sumsq;
        report.spectral_norms[t] = spectral_norm(gram);
    });

    const double count = static_cast<double>(pairs) * r * r;
    double total = 0.0, total_sq = 0.0;
    std::size_t exceed = 0;
    for (std::size_t t = 0; t < pairs; ++t) {
        total += pair_sum[t];
        total_sq += pair_sumsq[t];
        if (report.spectral_norms[t] >= epsilon * r) {
            ++exceed;
        }
    }
    report.entry_mean = total / count;
    report.entry_variance = total_sq / count - report.entry_mean * report.entry_mean;
    report.entry_mean_stderr = std::sqrt(report.entry_variance / count);
    report.tail_estimate = static_cast<double>(exceed) / static_cast<double>(pairs);
    return report;
}

std::string DistortionReport::to_json() const {
    nlohmann::json j;
    j["epsilon"] = epsilon;
    j["trials"] = trials;
    j["empirical_success_rate"] = empirical_success_rate;
    j["theoretical_lower_bound"] = theoretical_lower_bound;
    j["ratios"] = ratios;
    return j.dump(2);
}

std::string OrthogonalityReport::to_json() const {
    nlohmann::json j;
    j["pairs"] = pairs;
    j["epsilon"] = epsilon;
    j["entry_mean"] = entry_mean;
    j["entry_mean_stderr"] = entry_mean_stderr;
    j["entry_variance"] = entry_variance;
    j["theoretical_entry_variance"] = theoretical_entry_variance;
    j["tail_estimate"] = tail_estimate;
    j["chebyshev_bound"] = chebyshev_bound;
    j["bound_informative"] = bound_informative;
    j["spectral_norms"] = spectral_norms;
    return j.dump(2);
}

}  // namespace flylora
