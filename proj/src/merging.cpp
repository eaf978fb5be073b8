// SPDX-License-Identifier: Apache-2.0
#include "flylora/merging.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace flylora {

void MergeSpec::validate() const {
    if (updates.size() < 2) {
        throw std::invalid_argument("MergeSpec: need at least 2 adapters");
    }
    if (weights.size() != updates.size()) {
        throw std::invalid_argument("MergeSpec: weights/adapters count mismatch");
    }
    for (const auto& u : updates) {
        if (!u.same_shape(updates.front())) {
            throw std::invalid_argument("MergeSpec: adapters do not share (m, n)");
        }
    }
}

DenseMatrix merge_weight_average(const MergeSpec& spec) {
    spec.validate();
    DenseMatrix merged(spec.updates.front().rows(), spec.updates.front().cols(), 0.0);
    for (std::size_t i = 0; i < spec.updates.size(); ++i) {
        merged.add_scaled(spec.updates[i], spec.weights[i]);
    }
    return merged;
}

double pairwise_task_orthogonality(const DenseMatrix& dw_i, const DenseMatrix& dw_j) {
    const double ni = dw_i.frobenius_norm();
    const double nj = dw_j.frobenius_norm();
    if (ni == 0.0 || nj == 0.0) {
        throw std::invalid_argument("pairwise_task_orthogonality: zero adapter update");
    }
    return frobenius_inner(dw_i, dw_j) / (ni * nj);
}

double pairwise_task_orthogonality(const FlyAdapter& a, const FlyAdapter& b) {
    return pairwise_task_orthogonality(a.effective_update(), b.effective_update());
}

double pairwise_task_orthogonality(const LoraAdapter& a, const LoraAdapter& b) {
    return pairwise_task_orthogonality(a.effective_update(), b.effective_update());
}

InterferenceReport merged_norm_decomposition(const MergeSpec& spec) {
    spec.validate();
    const std::size_t t = spec.updates.size();
    InterferenceReport report;
    report.normalized_inner = DenseMatrix(t, t, 0.0);

    std::vector<double> norms(t, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        norms[i] = spec.updates[i].frobenius_norm();
    }
    double cross = 0.0;
    double self = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
            const double inner = frobenius_inner(spec.updates[i], spec.updates[j]);
            if (norms[i] > 0.0 && norms[j] > 0.0) {
                report.normalized_inner(i, j) = inner / (norms[i] * norms[j]);
            }
            const double term = spec.weights[i] * spec.weights[j] * inner;
            if (i == j) {
                self += term;
            } else {
                cross += term;
            }
        }
    }
    report.weighted_norm_sq = self;
    report.merged_norm_sq = self + cross;
    report.cross_term_fraction = self > 0.0 ? std::abs(cross) / self : 0.0;
    return report;
}

double linear_cka(const DenseMatrix& x, const DenseMatrix& y) {
    if (x.rows() != y.rows()) {
        throw std::invalid_argument("linear_cka: sample counts differ");
    }
    const std::size_t n = x.rows();
    if (n == 0) {
        throw std::invalid_argument("linear_cka: empty inputs");
    }
    auto centered = [n](const DenseMatrix& m) {
        DenseMatrix c = m;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mean += m(i, j);
            }
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                c(i, j) -= mean;
            }
        }
        return c;
    };
    const DenseMatrix xc = centered(x);
    const DenseMatrix yc = centered(y);

    auto cross_norm_sq = [n](const DenseMatrix& a, const DenseMatrix& b) {
        // ||A^T B||_F^2 without materializing the Gram matrices.
        double acc = 0.0;
        for (std::size_t p = 0; p < a.cols(); ++p) {
            for (std::size_t q = 0; q < b.cols(); ++q) {
                double inner = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    inner += a(i, p) * b(i, q);
                }
                acc += inner * inner;
            }
        }
        return acc;
    };
    const double xx = cross_norm_sq(xc, xc);
    const double yy = cross_norm_sq(yc, yc);
    if (xx == 0.0 || yy == 0.0) {
        throw std::invalid_argument("linear_cka: zero-variance input");
    }
    return cross_norm_sq(xc, yc) / std::sqrt(xx * yy);
}

std::string InterferenceReport::to_json() const {
    nlohmann::json j;
    nlohmann::json inner = nlohmann::json::array();
    for (std::size_t i = 0; i < normalized_inner.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t c = 0; c < normalized_inner.cols(); ++c) {
            row.push_back(normalized_inner(i, c));
        }
        inner.push_back(row);
    }
    j["normalized_inner_products"] = inner;
    j["cross_term_fraction"] = cross_term_fraction;
    j["merged_norm_sq"] = merged_norm_sq;
    j["weighted_norm_sq"] = weighted_norm_sq;
    j["metric_before"] = metric_before;
    j["metric_after"] = metric_after;
    j["delta_percent"] = delta_percent;
    return j.dump(2);
}

}  // namespace flylora
