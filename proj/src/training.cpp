// SPDX-License-Identifier: Apache-2.0
#include "flylora/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace flylora {

namespace {

std::vector<double> input_component_scales(std::size_t n, double decay) {
    // Component j has standard deviation (1+j)^(-decay/2); the top component
    // is unit variance, keeping gradients well scaled at any decay.
    std::vector<double> scales(n, 1.0);
    if (decay <= 0.0) {
        return scales;
    }
    for (std::size_t j = 0; j < n; ++j) {
        scales[j] = std::pow(static_cast<double>(j + 1), -decay / 2.0);
    }
    return scales;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    std::vector<double> out(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        denom += out[i];
    }
    for (auto& v : out) {
        v /= denom;
    }
    return out;
}

}  // namespace

ToyTask make_linear_teacher_task(std::size_t n, std::size_t m, std::size_t samples, double noise,
                                 std::uint64_t seed, double input_decay) {
    if (samples < 64) {
        throw std::invalid_argument("make_linear_teacher_task: need >= 64 samples");
    }
    if (n == 0 || m == 0) {
        throw std::invalid_argument("make_linear_teacher_task: invalid dims");
    }
    ToyTask task;
    task.kind = TaskKind::kLinearTeacher;
    task.n = n;
    task.m = m;
    task.noise = noise;
    task.seed = seed;
    task.input_decay = input_decay;
    task.eval_count = samples / 5;
    task.train_count = samples - task.eval_count;

    SeededStream stream(seed);
    task.teacher = DenseMatrix(m, n, 0.0);
    const double teacher_sigma = 1.0 / std::sqrt(static_cast<double>(n));
    for (auto& v : task.teacher.raw()) {
        v = teacher_sigma * stream.next_gaussian();
    }

    const std::vector<double> scales = input_component_scales(n, input_decay);
    task.inputs.resize(samples);
    task.targets = DenseMatrix(samples, m, 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
        auto& x = task.inputs[s];
        x.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            x[j] = scales[j] * stream.next_gaussian();
        }
        const std::vector<double> y = task.teacher.apply(x);
        for (std::size_t i = 0; i < m; ++i) {
            task.targets(s, i) = y[i] + noise * stream.next_gaussian();
        }
    }
    return task;
}

ToyTask make_gaussian_cluster_task(std::size_t n, std::size_t m, std::size_t samples, double noise,
                                   std::uint64_t seed) {
    if (samples < 64) {
        throw std::invalid_argument("make_gaussian_cluster_task: need >= 64 samples");
    }
    if (n == 0 || m < 2) {
        throw std::invalid_argument("make_gaussian_cluster_task: need >= 2 clusters");
    }
    ToyTask task;
    task.kind = TaskKind::kGaussianCluster;
    task.n = n;
    task.m = m;
    task.noise = noise;
    task.seed = seed;
    task.eval_count = samples / 5;
    task.train_count = samples - task.eval_count;

    SeededStream stream(seed);
    DenseMatrix centers(m, n, 0.0);
    for (auto& v : centers.raw()) {
        v = stream.next_gaussian();
    }
    const double spread = noise > 0.0 ? noise : 1.0;
    task.inputs.resize(samples);
    task.targets = DenseMatrix(samples, m, 0.0);
    task.labels.resize(samples);
    for (std::size_t s = 0; s < samples; ++s) {
        const auto label = static_cast<std::size_t>(stream.next_below(m));
        task.labels[s] = label;
        auto& x = task.inputs[s];
        x.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            x[j] = centers(label, j) + spread * stream.next_gaussian();
        }
        task.targets(s, label) = 1.0;
    }
    return task;
}

DenseMatrix backward_B(const FlyAdapter& adapter, const std::vector<double>& x,
                       const std::vector<double>& upstream, const RoutingDecision& decision) {
    const AdapterConfig& cfg = adapter.config;
    if (decision.scores.size() != cfg.r || decision.k() != cfg.k) {
        throw std::invalid_argument("backward_B: decision does not match the adapter (stale?)");
    }
    if (x.size() != cfg.n || upstream.size() != cfg.m) {
        throw std::invalid_argument("backward_B: shape mismatch");
    }
    DenseMatrix grad(cfg.m, cfg.r, 0.0);
    const double s = cfg.scale();
    for (std::size_t j = 0; j < cfg.r; ++j) {
        if (!decision.mask[j]) {
            continue;
        }
        const double coeff = s * decision.scores[j];
        for (std::size_t i = 0; i < cfg.m; ++i) {
            grad(i, j) = coeff * upstream[i];
        }
    }
    return grad;
}

double finite_diff_check(const FlyAdapter& adapter, const std::vector<double>& x,
                         const std::vector<double>& target, double step) {
    if (!(step > 0.0)) {
        throw std::invalid_argument("finite_diff_check: step must be positive");
    }
    const AdapterConfig& cfg = adapter.config;
    const ForwardResult fwd = flylora_forward(adapter, x);
    std::vector<double> upstream(cfg.m);
    for (std::size_t i = 0; i < cfg.m; ++i) {
        upstream[i] = fwd.output[i] - target[i];
    }
    const DenseMatrix analytic = backward_B(adapter, x, upstream, fwd.decision);

    // Loss with the routing decision (mask and scores) held fixed while B is
    // perturbed.
    DenseMatrix b = adapter.b;
    const double s = cfg.scale();
    auto loss_with = [&](const DenseMatrix& bm) {
        std::vector<double> out =
            adapter.has_base() ? adapter.w0.apply(x) : std::vector<double>(cfg.m, 0.0);
        for (std::size_t j = 0; j < cfg.r; ++j) {
            if (!fwd.decision.mask[j]) {
                continue;
            }
            const double coeff = s * fwd.decision.scores[j];
            for (std::size_t i = 0; i < cfg.m; ++i) {
                out[i] += coeff * bm(i, j);
            }
        }
        double l = 0.0;
        for (std::size_t i = 0; i < cfg.m; ++i) {
            const double d = out[i] - target[i];
            l += 0.5 * d * d;
        }
        return l;
    };

    double max_rel = 0.0;
    for (std::size_t i = 0; i < cfg.m; ++i) {
        for (std::size_t j = 0; j < cfg.r; ++j) {
            const double saved = b(i, j);
            b(i, j) = saved + step;
            const double lp = loss_with(b);
            b(i, j) = saved - step;
            const double lm = loss_with(b);
            b(i, j) = saved;
            const double numeric = (lp - lm) / (2.0 * step);
            const double rel =
                std::abs(analytic(i, j) - numeric) / (std::abs(analytic(i, j)) + 1e-8);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

namespace {

GradCovEstimate summarize(DenseMatrix sigma, std::size_t samples) {
    const std::size_t r = sigma.rows();
    sigma.scale(1.0 / static_cast<double>(samples));
    GradCovEstimate est;
    est.samples = samples;
    double diag = 0.0, off = 0.0, off_abs = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            if (i == j) {
                diag += std::abs(sigma(i, j));
            } else {
                off += sigma(i, j);
                off_abs += std::abs(sigma(i, j));
            }
        }
    }
    const double n_off = static_cast<double>(r * (r - 1));
    est.mean_diag = diag / static_cast<double>(r);
    est.mean_offdiag = off / n_off;
    est.mean_offdiag_abs = off_abs / n_off;
    est.offdiag_to_diag = est.mean_diag > 0.0 ? est.mean_offdiag_abs / est.mean_diag : 0.0;
    est.sigma = std::move(sigma);
    return est;
}

}  // namespace

CovariancePair estimate_covariance_pair(std::size_t r, std::size_t k, std::size_t samples,
                                        std::uint64_t seed, std::size_t grad_dim) {
    if (k < 1 || k > r) {
        throw std::invalid_argument("estimate_covariance_pair: need 1 <= k <= r");
    }
    if (samples < 10000) {
        throw std::invalid_argument("estimate_covariance_pair: need >= 1e4 samples");
    }
    // Separate streams keep the gradient draws identical across mask choices.
    SeededStream grad_stream(seed, 1);
    SeededStream mask_stream(seed, 2);

    DenseMatrix sigma_dense(r, r, 0.0);
    DenseMatrix sigma_masked(r, r, 0.0);
    std::vector<double> shared(grad_dim);
    DenseMatrix g(r, grad_dim, 0.0);
    std::vector<std::uint8_t> mask(r, 0);
    std::vector<std::size_t> pool(r);

    for (std::size_t s = 0; s < samples; ++s) {
        for (auto& z : shared) {
            z = grad_stream.next_gaussian();
        }
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t a = 0; a < grad_dim; ++a) {
                g(i, a) = shared[a] + grad_stream.next_gaussian();
            }
        }
        // Uniform k-of-r activation, the simplified top-k of Assumption 1.
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        std::fill(mask.begin(), mask.end(), std::uint8_t{0});
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t t =
                j + static_cast<std::size_t>(mask_stream.next_below(r - j));
            std::swap(pool[j], pool[t]);
            mask[pool[j]] = 1;
        }
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = i; j < r; ++j) {
                double inner = 0.0;
                for (std::size_t a = 0; a < grad_dim; ++a) {
                    inner += g(i, a) * g(j, a);
                }
                sigma_dense(i, j) += inner;
                if (mask[i] && mask[j]) {
                    sigma_masked(i, j) += inner;
                }
            }
        }
    }
    // Mirror the upper triangle.
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            sigma_dense(i, j) = sigma_dense(j, i);
            sigma_masked(i, j) = sigma_masked(j, i);
        }
    }

    CovariancePair pair;
    pair.dense = summarize(std::move(sigma_dense), samples);
    pair.masked = summarize(std::move(sigma_masked), samples);
    pair.expected_attenuation = static_cast<double>(k) * static_cast<double>(k - 1) /
                                (static_cast<double>(r) * static_cast<double>(r - 1));
    pair.attenuation =
        pair.dense.mean_offdiag != 0.0 ? pair.masked.mean_offdiag / pair.dense.mean_offdiag : 0.0;
    return pair;
}

GradCovEstimate estimate_grad_covariance(std::size_t r, std::size_t k, std::size_t samples,
                                         GradCovMode mode, std::uint64_t seed,
                                         std::size_t grad_dim) {
    CovariancePair pair = estimate_covariance_pair(r, k, samples, seed, grad_dim);
    return mode == GradCovMode::kDense ? std::move(pair.dense) : std::move(pair.masked);
}

namespace {

std::vector<double> loss_upstream(const ToyTask& task, std::size_t sample,
                                  const std::vector<double>& output) {
    std::vector<double> upstream(task.m);
    if (task.kind == TaskKind::kLinearTeacher) {
        for (std::size_t i = 0; i < task.m; ++i) {
            upstream[i] = output[i] - task.targets(sample, i);
        }
    } else {
        const std::vector<double> probs = softmax(output);
        for (std::size_t i = 0; i < task.m; ++i) {
            upstream[i] = probs[i] - task.targets(sample, i);
        }
    }
    return upstream;
}

double sample_loss(const ToyTask& task, std::size_t sample, const std::vector<double>& output) {
    if (task.kind == TaskKind::kLinearTeacher) {
        double acc = 0.0;
        for (std::size_t i = 0; i < task.m; ++i) {
            const double d = output[i] - task.targets(sample, i);
            acc += d * d;
        }
        return acc / static_cast<double>(task.m);
    }
    const std::vector<double> probs = softmax(output);
    return -std::log(std::max(probs[task.labels[sample]], 1e-300));
}

}  // namespace

CorrelationReport gradient_correlation_matrix(const FlyAdapter& adapter, const ToyTask& task,
                                              std::size_t max_samples, std::size_t subset,
                                              std::uint64_t seed) {
    const AdapterConfig& cfg = adapter.config;
    if (subset > cfg.r) {
        throw std::invalid_argument("gradient_correlation_matrix: subset > r");
    }
    const std::size_t used = std::min(max_samples, task.train_count);

    SeededStream stream(seed, 17);
    std::vector<std::size_t> pool(cfg.r);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t j = 0; j < subset; ++j) {
        const std::size_t t = j + static_cast<std::size_t>(stream.next_below(cfg.r - j));
        std::swap(pool[j], pool[t]);
    }
    CorrelationReport report;
    report.columns.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(subset));
    std::sort(report.columns.begin(), report.columns.end());

    // One trace per sampled column: the per-sample gradient vectors,
    // concatenated over the batch.
    std::vector<std::vector<double>> traces(subset);
    for (auto& t : traces) {
        t.reserve(used * cfg.m);
    }
    for (std::size_t s = 0; s < used; ++s) {
        const ForwardResult fwd = flylora_forward(adapter, task.inputs[s]);
        const std::vector<double> upstream = loss_upstream(task, s, fwd.output);
        const DenseMatrix grad = backward_B(adapter, task.inputs[s], upstream, fwd.decision);
        for (std::size_t c = 0; c < subset; ++c) {
            const std::size_t col = report.columns[c];
            for (std::size_t i = 0; i < cfg.m; ++i) {
                traces[c].push_back(grad(i, col));
            }
        }
    }

    const std::size_t len = used * cfg.m;
    std::vector<double> mean(subset, 0.0), var(subset, 0.0);
    for (std::size_t c = 0; c < subset; ++c) {
        for (double v : traces[c]) {
            mean[c] += v;
        }
        mean[c] /= static_cast<double>(len);
        for (double v : traces[c]) {
            const double d = v - mean[c];
            var[c] += d * d;
        }
    }
    report.correlations = DenseMatrix(subset, subset, 0.0);
    for (std::size_t a = 0; a < subset; ++a) {
        if (var[a] == 0.0) {
            ++report.zero_variance_columns;
        }
        for (std::size_t b = 0; b < subset; ++b) {
            if (a == b) {
                report.correlations(a, b) = var[a] == 0.0 ? 0.0 : 1.0;
                continue;
            }
            if (var[a] == 0.0 || var[b] == 0.0) {
                report.correlations(a, b) = 0.0;
                continue;
            }
            double cov = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                cov += (traces[a][i] - mean[a]) * (traces[b][i] - mean[b]);
            }
            report.correlations(a, b) = cov / std::sqrt(var[a] * var[b]);
        }
    }
    return report;
}

namespace {

struct EpochAccumulator {
    double loss_sum = 0.0;
    std::size_t count = 0;

    void add(double loss) {
        loss_sum += loss;
        ++count;
    }
    double mean() const { return count ? loss_sum / static_cast<double>(count) : 0.0; }
};

std::vector<std::size_t> shuffled_order(std::size_t count, SeededStream& stream) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t j = 0; j + 1 < count; ++j) {
        const std::size_t t = j + static_cast<std::size_t>(stream.next_below(count - j));
        std::swap(order[j], order[t]);
    }
    return order;
}

void check_task_shapes(const AdapterConfig& cfg, const ToyTask& task) {
    if (task.n != cfg.n || task.m != cfg.m) {
        throw std::invalid_argument("train_adapter: task dims do not match the adapter");
    }
}

[[noreturn]] void report_divergence(std::size_t epoch, const std::vector<double>& trace) {
    std::ostringstream os;
    os << "training diverged (loss is not finite) at epoch " << epoch << "; trace:";
    for (double l : trace) {
        os << ' ' << l;
    }
    throw std::runtime_error(os.str());
}

}  // namespace

TrainingTrace train_adapter(FlyAdapter& adapter, const ToyTask& task, const TrainOptions& opts) {
    check_task_shapes(adapter.config, task);
    if (!(opts.lr >= 0.0)) {
        throw std::invalid_argument("train_adapter: lr must be >= 0");
    }
    const AdapterConfig& cfg = adapter.config;
    const bool train_a = adapter.trainable_a();
    const bool balancing = cfg.balance_rate > 0.0;
    const double s = cfg.scale();
    SeededStream order_stream(opts.seed, 101);

    TrainingTrace trace;
    DenseMatrix grad_b(cfg.m, cfg.r, 0.0);
    DenseMatrix grad_a(train_a ? cfg.r : 0, train_a ? cfg.n : 0, 0.0);

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_order(task.train_count, order_stream);
        EpochAccumulator acc;
        std::vector<std::uint64_t> epoch_counts(cfg.r, 0);

        std::size_t cursor = 0;
        while (cursor < order.size()) {
            const std::size_t batch_end = std::min(cursor + opts.batch_size, order.size());
            const auto batch_n = static_cast<double>(batch_end - cursor);
            std::fill(grad_b.raw().begin(), grad_b.raw().end(), 0.0);
            if (train_a) {
                std::fill(grad_a.raw().begin(), grad_a.raw().end(), 0.0);
            }

            for (std::size_t b = cursor; b < batch_end; ++b) {
                const std::size_t sample = order[b];
                const std::vector<double>& x = task.inputs[sample];
                const ForwardResult fwd = flylora_forward(adapter, x, /*train=*/true);
                acc.add(sample_loss(task, sample, fwd.output));
                const std::vector<double> upstream = loss_upstream(task, sample, fwd.output);
                for (std::size_t idx : fwd.decision.selected) {
                    epoch_counts[idx] += 1;
                }
                for (std::size_t j = 0; j < cfg.r; ++j) {
                    if (!fwd.decision.mask[j]) {
                        continue;
                    }
                    const double coeff = s * fwd.decision.scores[j];
                    for (std::size_t i = 0; i < cfg.m; ++i) {
                        grad_b(i, j) += coeff * upstream[i];
                    }
                    if (train_a) {
                        double bu = 0.0;
                        for (std::size_t i = 0; i < cfg.m; ++i) {
                            bu += adapter.b(i, j) * upstream[i];
                        }
                        const double row_coeff = s * bu;
                        for (std::size_t c = 0; c < cfg.n; ++c) {
                            grad_a(j, c) += row_coeff * x[c];
                        }
                    }
                }
            }

            const double step = opts.lr / batch_n;
            for (std::size_t i = 0; i < grad_b.size(); ++i) {
                adapter.b.raw()[i] -= step * grad_b.raw()[i];
            }
            if (train_a) {
                for (std::size_t i = 0; i < grad_a.size(); ++i) {
                    adapter.a_dense.raw()[i] -= step * grad_a.raw()[i];
                }
            }
            if (balancing) {
                update_balance_bias(adapter.balance);
            }
            cursor = batch_end;
        }

        trace.train_loss.push_back(acc.mean());
        trace.assignments.push_back(std::move(epoch_counts));
        EpochAccumulator eval_acc;
        for (std::size_t e = 0; e < task.eval_count; ++e) {
            const std::size_t sample = task.train_count + e;
            const ForwardResult fwd = flylora_forward(adapter, task.inputs[sample]);
            eval_acc.add(sample_loss(task, sample, fwd.output));
        }
        trace.eval_loss.push_back(eval_acc.mean());
        if (!std::isfinite(trace.train_loss.back()) || !std::isfinite(trace.eval_loss.back())) {
            report_divergence(epoch, trace.train_loss);
        }
    }
    trace.final_metric = evaluate_metric(adapter, task);
    return trace;
}

TrainingTrace train_adapter(LoraAdapter& adapter, const ToyTask& task, const TrainOptions& opts) {
    check_task_shapes(adapter.config, task);
    const AdapterConfig& cfg = adapter.config;
    const bool train_a = cfg.variant == AdapterVariant::kLora;
    const double s = cfg.scale();
    SeededStream order_stream(opts.seed, 101);

    TrainingTrace trace;
    DenseMatrix grad_b(cfg.m, cfg.r, 0.0);
    DenseMatrix grad_a(cfg.r, cfg.n, 0.0);

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_order(task.train_count, order_stream);
        EpochAccumulator acc;

        std::size_t cursor = 0;
        while (cursor < order.size()) {
            const std::size_t batch_end = std::min(cursor + opts.batch_size, order.size());
            const auto batch_n = static_cast<double>(batch_end - cursor);
            std::fill(grad_b.raw().begin(), grad_b.raw().end(), 0.0);
            if (train_a) {
                std::fill(grad_a.raw().begin(), grad_a.raw().end(), 0.0);
            }

            for (std::size_t b = cursor; b < batch_end; ++b) {
                const std::size_t sample = order[b];
                const std::vector<double>& x = task.inputs[sample];
                const std::vector<double> t = adapter.a.apply(x);
                std::vector<double> out =
                    adapter.has_base() ? adapter.w0.apply(x) : std::vector<double>(cfg.m, 0.0);
                for (std::size_t j = 0; j < cfg.r; ++j) {
                    const double coeff = s * t[j];
                    for (std::size_t i = 0; i < cfg.m; ++i) {
                        out[i] += coeff * adapter.b(i, j);
                    }
                }
                acc.add(sample_loss(task, sample, out));
                const std::vector<double> upstream = loss_upstream(task, sample, out);
                for (std::size_t j = 0; j < cfg.r; ++j) {
                    const double coeff = s * t[j];
                    for (std::size_t i = 0; i < cfg.m; ++i) {
                        grad_b(i, j) += coeff * upstream[i];
                    }
                }
                if (train_a) {
                    for (std::size_t j = 0; j < cfg.r; ++j) {
                        double bu = 0.0;
                        for (std::size_t i = 0; i < cfg.m; ++i) {
                            bu += adapter.b(i, j) * upstream[i];
                        }
                        const double coeff = s * bu;
                        for (std::size_t c = 0; c < cfg.n; ++c) {
                            grad_a(j, c) += coeff * x[c];
                        }
                    }
                }
            }

            const double step = opts.lr / batch_n;
            for (std::size_t i = 0; i < grad_b.size(); ++i) {
                adapter.b.raw()[i] -= step * grad_b.raw()[i];
            }
            if (train_a) {
                for (std::size_t i = 0; i < grad_a.size(); ++i) {
                    adapter.a.raw()[i] -= step * grad_a.raw()[i];
                }
            }
            cursor = batch_end;
        }

        trace.train_loss.push_back(acc.mean());
        trace.assignments.emplace_back();
        EpochAccumulator eval_acc;
        for (std::size_t e = 0; e < task.eval_count; ++e) {
            const std::size_t sample = task.train_count + e;
            const std::vector<double> out = lora_forward(adapter.w0, adapter.b, adapter.a,
                                                         cfg.effective_alpha(), cfg.r,
                                                         task.inputs[sample]);
            eval_acc.add(sample_loss(task, sample, out));
        }
        trace.eval_loss.push_back(eval_acc.mean());
        if (!std::isfinite(trace.train_loss.back()) || !std::isfinite(trace.eval_loss.back())) {
            report_divergence(epoch, trace.train_loss);
        }
    }
    trace.final_metric = evaluate_metric(adapter, task);
    return trace;
}

TrainingTrace train_adapter(SplitAdapter& adapter, const ToyTask& task, const TrainOptions& opts) {
    check_task_shapes(adapter.config, task);
    const AdapterConfig& cfg = adapter.config;
    const double s = cfg.scale();
    const std::size_t k_exp = adapter.active_experts();
    SeededStream order_stream(opts.seed, 101);

    TrainingTrace trace;
    std::vector<DenseMatrix> grad_b, grad_a;
    for (std::size_t e = 0; e < adapter.n_experts; ++e) {
        grad_b.emplace_back(cfg.m, adapter.expert_rank, 0.0);
        grad_a.emplace_back(adapter.expert_rank, cfg.n, 0.0);
    }
    DenseMatrix grad_router(adapter.n_experts, cfg.n, 0.0);

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const std::vector<std::size_t> order = shuffled_order(task.train_count, order_stream);
        EpochAccumulator acc;
        std::vector<std::uint64_t> epoch_counts(adapter.n_experts, 0);

        std::size_t cursor = 0;
        while (cursor < order.size()) {
            const std::size_t batch_end = std::min(cursor + opts.batch_size, order.size());
            const auto batch_n = static_cast<double>(batch_end - cursor);
            for (std::size_t e = 0; e < adapter.n_experts; ++e) {
                std::fill(grad_b[e].raw().begin(), grad_b[e].raw().end(), 0.0);
                std::fill(grad_a[e].raw().begin(), grad_a[e].raw().end(), 0.0);
            }
            std::fill(grad_router.raw().begin(), grad_router.raw().end(), 0.0);

            for (std::size_t b = cursor; b < batch_end; ++b) {
                const std::size_t sample = order[b];
                const std::vector<double>& x = task.inputs[sample];
                const std::vector<double> router_scores = adapter.router.apply(x);
                const std::vector<double> zero_bias(adapter.n_experts, 0.0);
                const RoutingDecision decision =
                    select_topk(router_scores, zero_bias, k_exp, SelectionMode::kSigned);
                std::vector<double> out =
                    adapter.has_base() ? adapter.w0.apply(x) : std::vector<double>(cfg.m, 0.0);
                std::vector<std::vector<double>> expert_t(adapter.n_experts);
                std::vector<std::vector<double>> expert_out(adapter.n_experts);
                for (std::size_t e = 0; e < adapter.n_experts; ++e) {
                    if (!decision.mask[e]) {
                        continue;
                    }
                    epoch_counts[e] += 1;
                    const double gate = 1.0 / (1.0 + std::exp(-router_scores[e]));
                    expert_t[e] = adapter.expert_a[e].apply(x);
                    expert_out[e].assign(cfg.m, 0.0);
                    for (std::size_t j = 0; j < adapter.expert_rank; ++j) {
                        const double tv = expert_t[e][j];
                        for (std::size_t i = 0; i < cfg.m; ++i) {
                            expert_out[e][i] += tv * adapter.expert_b[e](i, j);
                        }
                    }
                    for (std::size_t i = 0; i < cfg.m; ++i) {
                        out[i] += s * gate * expert_out[e][i];
                    }
                }
                acc.add(sample_loss(task, sample, out));
                const std::vector<double> upstream = loss_upstream(task, sample, out);
                for (std::size_t e = 0; e < adapter.n_experts; ++e) {
                    if (!decision.mask[e]) {
                        continue;
                    }
                    const double gate = 1.0 / (1.0 + std::exp(-router_scores[e]));
                    for (std::size_t j = 0; j < adapter.expert_rank; ++j) {
                        const double coeff = s * gate * expert_t[e][j];
                        for (std::size_t i = 0; i < cfg.m; ++i) {
                            grad_b[e](i, j) += coeff * upstream[i];
                        }
                    }
                    for (std::size_t j = 0; j < adapter.expert_rank; ++j) {
                        double bu = 0.0;
                        for (std::size_t i = 0; i < cfg.m; ++i) {
                            bu += adapter.expert_b[e](i, j) * upstream[i];
                        }
                        const double coeff = s * gate * bu;
                        for (std::size_t c = 0; c < cfg.n; ++c) {
                            grad_a[e](j, c) += coeff * x[c];
                        }
                    }
                    // Gradient through the sigmoid gate into the router row.
                    double ue = 0.0;
                    for (std::size_t i = 0; i < cfg.m; ++i) {
                        ue += upstream[i] * expert_out[e][i];
                    }
                    const double gate_grad = s * ue * gate * (1.0 - gate);
                    for (std::size_t c = 0; c < cfg.n; ++c) {
                        grad_router(e, c) += gate_grad * x[c];
                    }
                }
            }

            const double step = opts.lr / batch_n;
            for (std::size_t e = 0; e < adapter.n_experts; ++e) {
                for (std::size_t i = 0; i < grad_b[e].size(); ++i) {
                    adapter.expert_b[e].raw()[i] -= step * grad_b[e].raw()[i];
                }
                for (std::size_t i = 0; i < grad_a[e].size(); ++i) {
                    adapter.expert_a[e].raw()[i] -= step * grad_a[e].raw()[i];
                }
            }
            for (std::size_t i = 0; i < grad_router.size(); ++i) {
                adapter.router.raw()[i] -= step * grad_router.raw()[i];
            }
            cursor = batch_end;
        }

        trace.train_loss.push_back(acc.mean());
        trace.assignments.push_back(std::move(epoch_counts));
        EpochAccumulator eval_acc;
        for (std::size_t e = 0; e < task.eval_count; ++e) {
            const std::size_t sample = task.train_count + e;
            const ForwardResult fwd = split_lora_forward(adapter, task.inputs[sample], k_exp);
            eval_acc.add(sample_loss(task, sample, fwd.output));
        }
        trace.eval_loss.push_back(eval_acc.mean());
        if (!std::isfinite(trace.train_loss.back()) || !std::isfinite(trace.eval_loss.back())) {
            report_divergence(epoch, trace.train_loss);
        }
    }
    trace.final_metric = evaluate_metric(adapter, task);
    return trace;
}

namespace {

template <typename ForwardFn>
double eval_mean_loss(const ToyTask& task, ForwardFn&& forward) {
    EpochAccumulator acc;
    for (std::size_t e = 0; e < task.eval_count; ++e) {
        const std::size_t sample = task.train_count + e;
        acc.add(sample_loss(task, sample, forward(task.inputs[sample])));
    }
    return acc.mean();
}

template <typename ForwardFn>
double eval_accuracy(const ToyTask& task, ForwardFn&& forward) {
    std::size_t correct = 0;
    for (std::size_t e = 0; e < task.eval_count; ++e) {
        const std::size_t sample = task.train_count + e;
        const std::vector<double> out = forward(task.inputs[sample]);
        const auto argmax = static_cast<std::size_t>(
            std::max_element(out.begin(), out.end()) - out.begin());
        if (argmax == task.labels[sample]) {
            ++correct;
        }
    }
    return task.eval_count ? static_cast<double>(correct) / static_cast<double>(task.eval_count)
                           : 0.0;
}

template <typename ForwardFn>
double eval_metric(const ToyTask& task, ForwardFn&& forward) {
    if (task.kind == TaskKind::kGaussianCluster) {
        return eval_accuracy(task, forward);
    }
    return eval_mean_loss(task, forward);
}

auto fly_forward_fn(const FlyAdapter& adapter) {
    return [&](const std::vector<double>& x) { return flylora_forward(adapter, x).output; };
}

auto lora_forward_fn(const LoraAdapter& adapter) {
    return [&](const std::vector<double>& x) {
        return lora_forward(adapter.w0, adapter.b, adapter.a, adapter.config.effective_alpha(),
                            adapter.config.r, x);
    };
}

auto split_forward_fn(const SplitAdapter& adapter) {
    return [&](const std::vector<double>& x) {
        return split_lora_forward(adapter, x, adapter.active_experts()).output;
    };
}

auto update_forward_fn(const DenseMatrix& delta_w, const DenseMatrix& w0) {
    return [&](const std::vector<double>& x) {
        std::vector<double> out =
            w0.rows() > 0 ? w0.apply(x) : std::vector<double>(delta_w.rows(), 0.0);
        const std::vector<double> dx = delta_w.apply(x);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += dx[i];
        }
        return out;
    };
}

}  // namespace

double evaluate_mse(const FlyAdapter& adapter, const ToyTask& task) {
    return eval_mean_loss(task, fly_forward_fn(adapter));
}

double evaluate_mse(const LoraAdapter& adapter, const ToyTask& task) {
    return eval_mean_loss(task, lora_forward_fn(adapter));
}

double evaluate_mse(const SplitAdapter& adapter, const ToyTask& task) {
    return eval_mean_loss(task, split_forward_fn(adapter));
}

double evaluate_mse_update(const DenseMatrix& delta_w, const DenseMatrix& w0, const ToyTask& task) {
    return eval_mean_loss(task, update_forward_fn(delta_w, w0));
}

double evaluate_metric(const FlyAdapter& adapter, const ToyTask& task) {
    return eval_metric(task, fly_forward_fn(adapter));
}

double evaluate_metric(const LoraAdapter& adapter, const ToyTask& task) {
    return eval_metric(task, lora_forward_fn(adapter));
}

double evaluate_metric(const SplitAdapter& adapter, const ToyTask& task) {
    return eval_metric(task, split_forward_fn(adapter));
}

double evaluate_metric_update(const DenseMatrix& delta_w, const DenseMatrix& w0,
                              const ToyTask& task) {
    return eval_metric(task, update_forward_fn(delta_w, w0));
}

namespace {

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::uint64_t matrix_checksum(const DenseMatrix& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(m.data(), m.size() * sizeof(double), h);
    return h;
}

std::uint64_t matrix_checksum(const RowSparseMatrix& m) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(m.indices().data(), m.indices().size() * sizeof(std::uint32_t), h);
    h = fnv1a(m.values().data(), m.values().size() * sizeof(double), h);
    return h;
}

std::string TrainingTrace::to_csv() const {
    std::ostringstream os;
    os << "epoch,train_loss,eval_loss,assignments\n";
    for (std::size_t e = 0; e < train_loss.size(); ++e) {
        os << e << ',' << format_real(train_loss[e]) << ',' << format_real(eval_loss[e]) << ',';
        if (e < assignments.size()) {
            for (std::size_t i = 0; i < assignments[e].size(); ++i) {
                if (i) {
                    os << ';';
                }
                os << assignments[e][i];
            }
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace flylora
