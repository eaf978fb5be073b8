// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "flylora/training.hpp"

using namespace flylora;

namespace {

RowSparseMatrix sparse_identity_2() {
    RowSparseMatrix a(2, 2, 1);
    a.row_indices(0)[0] = 0;
    a.row_values(0)[0] = 1.0;
    a.row_indices(1)[0] = 1;
    a.row_values(1)[0] = 1.0;
    return a;
}

FlyAdapter random_fly(std::size_t m, std::size_t n, std::size_t r, std::size_t k,
                      std::uint64_t seed, double b_sigma = 1.0) {
    AdapterConfig cfg;
    cfg.m = m;
    cfg.n = n;
    cfg.r = r;
    cfg.k = k;
    cfg.rho = 0.25;
    cfg.balance_rate = 0.0;  // keep routing fixed for gradient-level tests
    FlyAdapter adapter = make_fly_adapter(cfg, seed);
    SeededStream stream(seed, 5);
    for (auto& v : adapter.b.raw()) {
        v = b_sigma * stream.next_gaussian();
    }
    return adapter;
}

}  // namespace

TEST_CASE("backward_B single-column chain rule") {
    FlyAdapter adapter;
    adapter.config.m = 2;
    adapter.config.n = 2;
    adapter.config.r = 2;
    adapter.config.k = 1;
    adapter.config.alpha = 4.0;
    adapter.a = sparse_identity_2();
    adapter.b = DenseMatrix::identity(2);
    adapter.balance = BalanceState(2, 1);
    const std::vector<double> x{3.0, -1.0};
    const ForwardResult fwd = flylora_forward(adapter, x);
    REQUIRE(fwd.decision.selected[0] == 0);
    const DenseMatrix grad = backward_B(adapter, x, {1.0, 0.0}, fwd.decision);
    CHECK(grad(0, 0) == doctest::Approx(6.0));
    CHECK(grad(1, 0) == 0.0);
    CHECK(grad(0, 1) == 0.0);
    CHECK(grad(1, 1) == 0.0);
}

TEST_CASE("backward_B with zero upstream is zero") {
    FlyAdapter adapter = random_fly(4, 16, 4, 2, 3);
    std::vector<double> x(16, 0.25);
    const ForwardResult fwd = flylora_forward(adapter, x);
    const DenseMatrix grad = backward_B(adapter, x, std::vector<double>(4, 0.0), fwd.decision);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        CHECK(grad.data()[i] == 0.0);
    }
}

TEST_CASE("backward_B equals the dense-gradient-then-mask oracle") {
    SeededStream stream(14);
    FlyAdapter adapter = random_fly(6, 24, 6, 2, 9);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x(24), upstream(6);
        for (auto& v : x) {
            v = stream.next_gaussian();
        }
        for (auto& v : upstream) {
            v = stream.next_gaussian();
        }
        const ForwardResult fwd = flylora_forward(adapter, x);
        const DenseMatrix grad = backward_B(adapter, x, upstream, fwd.decision);
        // Dense gradient: (alpha/r) * (a_j x) * upstream for every column,
        // then right-multiply by the mask.
        const std::vector<double> scores = spmv(adapter.a, x);
        for (std::size_t j = 0; j < 6; ++j) {
            for (std::size_t i = 0; i < 6; ++i) {
                const double dense = adapter.config.scale() * scores[j] * upstream[i];
                const double expect = fwd.decision.mask[j] ? dense : 0.0;
                CHECK(grad(i, j) == expect);
            }
        }
    }
}

TEST_CASE("backward_B rejects a stale decision") {
    FlyAdapter adapter = random_fly(4, 16, 4, 2, 3);
    std::vector<double> x(16, 0.5);
    const ForwardResult fwd = flylora_forward(adapter, x);
    RoutingDecision stale = fwd.decision;
    stale.selected.pop_back();  // k mismatch
    CHECK_THROWS_AS(backward_B(adapter, x, std::vector<double>(4, 0.0), stale),
                    std::invalid_argument);
}

TEST_CASE("finite differences agree with the analytic gradient") {
    SeededStream stream(23);
    for (int trial = 0; trial < 10; ++trial) {
        FlyAdapter adapter = random_fly(6, 20, 5, 2, 100 + trial);
        std::vector<double> x(20), target(6);
        for (auto& v : x) {
            v = stream.next_gaussian();
        }
        for (auto& v : target) {
            v = stream.next_gaussian();
        }
        CHECK(finite_diff_check(adapter, x, target, 1e-5) <= 1e-6);
    }
}

TEST_CASE("finite_diff_check is exactly zero for the zero adapter at its base") {
    AdapterConfig cfg;
    cfg.m = 4;
    cfg.n = 8;
    cfg.r = 4;
    cfg.k = 2;
    FlyAdapter adapter = make_fly_adapter(cfg, 9);
    SeededStream stream(9, 1);
    adapter.w0 = DenseMatrix(4, 8, 0.0);
    for (auto& v : adapter.w0.raw()) {
        v = stream.next_gaussian();
    }
    std::vector<double> x(8);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    const std::vector<double> target = adapter.w0.apply(x);
    CHECK(finite_diff_check(adapter, x, target, 1e-5) == 0.0);
}

TEST_CASE("finite_diff_check at a coarse step stays well-behaved") {
    // The loss is quadratic in B, so the central difference has no truncation
    // term; the coarse step is reported, not asserted against the fine one.
    FlyAdapter adapter = random_fly(4, 16, 4, 2, 77);
    SeededStream stream(77, 3);
    std::vector<double> x(16), target(4);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    for (auto& v : target) {
        v = stream.next_gaussian();
    }
    const double coarse = finite_diff_check(adapter, x, target, 1e-1);
    const double fine = finite_diff_check(adapter, x, target, 1e-5);
    CHECK(std::isfinite(coarse));
    CHECK(fine <= 1e-6);
}

TEST_CASE("covariance attenuation matches k(k-1)/(r(r-1))") {
    const CovariancePair pair = estimate_covariance_pair(16, 4, 20000, 42);
    CHECK(pair.expected_attenuation == doctest::Approx(12.0 / 240.0));
    CHECK(pair.attenuation ==
          doctest::Approx(pair.expected_attenuation).epsilon(0.2));
    // Dense off-diagonal expectation is the shared-signal dimension.
    CHECK(pair.dense.mean_offdiag == doctest::Approx(16.0).epsilon(0.1));
    CHECK(pair.dense.mean_diag == doctest::Approx(32.0).epsilon(0.1));
}

TEST_CASE("attenuation is exactly one at k = r and zero at k = 1") {
    const CovariancePair full = estimate_covariance_pair(8, 8, 10000, 7);
    CHECK(full.attenuation == doctest::Approx(1.0).epsilon(1e-12));
    const CovariancePair single = estimate_covariance_pair(8, 1, 10000, 7);
    CHECK(std::abs(single.masked.mean_offdiag) == 0.0);
    CHECK(std::abs(single.attenuation) <= 0.005);
}

TEST_CASE("estimate_grad_covariance validates inputs and summarizes") {
    CHECK_THROWS_AS(estimate_grad_covariance(8, 9, 10000, GradCovMode::kDense, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(estimate_grad_covariance(8, 2, 100, GradCovMode::kDense, 1),
                    std::invalid_argument);
    const GradCovEstimate est =
        estimate_grad_covariance(8, 2, 10000, GradCovMode::kTopkMasked, 11);
    CHECK(est.samples == 10000);
    CHECK(est.sigma.rows() == 8);
    // Sigma is symmetric by construction.
    for (std::size_t i = 0; i < 8; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(est.sigma(i, j) == est.sigma(j, i));
        }
    }
    CHECK(est.offdiag_to_diag >= 0.0);
}

TEST_CASE("identical projection rows give perfectly correlated gradient columns") {
    // Rows 0 and 1 of A identical => identical scores => identical gradient
    // traces once both are always selected (k = r).
    AdapterConfig cfg;
    cfg.m = 4;
    cfg.n = 16;
    cfg.r = 4;
    cfg.k = 4;
    FlyAdapter adapter = make_fly_adapter(cfg, 19);
    for (std::size_t j = 0; j < adapter.a.nnz_per_row(); ++j) {
        adapter.a.row_indices(1)[j] = adapter.a.row_indices(0)[j];
        adapter.a.row_values(1)[j] = adapter.a.row_values(0)[j];
    }
    const ToyTask task = make_linear_teacher_task(16, 4, 128, 0.0, 5);
    const CorrelationReport report = gradient_correlation_matrix(adapter, task, 64, 4, 3);
    // Find the positions of columns 0 and 1 in the sampled subset (subset = r
    // here, so they are present).
    std::size_t p0 = 0, p1 = 0;
    for (std::size_t i = 0; i < report.columns.size(); ++i) {
        if (report.columns[i] == 0) {
            p0 = i;
        }
        if (report.columns[i] == 1) {
            p1 = i;
        }
    }
    CHECK(report.correlations(p0, p1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("a zero projection row is flagged as zero variance") {
    AdapterConfig cfg;
    cfg.m = 4;
    cfg.n = 16;
    cfg.r = 4;
    cfg.k = 4;
    FlyAdapter adapter = make_fly_adapter(cfg, 19);
    for (std::size_t j = 0; j < adapter.a.nnz_per_row(); ++j) {
        adapter.a.row_values(2)[j] = 0.0;
    }
    const ToyTask task = make_linear_teacher_task(16, 4, 128, 0.0, 5);
    const CorrelationReport report = gradient_correlation_matrix(adapter, task, 64, 4, 3);
    CHECK(report.zero_variance_columns >= 1);
    std::size_t p2 = 0;
    for (std::size_t i = 0; i < report.columns.size(); ++i) {
        if (report.columns[i] == 2) {
            p2 = i;
        }
    }
    for (std::size_t i = 0; i < report.columns.size(); ++i) {
        CHECK(report.correlations(p2, i) == 0.0);
    }
}

TEST_CASE("top-k masking decorrelates gradient columns versus dense training") {
    // Fig. 3 analog at desk scale: same task, same A, k = r/4 versus k = r.
    std::size_t wins = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const ToyTask task = make_linear_teacher_task(64, 8, 512, 0.0, seed);
        AdapterConfig cfg;
        cfg.m = 8;
        cfg.n = 64;
        cfg.r = 8;
        cfg.k = 8;
        FlyAdapter dense_arm = make_fly_adapter(cfg, 1000 + seed);
        cfg.k = 2;
        FlyAdapter sparse_arm = make_fly_adapter(cfg, 1000 + seed);
        TrainOptions opts;
        opts.epochs = 5;
        opts.lr = 0.02;
        opts.seed = seed;
        train_adapter(dense_arm, task, opts);
        train_adapter(sparse_arm, task, opts);
        auto mean_off = [&](const FlyAdapter& adapter) {
            const CorrelationReport rep =
                gradient_correlation_matrix(adapter, task, 256, 8, seed);
            double acc = 0.0;
            std::size_t cnt = 0;
            for (std::size_t i = 0; i < 8; ++i) {
                for (std::size_t j = 0; j < 8; ++j) {
                    if (i != j) {
                        acc += std::abs(rep.correlations(i, j));
                        ++cnt;
                    }
                }
            }
            return acc / static_cast<double>(cnt);
        };
        if (mean_off(sparse_arm) < mean_off(dense_arm)) {
            ++wins;
        }
    }
    CHECK(wins >= 4);
}

TEST_CASE("lr = 0 leaves B untouched and the loss flat") {
    const ToyTask task = make_linear_teacher_task(16, 4, 128, 0.0, 2);
    FlyAdapter adapter = random_fly(4, 16, 4, 2, 31);
    const std::uint64_t before = matrix_checksum(adapter.b);
    TrainOptions opts;
    opts.epochs = 5;
    opts.lr = 0.0;
    const TrainingTrace trace = train_adapter(adapter, task, opts);
    CHECK(matrix_checksum(adapter.b) == before);
    for (std::size_t e = 1; e < trace.train_loss.size(); ++e) {
        CHECK(trace.train_loss[e] == doctest::Approx(trace.train_loss[0]));
    }
}

TEST_CASE("k = r linear teacher converges near the least-squares floor") {
    // With square invertible A the least-squares oracle achieves zero loss,
    // so training must shed at least three orders of magnitude.
    const ToyTask task = make_linear_teacher_task(8, 8, 512, 0.0, 4, 0.0);
    AdapterConfig cfg;
    cfg.m = 8;
    cfg.n = 8;
    cfg.r = 8;
    cfg.k = 8;
    cfg.rho = 0.75;  // square and dense enough for an invertible projection
    cfg.balance_rate = 0.0;
    FlyAdapter adapter = make_fly_adapter(cfg, 5);
    TrainOptions opts;
    opts.epochs = 200;
    opts.lr = 1.0;
    const TrainingTrace trace = train_adapter(adapter, task, opts);
    CHECK(trace.eval_loss.back() <= 1e-3 * trace.eval_loss.front());
}

TEST_CASE("frozen tensors are bitwise unchanged by training") {
    const ToyTask task = make_linear_teacher_task(32, 8, 256, 0.01, 5);
    AdapterConfig cfg;
    cfg.m = 8;
    cfg.n = 32;
    cfg.r = 8;
    cfg.k = 2;
    FlyAdapter adapter = make_fly_adapter(cfg, 21);
    SeededStream stream(21, 9);
    adapter.w0 = DenseMatrix(8, 32, 0.0);
    for (auto& v : adapter.w0.raw()) {
        v = 0.01 * stream.next_gaussian();
    }
    const std::uint64_t a_sum = matrix_checksum(adapter.a);
    const std::uint64_t w0_sum = matrix_checksum(adapter.w0);
    TrainOptions opts;
    opts.epochs = 20;
    opts.lr = 0.05;
    train_adapter(adapter, task, opts);
    CHECK(matrix_checksum(adapter.a) == a_sum);
    CHECK(matrix_checksum(adapter.w0) == w0_sum);
}

TEST_CASE("training is deterministic given the seed") {
    const ToyTask task = make_linear_teacher_task(32, 8, 256, 0.01, 5);
    AdapterConfig cfg;
    cfg.m = 8;
    cfg.n = 32;
    cfg.r = 8;
    cfg.k = 2;
    TrainOptions opts;
    opts.epochs = 10;
    opts.lr = 0.05;
    opts.seed = 77;
    FlyAdapter a1 = make_fly_adapter(cfg, 21);
    FlyAdapter a2 = make_fly_adapter(cfg, 21);
    const TrainingTrace t1 = train_adapter(a1, task, opts);
    const TrainingTrace t2 = train_adapter(a2, task, opts);
    CHECK(t1.train_loss == t2.train_loss);
    CHECK(matrix_checksum(a1.b) == matrix_checksum(a2.b));
}

TEST_CASE("divergent training reports failure with the trace") {
    const ToyTask task = make_linear_teacher_task(16, 4, 128, 0.0, 2);
    FlyAdapter adapter = random_fly(4, 16, 4, 4, 31);
    TrainOptions opts;
    opts.epochs = 50;
    opts.lr = 1e4;
    CHECK_THROWS_AS(train_adapter(adapter, task, opts), std::runtime_error);
}

TEST_CASE("trainable-A gradient matches finite differences at k = r") {
    // One full-batch step recovers the batch gradient of the stored A values:
    // delta = -lr * dL/dA. At k = r there is no selection discontinuity, so a
    // central difference of the mean loss is a valid oracle.
    const std::size_t n = 12, m = 4, r = 4;
    const ToyTask task = make_linear_teacher_task(n, m, 80, 0.0, 3);
    AdapterConfig cfg;
    cfg.m = m;
    cfg.n = n;
    cfg.r = r;
    cfg.k = r;
    cfg.variant = AdapterVariant::kFlyLoraTrainableA;
    cfg.balance_rate = 0.0;

    auto mean_loss = [&](const FlyAdapter& ad) {
        double acc = 0.0;
        for (std::size_t s = 0; s < task.train_count; ++s) {
            const ForwardResult fwd = flylora_forward(ad, task.inputs[s]);
            double l = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double d = fwd.output[i] - task.targets(s, i);
                l += 0.5 * d * d;
            }
            acc += l;
        }
        return acc / static_cast<double>(task.train_count);
    };

    FlyAdapter reference = make_fly_adapter(cfg, 8);
    SeededStream stream(8, 2);
    for (auto& v : reference.b.raw()) {
        v = stream.next_gaussian();
    }

    const double lr = 1e-3;
    TrainOptions opts;
    opts.epochs = 1;
    opts.lr = lr;
    opts.batch_size = task.train_count;  // one full-batch step
    FlyAdapter stepped = reference;
    train_adapter(stepped, task, opts);

    // Probe a few entries of the dense trainable A, including ones that were
    // zero in the sparse initialization.
    REQUIRE(reference.trainable_a());
    const double h = 1e-6;
    for (const std::size_t probe : {std::size_t{0}, std::size_t{5}, std::size_t{17}}) {
        FlyAdapter plus = reference;
        plus.a_dense.raw()[probe] += h;
        FlyAdapter minus = reference;
        minus.a_dense.raw()[probe] -= h;
        const double numeric = (mean_loss(plus) - mean_loss(minus)) / (2.0 * h);
        const double from_step =
            (reference.a_dense.raw()[probe] - stepped.a_dense.raw()[probe]) / lr;
        CHECK(from_step == doctest::Approx(numeric).epsilon(1e-4));
    }
    // B moved too.
    CHECK(matrix_checksum(stepped.b) != matrix_checksum(reference.b));
}

TEST_CASE("dense LoRA A-gradient matches finite differences") {
    const std::size_t n = 10, m = 4, r = 3;
    const ToyTask task = make_linear_teacher_task(n, m, 80, 0.0, 6);
    AdapterConfig cfg;
    cfg.m = m;
    cfg.n = n;
    cfg.r = r;
    cfg.k = r;
    cfg.variant = AdapterVariant::kLora;

    LoraAdapter reference = make_lora_adapter(cfg, 12);
    SeededStream stream(12, 2);
    for (auto& v : reference.b.raw()) {
        v = stream.next_gaussian();
    }
    auto mean_loss = [&](const LoraAdapter& ad) {
        double acc = 0.0;
        for (std::size_t s = 0; s < task.train_count; ++s) {
            const std::vector<double> out = lora_forward(
                ad.w0, ad.b, ad.a, cfg.effective_alpha(), r, task.inputs[s]);
            for (std::size_t i = 0; i < m; ++i) {
                const double d = out[i] - task.targets(s, i);
                acc += 0.5 * d * d;
            }
        }
        return acc / static_cast<double>(task.train_count);
    };

    const double lr = 1e-3;
    TrainOptions opts;
    opts.epochs = 1;
    opts.lr = lr;
    opts.batch_size = task.train_count;
    LoraAdapter stepped = reference;
    train_adapter(stepped, task, opts);

    const double h = 1e-6;
    for (const std::size_t probe : {std::size_t{1}, std::size_t{14}}) {
        LoraAdapter plus = reference;
        plus.a.raw()[probe] += h;
        LoraAdapter minus = reference;
        minus.a.raw()[probe] -= h;
        const double numeric = (mean_loss(plus) - mean_loss(minus)) / (2.0 * h);
        const double from_step = (reference.a.raw()[probe] - stepped.a.raw()[probe]) / lr;
        CHECK(from_step == doctest::Approx(numeric).epsilon(1e-4));
    }
}

TEST_CASE("split-LoRA gradients match finite differences with all experts active") {
    const std::size_t n = 10, m = 4, r = 4;
    const ToyTask task = make_linear_teacher_task(n, m, 80, 0.0, 6);
    AdapterConfig cfg;
    cfg.m = m;
    cfg.n = n;
    cfg.r = r;
    cfg.k = r;  // both experts active, no selection discontinuity
    cfg.variant = AdapterVariant::kSplitLora;

    SplitAdapter reference = make_split_adapter(cfg, 2, 15);
    SeededStream stream(15, 2);
    for (auto& be : reference.expert_b) {
        for (auto& v : be.raw()) {
            v = stream.next_gaussian();
        }
    }
    auto mean_loss = [&](const SplitAdapter& ad) {
        double acc = 0.0;
        for (std::size_t s = 0; s < task.train_count; ++s) {
            const ForwardResult fwd = split_lora_forward(ad, task.inputs[s], 2);
            for (std::size_t i = 0; i < m; ++i) {
                const double d = fwd.output[i] - task.targets(s, i);
                acc += 0.5 * d * d;
            }
        }
        return acc / static_cast<double>(task.train_count);
    };

    const double lr = 1e-3;
    TrainOptions opts;
    opts.epochs = 1;
    opts.lr = lr;
    opts.batch_size = task.train_count;
    SplitAdapter stepped = reference;
    train_adapter(stepped, task, opts);

    const double h = 1e-6;
    // Probe one router weight and one expert-A weight.
    {
        SplitAdapter plus = reference;
        plus.router.raw()[3] += h;
        SplitAdapter minus = reference;
        minus.router.raw()[3] -= h;
        const double numeric = (mean_loss(plus) - mean_loss(minus)) / (2.0 * h);
        const double from_step =
            (reference.router.raw()[3] - stepped.router.raw()[3]) / lr;
        CHECK(from_step == doctest::Approx(numeric).epsilon(1e-4));
    }
    {
        SplitAdapter plus = reference;
        plus.expert_a[1].raw()[5] += h;
        SplitAdapter minus = reference;
        minus.expert_a[1].raw()[5] -= h;
        const double numeric = (mean_loss(plus) - mean_loss(minus)) / (2.0 * h);
        const double from_step =
            (reference.expert_a[1].raw()[5] - stepped.expert_a[1].raw()[5]) / lr;
        CHECK(from_step == doctest::Approx(numeric).epsilon(1e-4));
    }
}

TEST_CASE("training trace serializes to CSV") {
    const ToyTask task = make_linear_teacher_task(16, 4, 128, 0.0, 2);
    FlyAdapter adapter = random_fly(4, 16, 4, 2, 31, 0.1);
    TrainOptions opts;
    opts.epochs = 3;
    opts.lr = 0.01;
    const TrainingTrace trace = train_adapter(adapter, task, opts);
    const std::string csv = trace.to_csv();
    CHECK(csv.find("epoch,train_loss,eval_loss,assignments") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 3 epochs
}
