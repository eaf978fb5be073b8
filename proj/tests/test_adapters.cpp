// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "flylora/adapters.hpp"
#include "flylora/rng.hpp"

using namespace flylora;

namespace {

DenseMatrix random_dense(std::size_t rows, std::size_t cols, SeededStream& stream,
                         double sigma = 1.0) {
    DenseMatrix m(rows, cols);
    for (auto& v : m.raw()) {
        v = sigma * stream.next_gaussian();
    }
    return m;
}

// 2x2 sparse identity: one stored entry per row.
RowSparseMatrix sparse_identity_2() {
    RowSparseMatrix a(2, 2, 1);
    a.row_indices(0)[0] = 0;
    a.row_values(0)[0] = 1.0;
    a.row_indices(1)[0] = 1;
    a.row_values(1)[0] = 1.0;
    return a;
}

AdapterConfig tiny_fly_config() {
    AdapterConfig cfg;
    cfg.m = 2;
    cfg.n = 2;
    cfg.r = 2;
    cfg.k = 1;
    cfg.alpha = 4.0;
    cfg.rho = 0.5;
    cfg.variant = AdapterVariant::kFlyLora;
    return cfg;
}

}  // namespace

TEST_CASE("lora_forward with zero B returns the base output") {
    SeededStream stream(1);
    const DenseMatrix w0 = random_dense(3, 4, stream);
    const DenseMatrix a = random_dense(2, 4, stream);
    const DenseMatrix b(3, 2, 0.0);
    const std::vector<double> x{1.0, -2.0, 0.5, 3.0};
    const std::vector<double> out = lora_forward(w0, b, a, 4.0, 2, x);
    const std::vector<double> base = w0.apply(x);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] == base[i]);
    }
}

TEST_CASE("lora_forward identity chain") {
    // W0 = 0, alpha = 2r, A = B = I, x = [3, -1]  ->  2 * x.
    const DenseMatrix i2 = DenseMatrix::identity(2);
    const std::vector<double> out = lora_forward(DenseMatrix(), i2, i2, 4.0, 2, {3.0, -1.0});
    CHECK(out[0] == doctest::Approx(6.0));
    CHECK(out[1] == doctest::Approx(-2.0));
}

TEST_CASE("lora_forward matches the explicit delta-W oracle") {
    SeededStream stream(9);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t m = 5, n = 7, r = 3;
        const DenseMatrix w0 = random_dense(m, n, stream);
        const DenseMatrix a = random_dense(r, n, stream);
        const DenseMatrix b = random_dense(m, r, stream);
        std::vector<double> x(n);
        for (auto& v : x) {
            v = stream.next_gaussian();
        }
        const double alpha = 6.0;
        // Oracle: form delta_w = (alpha/r) B A explicitly, then apply.
        DenseMatrix delta(m, n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < r; ++t) {
                    acc += b(i, t) * a(t, j);
                }
                delta(i, j) = alpha / static_cast<double>(r) * acc;
            }
        }
        const std::vector<double> expect_delta = delta.apply(x);
        const std::vector<double> base = w0.apply(x);
        const std::vector<double> out = lora_forward(w0, b, a, alpha, r, x);
        for (std::size_t i = 0; i < m; ++i) {
            CHECK(std::abs(out[i] - (base[i] + expect_delta[i])) <= 1e-12);
        }
    }
}

TEST_CASE("split_lora_forward matches the hand-computed gate example") {
    // N=2 rank-1 experts, router scores [2, -2], expert 0 output [1, 0],
    // alpha/r = 2: out = 2 * sigmoid(2) * [1, 0].
    AdapterConfig cfg;
    cfg.m = 2;
    cfg.n = 2;
    cfg.r = 2;
    cfg.k = 1;
    cfg.alpha = 4.0;
    cfg.variant = AdapterVariant::kSplitLora;
    SplitAdapter adapter = make_split_adapter(cfg, 2, 0);
    adapter.router(0, 0) = 2.0;
    adapter.router(0, 1) = 0.0;
    adapter.router(1, 0) = -2.0;
    adapter.router(1, 1) = 0.0;
    adapter.expert_a[0](0, 0) = 1.0;
    adapter.expert_a[0](0, 1) = 0.0;
    adapter.expert_b[0](0, 0) = 1.0;
    adapter.expert_b[0](1, 0) = 0.0;
    const ForwardResult res = split_lora_forward(adapter, {1.0, 0.0}, 1);
    CHECK(res.output[0] == doctest::Approx(1.7615941559557646).epsilon(1e-12));
    CHECK(res.output[1] == 0.0);
    CHECK(res.decision.selected[0] == 0);
}

TEST_CASE("split_lora_forward with zero router gates everything at 0.5") {
    AdapterConfig cfg;
    cfg.m = 4;
    cfg.n = 4;
    cfg.r = 4;
    cfg.k = 4;
    cfg.alpha = 8.0;
    cfg.variant = AdapterVariant::kSplitLora;
    SeededStream stream(5);
    SplitAdapter adapter = make_split_adapter(cfg, 2, 3);
    for (auto& v : adapter.router.raw()) {
        v = 0.0;
    }
    for (auto& be : adapter.expert_b) {
        for (auto& v : be.raw()) {
            v = stream.next_gaussian();
        }
    }
    std::vector<double> x(4);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    const ForwardResult res = split_lora_forward(adapter, x, 2);
    // Oracle: 0.5 gate on every expert.
    std::vector<double> expect(4, 0.0);
    const double s = cfg.scale();
    for (std::size_t e = 0; e < 2; ++e) {
        const std::vector<double> t = adapter.expert_a[e].apply(x);
        for (std::size_t j = 0; j < adapter.expert_rank; ++j) {
            for (std::size_t i = 0; i < 4; ++i) {
                expect[i] += s * 0.5 * t[j] * adapter.expert_b[e](i, j);
            }
        }
    }
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(res.output[i] - expect[i]) <= 1e-12);
    }
}

TEST_CASE("split_lora_forward equals the brute-force gated sum") {
    SeededStream stream(31);
    AdapterConfig cfg;
    cfg.m = 8;
    cfg.n = 12;
    cfg.r = 8;
    cfg.k = 4;
    cfg.variant = AdapterVariant::kSplitLora;
    SplitAdapter adapter = make_split_adapter(cfg, 4, 11);
    for (auto& be : adapter.expert_b) {
        for (auto& v : be.raw()) {
            v = stream.next_gaussian();
        }
    }
    adapter.w0 = random_dense(8, 12, stream);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(12);
        for (auto& v : x) {
            v = stream.next_gaussian();
        }
        const std::size_t k_exp = 2;
        const ForwardResult res = split_lora_forward(adapter, x, k_exp);
        // Brute force: evaluate every expert, keep the k with the largest
        // router scores, gate with sigmoid.
        const std::vector<double> scores = adapter.router.apply(x);
        std::vector<std::size_t> order{0, 1, 2, 3};
        std::sort(order.begin(), order.end(), [&](std::size_t p, std::size_t q) {
            if (scores[p] != scores[q]) {
                return scores[p] > scores[q];
            }
            return p < q;
        });
        std::vector<double> expect = adapter.w0.apply(x);
        for (std::size_t rank = 0; rank < k_exp; ++rank) {
            const std::size_t e = order[rank];
            const double gate = 1.0 / (1.0 + std::exp(-scores[e]));
            const std::vector<double> t = adapter.expert_a[e].apply(x);
            for (std::size_t j = 0; j < adapter.expert_rank; ++j) {
                for (std::size_t i = 0; i < 8; ++i) {
                    expect[i] += cfg.scale() * gate * t[j] * adapter.expert_b[e](i, j);
                }
            }
        }
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(std::abs(res.output[i] - expect[i]) <= 1e-12);
        }
    }
}

TEST_CASE("flylora_forward single expert arithmetic") {
    FlyAdapter adapter;
    adapter.config = tiny_fly_config();
    adapter.a = sparse_identity_2();
    adapter.b = DenseMatrix::identity(2);
    adapter.balance = BalanceState(2, 1, 1e-3);
    const ForwardResult res = flylora_forward(adapter, {3.0, -1.0});
    CHECK(res.decision.selected[0] == 0);
    CHECK(res.output[0] == doctest::Approx(6.0));
    CHECK(res.output[1] == 0.0);
}

TEST_CASE("flylora_forward with k = r equals dense LoRA-FA") {
    FlyAdapter adapter;
    adapter.config = tiny_fly_config();
    adapter.config.k = 2;
    adapter.a = sparse_identity_2();
    adapter.b = DenseMatrix::identity(2);
    adapter.balance = BalanceState(2, 2, 1e-3);
    const ForwardResult res = flylora_forward(adapter, {3.0, -1.0});
    CHECK(res.output[0] == doctest::Approx(6.0));
    CHECK(res.output[1] == doctest::Approx(-2.0));
}

TEST_CASE("flylora_forward zero B returns base and still routes") {
    AdapterConfig cfg = tiny_fly_config();
    cfg.m = 4;
    cfg.n = 8;
    cfg.r = 4;
    cfg.k = 2;
    SeededStream stream(2);
    FlyAdapter adapter = make_fly_adapter(cfg, 77);
    adapter.w0 = random_dense(4, 8, stream);
    std::vector<double> x(8);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    const ForwardResult res = flylora_forward(adapter, x, /*train=*/true);
    const std::vector<double> base = adapter.w0.apply(x);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(res.output[i] == base[i]);
    }
    std::uint64_t total = 0;
    for (const auto c : adapter.balance.counts) {
        total += c;
    }
    CHECK(total == 2);  // selection recorded even though B = 0
    CHECK(adapter.balance.window_tokens == 1);
}

TEST_CASE("flylora_forward equals the full-computation oracle") {
    SeededStream stream(13);
    AdapterConfig cfg;
    cfg.m = 16;
    cfg.n = 64;
    cfg.r = 8;
    cfg.k = 3;
    cfg.rho = 0.25;
    FlyAdapter adapter = make_fly_adapter(cfg, 40);
    for (auto& v : adapter.b.raw()) {
        v = stream.next_gaussian();
    }
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(64);
        for (auto& v : x) {
            v = stream.next_gaussian();
        }
        const ForwardResult res = flylora_forward(adapter, x);
        // Oracle: compute all r rank-1 terms, zero the non-selected ones.
        const DenseMatrix a_dense = adapter.a.densify();
        const std::vector<double> t = a_dense.apply(x);
        std::vector<double> expect(16, 0.0);
        for (std::size_t j = 0; j < 8; ++j) {
            if (!res.decision.mask[j]) {
                continue;
            }
            for (std::size_t i = 0; i < 16; ++i) {
                expect[i] += cfg.scale() * t[j] * adapter.b(i, j);
            }
        }
        for (std::size_t i = 0; i < 16; ++i) {
            CHECK(std::abs(res.output[i] - expect[i]) <= 1e-12);
        }
    }
}

TEST_CASE("degeneracy: k = r flylora equals lora_forward on the densified A") {
    SeededStream stream(21);
    for (int trial = 0; trial < 30; ++trial) {
        AdapterConfig cfg;
        cfg.m = 4 + static_cast<std::size_t>(stream.next_below(12));
        cfg.n = 8 + static_cast<std::size_t>(stream.next_below(24));
        cfg.r = 2 + static_cast<std::size_t>(stream.next_below(std::min(cfg.m, cfg.n) - 1));
        cfg.k = cfg.r;
        cfg.rho = 0.3;
        FlyAdapter adapter = make_fly_adapter(cfg, stream.next_u64());
        for (auto& v : adapter.b.raw()) {
            v = stream.next_gaussian();
        }
        std::vector<double> x(cfg.n);
        for (auto& v : x) {
            v = stream.next_gaussian();
        }
        const ForwardResult res = flylora_forward(adapter, x);
        const std::vector<double> dense = lora_forward(DenseMatrix(), adapter.b,
                                                       adapter.a.densify(),
                                                       cfg.effective_alpha(), cfg.r, x);
        for (std::size_t i = 0; i < cfg.m; ++i) {
            CHECK(std::abs(res.output[i] - dense[i]) <= 1e-12);
        }
    }
}

TEST_CASE("bias shifts that keep the same top-k set leave the output bitwise identical") {
    SeededStream stream(55);
    AdapterConfig cfg;
    cfg.m = 8;
    cfg.n = 32;
    cfg.r = 8;
    cfg.k = 3;
    FlyAdapter adapter = make_fly_adapter(cfg, 7);
    for (auto& v : adapter.b.raw()) {
        v = stream.next_gaussian();
    }
    std::vector<double> x(32);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    const ForwardResult before = flylora_forward(adapter, x);
    // A uniform bias shift never changes the argmax set.
    for (auto& b : adapter.balance.bias) {
        b += 0.37;
    }
    const ForwardResult after = flylora_forward(adapter, x);
    REQUIRE(before.decision.mask == after.decision.mask);
    CHECK(std::memcmp(before.output.data(), after.output.data(),
                      before.output.size() * sizeof(double)) == 0);
}

TEST_CASE("exactly k rank-1 terms contribute") {
    // Changing B columns outside the selected set must not move the output.
    SeededStream stream(66);
    AdapterConfig cfg;
    cfg.m = 8;
    cfg.n = 32;
    cfg.r = 8;
    cfg.k = 2;
    FlyAdapter adapter = make_fly_adapter(cfg, 3);
    for (auto& v : adapter.b.raw()) {
        v = stream.next_gaussian();
    }
    std::vector<double> x(32);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    const ForwardResult before = flylora_forward(adapter, x);
    REQUIRE(before.decision.k() == 2);
    for (std::size_t j = 0; j < cfg.r; ++j) {
        if (!before.decision.mask[j]) {
            for (std::size_t i = 0; i < cfg.m; ++i) {
                adapter.b(i, j) += 100.0;
            }
        }
    }
    const ForwardResult after = flylora_forward(adapter, x);
    CHECK(std::memcmp(before.output.data(), after.output.data(),
                      before.output.size() * sizeof(double)) == 0);
}

TEST_CASE("rankwise gates reduce to dense LoRA and single terms") {
    SeededStream stream(71);
    const std::size_t m = 5, n = 9, r = 4;
    const DenseMatrix a = random_dense(r, n, stream);
    const DenseMatrix b = random_dense(m, r, stream);
    const DenseMatrix w0 = random_dense(m, n, stream);
    std::vector<double> x(n);
    for (auto& v : x) {
        v = stream.next_gaussian();
    }
    const double alpha = 8.0;

    const std::vector<double> ones(r, 1.0);
    const std::vector<double> dense = lora_forward(w0, b, a, alpha, r, x);
    const std::vector<double> gated = rankwise_moe_forward(w0, b, a, ones, alpha, r, x);
    for (std::size_t i = 0; i < m; ++i) {
        CHECK(std::abs(gated[i] - dense[i]) <= 1e-12);
    }

    std::vector<double> onehot(r, 0.0);
    onehot[2] = 1.0;
    const std::vector<double> single = rankwise_moe_forward(w0, b, a, onehot, alpha, r, x);
    const std::vector<double> t = a.apply(x);
    const std::vector<double> base = w0.apply(x);
    for (std::size_t i = 0; i < m; ++i) {
        const double expect = base[i] + alpha / static_cast<double>(r) * t[2] * b(i, 2);
        CHECK(std::abs(single[i] - expect) <= 1e-12);
    }

    std::vector<double> gates(r);
    for (auto& g : gates) {
        g = stream.next_gaussian();
    }
    const std::vector<double> mixed = rankwise_moe_forward(w0, b, a, gates, alpha, r, x);
    for (std::size_t i = 0; i < m; ++i) {
        double expect = base[i];
        for (std::size_t j = 0; j < r; ++j) {
            expect += alpha / static_cast<double>(r) * gates[j] * t[j] * b(i, j);
        }
        CHECK(std::abs(mixed[i] - expect) <= 1e-12);
    }
}

TEST_CASE("table-4 parameter counts") {
    CHECK(count_activated_params(AdapterVariant::kLora, 4096, 32, 8, 0) == 262144);
    CHECK(count_activated_params(AdapterVariant::kFlyLora, 4096, 32, 8, 0) == 32768);
    CHECK(count_activated_params(AdapterVariant::kSplitLora, 4096, 32, 8, 4) == 81920);
}

TEST_CASE("parameter-count ordering holds across the grid") {
    for (const std::size_t d : {256u, 1024u, 4096u}) {
        for (const std::size_t r : {16u, 32u, 64u}) {
            for (const std::size_t k : {1u, 4u, 8u}) {
                if (k >= r) {
                    continue;
                }
                for (const std::size_t n_exp : {2u, 4u, 8u, 16u}) {
                    // Split-LoRA ties with LoRA exactly at N = 2(r - k); the
                    // strict ordering needs lighter routers than that.
                    if (n_exp > r || n_exp >= 2 * (r - k)) {
                        continue;
                    }
                    const auto fly =
                        count_activated_params(AdapterVariant::kFlyLora, d, r, k, 0);
                    const auto split =
                        count_activated_params(AdapterVariant::kSplitLora, d, r, k, n_exp);
                    const auto lora = count_activated_params(AdapterVariant::kLora, d, r, k, 0);
                    CHECK(fly < split);
                    CHECK(split < lora);
                }
            }
        }
    }
}

TEST_CASE("config validation") {
    AdapterConfig cfg = tiny_fly_config();
    cfg.k = 3;  // > r
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_fly_config();
    cfg.r = 5;  // > min(m, n)
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_fly_config();
    cfg.rho = 1.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    // Default alpha is 2r.
    cfg = tiny_fly_config();
    cfg.alpha = 0.0;
    CHECK(cfg.effective_alpha() == doctest::Approx(4.0));
}

TEST_CASE("checkpoint round-trip preserves every tensor bitwise") {
    SeededStream stream(6);
    AdapterConfig cfg;
    cfg.m = 6;
    cfg.n = 20;
    cfg.r = 4;
    cfg.k = 2;
    FlyAdapter adapter = make_fly_adapter(cfg, 123);
    for (auto& v : adapter.b.raw()) {
        v = stream.next_gaussian();
    }
    adapter.w0 = random_dense(6, 20, stream);
    adapter.balance.bias = {0.001, -0.002, 0.0, 0.003};

    const std::string path = "adapter_roundtrip_test.json";
    save_adapter(adapter, path);
    FlyAdapter loaded;
    LoraAdapter unused;
    bool is_fly = false;
    load_adapter(path, loaded, unused, is_fly);
    std::remove(path.c_str());

    REQUIRE(is_fly);
    CHECK(loaded.config.m == cfg.m);
    CHECK(loaded.config.k == cfg.k);
    CHECK(loaded.seed == 123);
    CHECK(loaded.a.indices() == adapter.a.indices());
    CHECK(std::memcmp(loaded.a.values().data(), adapter.a.values().data(),
                      adapter.a.values().size() * sizeof(double)) == 0);
    CHECK(std::memcmp(loaded.b.data(), adapter.b.data(), adapter.b.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(loaded.w0.data(), adapter.w0.data(), adapter.w0.size() * sizeof(double)) ==
          0);
    CHECK(loaded.balance.bias == adapter.balance.bias);
}

TEST_CASE("unknown variant names are rejected") {
    CHECK_THROWS_AS(variant_from_name("dora"), std::invalid_argument);
    CHECK(variant_from_name("flylora") == AdapterVariant::kFlyLora);
    CHECK(variant_name(AdapterVariant::kSplitLora) == "split_lora");
}
