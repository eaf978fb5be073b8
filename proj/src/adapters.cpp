// SPDX-License-Identifier: Apache-2.0
#include "flylora/adapters.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace flylora {

std::string variant_name(AdapterVariant v) {
    switch (v) {
        case AdapterVariant::kLora: return "lora";
        case AdapterVariant::kLoraFa: return "lora_fa";
        case AdapterVariant::kSplitLora: return "split_lora";
        case AdapterVariant::kFlyLora: return "flylora";
        case AdapterVariant::kFlyLoraTrainableA: return "flylora_trainable_a";
    }
    throw std::invalid_argument("variant_name: unknown variant");
}

AdapterVariant variant_from_name(const std::string& name) {
    if (name == "lora") return AdapterVariant::kLora;
    if (name == "lora_fa") return AdapterVariant::kLoraFa;
    if (name == "split_lora") return AdapterVariant::kSplitLora;
    if (name == "flylora") return AdapterVariant::kFlyLora;
    if (name == "flylora_trainable_a") return AdapterVariant::kFlyLoraTrainableA;
    throw std::invalid_argument("unknown adapter variant '" + name + "'");
}

std::size_t AdapterConfig::projection_nnz() const {
    auto p = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
    if (p < 1) {
        p = 1;
    }
    if (p >= n) {
        p = n - 1;
    }
    return p;
}

void AdapterConfig::validate() const {
    if (m == 0 || n == 0 || r == 0) {
        throw std::invalid_argument("AdapterConfig: dimensions must be positive");
    }
    if (k < 1 || k > r) {
        throw std::invalid_argument("AdapterConfig: need 1 <= k <= r");
    }
    if (r > std::min(m, n)) {
        throw std::invalid_argument("AdapterConfig: r must be <= min(m, n)");
    }
    if (alpha < 0.0) {
        throw std::invalid_argument("AdapterConfig: alpha must be positive (0 = default 2r)");
    }
    if (!(rho > 0.0) || !(rho < 1.0)) {
        throw std::invalid_argument("AdapterConfig: rho must be in (0, 1)");
    }
}

std::vector<double> FlyAdapter::projection_scores(const std::vector<double>& x) const {
    return trainable_a() ? a_dense.apply(x) : spmv(a, x);
}

DenseMatrix FlyAdapter::effective_update() const {
    const DenseMatrix down = trainable_a() ? a_dense : a.densify();
    DenseMatrix delta(config.m, config.n, 0.0);
    const double s = config.scale();
    for (std::size_t i = 0; i < config.m; ++i) {
        for (std::size_t j = 0; j < config.r; ++j) {
            const double bij = s * b(i, j);
            if (bij == 0.0) {
                continue;
            }
            for (std::size_t c = 0; c < config.n; ++c) {
                delta(i, c) += bij * down(j, c);
            }
        }
    }
    return delta;
}

DenseMatrix LoraAdapter::effective_update() const {
    DenseMatrix delta(config.m, config.n, 0.0);
    const double s = config.scale();
    for (std::size_t i = 0; i < config.m; ++i) {
        for (std::size_t j = 0; j < config.r; ++j) {
            const double bij = s * b(i, j);
            for (std::size_t c = 0; c < config.n; ++c) {
                delta(i, c) += bij * a(j, c);
            }
        }
    }
    return delta;
}

FlyAdapter make_fly_adapter(const AdapterConfig& config, std::uint64_t seed) {
    config.validate();
    FlyAdapter adapter;
    adapter.config = config;
    adapter.seed = seed;
    ProjectionSpec spec{config.n, config.r, config.projection_nnz(), seed};
    adapter.a = make_sparse_projection(spec);
    if (config.variant == AdapterVariant::kFlyLoraTrainableA) {
        adapter.a_dense = adapter.a.densify();
    }
    adapter.b = DenseMatrix(config.m, config.r, 0.0);
    adapter.balance = BalanceState(config.r, config.k, config.balance_rate);
    return adapter;
}

LoraAdapter make_lora_adapter(const AdapterConfig& config, std::uint64_t seed) {
    config.validate();
    LoraAdapter adapter;
    adapter.config = config;
    adapter.seed = seed;
    adapter.a = DenseMatrix(config.r, config.n, 0.0);
    SeededStream stream(seed);
    const double sigma = 1.0 / static_cast<double>(config.r);
    for (std::size_t i = 0; i < config.r; ++i) {
        for (std::size_t j = 0; j < config.n; ++j) {
            adapter.a(i, j) = sigma * stream.next_gaussian();
        }
    }
    adapter.b = DenseMatrix(config.m, config.r, 0.0);
    return adapter;
}

SplitAdapter make_split_adapter(const AdapterConfig& config, std::size_t n_experts,
                                std::uint64_t seed) {
    config.validate();
    if (n_experts == 0 || config.r % n_experts != 0) {
        throw std::invalid_argument("make_split_adapter: N must divide the total rank r");
    }
    SplitAdapter adapter;
    adapter.config = config;
    adapter.seed = seed;
    adapter.n_experts = n_experts;
    adapter.expert_rank = config.r / n_experts;
    if (config.k % adapter.expert_rank != 0) {
        throw std::invalid_argument(
            "make_split_adapter: activated rank k must be a multiple of the expert rank");
    }
    if (adapter.active_experts() > n_experts) {
        throw std::invalid_argument("make_split_adapter: activated experts exceed N");
    }
    SeededStream stream(seed);
    const double sigma_a = 1.0 / static_cast<double>(config.r);
    for (std::size_t e = 0; e < n_experts; ++e) {
        DenseMatrix a(adapter.expert_rank, config.n, 0.0);
        for (auto& v : a.raw()) {
            v = sigma_a * stream.next_gaussian();
        }
        adapter.expert_a.push_back(std::move(a));
        adapter.expert_b.emplace_back(config.m, adapter.expert_rank, 0.0);
    }
    adapter.router = DenseMatrix(n_experts, config.n, 0.0);
    const double sigma_g = 1.0 / std::sqrt(static_cast<double>(config.n));
    for (auto& v : adapter.router.raw()) {
        v = sigma_g * stream.next_gaussian();
    }
    return adapter;
}

namespace {

std::vector<double> base_output(const DenseMatrix& w0, std::size_t m,
                                const std::vector<double>& x) {
    if (w0.rows() > 0) {
        return w0.apply(x);
    }
    return std::vector<double>(m, 0.0);
}

}  // namespace

std::vector<double> lora_forward(const DenseMatrix& w0, const DenseMatrix& b,
                                 const DenseMatrix& a_dense, double alpha, std::size_t r,
                                 const std::vector<double>& x) {
    if (a_dense.rows() != r || b.cols() != r || a_dense.cols() != x.size()) {
        throw std::invalid_argument("lora_forward: inconsistent shapes");
    }
    const std::size_t m = b.rows();
    std::vector<double> out = base_output(w0, m, x);
    const std::vector<double> t = a_dense.apply(x);
    const double s = alpha / static_cast<double>(r);
    for (std::size_t j = 0; j < r; ++j) {
        const double coeff = s * t[j];
        for (std::size_t i = 0; i < m; ++i) {
            out[i] += coeff * b(i, j);
        }
    }
    return out;
}

ForwardResult split_lora_forward(const SplitAdapter& adapter, const std::vector<double>& x,
                                 std::size_t k_experts) {
    if (k_experts < 1 || k_experts > adapter.n_experts) {
        throw std::invalid_argument("split_lora_forward: k out of range");
    }
    const AdapterConfig& cfg = adapter.config;
    ForwardResult result;
    result.output = base_output(adapter.w0, cfg.m, x);
    const std::vector<double> router_scores = adapter.router.apply(x);
    const std::vector<double> zero_bias(adapter.n_experts, 0.0);
    result.decision = select_topk(router_scores, zero_bias, k_experts, SelectionMode::kSigned);
    const double s = cfg.scale();
    for (std::size_t e = 0; e < adapter.n_experts; ++e) {
        if (!result.decision.mask[e]) {
            continue;
        }
        const double gate = 1.0 / (1.0 + std::exp(-router_scores[e]));
        const std::vector<double> t = adapter.expert_a[e].apply(x);
        const DenseMatrix& be = adapter.expert_b[e];
        for (std::size_t j = 0; j < adapter.expert_rank; ++j) {
            const double coeff = s * gate * t[j];
            for (std::size_t i = 0; i < cfg.m; ++i) {
                result.output[i] += coeff * be(i, j);
            }
        }
    }
    return result;
}

namespace {

ForwardResult flylora_forward_impl(const FlyAdapter& adapter, const std::vector<double>& x) {
    const AdapterConfig& cfg = adapter.config;
    ForwardResult result;
    const std::vector<double> scores = adapter.projection_scores(x);
    result.decision = select_topk(scores, adapter.balance.bias, cfg.k, cfg.selection);
    result.output = base_output(adapter.w0, cfg.m, x);
    const double s = cfg.scale();
    // Accumulate in ascending expert order so the output is independent of the
    // selection order (and bitwise stable under bias shifts that keep the same
    // top-k set).
    for (std::size_t j = 0; j < cfg.r; ++j) {
        if (!result.decision.mask[j]) {
            continue;
        }
        const double coeff = s * scores[j];
        for (std::size_t i = 0; i < cfg.m; ++i) {
            result.output[i] += coeff * adapter.b(i, j);
        }
    }
    return result;
}

}  // namespace

ForwardResult flylora_forward(FlyAdapter& adapter, const std::vector<double>& x, bool train) {
    ForwardResult result = flylora_forward_impl(adapter, x);
    if (train) {
        record_assignments(adapter.balance, result.decision);
    }
    return result;
}

ForwardResult flylora_forward(const FlyAdapter& adapter, const std::vector<double>& x) {
    return flylora_forward_impl(adapter, x);
}

std::vector<double> rankwise_moe_forward(const DenseMatrix& w0, const DenseMatrix& b,
                                         const DenseMatrix& a_dense,
                                         const std::vector<double>& gates, double alpha,
                                         std::size_t r, const std::vector<double>& x) {
    if (gates.size() != r) {
        throw std::invalid_argument("rankwise_moe_forward: gates length != r");
    }
    if (a_dense.rows() != r || b.cols() != r || a_dense.cols() != x.size()) {
        throw std::invalid_argument("rankwise_moe_forward: inconsistent shapes");
    }
    const std::size_t m = b.rows();
    std::vector<double> out = base_output(w0, m, x);
    const std::vector<double> t = a_dense.apply(x);
    const double s = alpha / static_cast<double>(r);
    for (std::size_t j = 0; j < r; ++j) {
        const double coeff = s * gates[j] * t[j];
        for (std::size_t i = 0; i < m; ++i) {
            out[i] += coeff * b(i, j);
        }
    }
    return out;
}

std::size_t count_activated_params(AdapterVariant variant, std::size_t d_hidden, std::size_t r,
                                   std::size_t k, std::size_t n_experts) {
    switch (variant) {
        case AdapterVariant::kLora:
            return 2 * d_hidden * r;
        case AdapterVariant::kLoraFa:
            return d_hidden * r;
        case AdapterVariant::kSplitLora:
            return 2 * d_hidden * k + d_hidden * n_experts;
        case AdapterVariant::kFlyLora:
        case AdapterVariant::kFlyLoraTrainableA:
            return d_hidden * k;
    }
    throw std::invalid_argument("count_activated_params: unknown variant");
}

namespace {

nlohmann::json config_to_json(const AdapterConfig& cfg) {
    nlohmann::json j;
    j["m"] = cfg.m;
    j["n"] = cfg.n;
    j["r"] = cfg.r;
    j["k"] = cfg.k;
    j["alpha"] = cfg.alpha;
    j["rho"] = cfg.rho;
    j["selection"] = cfg.selection == SelectionMode::kSigned ? "signed" : "magnitude";
    j["balance_rate"] = cfg.balance_rate;
    return j;
}

AdapterConfig config_from_json(const nlohmann::json& j) {
    AdapterConfig cfg;
    cfg.m = j.at("m").get<std::size_t>();
    cfg.n = j.at("n").get<std::size_t>();
    cfg.r = j.at("r").get<std::size_t>();
    cfg.k = j.at("k").get<std::size_t>();
    cfg.alpha = j.at("alpha").get<double>();
    cfg.rho = j.at("rho").get<double>();
    cfg.selection = j.at("selection").get<std::string>() == "magnitude"
                        ? SelectionMode::kMagnitude
                        : SelectionMode::kSigned;
    cfg.balance_rate = j.at("balance_rate").get<double>();
    return cfg;
}

void write_checkpoint(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open checkpoint for writing: " + path);
    }
    out << j.dump(2) << '\n';
}

nlohmann::json read_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint: " + path);
    }
    nlohmann::json j;
    in >> j;
    return j;
}

}  // namespace

void save_adapter(const FlyAdapter& adapter, const std::string& path) {
    nlohmann::json j;
    j["format"] = "flylora-checkpoint-v1";
    j["variant"] = variant_name(adapter.config.variant);
    j["seed"] = adapter.seed;
    j["config"] = config_to_json(adapter.config);
    j["a"] = flymat_to_string(adapter.a);
    if (adapter.trainable_a()) {
        j["a_dense"] = flymat_to_string(adapter.a_dense);
    }
    j["b"] = flymat_to_string(adapter.b);
    j["w0"] = adapter.has_base() ? flymat_to_string(adapter.w0) : "";
    j["balance_bias"] = adapter.balance.bias;
    write_checkpoint(j, path);
}

void save_adapter(const LoraAdapter& adapter, const std::string& path) {
    nlohmann::json j;
    j["format"] = "flylora-checkpoint-v1";
    j["variant"] = variant_name(adapter.config.variant);
    j["seed"] = adapter.seed;
    j["config"] = config_to_json(adapter.config);
    j["a"] = flymat_to_string(adapter.a);
    j["b"] = flymat_to_string(adapter.b);
    j["w0"] = adapter.has_base() ? flymat_to_string(adapter.w0) : "";
    write_checkpoint(j, path);
}

void load_adapter(const std::string& path, FlyAdapter& fly, LoraAdapter& lora, bool& is_fly) {
    const nlohmann::json j = read_checkpoint(path);
    if (j.value("format", "") != "flylora-checkpoint-v1") {
        throw std::runtime_error("unrecognized checkpoint format in " + path);
    }
    const AdapterVariant variant = variant_from_name(j.at("variant").get<std::string>());
    AdapterConfig cfg = config_from_json(j.at("config"));
    cfg.variant = variant;
    const std::string w0_text = j.at("w0").get<std::string>();
    if (variant == AdapterVariant::kFlyLora || variant == AdapterVariant::kFlyLoraTrainableA) {
        is_fly = true;
        fly.config = cfg;
        fly.seed = j.at("seed").get<std::uint64_t>();
        fly.a = sparse_from_flymat(j.at("a").get<std::string>());
        if (j.contains("a_dense")) {
            fly.a_dense = dense_from_flymat(j.at("a_dense").get<std::string>());
        } else {
            fly.a_dense = DenseMatrix();
        }
        fly.b = dense_from_flymat(j.at("b").get<std::string>());
        fly.w0 = w0_text.empty() ? DenseMatrix() : dense_from_flymat(w0_text);
        fly.balance = BalanceState(cfg.r, cfg.k, cfg.balance_rate);
        fly.balance.bias = j.at("balance_bias").get<std::vector<double>>();
    } else if (variant == AdapterVariant::kLora || variant == AdapterVariant::kLoraFa) {
        is_fly = false;
        lora.config = cfg;
        lora.seed = j.at("seed").get<std::uint64_t>();
        lora.a = dense_from_flymat(j.at("a").get<std::string>());
        lora.b = dense_from_flymat(j.at("b").get<std::string>());
        lora.w0 = w0_text.empty() ? DenseMatrix() : dense_from_flymat(w0_text);
    } else {
        throw std::runtime_error("checkpoint variant not supported: " +
                                 variant_name(variant));
    }
}

}  // namespace flylora
