// SPDX-License-Identifier: Apache-2.0
#include "flylora/experiments.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace flylora {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0x517cc1b727220a95ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string GridEntry::id() const {
    std::ostringstream os;
    os << variant_name(variant) << "_r" << r << "_k" << k;
    if (variant == AdapterVariant::kSplitLora) {
        os << "_N" << n_experts;
    }
    if (variant == AdapterVariant::kFlyLora || variant == AdapterVariant::kFlyLoraTrainableA) {
        os << "_rho" << rho;
        if (selection == SelectionMode::kMagnitude) {
            os << "_mag";
        }
        if (!balancing) {
            os << "_nolb";
        }
    }
    return os.str();
}

void ExperimentConfig::validate() const {
    if (seeds.empty()) {
        throw std::invalid_argument("ExperimentConfig: need at least one seed");
    }
    if (tasks.empty() || grid.empty()) {
        throw std::invalid_argument("ExperimentConfig: need tasks and grid entries");
    }
    for (const auto& entry : grid) {
        AdapterConfig cfg;
        cfg.m = tasks.front().m;
        cfg.n = tasks.front().n;
        cfg.r = entry.r;
        cfg.k = entry.k;
        cfg.alpha = entry.alpha;
        cfg.rho = entry.rho;
        cfg.validate();
    }
}

ToyTask make_synthetic_task(const TaskSpec& spec, std::uint64_t seed) {
    if (spec.kind == TaskKind::kLinearTeacher) {
        return make_linear_teacher_task(spec.n, spec.m, spec.samples, spec.noise, seed,
                                        spec.input_decay);
    }
    return make_gaussian_cluster_task(spec.n, spec.m, spec.samples, spec.noise, seed);
}

namespace {

std::uint64_t string_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

AdapterConfig cell_config(const GridEntry& entry, const TaskSpec& task) {
    AdapterConfig cfg;
    cfg.m = task.m;
    cfg.n = task.n;
    cfg.r = entry.r;
    cfg.k = entry.k;
    cfg.alpha = entry.alpha;
    cfg.rho = entry.rho;
    cfg.variant = entry.variant;
    cfg.selection = entry.selection;
    cfg.balance_rate = entry.balancing ? 1e-3 : 0.0;
    return cfg;
}

struct TrainedCell {
    GridEntry entry;
    ToyTask task;
    TrainingTrace trace;
    double final_metric = 0.0;
    std::optional<FlyAdapter> fly;
    std::optional<LoraAdapter> lora;
    std::optional<SplitAdapter> split;

    DenseMatrix update() const {
        if (fly) {
            return fly->effective_update();
        }
        if (lora) {
            return lora->effective_update();
        }
        throw std::invalid_argument(
            "merging needs a static update; split_lora has a gated, input-dependent one");
    }
};

// Shared by the single-task and merge runners so their before-merge metrics
// coincide for the same (variant, task, seed).
TrainedCell train_cell(const GridEntry& entry, const TaskSpec& task_spec, std::size_t task_index,
                       std::uint64_t seed, const ExperimentConfig& config) {
    TrainedCell cell;
    cell.entry = entry;
    const std::uint64_t task_seed = mix_seed(seed, task_index, 0x7461736bULL);
    const std::uint64_t adapter_seed = mix_seed(seed, task_index, string_hash(entry.id()));
    cell.task = make_synthetic_task(task_spec, task_seed);
    const AdapterConfig cfg = cell_config(entry, task_spec);

    TrainOptions opts;
    opts.epochs = config.epochs;
    opts.lr = config.lr;
    opts.batch_size = config.batch_size;
    opts.seed = mix_seed(seed, task_index, 0x74726e);

    switch (entry.variant) {
        case AdapterVariant::kFlyLora:
        case AdapterVariant::kFlyLoraTrainableA: {
            cell.fly = make_fly_adapter(cfg, adapter_seed);
            cell.trace = train_adapter(*cell.fly, cell.task, opts);
            break;
        }
        case AdapterVariant::kLora:
        case AdapterVariant::kLoraFa: {
            cell.lora = make_lora_adapter(cfg, adapter_seed);
            cell.trace = train_adapter(*cell.lora, cell.task, opts);
            break;
        }
        case AdapterVariant::kSplitLora: {
            cell.split = make_split_adapter(cfg, entry.n_experts, adapter_seed);
            cell.trace = train_adapter(*cell.split, cell.task, opts);
            break;
        }
    }
    cell.final_metric = cell.trace.final_metric;
    return cell;
}

std::string metric_name(const ToyTask& task) {
    return task.kind == TaskKind::kLinearTeacher ? "mse" : "accuracy";
}

}  // namespace

std::vector<ResultRow> run_single_task(const ExperimentConfig& config) {
    config.validate();
    std::vector<ResultRow> rows;
    for (const auto& entry : config.grid) {
        for (std::size_t t = 0; t < config.tasks.size(); ++t) {
            const TaskSpec& task_spec = config.tasks[t];
            for (const std::uint64_t seed : config.seeds) {
                TrainedCell cell = train_cell(entry, task_spec, t, seed, config);
                rows.push_back({entry.id(), task_spec.id, seed, metric_name(cell.task),
                                "before-merge", cell.final_metric});
                const auto params = count_activated_params(
                    entry.variant, task_spec.n, entry.r, entry.k, entry.n_experts);
                rows.push_back({entry.id(), task_spec.id, seed, "param-count", "before-merge",
                                static_cast<double>(params)});
                if (cell.fly) {
                    std::vector<std::vector<double>> eval_inputs(
                        cell.task.inputs.begin() +
                            static_cast<std::ptrdiff_t>(cell.task.train_count),
                        cell.task.inputs.end());
                    const EnergyProfile profile =
                        activation_energy_profile(*cell.fly, eval_inputs);
                    rows.push_back({entry.id(), task_spec.id, seed, "energy-q25", "before-merge",
                                    profile.at_quantile(0.25)});
                    const CorrelationReport corr = gradient_correlation_matrix(
                        *cell.fly, cell.task, 256, std::min<std::size_t>(10, entry.r),
                        mix_seed(seed, t, 0xc0bb));
                    double off = 0.0;
                    std::size_t cnt = 0;
                    for (std::size_t a = 0; a < corr.correlations.rows(); ++a) {
                        for (std::size_t b = 0; b < corr.correlations.cols(); ++b) {
                            if (a != b) {
                                off += std::abs(corr.correlations(a, b));
                                ++cnt;
                            }
                        }
                    }
                    rows.push_back({entry.id(), task_spec.id, seed, "offdiag-corr",
                                    "before-merge", cnt ? off / static_cast<double>(cnt) : 0.0});
                }
            }
        }
    }
    return rows;
}

MergeExperimentResult run_merge_experiment(const ExperimentConfig& config) {
    config.validate();
    if (config.tasks.size() < 2) {
        throw std::invalid_argument("run_merge_experiment: need at least 2 tasks");
    }
    MergeExperimentResult result;
    for (const auto& entry : config.grid) {
        for (const std::uint64_t seed : config.seeds) {
            std::vector<TrainedCell> cells;
            cells.reserve(config.tasks.size());
            for (std::size_t t = 0; t < config.tasks.size(); ++t) {
                cells.push_back(train_cell(entry, config.tasks[t], t, seed, config));
            }

            MergeSpec spec;
            for (const auto& cell : cells) {
                spec.updates.push_back(cell.update());
            }
            spec.use_uniform_weights();
            const DenseMatrix merged = merge_weight_average(spec);
            InterferenceReport report = merged_norm_decomposition(spec);

            for (std::size_t t = 0; t < cells.size(); ++t) {
                const TrainedCell& cell = cells[t];
                const double before = cell.final_metric;
                const double after = evaluate_metric_update(merged, DenseMatrix(), cell.task);
                const double delta =
                    before != 0.0 ? (after - before) / before * 100.0 : 0.0;
                report.metric_before.push_back(before);
                report.metric_after.push_back(after);
                report.delta_percent.push_back(delta);
                const std::string metric = metric_name(cell.task);
                result.rows.push_back(
                    {entry.id(), config.tasks[t].id, seed, metric, "before-merge", before});
                result.rows.push_back(
                    {entry.id(), config.tasks[t].id, seed, metric, "after-merge", after});
            }
            result.rows.push_back({entry.id(), "all", seed, "cross-term-fraction",
                                   "after-merge", report.cross_term_fraction});
            result.reports.push_back(std::move(report));
        }
    }
    return result;
}

double EnergyProfile::at_quantile(double q) const {
    if (curve.empty()) {
        return 0.0;
    }
    const auto r = static_cast<double>(curve.size());
    auto idx = static_cast<std::size_t>(std::ceil(q * r));
    if (idx > 0) {
        --idx;
    }
    idx = std::min(idx, curve.size() - 1);
    return curve[idx];
}

EnergyProfile activation_energy_profile(const FlyAdapter& adapter,
                                        const std::vector<std::vector<double>>& data) {
    const std::size_t r = adapter.config.r;
    std::vector<double> mean_abs(r, 0.0);
    for (const auto& x : data) {
        const std::vector<double> scores = spmv(adapter.a, x);
        for (std::size_t i = 0; i < r; ++i) {
            mean_abs[i] += std::abs(scores[i]);
        }
    }
    EnergyProfile profile;
    profile.curve.assign(r, 0.0);
    double total = 0.0;
    for (double v : mean_abs) {
        total += v;
    }
    if (total == 0.0) {
        profile.degenerate = true;
        return profile;
    }
    std::sort(mean_abs.begin(), mean_abs.end(), std::greater<double>());
    double acc = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        acc += mean_abs[i];
        profile.curve[i] = acc / total;
    }
    return profile;
}

std::string rows_to_csv(const std::vector<ResultRow>& rows) {
    std::ostringstream os;
    os << "variant,task,seed,metric,phase,value\n";
    for (const auto& row : rows) {
        os << row.variant << ',' << row.task << ',' << row.seed << ',' << row.metric << ','
           << row.phase << ',' << format_real(row.value) << '\n';
    }
    return os.str();
}

std::string rows_to_json(const std::vector<ResultRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& row : rows) {
        nlohmann::json j;
        j["variant"] = row.variant;
        j["task"] = row.task;
        j["seed"] = row.seed;
        j["metric"] = row.metric;
        j["phase"] = row.phase;
        j["value"] = row.value;
        arr.push_back(j);
    }
    return arr.dump(2);
}

void emit_report(const std::vector<ResultRow>& rows, const std::string& path,
                 ReportFormat format) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("emit_report: cannot open for writing: " + path);
    }
    out << (format == ReportFormat::kCsv ? rows_to_csv(rows) : rows_to_json(rows));
    if (format == ReportFormat::kJson) {
        out << '\n';
    }
    if (!out) {
        throw std::runtime_error("emit_report: write failed: " + path);
    }
}

std::vector<ResultRow> load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_report: cannot open: " + path);
    }
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<ResultRow> rows;
    const auto first = content.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && content[first] == '[') {
        const nlohmann::json arr = nlohmann::json::parse(content);
        for (const auto& j : arr) {
            rows.push_back({j.at("variant").get<std::string>(), j.at("task").get<std::string>(),
                            j.at("seed").get<std::uint64_t>(), j.at("metric").get<std::string>(),
                            j.at("phase").get<std::string>(), j.at("value").get<double>()});
        }
        return rows;
    }
    std::istringstream is(content);
    std::string line;
    if (!std::getline(is, line)) {
        throw std::runtime_error("load_report: empty file: " + path);
    }
    if (line != "variant,task,seed,metric,phase,value") {
        throw std::runtime_error("load_report: unexpected CSV header in " + path);
    }
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        std::array<std::string, 6> fields;
        std::size_t start = 0;
        for (std::size_t f = 0; f < 6; ++f) {
            const auto comma = f + 1 < 6 ? line.find(',', start) : std::string::npos;
            if (f + 1 < 6 && comma == std::string::npos) {
                throw std::runtime_error("load_report: malformed CSV row: " + line);
            }
            fields[f] = line.substr(start, comma == std::string::npos ? comma : comma - start);
            start = comma + 1;
        }
        rows.push_back({fields[0], fields[1], std::stoull(fields[2]), fields[3], fields[4],
                        std::stod(fields[5])});
    }
    return rows;
}

BalanceSimResult simulate_balance_stream(std::size_t r, std::size_t k, std::size_t windows,
                                         std::size_t tokens_per_window, double update_rate,
                                         double skew, double noise, std::uint64_t seed) {
    if (r < 2 || k < 1 || k > r) {
        throw std::invalid_argument("simulate_balance_stream: bad (r, k)");
    }
    BalanceState state(r, k, update_rate);
    BalanceSimResult result;
    result.totals.assign(r, 0);
    SeededStream stream(seed);
    std::vector<double> base(r);
    for (std::size_t i = 0; i < r; ++i) {
        base[i] = skew * static_cast<double>(i) / static_cast<double>(r - 1);
    }
    std::vector<double> scores(r);
    for (std::size_t w = 0; w < windows; ++w) {
        for (std::size_t t = 0; t < tokens_per_window; ++t) {
            for (std::size_t i = 0; i < r; ++i) {
                scores[i] = base[i] + noise * stream.next_gaussian();
            }
            const RoutingDecision decision = select_topk(scores, state.bias, k);
            record_assignments(state, decision);
            for (std::size_t idx : decision.selected) {
                result.totals[idx] += 1;
            }
        }
        if (update_rate > 0.0) {
            update_balance_bias(state);
        } else {
            // Keep the window accounting comparable without moving the bias.
            std::fill(state.counts.begin(), state.counts.end(), 0);
            state.window_tokens = 0;
        }
    }
    double mean = 0.0;
    for (const auto c : result.totals) {
        mean += static_cast<double>(c);
    }
    mean /= static_cast<double>(r);
    double var = 0.0;
    for (const auto c : result.totals) {
        const double d = static_cast<double>(c) - mean;
        var += d * d;
    }
    var /= static_cast<double>(r);
    result.coefficient_of_variation = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    result.final_bias = state.bias;
    return result;
}

}  // namespace flylora
