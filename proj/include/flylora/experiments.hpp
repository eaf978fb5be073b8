// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flylora/adapters.hpp"
#include "flylora/merging.hpp"
#include "flylora/training.hpp"

namespace flylora {

struct TaskSpec {
    TaskKind kind = TaskKind::kLinearTeacher;
    std::size_t n = 256;
    std::size_t m = 32;
    std::size_t samples = 4096;
    double noise = 0.02;
    double input_decay = 1.0;  // linear-teacher input spectrum decay
    std::string id = "task";
};

struct GridEntry {
    AdapterVariant variant = AdapterVariant::kFlyLora;
    std::size_t r = 16;
    std::size_t k = 4;
    std::size_t n_experts = 4;  // split_lora only
    double rho = 0.25;
    SelectionMode selection = SelectionMode::kSigned;
    bool balancing = true;
    double alpha = 0.0;  // 0 = default 2r

    std::string id() const;
};

struct ExperimentConfig {
    std::vector<TaskSpec> tasks;
    std::vector<GridEntry> grid;
    std::vector<std::uint64_t> seeds;
    std::size_t epochs = 100;
    double lr = 0.05;
    std::size_t batch_size = 64;
    std::string out_dir = ".";

    void validate() const;
};

struct ResultRow {
    std::string variant;
    std::string task;
    std::uint64_t seed = 0;
    std::string metric;  // mse | accuracy | param-count | energy-q25 |
                         // offdiag-corr | cross-term-fraction
    std::string phase;   // before-merge | after-merge
    double value = 0.0;
};

// Builds a toy task from a spec and a seed.
ToyTask make_synthetic_task(const TaskSpec& spec, std::uint64_t seed);

// Trains every (grid entry, task, seed) cell and records the final eval
// metric, the activated-parameter count, and for implicit-routing variants
// the energy-at-25% and mean off-diagonal gradient correlation diagnostics.
std::vector<ResultRow> run_single_task(const ExperimentConfig& config);

struct MergeExperimentResult {
    std::vector<ResultRow> rows;
    std::vector<InterferenceReport> reports;  // one per (grid entry, seed)
};

// Trains one adapter per task, evaluates each task before merging, merges
// with uniform weights, re-evaluates on the merged update, and reports the
// per-task relative change plus the interference diagnostics.
MergeExperimentResult run_merge_experiment(const ExperimentConfig& config);

struct EnergyProfile {
    std::vector<double> curve;  // normalized cumulative energy, ends at 1
    bool degenerate = false;    // all scores were zero
    double at_quantile(double q) const;
};

// Sorts mean |score| per projection dimension descending and returns the
// normalized cumulative sum.
EnergyProfile activation_energy_profile(const FlyAdapter& adapter,
                                        const std::vector<std::vector<double>>& data);

enum class ReportFormat : std::uint8_t { kCsv, kJson };

// Deterministic report files: CSV schema `variant,task,seed,metric,phase,value`
// or the same rows as a JSON array.
void emit_report(const std::vector<ResultRow>& rows, const std::string& path,
                 ReportFormat format);
std::vector<ResultRow> load_report(const std::string& path);
std::string rows_to_csv(const std::vector<ResultRow>& rows);
std::string rows_to_json(const std::vector<ResultRow>& rows);

struct BalanceSimResult {
    std::vector<std::uint64_t> totals;  // cumulative assignments per expert
    double coefficient_of_variation = 0.0;
    std::vector<double> final_bias;
};

// Drives the router with a skewed synthetic score stream (linear ramp of
// width `skew` plus Gaussian noise) for the given number of windows,
// updating the balance bias once per window.
BalanceSimResult simulate_balance_stream(std::size_t r, std::size_t k, std::size_t windows,
                                         std::size_t tokens_per_window, double update_rate,
                                         double skew, double noise, std::uint64_t seed);

// Deterministic 64-bit mix used to derive per-cell seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

}  // namespace flylora
