#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cstrata/estimators.hpp"
#include "cstrata/npsem.hpp"

namespace cstrata {

enum class Misspecify { None, G, Q, Both };
Misspecify parse_misspecify(const std::string& s);

struct BenchmarkConfig {
    NpsemSpec spec;
    std::size_t reps = 100;
    /// Participant counts; each sets the cluster count to round(n / mean size).
    /// Empty keeps the spec's cluster block.
    std::vector<std::size_t> sample_sizes;
    std::vector<Estimator> estimators{Estimator::CC, Estimator::IPW, Estimator::TMLE};
    SuperLearnerConfig sl;
    bool ipw_glm_only = true;
    Misspecify misspecify = Misspecify::None;
    /// Features removed from the misspecified models; empty removes all.
    std::vector<std::string> drop;
    double g_lo = 0.01;
    double g_hi = 0.99;
    std::uint64_t seed = 1;
    std::size_t truth_draws = 2000000;  // Monte Carlo truth for continuous specs
    Execution exec = Execution::Parallel;
};

/// One estimator on one replicate.  psi1/psi0 are the per-arm targets
/// (the conditional in S4).
struct ReplicateEstimate {
    Estimator estimator = Estimator::TMLE;
    bool ok = false;
    std::string error;
    double psi1 = 0.0, psi0 = 0.0, rr = 0.0;
    double se1 = 0.0, se0 = 0.0, se_log_rr = 0.0, iid_se_log_rr = 0.0;
    bool has_ci = false;
    double lo1 = 0.0, hi1 = 0.0, lo0 = 0.0, hi0 = 0.0, rr_lo = 0.0, rr_hi = 0.0;
    double iid_rr_lo = 0.0, iid_rr_hi = 0.0;
    double max_abs_eic_mean = 0.0;  // over every targeted component and part
};

struct ReplicateResult {
    std::size_t index = 0;
    std::size_t n = 0;
    std::size_t m_clusters = 0;
    std::vector<ReplicateEstimate> estimates;
};

struct SummaryRow {
    std::size_t n = 0;
    Estimator estimator = Estimator::TMLE;
    std::string estimand;  // psi1 | psi0 | rr
    double truth = 0.0;
    std::size_t reps_ok = 0;
    double mean = 0.0;
    double bias = 0.0;
    double variance = 0.0;
    double mse = 0.0;
    double mc_se = 0.0;  // of the bias
    double coverage = 0.0;
    double iid_coverage = 0.0;  // rr only
    double mean_width = 0.0;
    double max_abs_eic_mean = 0.0;
};

struct BenchmarkResult {
    TruthReport truth;
    std::vector<std::vector<ReplicateResult>> replicates;  // per sample size
    std::vector<SummaryRow> summary;
    std::vector<std::size_t> failed;  // replicate indices with any failure
};

/// Simulate, analyze and score one replicate.
ReplicateResult run_replicate(const BenchmarkConfig& config, const NpsemSpec& spec, std::size_t index);

/// Replicates in parallel (or serially); results are ordered by index and do
/// not depend on the execution mode.
BenchmarkResult run_benchmark(const BenchmarkConfig& config);

std::vector<SummaryRow> summarize(const std::vector<ReplicateResult>& reps, const TruthReport& truth,
                                  std::size_t n);

std::string benchmark_to_json(const BenchmarkResult& result, bool include_replicates = false);

}  // namespace cstrata
