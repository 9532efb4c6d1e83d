#include "cstrata/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "cstrata/error.hpp"
#include "cstrata/inference.hpp"
#include "cstrata/rng.hpp"

namespace cstrata {

Misspecify parse_misspecify(const std::string& s) {
    if (s.empty() || s == "none") return Misspecify::None;
    if (s == "g") return Misspecify::G;
    if (s == "q") return Misspecify::Q;
    if (s == "both") return Misspecify::Both;
    throw ConfigError("--misspecify expects g, q or both, got '" + s + "'");
}

namespace {

void drop_features(AdjustmentSet& adj, const std::vector<std::string>& drop) {
    if (drop.empty()) {
        adj = {};
        return;
    }
    auto keep = [&](std::vector<std::string>& v) {
        std::erase_if(v, [&](const std::string& s) { return std::find(drop.begin(), drop.end(), s) != drop.end(); });
    };
    keep(adj.l0);
    keep(adj.l1);
}

double max_eic(const ArmResult& arm) {
    double m = 0.0;
    for (const auto& p : arm.parts) {
        m = std::max(m, std::abs(p.diagnostics.eic_mean));
        for (double c : p.diagnostics.component_means) m = std::max(m, std::abs(c));
    }
    return m;
}

NpsemSpec with_sample_size(NpsemSpec spec, std::size_t n) {
    double mean_size = 0.5 * static_cast<double>(spec.cluster.size_min + spec.cluster.size_max);
    spec.cluster.count = std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(static_cast<double>(n) / mean_size)));
    return spec;
}

}  // namespace

ReplicateResult run_replicate(const BenchmarkConfig& config, const NpsemSpec& spec, std::size_t index) {
    ReplicateResult out;
    out.index = index;
    Dataset ds = sample_observed(spec, stream_seed(config.seed, index), Execution::Serial);
    out.n = ds.size();
    out.m_clusters = ds.n_clusters();

    ScenarioSpec sc = ScenarioSpec::full(ds, 1);
    sc.g_lo = config.g_lo;
    sc.g_hi = config.g_hi;
    if (config.misspecify == Misspecify::G || config.misspecify == Misspecify::Both) drop_features(sc.g_adjust, config.drop);
    if (config.misspecify == Misspecify::Q || config.misspecify == Misspecify::Both) drop_features(sc.q_adjust, config.drop);
    SuperLearnerConfig sl = config.sl;
    sl.seed = stream_seed(config.seed, index, 1);
    sl.exec = Execution::Serial;

    const double z = normal_quantile(0.975);
    for (auto est : config.estimators) {
        ReplicateEstimate r;
        r.estimator = est;
        try {
            auto res = estimate_rr(ds, sc, est, sl, config.ipw_glm_only);
            const auto& t1 = res.arm1.target();
            const auto& t0 = res.arm0.target();
            r.psi1 = t1.point;
            r.psi0 = t0.point;
            r.rr = res.rr.point;
            if (res.rr.ci && t1.ci && t0.ci) {
                r.has_ci = true;
                r.se1 = t1.se;
                r.se0 = t0.se;
                r.lo1 = t1.ci->first;
                r.hi1 = t1.ci->second;
                r.lo0 = t0.ci->first;
                r.hi0 = t0.ci->second;
                r.se_log_rr = res.rr.se;
                r.rr_lo = res.rr.ci->first;
                r.rr_hi = res.rr.ci->second;
                r.iid_se_log_rr = iid_se(res.rr.ic);
                r.iid_rr_lo = std::exp(std::log(r.rr) - z * r.iid_se_log_rr);
                r.iid_rr_hi = std::exp(std::log(r.rr) + z * r.iid_se_log_rr);
            }
            r.max_abs_eic_mean = std::max(max_eic(res.arm1), max_eic(res.arm0));
            r.ok = true;
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        out.estimates.push_back(std::move(r));
    }
    return out;
}

std::vector<SummaryRow> summarize(const std::vector<ReplicateResult>& reps, const TruthReport& truth, std::size_t n) {
    std::vector<SummaryRow> rows;
    if (reps.empty()) return rows;
    const double t1 = truth.at(1).psi, t0 = truth.at(0).psi;
    const std::size_t n_est = reps.front().estimates.size();
    for (std::size_t e = 0; e < n_est; ++e) {
        for (const std::string estimand : {"psi1", "psi0", "rr"}) {
            SummaryRow row;
            row.n = n;
            row.estimator = reps.front().estimates[e].estimator;
            row.estimand = estimand;
            row.truth = estimand == "psi1" ? t1 : estimand == "psi0" ? t0 : t1 / t0;
            std::vector<double> vals;
            std::size_t covered = 0, iid_covered = 0, with_ci = 0;
            double width = 0.0;
            for (const auto& rep : reps) {
                const auto& r = rep.estimates[e];
                if (!r.ok) continue;
                double v = estimand == "psi1" ? r.psi1 : estimand == "psi0" ? r.psi0 : r.rr;
                vals.push_back(v);
                row.max_abs_eic_mean = std::max(row.max_abs_eic_mean, r.max_abs_eic_mean);
                if (!r.has_ci) continue;
                double lo = estimand == "psi1" ? r.lo1 : estimand == "psi0" ? r.lo0 : r.rr_lo;
                double hi = estimand == "psi1" ? r.hi1 : estimand == "psi0" ? r.hi0 : r.rr_hi;
                ++with_ci;
                covered += lo <= row.truth && row.truth <= hi;
                width += hi - lo;
                if (estimand == "rr") iid_covered += r.iid_rr_lo <= row.truth && row.truth <= r.iid_rr_hi;
            }
            row.reps_ok = vals.size();
            if (!vals.empty()) {
                const double k = static_cast<double>(vals.size());
                for (double v : vals) row.mean += v;
                row.mean /= k;
                row.bias = row.mean - row.truth;
                for (double v : vals) {
                    row.variance += (v - row.mean) * (v - row.mean);
                    row.mse += (v - row.truth) * (v - row.truth);
                }
                row.variance = vals.size() > 1 ? row.variance / (k - 1.0) : 0.0;
                row.mse /= k;
                row.mc_se = std::sqrt(row.variance / k);
            }
            if (with_ci > 0) {
                row.coverage = static_cast<double>(covered) / static_cast<double>(with_ci);
                row.iid_coverage = static_cast<double>(iid_covered) / static_cast<double>(with_ci);
                row.mean_width = width / static_cast<double>(with_ci);
            } else {
                row.coverage = row.iid_coverage = row.mean_width = std::numeric_limits<double>::quiet_NaN();
            }
            rows.push_back(row);
        }
    }
    return rows;
}

BenchmarkResult run_benchmark(const BenchmarkConfig& config) {
    if (config.reps < 1) throw ConfigError("benchmark needs at least one replicate");
    if (config.estimators.empty()) throw ConfigError("benchmark needs at least one estimator");
    check_spec(config.spec);
    BenchmarkResult out;
    out.truth = config.spec.discrete_exact()
                    ? true_psi(config.spec, {1, 0}, TruthMethod::Exact)
                    : true_psi(config.spec, {1, 0}, TruthMethod::MonteCarlo, config.truth_draws,
                               stream_seed(config.seed, 0x7a7e));

    std::vector<std::size_t> sizes = config.sample_sizes;
    if (sizes.empty()) sizes.push_back(0);
    for (std::size_t n : sizes) {
        NpsemSpec spec = n > 0 ? with_sample_size(config.spec, n) : config.spec;
        std::vector<ReplicateResult> reps(config.reps);
        const auto R = static_cast<std::ptrdiff_t>(config.reps);
        if (config.exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic)
            for (std::ptrdiff_t r = 0; r < R; ++r)
                reps[static_cast<std::size_t>(r)] = run_replicate(config, spec, static_cast<std::size_t>(r));
        } else {
            for (std::ptrdiff_t r = 0; r < R; ++r)
                reps[static_cast<std::size_t>(r)] = run_replicate(config, spec, static_cast<std::size_t>(r));
        }
        for (const auto& rep : reps)
            for (const auto& e : rep.estimates)
                if (!e.ok && std::find(out.failed.begin(), out.failed.end(), rep.index) == out.failed.end())
                    out.failed.push_back(rep.index);
        std::size_t n_label = n > 0 ? n : (reps.empty() ? 0 : reps.front().n);
        auto rows = summarize(reps, out.truth, n_label);
        out.summary.insert(out.summary.end(), rows.begin(), rows.end());
        out.replicates.push_back(std::move(reps));
    }
    std::sort(out.failed.begin(), out.failed.end());
    return out;
}

std::string benchmark_to_json(const BenchmarkResult& result, bool include_replicates) {
    using nlohmann::json;
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    json j;
    j["truth"] = {{"psi1", result.truth.at(1).psi},
                  {"psi0", result.truth.at(0).psi},
                  {"rr", result.truth.at(1).psi / result.truth.at(0).psi},
                  {"method", result.truth.method == TruthMethod::Exact ? "exact" : "monte_carlo"}};
    j["summary"] = json::array();
    for (const auto& r : result.summary)
        j["summary"].push_back({{"n", r.n},
                                {"estimator", to_string(r.estimator)},
                                {"estimand", r.estimand},
                                {"truth", r.truth},
                                {"reps_ok", r.reps_ok},
                                {"mean", num(r.mean)},
                                {"bias", num(r.bias)},
                                {"variance", num(r.variance)},
                                {"mse", num(r.mse)},
                                {"mc_se", num(r.mc_se)},
                                {"coverage", num(r.coverage)},
                                {"iid_coverage", num(r.estimand == "rr" ? r.iid_coverage : std::nan(""))},
                                {"mean_ci_width", num(r.mean_width)},
                                {"max_abs_eic_mean", r.max_abs_eic_mean}});
    j["failed_replicates"] = result.failed;
    if (include_replicates) {
        j["replicates"] = json::array();
        for (const auto& block : result.replicates)
            for (const auto& rep : block) {
                json rj{{"index", rep.index}, {"n", rep.n}, {"m_clusters", rep.m_clusters}, {"estimates", json::array()}};
                for (const auto& e : rep.estimates) {
                    json ej{{"estimator", to_string(e.estimator)}, {"ok", e.ok}};
                    if (!e.ok) {
                        ej["error"] = e.error;
                    } else {
                        ej["psi1"] = e.psi1;
                        ej["psi0"] = e.psi0;
                        ej["rr"] = e.rr;
                        if (e.has_ci) {
                            ej["rr_ci"] = {e.rr_lo, e.rr_hi};
                            ej["psi1_ci"] = {e.lo1, e.hi1};
                            ej["psi0_ci"] = {e.lo0, e.hi0};
                        }
                    }
                    rj["estimates"].push_back(ej);
                }
                j["replicates"].push_back(rj);
            }
    }
    return j.dump(2);
}

}  // namespace cstrata
