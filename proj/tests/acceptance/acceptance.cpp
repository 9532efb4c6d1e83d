// Acceptance checks; one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cstrata/benchmark.hpp"
#include "cstrata/estimators.hpp"
#include "cstrata/inference.hpp"
#include "cstrata/learners.hpp"
#include "cstrata/npsem.hpp"
#include "cstrata/rng.hpp"

using namespace cstrata;

namespace {

std::string fixture(const std::string& name) { return std::string(CSTRATA_TEST_DATA) + "/" + name; }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

const SummaryRow& row(const BenchmarkResult& r, Estimator e, const std::string& estimand) {
    for (const auto& s : r.summary)
        if (s.estimator == e && s.estimand == estimand) return s;
    throw std::runtime_error("missing summary row");
}

int cell_key(const ObservedRecord& r) {
    int k = 0;
    for (const auto& v : r.l0) k = 10 * k + static_cast<int>(*v);
    return k;
}

// ---------------------------------------------------------------- C1

Outcome identification() {
    double worst = 0.0;
    for (auto name : {"s1_mar.json", "s2_mar.json", "s3_mar.json", "s4_mar.json", "s4_saturated.json"}) {
        auto spec = load_npsem(fixture(name));
        auto t = true_psi(spec, {1, 0}, TruthMethod::Exact);
        auto g = gformula_exact(spec, {1, 0});
        for (int a : {1, 0}) worst = std::max(worst, std::abs(t.at(a).psi - g.at(a).psi));
    }
    auto mnar = load_npsem(fixture("s4_mnar.json"));
    auto t = true_psi(mnar, {1, 0}, TruthMethod::Exact);
    auto g = gformula_exact(mnar, {1, 0});
    double gap = std::min(std::abs(t.at(1).psi - g.at(1).psi), std::abs(t.at(0).psi - g.at(0).psi));
    return {worst < 1e-10 && gap > 0.01,
            "max MAR gap " + fmt("%.2e", worst) + " (< 1e-10), min MNAR gap " + fmt("%.4f", gap) + " (> 0.01)"};
}

// ---------------------------------------------------------------- C2

double stratified_s1(const Dataset& ds, int a) {
    std::map<int, double> n_w;
    std::map<int, std::pair<double, double>> cell;
    for (const auto& r : ds.records()) {
        n_w[cell_key(r)] += 1;
        if (*r.a == a) {
            cell[cell_key(r)].first += *r.y1;
            cell[cell_key(r)].second += 1;
        }
    }
    double psi = 0;
    for (const auto& [w, n] : n_w) psi += n / static_cast<double>(ds.size()) * cell.at(w).first / cell.at(w).second;
    return psi;
}

double stratified_s4(const Dataset& ds, int a) {
    std::map<int, double> n_w;
    std::map<int, std::pair<double, double>> y0_cell;
    std::map<std::pair<int, int>, std::pair<double, double>> y1_cell;
    for (const auto& r : ds.records()) {
        n_w[cell_key(r)] += 1;
        if (r.delta_a != 1 || *r.a != a || *r.delta_y0 != 1) continue;
        y0_cell[cell_key(r)].first += *r.y0;
        y0_cell[cell_key(r)].second += 1;
        if (*r.y0 == 0 && r.delta_y1 == 1) {
            auto& c = y1_cell[{cell_key(r), static_cast<int>(*r.l1[0])}];
            c.first += *r.y1;
            c.second += 1;
        }
    }
    std::map<int, double> inner;
    for (const auto& r : ds.records()) {
        if (r.delta_a != 1 || *r.a != a || *r.delta_y0 != 1 || *r.y0 != 0) continue;
        const auto& m = y1_cell.at({cell_key(r), static_cast<int>(*r.l1[0])});
        inner[cell_key(r)] += m.first / m.second;
    }
    double num = 0, p0 = 0;
    for (const auto& [w, n] : n_w) {
        double share = n / static_cast<double>(ds.size());
        num += share * inner[w] / y0_cell.at(w).second;
        p0 += share * y0_cell.at(w).first / y0_cell.at(w).second;
    }
    return num / (1.0 - p0);
}

Outcome npmle_equivalence() {
    SuperLearnerConfig sl;
    sl.library = {"glm_interactions"};
    double worst = 0.0, eps = 0.0;
    auto check = [&](const Dataset& ds, const std::function<double(const Dataset&, int)>& oracle) {
        for (int a : {1, 0}) {
            auto spec = ScenarioSpec::full(ds, a);
            double o = oracle(ds, a);
            auto g = gcomp(ds, spec, sl);
            auto t = tmle(ds, spec, sl);
            worst = std::max({worst, std::abs(g.target().point - o), std::abs(t.target().point - o)});
            for (const auto& p : t.parts)
                for (double e : p.diagnostics.epsilon) eps = std::max(eps, std::abs(e));
        }
    };
    check(sample_observed(load_npsem(fixture("s1_mar.json")), 101), stratified_s1);
    check(sample_observed(load_npsem(fixture("s4_saturated.json")), 102), stratified_s4);
    return {worst < 1e-8 && eps < 1e-6,
            "max |estimate - plug-in| " + fmt("%.2e", worst) + " (< 1e-8), max |epsilon| " + fmt("%.2e", eps) +
                " (< 1e-6)"};
}

// ---------------------------------------------------------------- C3

Outcome double_robustness() {
    BenchmarkConfig c;
    c.spec = load_npsem(fixture("s4_saturated.json"));
    c.reps = 500;
    c.sample_sizes = {2000};
    c.estimators = {Estimator::TMLE, Estimator::IPW};
    c.sl.library = {"glm_interactions"};
    c.seed = 303;

    c.misspecify = Misspecify::Q;
    auto wrong_q = run_benchmark(c);
    c.misspecify = Misspecify::G;
    auto wrong_g = run_benchmark(c);

    bool ok = wrong_q.failed.empty() && wrong_g.failed.empty();
    double worst_tmle = 0.0;
    for (const auto* r : {&wrong_q, &wrong_g})
        for (auto estimand : {"psi1", "psi0", "rr"}) {
            const auto& s = row(*r, Estimator::TMLE, estimand);
            worst_tmle = std::max(worst_tmle, std::abs(s.bias) / s.mc_se);
        }
    const auto& ipw_rr = row(wrong_g, Estimator::IPW, "rr");
    double ipw_z = std::abs(ipw_rr.bias) / ipw_rr.mc_se;
    ok = ok && worst_tmle < 3.0 && ipw_z > 3.0;
    return {ok, "TMLE max |bias|/MCSE " + fmt("%.2f", worst_tmle) + " (< 3) over psi1, psi0, RR; IPW wrong-g RR |bias|/MCSE " +
                    fmt("%.2f", ipw_z) + " (> 3)"};
}

// ---------------------------------------------------------------- C4

Outcome coverage() {
    BenchmarkConfig c;
    c.spec = load_npsem(fixture("s4_sl.json"));
    c.reps = 500;
    c.sample_sizes = {2000};
    c.estimators = {Estimator::TMLE};
    c.sl.library = {"mean", "glm", "hinge_spline"};
    c.seed = 404;
    auto r = run_benchmark(c);
    const auto& s = row(r, Estimator::TMLE, "rr");
    double eic = 0.0;
    for (const auto& rep : r.replicates[0]) eic = std::max(eic, rep.estimates[0].max_abs_eic_mean);
    bool ok = r.failed.empty() && s.reps_ok == 500 && s.coverage >= 0.92 && s.coverage <= 0.98 && eic < 1e-8;
    return {ok, "RR coverage " + fmt("%.3f", s.coverage) + " (in [0.92, 0.98]), max |EIC mean| " + fmt("%.2e", eic) +
                    " (< 1e-8), failed replicates " + std::to_string(r.failed.size())};
}

// ---------------------------------------------------------------- C5

double household_icc(const Dataset& ds) {
    double n = 0, s = 0;
    for (const auto& r : ds.records()) {
        s += *r.y1;
        n += 1;
    }
    double p = s / n, cov = 0, pairs = 0;
    for (std::size_t m = 0; m < ds.n_clusters(); ++m) {
        const auto& mem = ds.cluster_members(m);
        for (std::size_t i = 0; i < mem.size(); ++i)
            for (std::size_t j = i + 1; j < mem.size(); ++j) {
                cov += (*ds[mem[i]].y1 - p) * (*ds[mem[j]].y1 - p);
                pairs += 1;
            }
    }
    return cov / pairs / (p * (1 - p));
}

Outcome clustered_inference() {
    auto spec = load_npsem(fixture("s1_household.json"));
    NpsemSpec big = spec;
    big.cluster.count = 20000;
    double icc = household_icc(sample_observed(big, 505));

    BenchmarkConfig c;
    c.spec = spec;
    c.reps = 500;
    c.estimators = {Estimator::TMLE};
    c.sl.library = {"glm_interactions"};
    c.seed = 505;
    auto r = run_benchmark(c);
    const auto& s = row(r, Estimator::TMLE, "rr");

    // Singleton clusters: clustered SE equals the iid sandwich SE.
    auto ds = sample_observed(load_npsem(fixture("s1_mar.json")), 506);
    auto est = estimate_rr(ds, ScenarioSpec::full(ds, 1), Estimator::TMLE, c.sl);
    const Eigen::VectorXd& ic = est.rr.ic;
    const double n = static_cast<double>(ic.size());
    double mean = ic.mean(), ss = 0;
    for (double v : ic) ss += (v - mean) * (v - mean);
    double iid = std::sqrt(ss / (n - 1.0) / n);
    double diff = std::abs(est.rr.se - iid);

    bool ok = icc > 0.1 && r.failed.empty() && s.iid_coverage < 0.90 && s.coverage >= 0.92 && diff < 1e-12;
    return {ok, "ICC " + fmt("%.3f", icc) + " (> 0.1), iid coverage " + fmt("%.3f", s.iid_coverage) +
                    " (< 0.90), clustered coverage " + fmt("%.3f", s.coverage) + " (>= 0.92), singleton SE diff " +
                    fmt("%.1e", diff) + " (< 1e-12)"};
}

// ---------------------------------------------------------------- C6

struct ComparisonRun {
    double cc = 0, tmle_lo = 0, tmle_hi = 0, ipw_lo = 0, ipw_hi = 0;
};

ComparisonRun comparison_run(const NpsemSpec& spec, std::uint64_t seed) {
    auto ds = sample_observed(spec, seed);
    SuperLearnerConfig sl;
    sl.library = {"mean", "glm", "glm_interactions"};
    sl.seed = seed;
    auto sc = ScenarioSpec::full(ds, 1);
    ComparisonRun out;
    out.cc = estimate_rr(ds, sc, Estimator::CC, sl).rr.point;
    auto t = estimate_rr(ds, sc, Estimator::TMLE, sl).rr;
    auto w = estimate_rr(ds, sc, Estimator::IPW, sl).rr;
    out.tmle_lo = t.ci->first;
    out.tmle_hi = t.ci->second;
    out.ipw_lo = w.ci->first;
    out.ipw_hi = w.ci->second;
    return out;
}

Outcome estimator_comparison() {
    auto spec = load_npsem(fixture("s4_comparison.json"));
    auto truth = true_psi(spec, {1, 0}, TruthMethod::Exact);
    const double rr = truth.at(1).psi / truth.at(0).psi;
    const double target = 1.5;

    auto one = comparison_run(spec, 2024);
    bool single = one.tmle_lo <= target && target <= one.tmle_hi &&
                  one.tmle_hi - one.tmle_lo < one.ipw_hi - one.ipw_lo && std::abs(one.cc - target) > 0.15;

    int covered = 0;
    double w_tmle = 0, w_ipw = 0, cc_dev = 0;
    for (std::uint64_t r = 0; r < 20; ++r) {
        auto run = comparison_run(spec, stream_seed(606, r));
        covered += run.tmle_lo <= target && target <= run.tmle_hi;
        w_tmle += (run.tmle_hi - run.tmle_lo) / 20.0;
        w_ipw += (run.ipw_hi - run.ipw_lo) / 20.0;
        cc_dev += (run.cc - target) / 20.0;
    }
    bool stable = covered >= 17 && w_tmle < w_ipw && std::abs(cc_dev) > 0.15;
    bool ok = std::abs(rr - target) < 1e-12 && single && stable;
    return {ok, "truth RR " + fmt("%.12f", rr) + "; seeded run: TMLE CI (" + fmt("%.3f", one.tmle_lo) + ", " +
                    fmt("%.3f", one.tmle_hi) + ") width " + fmt("%.3f", one.tmle_hi - one.tmle_lo) + " vs IPW " +
                    fmt("%.3f", one.ipw_hi - one.ipw_lo) + ", CC " + fmt("%.3f", one.cc) + "; 20 runs: covered " +
                    std::to_string(covered) + "/20 (>= 17), mean width TMLE " + fmt("%.3f", w_tmle) + " vs IPW " +
                    fmt("%.3f", w_ipw) + ", mean CC - 1.5 = " + fmt("%.3f", cc_dev) + " (|.| > 0.15)"};
}

// ---------------------------------------------------------------- C7

Outcome superlearner_contract() {
    double simplex_err = 0.0, risk_excess = -std::numeric_limits<double>::infinity();
    for (std::uint64_t t = 0; t < 5; ++t) {
        Engine eng(stream_seed(707, t));
        std::normal_distribution<double> nd;
        const Eigen::Index n = 600;
        RegressionTask task;
        task.x.resize(n, 3);
        task.y.resize(n);
        task.w = Eigen::VectorXd::Ones(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int j = 0; j < 3; ++j) task.x(i, j) = nd(eng);
            double eta = -0.3 + 0.8 * task.x(i, 0) + std::max(task.x(i, 1), 0.0) * static_cast<double>(t) * 0.5 -
                         0.4 * task.x(i, 0) * task.x(i, 2);
            task.y[i] = uniform01(eng) < 1.0 / (1.0 + std::exp(-eta));
            task.cluster.push_back(static_cast<int>(i / 3));
        }
        SuperLearnerConfig cfg;
        cfg.library = {"mean", "glm", "glm_interactions", "hinge_spline"};
        cfg.folds = 5;
        cfg.seed = t;
        auto sl = superlearner_fit(task, cfg);
        simplex_err = std::max(simplex_err, std::abs(sl->alpha.sum() - 1.0));
        simplex_err = std::max(simplex_err, std::max(0.0, -sl->alpha.minCoeff()));
        risk_excess = std::max(risk_excess, sl->ensemble_cv_risk - sl->cv_risk.minCoeff());
    }

    int spans = 0;
    Engine eng(7070);
    for (int trial = 0; trial < 1000; ++trial) {
        int clusters = 2 + static_cast<int>(eng() % 60);
        int rows = clusters + static_cast<int>(eng() % 200);
        std::vector<int> keys(static_cast<std::size_t>(rows));
        for (int i = 0; i < clusters; ++i) keys[static_cast<std::size_t>(i)] = i;
        for (int i = clusters; i < rows; ++i) keys[static_cast<std::size_t>(i)] = static_cast<int>(eng() % clusters);
        std::shuffle(keys.begin(), keys.end(), eng);
        int v = 2 + static_cast<int>(eng() % static_cast<std::uint64_t>(std::min(clusters, 10) - 1));
        auto folds = assign_folds(keys, v, eng());
        std::map<int, std::set<int>> seen;
        for (std::size_t i = 0; i < keys.size(); ++i) seen[keys[i]].insert(folds[i]);
        for (const auto& [k, f] : seen) spans += f.size() > 1;
    }
    bool ok = simplex_err < 1e-12 && risk_excess <= 1e-8 && spans == 0;
    return {ok, "simplex error " + fmt("%.1e", simplex_err) + " (< 1e-12), ensemble minus best vertex CV risk " +
                    fmt("%.2e", risk_excess) + " (<= 1e-8), clusters split across folds " + std::to_string(spans) +
                    " of 1000 assignments"};
}

// ---------------------------------------------------------------- C8

Outcome glm_oracles() {
    Engine eng(808);
    std::normal_distribution<double> nd;
    const std::vector<double> beta{-0.5, 0.9, -0.6, 0.3};
    const Eigen::Index n = 10000;
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double eta = beta[0];
        for (int j = 0; j < 3; ++j) {
            x(i, j) = nd(eng);
            eta += beta[static_cast<std::size_t>(j + 1)] * x(i, j);
        }
        y[i] = uniform01(eng) < 1.0 / (1.0 + std::exp(-eta));
    }
    Eigen::MatrixXd design(n, 4);
    design << Eigen::VectorXd::Ones(n), x;
    auto fit = irls_logistic(design, y, Eigen::VectorXd::Ones(n));
    double worst_z = 0.0;
    for (int j = 0; j < 4; ++j)
        worst_z = std::max(worst_z, std::abs(fit.beta[j] - beta[static_cast<std::size_t>(j)]) / std::sqrt(fit.covariance(j, j)));

    Eigen::MatrixXd xs(n, 2);
    Eigen::VectorXd ys(n);
    std::map<std::pair<int, int>, std::pair<double, double>> cell;
    for (Eigen::Index i = 0; i < n; ++i) {
        xs(i, 0) = uniform01(eng) < 0.5;
        xs(i, 1) = uniform01(eng) < 0.3;
        ys[i] = uniform01(eng) < 0.15 + 0.4 * xs(i, 0) * xs(i, 1) + 0.2 * xs(i, 1);
        auto& c = cell[{static_cast<int>(xs(i, 0)), static_cast<int>(xs(i, 1))}];
        c.first += ys[i];
        c.second += 1;
    }
    auto p = fit_glm_interactions(make_task(xs, ys))->predict(xs);
    double worst_cell = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& c = cell[{static_cast<int>(xs(i, 0)), static_cast<int>(xs(i, 1))}];
        worst_cell = std::max(worst_cell, std::abs(p[i] - c.first / c.second));
    }
    return {fit.converged && worst_z < 3.0 && worst_cell < 1e-8,
            "max |beta - truth|/SE " + fmt("%.2f", worst_z) + " (< 3) at n=10^4, saturated vs stratum means " +
                fmt("%.1e", worst_cell) + " (< 1e-8)"};
}

}  // namespace

int main() {
    struct Criterion {
        const char* name;
        std::function<Outcome()> run;
        double budget_s;  // 0: none
    };
    const std::vector<Criterion> criteria{
        {"identification", identification, 10},
        {"NP-MLE equivalence", npmle_equivalence, 30},
        {"double robustness", double_robustness, 1800},
        {"CI coverage", coverage, 0},
        {"clustered inference", clustered_inference, 0},
        {"estimator comparison analog", estimator_comparison, 0},
        {"Super Learner contract", superlearner_contract, 0},
        {"learner oracles", glm_oracles, 0},
    };
    int failures = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const auto& c = criteria[k];
        auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_s > 0 && secs >= c.budget_s) {
            o.pass = false;
            o.detail += "; over time budget";
        }
        std::printf("%s C%zu %s: %s [%.1f s%s]\n", o.pass ? "PASS" : "FAIL", k + 1, c.name, o.detail.c_str(), secs,
                    c.budget_s > 0 ? (std::string(", budget ") + fmt("%.0f", c.budget_s) + " s").c_str() : "");
        std::fflush(stdout);
        failures += !o.pass;
    }
    return failures == 0 ? 0 : 1;
}
