// cstrata: simulate, truth, analyze, benchmark.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cstrata/benchmark.hpp"
#include "cstrata/data.hpp"
#include "cstrata/error.hpp"
#include "cstrata/estimators.hpp"
#include "cstrata/npsem.hpp"
#include "cstrata/parallel.hpp"

using namespace cstrata;

namespace {

enum Exit { kOk = 0, kValidation = 2, kEstimation = 3, kConfig = 4 };

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::pair<double, double> parse_truncate(const std::string& s) {
    auto parts = split(s);
    if (parts.size() != 2) throw ConfigError("--truncate expects lo,hi");
    try {
        return {std::stod(parts[0]), std::stod(parts[1])};
    } catch (const std::exception&) {
        throw ConfigError("--truncate expects two numbers, got '" + s + "'");
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << text;
    if (!text.empty() && text.back() != '\n') out << '\n';
}

std::string fmt(double v, int prec = 4) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

// ---------------------------------------------------------------- simulate

struct SimulateOpts {
    std::string spec, out, schema_out;
    std::uint64_t seed = 1;
};

int cmd_simulate(const SimulateOpts& o) {
    NpsemSpec spec = load_npsem(o.spec);
    Dataset ds = sample_observed(spec, o.seed);
    auto report = validate(ds);
    if (!report.pass()) {
        std::cerr << "simulated data failed validation:\n" << report.summary();
        return kValidation;
    }
    {
        std::ofstream f(o.out);
        if (!f) throw ConfigError("cannot write '" + o.out + "'");
        write_csv(f, ds);
    }
    bool categorical = false;
    for (const auto* v : {&ds.schema().l0, &ds.schema().l1})
        for (const auto& f : *v) categorical |= f.kind == FeatureKind::Categorical;
    std::string schema_path = !o.schema_out.empty() ? o.schema_out : categorical ? o.out + ".schema.json" : "";
    if (!schema_path.empty()) write_text(schema_path, schema_to_json(ds.schema()));

    std::size_t n = ds.size(), da0 = 0, dy00 = 0, dy10 = 0;
    for (const auto& r : ds.records()) {
        da0 += r.delta_a == 0;
        dy00 += r.delta_y0 && *r.delta_y0 == 0;
        dy10 += r.delta_y1 == 0;
    }
    auto rate = [&](std::size_t k) { return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0; };
    std::cout << "N " << n << "\nM " << ds.n_clusters() << "\n";
    std::cout << "missing delta_a " << fmt(rate(da0)) << "\n";
    if (has_baseline_outcome(ds.scenario())) std::cout << "missing delta_y0 " << fmt(rate(dy00)) << "\n";
    std::cout << "missing delta_y1 " << fmt(rate(dy10)) << "\n";
    std::cout << "wrote " << o.out << "\n";
    return kOk;
}

// ---------------------------------------------------------------- truth

struct TruthOpts {
    std::string spec, out, method = "exact", levels = "1,0";
    std::size_t draws = 1000000;
    std::uint64_t seed = 1;
};

int cmd_truth(const TruthOpts& o) {
    NpsemSpec spec = load_npsem(o.spec);
    std::vector<int> a;
    for (const auto& s : split(o.levels)) {
        if (s != "0" && s != "1") throw ConfigError("--a expects levels 0 and/or 1");
        a.push_back(std::stoi(s));
    }
    std::string json;
    if (o.method == "exact") {
        auto truth = true_psi(spec, a, TruthMethod::Exact);
        auto gf = gformula_exact(spec, a);
        json = truth_to_json(truth, &gf);
    } else if (o.method == "mc" || o.method == "monte_carlo") {
        json = truth_to_json(true_psi(spec, a, TruthMethod::MonteCarlo, o.draws, o.seed));
    } else {
        throw ConfigError("--method expects exact or mc");
    }
    if (o.out.empty()) std::cout << json << "\n";
    else write_text(o.out, json);
    return kOk;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeOpts {
    std::string data, scenario, schema, estimators = "cc,ipw,gcomp,tmle", library = "mean,glm,hinge_spline";
    std::string truncate = "0.01,0.99", cluster_col = "cluster_id", out, adjust_l0, adjust_l1;
    int folds = 10;
    std::uint64_t seed = 1;
    bool ipw_sl = false;
};

int cmd_analyze(const AnalyzeOpts& o) {
    Scenario sc = parse_scenario(o.scenario);
    std::vector<Estimator> ests;
    for (const auto& e : split(o.estimators)) ests.push_back(parse_estimator(e));
    if (ests.empty()) throw ConfigError("--estimators is empty");

    std::optional<Schema> schema;
    std::string schema_path = o.schema.empty() && std::filesystem::exists(o.data + ".schema.json")
                                  ? o.data + ".schema.json"
                                  : o.schema;
    if (!schema_path.empty()) {
        std::ifstream f(schema_path);
        if (!f) throw ConfigError("cannot read schema '" + schema_path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        schema = schema_from_json(ss.str());
    }
    if (!std::filesystem::exists(o.data)) throw ConfigError("data file '" + o.data + "' not found");
    Dataset ds = load_csv(o.data, sc, schema ? &*schema : nullptr, o.cluster_col);
    auto report = validate(ds);
    if (!report.pass()) {
        std::cerr << "validation failed:\n" << report.summary();
        return kValidation;
    }

    ScenarioSpec spec = ScenarioSpec::full(ds, 1);
    if (!o.adjust_l0.empty()) spec.g_adjust.l0 = spec.q_adjust.l0 = split(o.adjust_l0 == "none" ? "" : o.adjust_l0);
    if (!o.adjust_l1.empty()) spec.g_adjust.l1 = spec.q_adjust.l1 = split(o.adjust_l1 == "none" ? "" : o.adjust_l1);
    std::tie(spec.g_lo, spec.g_hi) = parse_truncate(o.truncate);
    check_scenario_spec(ds, spec);

    SuperLearnerConfig sl;
    sl.library = split(o.library);
    sl.folds = o.folds;
    sl.seed = o.seed;
    for (const auto& id : sl.library)
        if (!is_known_learner(id)) throw ConfigError("unknown learner '" + id + "'");
    if (sl.library.empty()) throw ConfigError("--sl-library is empty");
    if (sl.folds < 2) throw ConfigError("--folds must be at least 2");

    nlohmann::json out;
    out["scenario"] = to_string(sc);
    out["n"] = ds.size();
    out["m_clusters"] = ds.n_clusters();
    out["results"] = nlohmann::json::array();
    std::ostringstream table, forest;
    const bool s4 = sc == Scenario::S4;
    char line[256];
    std::snprintf(line, sizeof line, "%-6s %8s %19s %8s %19s %8s %19s\n", "est", "RR", "95% CI", "psi(1)", "95% CI",
                  "psi(0)", "95% CI");
    table << "scenario " << to_string(sc) << "  N " << ds.size() << "  M " << ds.n_clusters()
          << (s4 ? "  (psi = P(Y1*=1 | Y0*=0))" : "") << "\n"
          << line;
    forest << "label,rr,lo,hi\n";
    auto ci_str = [](const EffectEstimate& e) {
        return e.ci ? "(" + fmt(e.ci->first) + ", " + fmt(e.ci->second) + ")" : std::string("-");
    };
    int code = kOk;
    for (auto est : ests) {
        try {
            auto res = estimate_rr(ds, spec, est, sl, !o.ipw_sl);
            out["results"].push_back(nlohmann::json::parse(rr_to_json(res)));
            std::snprintf(line, sizeof line, "%-6s %8s %19s %8s %19s %8s %19s\n", to_string(est).c_str(),
                          fmt(res.rr.point).c_str(), ci_str(res.rr).c_str(), fmt(res.arm1.target().point).c_str(),
                          ci_str(res.arm1.target()).c_str(), fmt(res.arm0.target().point).c_str(),
                          ci_str(res.arm0.target()).c_str());
            table << line;
            forest << to_string(est) << "," << fmt(res.rr.point, 6) << ","
                   << (res.rr.ci ? fmt(res.rr.ci->first, 6) : "NA") << ","
                   << (res.rr.ci ? fmt(res.rr.ci->second, 6) : "NA") << "\n";
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            out["results"].push_back({{"estimator", to_string(est)}, {"error", e.what()}});
            table << to_string(est) << "  failed: " << e.what() << "\n";
            std::cerr << to_string(est) << " failed: " << e.what() << "\n";
            code = kEstimation;
        }
    }
    std::cout << table.str();
    if (!o.out.empty()) {
        write_text(o.out + ".json", out.dump(2));
        write_text(o.out + ".txt", table.str());
        write_text(o.out + "_forest.csv", forest.str());
    }
    return code;
}

// ---------------------------------------------------------------- benchmark

struct BenchmarkOpts {
    std::string spec, estimators = "cc,ipw,tmle", library = "mean,glm,hinge_spline", truncate = "0.01,0.99";
    std::string misspecify = "none", drop, sizes, out;
    std::size_t reps = 100, truth_draws = 2000000;
    int folds = 10, threads = 0;
    std::uint64_t seed = 1;
    bool serial = false, replicates = false, ipw_sl = false;
};

int cmd_benchmark(const BenchmarkOpts& o) {
    BenchmarkConfig c;
    c.spec = load_npsem(o.spec);
    c.reps = o.reps;
    if (c.reps < 1) throw ConfigError("--reps must be at least 1");
    c.estimators.clear();
    for (const auto& e : split(o.estimators)) c.estimators.push_back(parse_estimator(e));
    c.sl.library = split(o.library);
    for (const auto& id : c.sl.library)
        if (!is_known_learner(id)) throw ConfigError("unknown learner '" + id + "'");
    c.sl.folds = o.folds;
    c.ipw_glm_only = !o.ipw_sl;
    c.misspecify = parse_misspecify(o.misspecify);
    c.drop = split(o.drop);
    std::tie(c.g_lo, c.g_hi) = parse_truncate(o.truncate);
    for (const auto& s : split(o.sizes)) c.sample_sizes.push_back(std::stoul(s));
    c.seed = o.seed;
    c.truth_draws = o.truth_draws;
    c.exec = o.serial ? Execution::Serial : Execution::Parallel;
    ThreadCountScope threads(o.threads);
    auto res = run_benchmark(c);
    std::string json = benchmark_to_json(res, o.replicates);

    char line[256];
    std::snprintf(line, sizeof line, "%-6s %-5s %7s %9s %9s %8s %9s %8s %9s\n", "est", "par", "n", "truth", "bias",
                  "mc_se", "mse", "cover", "width");
    std::cout << line;
    for (const auto& r : res.summary) {
        std::snprintf(line, sizeof line, "%-6s %-5s %7zu %9s %9s %8s %9s %8s %9s\n", to_string(r.estimator).c_str(),
                      r.estimand.c_str(), r.n, fmt(r.truth).c_str(), fmt(r.bias).c_str(), fmt(r.mc_se).c_str(),
                      fmt(r.mse, 5).c_str(), fmt(r.coverage, 3).c_str(), fmt(r.mean_width).c_str());
        std::cout << line;
    }
    if (!res.failed.empty()) {
        std::cerr << "failed replicates:";
        for (auto i : res.failed) std::cerr << " " << i;
        std::cerr << "\n";
    }
    if (!o.out.empty()) write_text(o.out, json);
    return res.failed.empty() ? kOk : kEstimation;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual-strata causal estimation: simulation, truth, analysis and benchmarking"};
    app.require_subcommand(1);

    SimulateOpts so;
    auto* sim = app.add_subcommand("simulate", "Sample an observed dataset from an NPSEM spec");
    sim->add_option("--spec", so.spec, "NPSEM spec (JSON)")->required();
    sim->add_option("--seed", so.seed, "Random seed");
    sim->add_option("--out", so.out, "Output CSV")->required();
    sim->add_option("--schema-out", so.schema_out, "Write the column schema (JSON) here");

    TruthOpts to;
    auto* tru = app.add_subcommand("truth", "True counterfactual parameters and the g-formula value");
    tru->add_option("--spec", to.spec, "NPSEM spec (JSON)")->required();
    tru->add_option("--a", to.levels, "Exposure levels, e.g. 1,0");
    tru->add_option("--method", to.method, "exact or mc");
    tru->add_option("--draws", to.draws, "Monte Carlo draws per level");
    tru->add_option("--seed", to.seed, "Random seed (mc)");
    tru->add_option("--out", to.out, "Output JSON (default stdout)");

    AnalyzeOpts ao;
    auto* ana = app.add_subcommand("analyze", "Estimate the risk ratio on a dataset");
    ana->add_option("--data", ao.data, "Input CSV")->required();
    ana->add_option("--scenario", ao.scenario, "S1, S2, S3 or S4")->required();
    ana->add_option("--schema", ao.schema, "Column schema (JSON); default <data>.schema.json if present");
    ana->add_option("--estimators", ao.estimators, "Comma list of cc, ipw, gcomp, tmle");
    ana->add_option("--sl-library", ao.library, "Comma list of mean, glm, glm_interactions, hinge_spline");
    ana->add_option("--folds", ao.folds, "Super Learner folds");
    ana->add_option("--truncate", ao.truncate, "Propensity bounds lo,hi");
    ana->add_option("--cluster-col", ao.cluster_col, "Column holding the clustering unit");
    ana->add_option("--adjust-l0", ao.adjust_l0, "Baseline adjustment features (default all; 'none' for none)");
    ana->add_option("--adjust-l1", ao.adjust_l1, "Time-dependent adjustment features (default all)");
    ana->add_flag("--ipw-sl", ao.ipw_sl, "Fit IPW propensities with the Super Learner instead of main-terms GLMs");
    ana->add_option("--seed", ao.seed, "Fold seed");
    ana->add_option("--out", ao.out, "Output prefix for .json, .txt and _forest.csv");

    BenchmarkOpts bo;
    auto* ben = app.add_subcommand("benchmark", "Repeated simulate-analyze runs scored against the truth");
    ben->add_option("--spec", bo.spec, "NPSEM spec (JSON)")->required();
    ben->add_option("--reps", bo.reps, "Replicates");
    ben->add_option("--n", bo.sizes, "Sample sizes, e.g. 500,2000 (default: the spec's)");
    ben->add_option("--estimators", bo.estimators, "Comma list of cc, ipw, gcomp, tmle");
    ben->add_option("--sl-library", bo.library, "Super Learner library");
    ben->add_option("--folds", bo.folds, "Super Learner folds");
    ben->add_option("--truncate", bo.truncate, "Propensity bounds lo,hi");
    ben->add_option("--misspecify", bo.misspecify, "g, q or both");
    ben->add_option("--drop", bo.drop, "Features removed by --misspecify (default all)");
    ben->add_option("--truth-draws", bo.truth_draws, "Monte Carlo draws for continuous specs");
    ben->add_option("--threads", bo.threads, "OpenMP threads (0: default)");
    ben->add_flag("--serial", bo.serial, "Run replicates serially");
    ben->add_flag("--replicates", bo.replicates, "Include per-replicate results in the JSON");
    ben->add_flag("--ipw-sl", bo.ipw_sl, "Fit IPW propensities with the Super Learner");
    ben->add_option("--seed", bo.seed, "Random seed");
    ben->add_option("--out", bo.out, "Summary JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*sim) return cmd_simulate(so);
        if (*tru) return cmd_truth(to);
        if (*ana) return cmd_analyze(ao);
        if (*ben) return cmd_benchmark(bo);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kValidation;
    } catch (const EstimationError& e) {
        std::cerr << "estimation error: " << e.what() << "\n";
        return kEstimation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    }
    return kOk;
}
