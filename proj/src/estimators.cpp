#include "cstrata/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "cstrata/error.hpp"
#include "cstrata/inference.hpp"
#include "cstrata/npsem.hpp"

namespace cstrata {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Mask = std::vector<char>;

struct FeatureRef {
    bool l1 = false;
    int index = 0;
};

struct GateDef {
    std::string name;
    Mask population;
    Mask success;
    std::vector<FeatureRef> features;
};

struct LevelDef {
    std::string name;
    Mask population;
    std::vector<FeatureRef> features;
    std::size_t n_gates = 0;     // leading gates in the cumulative weight
    Mask zero;                   // rows whose pseudo-outcome is 0 (outer levels)
    Eigen::VectorXd observed;    // innermost level only
};

struct Target {
    std::string name;
    std::vector<LevelDef> levels;  // outermost first
};

struct Plan {
    std::vector<GateDef> gates;
    std::vector<Target> targets;
    std::vector<int> cluster_keys;  // permutation-invariant fold keys
};

std::vector<std::size_t> rows_of(const Mask& m) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) out.push_back(i);
    return out;
}

std::vector<FeatureRef> resolve(const Dataset& data, const AdjustmentSet& adj, bool with_l1) {
    std::vector<FeatureRef> out;
    for (const auto& name : adj.l0) out.push_back({false, data.schema().find_l0(name)});
    if (with_l1)
        for (const auto& name : adj.l1) out.push_back({true, data.schema().find_l1(name)});
    return out;
}

Eigen::MatrixXd design(const Dataset& data, const std::vector<FeatureRef>& feats, const std::vector<std::size_t>& rows,
                       std::vector<int>& groups, const std::string& context) {
    const auto& schema = data.schema();
    groups.clear();
    Eigen::Index cols = 0;
    for (const auto& f : feats) {
        const auto& decl = f.l1 ? schema.l1[static_cast<std::size_t>(f.index)] : schema.l0[static_cast<std::size_t>(f.index)];
        cols += decl.kind == FeatureKind::Categorical ? static_cast<Eigen::Index>(decl.levels.size()) - 1 : 1;
    }
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), cols);
    Eigen::Index c = 0;
    for (std::size_t g = 0; g < feats.size(); ++g) {
        const auto& f = feats[g];
        const auto& decl = f.l1 ? schema.l1[static_cast<std::size_t>(f.index)] : schema.l0[static_cast<std::size_t>(f.index)];
        const bool cat = decl.kind == FeatureKind::Categorical;
        const Eigen::Index width = cat ? static_cast<Eigen::Index>(decl.levels.size()) - 1 : 1;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto& rec = data[rows[r]];
            const auto& cell = f.l1 ? rec.l1[static_cast<std::size_t>(f.index)] : rec.l0[static_cast<std::size_t>(f.index)];
            if (!cell)
                throw DataError(std::string(f.l1 ? "l1." : "l0.") + decl.name + " is NA in row " +
                                std::to_string(rows[r] + 1) + " inside the " + context + " subpopulation");
            if (cat) {
                auto lvl = static_cast<Eigen::Index>(*cell);
                if (lvl > 0) x(static_cast<Eigen::Index>(r), c + lvl - 1) = 1.0;
            } else {
                x(static_cast<Eigen::Index>(r), c) = *cell;
            }
        }
        for (Eigen::Index k = 0; k < width; ++k) groups.push_back(static_cast<int>(g));
        c += width;
    }
    return x;
}

Plan build_plan(const Dataset& data, const ScenarioSpec& spec) {
    const std::size_t n = data.size();
    const Scenario s = spec.scenario;
    Mask all(n, 1), reach_a(n), a_ok(n), dy0(n), y0zero(n), y0one(n), dy1(n);
    Mask s_da(n), s_a(n), s_dy0(n), s_dy1(n);
    Eigen::VectorXd y1 = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), kNaN);
    Eigen::VectorXd y0 = y1;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = data[i];
        s_da[i] = r.delta_a == 1;
        reach_a[i] = s_da[i];
        s_a[i] = r.a && *r.a == spec.a;
        a_ok[i] = reach_a[i] && s_a[i];
        if (has_baseline_outcome(s)) {
            s_dy0[i] = r.delta_y0 && *r.delta_y0 == 1;
            dy0[i] = a_ok[i] && s_dy0[i];
            y0zero[i] = dy0[i] && r.y0 && *r.y0 == 0;
            y0one[i] = dy0[i] && r.y0 && *r.y0 == 1;
            if (dy0[i] && r.y0) y0[static_cast<Eigen::Index>(i)] = *r.y0;
        }
        s_dy1[i] = r.delta_y1 == 1;
        dy1[i] = (has_baseline_outcome(s) ? y0zero[i] : a_ok[i]) && s_dy1[i];
        if (dy1[i] && r.y1) y1[static_cast<Eigen::Index>(i)] = *r.y1;
    }

    auto g0 = resolve(data, spec.g_adjust, false);
    auto g01 = resolve(data, spec.g_adjust, true);
    auto q0 = resolve(data, spec.q_adjust, false);
    auto q01 = resolve(data, spec.q_adjust, true);

    Plan plan;
    plan.gates.push_back({"delta_a", all, s_da, g0});
    plan.gates.push_back({"a", reach_a, s_a, g0});
    if (has_baseline_outcome(s)) {
        plan.gates.push_back({"delta_y0", a_ok, s_dy0, g0});
        plan.gates.push_back({"delta_y1", y0zero, s_dy1, g01});
    } else {
        plan.gates.push_back({"delta_y1", a_ok, s_dy1, has_l1(s) ? g01 : g0});
    }

    switch (s) {
        case Scenario::S1:
        case Scenario::S2:
            plan.targets.push_back({"psi_a", {LevelDef{"Q_y", dy1, q0, 3, {}, y1}}});
            break;
        case Scenario::S3:
            plan.targets.push_back({"psi_a",
                                    {LevelDef{"Q_l0", a_ok, q0, 2, {}, {}}, LevelDef{"Q_l1", dy1, q01, 3, {}, y1}}});
            break;
        case Scenario::S4:
            plan.targets.push_back({"numerator", {LevelDef{"Q_num_l0", dy0, q0, 3, y0one, {}},
                                                  LevelDef{"Q_num_l1", dy1, q01, 4, {}, y1}}});
            plan.targets.push_back({"denominator", {LevelDef{"Q_den_l0", dy0, q0, 3, {}, y0}}});
            break;
    }
    for (auto& t : plan.targets)
        for (auto& lvl : t.levels)
            if (lvl.zero.empty()) lvl.zero.assign(n, 0);

    // Fold keys from the sorted cluster ids.
    const auto& ids = data.cluster_ids();
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return ids[x] < ids[y]; });
    std::vector<int> rank(ids.size());
    for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = static_cast<int>(k);
    plan.cluster_keys.resize(n);
    for (std::size_t i = 0; i < n; ++i) plan.cluster_keys[i] = rank[static_cast<std::size_t>(data.cluster_of(i))];
    return plan;
}

struct FitOutput {
    Eigen::VectorXd pred;
    std::string summary;
};

/// Fits on `fit_rows` and predicts on `pred_rows`.
FitOutput fit_predict(const Dataset& data, const Plan& plan, const std::vector<FeatureRef>& feats,
                      const std::vector<std::size_t>& fit_rows, const Eigen::VectorXd& y,
                      const std::vector<std::size_t>& pred_rows, const SuperLearnerConfig& sl, bool glm_only,
                      const std::string& name) {
    RegressionTask task;
    task.x = design(data, feats, fit_rows, task.groups, name);
    task.y = y;
    task.w = Eigen::VectorXd::Ones(y.size());
    for (auto r : fit_rows) task.cluster.push_back(plan.cluster_keys[r]);
    std::vector<int> groups;
    Eigen::MatrixXd xp = design(data, feats, pred_rows, groups, name);
    FitOutput out;
    try {
        if (glm_only) {
            auto m = fit_logistic_glm(task);
            out.pred = m->predict(xp);
            out.summary = m->learner();
        } else {
            auto m = superlearner_fit(task, sl);
            out.pred = m->predict(xp);
            for (std::size_t k = 0; k < m->ids.size(); ++k) {
                if (k) out.summary += ",";
                out.summary += m->ids[k] + "=" + std::to_string(m->alpha[static_cast<Eigen::Index>(k)]);
            }
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw EstimationError("fitting " + name + ": " + e.what());
    }
    return out;
}

struct GResult {
    std::vector<GFactor> factors;
    Diagnostics diag;
};

GResult fit_g(const Dataset& data, const ScenarioSpec& spec, const Plan& plan, const SuperLearnerConfig& sl,
              bool glm_only) {
    const auto n = static_cast<Eigen::Index>(data.size());
    GResult res;
    for (const auto& gate : plan.gates) {
        GFactor f;
        f.name = "g_" + gate.name;
        f.population = gate.population;
        f.success = gate.success;
        f.raw = Eigen::VectorXd::Constant(n, kNaN);
        f.truncated = f.raw;
        auto rows = rows_of(gate.population);
        if (rows.empty()) throw EstimationError("empty subpopulation for g-factor " + f.name);
        Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) y[static_cast<Eigen::Index>(r)] = gate.success[rows[r]] ? 1.0 : 0.0;
        if (y.minCoeff() == 1.0) {
            f.degenerate = true;
            f.learner_summary = "constant";
            for (auto r : rows) f.raw[static_cast<Eigen::Index>(r)] = f.truncated[static_cast<Eigen::Index>(r)] = 1.0;
        } else {
            auto fit = fit_predict(data, plan, gate.features, rows, y, rows, sl, glm_only, f.name);
            f.learner_summary = fit.summary;
            for (std::size_t r = 0; r < rows.size(); ++r) {
                double p = fit.pred[static_cast<Eigen::Index>(r)];
                res.diag.g_min = std::min(res.diag.g_min, p);
                res.diag.g_max = std::max(res.diag.g_max, p);
                double t = std::clamp(p, spec.g_lo, spec.g_hi);
                if (t != p) ++res.diag.truncated;
                f.raw[static_cast<Eigen::Index>(rows[r])] = p;
                f.truncated[static_cast<Eigen::Index>(rows[r])] = t;
            }
        }
        res.factors.push_back(std::move(f));
    }
    return res;
}

double cumulative_g(const std::vector<GFactor>& g, std::size_t n_gates, std::size_t row) {
    double p = 1.0;
    for (std::size_t j = 0; j < n_gates; ++j) p *= g[j].truncated[static_cast<Eigen::Index>(row)];
    return p;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

/// Solves sum H (O - expit(off + eps)) = 0 for eps.
double fluctuate(const Eigen::VectorXd& off, const Eigen::VectorXd& o, const Eigen::VectorXd& h, std::size_t n_total,
                 const std::string& level) {
    auto score = [&](double e, double& deriv) {
        double f = 0.0;
        deriv = 0.0;
        for (Eigen::Index i = 0; i < off.size(); ++i) {
            double q = expit(off[i] + e);
            f += h[i] * (o[i] - q);
            deriv -= h[i] * q * (1.0 - q);
        }
        return f;
    };
    const double tol = 1e-13 * std::max(1.0, h.sum());
    double e = 0.0, lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    double deriv = 0.0, f = score(e, deriv);
    for (int it = 0; it < 500 && std::abs(f) > tol; ++it) {
        if (f > 0) lo = e;
        else hi = e;
        double next = deriv < 0 ? e - f / deriv : kNaN;
        if (!(next > lo && next < hi)) {
            if (std::isfinite(lo) && std::isfinite(hi)) next = 0.5 * (lo + hi);
            else next = f > 0 ? e + std::max(1.0, std::abs(e)) : e - std::max(1.0, std::abs(e));
        }
        if (next == e) break;
        e = next;
        f = score(e, deriv);
    }
    if (!(std::abs(f) / static_cast<double>(n_total) < 1e-10) || !std::isfinite(e))
        throw EstimationError("fluctuation did not converge at level " + level);
    return e;
}

struct SequentialResult {
    double psi = 0.0;
    Eigen::VectorXd ic;  // empty when untargeted
    std::vector<double> component_means;
    std::vector<double> epsilon;
    std::vector<QFactor> q;
};

SequentialResult sequential(const Dataset& data, const Plan& plan, const Target& target,
                            const std::vector<GFactor>& g, const SuperLearnerConfig& sl, bool targeted) {
    const std::size_t n = data.size();
    const auto ni = static_cast<Eigen::Index>(n);
    SequentialResult res;
    res.q.resize(target.levels.size());
    Eigen::VectorXd inner_star;  // targeted prediction of the next-inner level, over all rows
    Eigen::VectorXd eic = Eigen::VectorXd::Zero(ni);
    for (std::size_t kk = target.levels.size(); kk-- > 0;) {
        const auto& lvl = target.levels[kk];
        auto rows = rows_of(lvl.population);
        if (rows.empty()) throw EstimationError("empty subpopulation for Q-factor " + lvl.name);
        const bool innermost = kk + 1 == target.levels.size();
        Eigen::VectorXd o(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            auto i = rows[r];
            double v = lvl.zero[i] ? 0.0 : innermost ? lvl.observed[static_cast<Eigen::Index>(i)] : inner_star[static_cast<Eigen::Index>(i)];
            if (!std::isfinite(v))
                throw DataError("outcome unavailable in row " + std::to_string(i + 1) + " for " + lvl.name);
            o[static_cast<Eigen::Index>(r)] = v;
        }
        // Prediction rows: where the enclosing level needs this regression.
        Mask pred_mask(n, 0);
        if (kk == 0) {
            pred_mask.assign(n, 1);
        } else {
            const auto& outer = target.levels[kk - 1];
            for (std::size_t i = 0; i < n; ++i) pred_mask[i] = outer.population[i] && !outer.zero[i];
        }
        for (auto i : rows) pred_mask[i] = 1;
        auto pred_rows = rows_of(pred_mask);
        auto fit = fit_predict(data, plan, lvl.features, rows, o, pred_rows, sl, false, lvl.name);

        QFactor qf;
        qf.name = lvl.name;
        qf.population = lvl.population;
        qf.outcome = Eigen::VectorXd::Constant(ni, kNaN);
        qf.initial = Eigen::VectorXd::Constant(ni, kNaN);
        for (std::size_t r = 0; r < rows.size(); ++r) qf.outcome[static_cast<Eigen::Index>(rows[r])] = o[static_cast<Eigen::Index>(r)];
        for (std::size_t r = 0; r < pred_rows.size(); ++r)
            qf.initial[static_cast<Eigen::Index>(pred_rows[r])] = fit.pred[static_cast<Eigen::Index>(r)];

        Eigen::VectorXd star = qf.initial;
        if (targeted) {
            Eigen::VectorXd off(static_cast<Eigen::Index>(rows.size())), h(static_cast<Eigen::Index>(rows.size()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                off[static_cast<Eigen::Index>(r)] = logit(qf.initial[static_cast<Eigen::Index>(rows[r])]);
                h[static_cast<Eigen::Index>(r)] = 1.0 / cumulative_g(g, lvl.n_gates, rows[r]);
            }
            double eps = fluctuate(off, o, h, n, lvl.name);
            for (auto i : pred_rows) star[static_cast<Eigen::Index>(i)] = expit(logit(qf.initial[static_cast<Eigen::Index>(i)]) + eps);
            double comp = 0.0;
            for (std::size_t r = 0; r < rows.size(); ++r) {
                auto i = static_cast<Eigen::Index>(rows[r]);
                double d = h[static_cast<Eigen::Index>(r)] * (o[static_cast<Eigen::Index>(r)] - star[i]);
                eic[i] += d;
                comp += d;
            }
            res.epsilon.push_back(eps);
            res.component_means.push_back(comp / static_cast<double>(n));
        }
        res.q[kk] = std::move(qf);
        inner_star = std::move(star);
    }
    res.psi = inner_star.mean();
    if (targeted) {
        res.ic = eic.array() + (inner_star.array() - res.psi);
    }
    return res;
}

EffectEstimate make_estimate(const Dataset& data, const std::string& estimator, const std::string& estimand, int a,
                             double point, Eigen::VectorXd ic, const Diagnostics& diag) {
    EffectEstimate e;
    e.estimator = estimator;
    e.estimand = estimand;
    e.a = a;
    e.point = point;
    e.ic = std::move(ic);
    e.diagnostics = diag;
    e.n = data.size();
    e.m_clusters = data.n_clusters();
    if (e.ic.size() > 0) {
        e.diagnostics.eic_mean = e.ic.mean();
        attach_inference(e, data.cluster_map());
    } else {
        e.se = kNaN;
    }
    return e;
}

/// Numerator, denominator and conditional from two linearized pieces.
void push_s4(ArmResult& arm, const Dataset& data, const std::string& estimator, const Linearized& num,
             const Linearized& den_raw, const Diagnostics& dn, const Diagnostics& dd, bool with_ic) {
    Linearized den{1.0 - den_raw.point, -den_raw.ic};
    Diagnostics dc = dn;
    dc.component_means.insert(dc.component_means.end(), dd.component_means.begin(), dd.component_means.end());
    dc.epsilon.insert(dc.epsilon.end(), dd.epsilon.begin(), dd.epsilon.end());
    if (den.point == 0.0) throw EstimationError("estimated denominator is zero");
    arm.parts.push_back(make_estimate(data, estimator, "numerator", arm.a, num.point, num.ic, dn));
    arm.parts.push_back(make_estimate(data, estimator, "denominator", arm.a, den.point, den.ic, dd));
    if (with_ic) {
        auto ratio = delta_method_ratio(num, den);
        arm.parts.push_back(make_estimate(data, estimator, "conditional", arm.a, ratio.point, ratio.ic, dc));
    } else {
        arm.parts.push_back(make_estimate(data, estimator, "conditional", arm.a, num.point / den.point, {}, dc));
    }
}

void require_records(const Dataset& data) {
    if (data.empty()) throw EstimationError("dataset is empty");
}

}  // namespace

ScenarioSpec ScenarioSpec::full(const Dataset& data, int a) {
    ScenarioSpec s;
    s.scenario = data.scenario();
    s.a = a;
    for (const auto& f : data.schema().l0) s.g_adjust.l0.push_back(f.name);
    if (has_l1(s.scenario))
        for (const auto& f : data.schema().l1) s.g_adjust.l1.push_back(f.name);
    s.q_adjust = s.g_adjust;
    return s;
}

void check_scenario_spec(const Dataset& data, const ScenarioSpec& spec) {
    if (spec.scenario != data.scenario())
        throw ConfigError("scenario " + to_string(spec.scenario) + " does not match dataset scenario " +
                          to_string(data.scenario()));
    if (spec.a != 0 && spec.a != 1) throw ConfigError("exposure level must be 0 or 1");
    if (!(spec.g_lo > 0.0 && spec.g_lo < spec.g_hi && spec.g_hi < 1.0))
        throw ConfigError("truncation bounds must satisfy 0 < lo < hi < 1");
    for (const auto* adj : {&spec.g_adjust, &spec.q_adjust}) {
        for (const auto& name : adj->l0)
            if (data.schema().find_l0(name) < 0) throw ConfigError("unknown baseline feature '" + name + "'");
        if (!adj->l1.empty() && !has_l1(spec.scenario))
            throw ConfigError("scenario " + to_string(spec.scenario) + " has no time-dependent covariates");
        for (const auto& name : adj->l1)
            if (data.schema().find_l1(name) < 0) throw ConfigError("unknown time-dependent feature '" + name + "'");
    }
}

const EffectEstimate& ArmResult::get(const std::string& estimand) const {
    for (const auto& p : parts)
        if (p.estimand == estimand) return p;
    throw EstimationError("no estimate for '" + estimand + "'");
}

void attach_inference(EffectEstimate& est, const std::vector<int>& cluster) {
    est.se = clustered_se(InfluenceCurve{est.ic, cluster});
    est.ci = wald_ci(est.point, est.se);
}

double iid_se(const Eigen::VectorXd& ic) {
    std::vector<int> c(static_cast<std::size_t>(ic.size()));
    std::iota(c.begin(), c.end(), 0);
    return clustered_se(InfluenceCurve{ic, c});
}

NuisanceEstimates fit_nuisances(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl,
                                NuisanceRole role) {
    check_scenario_spec(data, spec);
    require_records(data);
    Plan plan = build_plan(data, spec);
    NuisanceEstimates out;
    if (role != NuisanceRole::Q) out.g = fit_g(data, spec, plan, sl, false).factors;
    if (role != NuisanceRole::G)
        for (const auto& t : plan.targets) out.q.push_back(sequential(data, plan, t, out.g, sl, false).q);
    return out;
}

ArmResult complete_case(const Dataset& data, const ScenarioSpec& spec) {
    check_scenario_spec(data, spec);
    require_records(data);
    Plan plan = build_plan(data, spec);
    const auto& inner = plan.targets.front().levels.back();
    const auto n = static_cast<Eigen::Index>(data.size());
    auto rows = rows_of(inner.population);
    if (rows.empty()) throw EstimationError("complete-case stratum is empty for a=" + std::to_string(spec.a));
    double mean = 0.0;
    for (auto i : rows) mean += inner.observed[static_cast<Eigen::Index>(i)];
    mean /= static_cast<double>(rows.size());
    double p = static_cast<double>(rows.size()) / static_cast<double>(n);
    Eigen::VectorXd ic = Eigen::VectorXd::Zero(n);
    for (auto i : rows) ic[static_cast<Eigen::Index>(i)] = (inner.observed[static_cast<Eigen::Index>(i)] - mean) / p;
    ArmResult arm;
    arm.a = spec.a;
    arm.parts.push_back(make_estimate(data, "cc", spec.scenario == Scenario::S4 ? "conditional" : "psi_a", spec.a, mean,
                                      std::move(ic), Diagnostics{}));
    return arm;
}

ArmResult ipw(const Dataset& data, const ScenarioSpec& spec, bool glm_only, const SuperLearnerConfig& sl) {
    check_scenario_spec(data, spec);
    require_records(data);
    Plan plan = build_plan(data, spec);
    auto g = fit_g(data, spec, plan, sl, glm_only);
    const auto n = static_cast<Eigen::Index>(data.size());
    auto weighted = [&](const LevelDef& lvl) {
        Linearized out;
        out.ic = Eigen::VectorXd::Zero(n);
        auto rows = rows_of(lvl.population);
        if (rows.empty()) throw EstimationError("empty weighting stratum for " + lvl.name);
        for (auto i : rows)
            out.ic[static_cast<Eigen::Index>(i)] =
                lvl.observed[static_cast<Eigen::Index>(i)] / cumulative_g(g.factors, lvl.n_gates, i);
        out.point = out.ic.mean();
        out.ic.array() -= out.point;
        return out;
    };
    ArmResult arm;
    arm.a = spec.a;
    auto first = weighted(plan.targets[0].levels.back());
    if (spec.scenario == Scenario::S4) {
        auto den_raw = weighted(plan.targets[1].levels.back());
        push_s4(arm, data, "ipw", first, den_raw, g.diag, g.diag, true);
    } else {
        arm.parts.push_back(make_estimate(data, "ipw", "psi_a", spec.a, first.point, first.ic, g.diag));
    }
    return arm;
}

namespace {

ArmResult sequential_estimator(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl,
                               bool targeted) {
    check_scenario_spec(data, spec);
    require_records(data);
    Plan plan = build_plan(data, spec);
    const std::string name = targeted ? "tmle" : "gcomp";
    GResult g;
    if (targeted) g = fit_g(data, spec, plan, sl, false);
    std::vector<SequentialResult> res;
    for (const auto& t : plan.targets) res.push_back(sequential(data, plan, t, g.factors, sl, targeted));
    auto diag_of = [&](const SequentialResult& r) {
        Diagnostics d = g.diag;
        d.component_means = r.component_means;
        d.epsilon = r.epsilon;
        return d;
    };
    ArmResult arm;
    arm.a = spec.a;
    if (spec.scenario == Scenario::S4) {
        push_s4(arm, data, name, {res[0].psi, res[0].ic}, {res[1].psi, res[1].ic}, diag_of(res[0]), diag_of(res[1]),
                targeted);
    } else {
        arm.parts.push_back(make_estimate(data, name, "psi_a", spec.a, res[0].psi, res[0].ic, diag_of(res[0])));
    }
    return arm;
}

}  // namespace

ArmResult gcomp(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl) {
    return sequential_estimator(data, spec, sl, false);
}

ArmResult tmle(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl) {
    return sequential_estimator(data, spec, sl, true);
}

Estimator parse_estimator(const std::string& id) {
    if (id == "cc") return Estimator::CC;
    if (id == "ipw") return Estimator::IPW;
    if (id == "gcomp") return Estimator::GComp;
    if (id == "tmle") return Estimator::TMLE;
    throw ConfigError("unknown estimator '" + id + "' (expected cc, ipw, gcomp or tmle)");
}

std::string to_string(Estimator e) {
    switch (e) {
        case Estimator::CC: return "cc";
        case Estimator::IPW: return "ipw";
        case Estimator::GComp: return "gcomp";
        case Estimator::TMLE: return "tmle";
    }
    return "?";
}

RrResult estimate_rr(const Dataset& data, const ScenarioSpec& spec, Estimator estimator,
                     const SuperLearnerConfig& sl, bool ipw_glm_only) {
    auto run = [&](int a) {
        ScenarioSpec s = spec;
        s.a = a;
        switch (estimator) {
            case Estimator::CC: return complete_case(data, s);
            case Estimator::IPW: return ipw(data, s, ipw_glm_only, sl);
            case Estimator::GComp: return gcomp(data, s, sl);
            case Estimator::TMLE: return tmle(data, s, sl);
        }
        throw ConfigError("unknown estimator");
    };
    RrResult out;
    out.estimator = estimator;
    out.arm1 = run(1);
    out.arm0 = run(0);
    const auto& t1 = out.arm1.target();
    const auto& t0 = out.arm0.target();
    if (t0.point == 0.0) throw EstimationError("risk ratio undefined: estimate at a=0 is zero");
    const std::string name = to_string(estimator);
    const bool with_ic = t1.ic.size() > 0 && t0.ic.size() > 0;

    Diagnostics diag;
    diag.g_min = std::min(t1.diagnostics.g_min, t0.diagnostics.g_min);
    diag.g_max = std::max(t1.diagnostics.g_max, t0.diagnostics.g_max);
    diag.truncated = t1.diagnostics.truncated + t0.diagnostics.truncated;

    out.rr = make_estimate(data, name, "rr", -1, t1.point / t0.point, {}, diag);
    out.rd = make_estimate(data, name, "rd", -1, t1.point - t0.point, {}, diag);
    if (with_ic) {
        if (!(t1.point > 0.0)) throw EstimationError("risk ratio CI undefined: estimate at a=1 is zero");
        auto l1 = delta_method_log({t1.point, t1.ic});
        auto l0 = delta_method_log({t0.point, t0.ic});
        out.rr.ic = l1.ic - l0.ic;
        out.rr.diagnostics.eic_mean = out.rr.ic.mean();
        out.rr.se = clustered_se(InfluenceCurve{out.rr.ic, data.cluster_map()});
        auto [lo, hi] = wald_ci(l1.point - l0.point, out.rr.se);
        out.rr.ci = std::make_pair(std::exp(lo), std::exp(hi));
        out.rd.ic = t1.ic - t0.ic;
        out.rd.diagnostics.eic_mean = out.rd.ic.mean();
        attach_inference(out.rd, data.cluster_map());
    }
    return out;
}

namespace {

nlohmann::json num_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json estimate_json(const EffectEstimate& e) {
    nlohmann::json j;
    j["estimator"] = e.estimator;
    j["estimand"] = e.estimand;
    if (e.a >= 0) j["a"] = e.a;
    j["point"] = num_or_null(e.point);
    j["se"] = num_or_null(e.se);
    j["ci_lo"] = e.ci ? num_or_null(e.ci->first) : nlohmann::json(nullptr);
    j["ci_hi"] = e.ci ? num_or_null(e.ci->second) : nlohmann::json(nullptr);
    if (e.estimand == "rr") j["se_scale"] = "log";
    nlohmann::json d;
    if (e.diagnostics.g_min <= e.diagnostics.g_max) {
        d["g_min"] = e.diagnostics.g_min;
        d["g_max"] = e.diagnostics.g_max;
    }
    d["truncated"] = e.diagnostics.truncated;
    d["eic_mean"] = num_or_null(e.diagnostics.eic_mean);
    if (!e.diagnostics.component_means.empty()) d["component_means"] = e.diagnostics.component_means;
    if (!e.diagnostics.epsilon.empty()) d["epsilon"] = e.diagnostics.epsilon;
    j["diagnostics"] = d;
    j["n"] = e.n;
    j["m_clusters"] = e.m_clusters;
    return j;
}

nlohmann::json arm_json(const ArmResult& arm) {
    nlohmann::json j;
    j["a"] = arm.a;
    j["estimates"] = nlohmann::json::array();
    for (const auto& p : arm.parts) j["estimates"].push_back(estimate_json(p));
    return j;
}

}  // namespace

std::string estimate_to_json(const EffectEstimate& est) { return estimate_json(est).dump(2); }

std::string rr_to_json(const RrResult& result) {
    nlohmann::json j;
    j["estimator"] = to_string(result.estimator);
    j["arms"] = {arm_json(result.arm1), arm_json(result.arm0)};
    j["rr"] = estimate_json(result.rr);
    j["rd"] = estimate_json(result.rd);
    return j.dump(2);
}

}  // namespace cstrata
