#include <doctest.h>

#include <cmath>
#include <map>
#include <tuple>

#include "cstrata/error.hpp"
#include "cstrata/estimators.hpp"
#include "cstrata/inference.hpp"
#include "cstrata/npsem.hpp"

using namespace cstrata;

namespace {

std::string fixture(const std::string& name) { return std::string(CSTRATA_TEST_DATA) + "/" + name; }

SuperLearnerConfig saturated_sl() {
    SuperLearnerConfig sl;
    sl.library = {"glm_interactions"};
    return sl;
}

int l0_key(const ObservedRecord& r) {
    int k = 0;
    for (const auto& v : r.l0) k = 10 * k + static_cast<int>(*v);
    return k;
}

/// Plug-in g-formula with every conditional replaced by an empirical cell mean.
std::tuple<double, double, double> empirical_s4(const Dataset& ds, int a) {
    std::map<int, double> n_w;
    std::map<int, std::pair<double, double>> y0_cell;                 // by w: sum y0, count
    std::map<std::pair<int, int>, std::pair<double, double>> y1_cell;  // by (w, v)
    for (const auto& r : ds.records()) {
        int w = l0_key(r);
        n_w[w] += 1;
        if (r.delta_a != 1 || *r.a != a || *r.delta_y0 != 1) continue;
        y0_cell[w].first += *r.y0;
        y0_cell[w].second += 1;
        if (*r.y0 == 0 && r.delta_y1 == 1) {
            auto& c = y1_cell[{w, static_cast<int>(*r.l1[0])}];
            c.first += *r.y1;
            c.second += 1;
        }
    }
    std::map<int, std::pair<double, double>> inner;  // by w: sum I(y0=0) m(w, v), count
    for (const auto& r : ds.records()) {
        if (r.delta_a != 1 || *r.a != a || *r.delta_y0 != 1) continue;
        int w = l0_key(r);
        auto& c = inner[w];
        c.second += 1;
        if (*r.y0 == 0) {
            const auto& m = y1_cell.at({w, static_cast<int>(*r.l1[0])});
            c.first += m.first / m.second;
        }
    }
    const double n = static_cast<double>(ds.size());
    double num = 0, den_comp = 0;
    for (const auto& [w, cnt] : n_w) {
        num += cnt / n * inner.at(w).first / inner.at(w).second;
        den_comp += cnt / n * y0_cell.at(w).first / y0_cell.at(w).second;
    }
    return {num, 1.0 - den_comp, num / (1.0 - den_comp)};
}

double stratified_s1(const Dataset& ds, int a) {
    std::map<int, double> n_w;
    std::map<int, std::pair<double, double>> cell;
    for (const auto& r : ds.records()) {
        int w = l0_key(r);
        n_w[w] += 1;
        if (*r.a == a) {
            cell[w].first += *r.y1;
            cell[w].second += 1;
        }
    }
    double psi = 0;
    for (const auto& [w, cnt] : n_w) psi += cnt / static_cast<double>(ds.size()) * cell.at(w).first / cell.at(w).second;
    return psi;
}

ObservedRecord s4_row(int a, int dy0, int y0, int dy1, int y1, const std::string& id) {
    ObservedRecord r;
    r.l0 = {0.0};
    r.delta_a = 1;
    r.a = a;
    r.delta_y0 = dy0;
    if (dy0) r.y0 = y0;
    r.l1 = {0.0};
    r.delta_y1 = dy1;
    if (dy1) r.y1 = y1;
    r.cluster_id = id;
    return r;
}

Schema one_numeric(bool l1) {
    Schema s;
    s.l0 = {FeatureDecl{"w", FeatureKind::Numeric, {}}};
    if (l1) s.l1 = {FeatureDecl{"v", FeatureKind::Numeric, {}}};
    return s;
}

}  // namespace

TEST_CASE("complete-case estimator by hand") {
    std::vector<ObservedRecord> rows{
        s4_row(1, 1, 0, 1, 1, "1"), s4_row(1, 1, 0, 1, 0, "2"), s4_row(1, 1, 0, 1, 0, "3"),
        s4_row(1, 1, 1, 0, 0, "4"), s4_row(1, 1, 0, 0, 0, "5"), s4_row(0, 1, 0, 1, 1, "6"),
        s4_row(1, 0, 0, 0, 0, "7")};
    rows[3].y1.reset();
    Dataset ds(Scenario::S4, one_numeric(true), rows);
    ScenarioSpec spec = ScenarioSpec::full(ds, 1);
    auto res = complete_case(ds, spec);
    const auto& t = res.target();
    CHECK(t.estimand == "conditional");
    CHECK(t.point == doctest::Approx(1.0 / 3.0));
    REQUIRE(t.ic.size() == 7);
    // I / p * (y - mean) with p = 3/7.
    CHECK(t.ic[0] == doctest::Approx(7.0 / 3.0 * (2.0 / 3.0)));
    CHECK(t.ic[1] == doctest::Approx(7.0 / 3.0 * (-1.0 / 3.0)));
    CHECK(t.ic[5] == 0.0);
    CHECK(std::abs(t.ic.mean()) < 1e-15);
}

TEST_CASE("inverse weighting arithmetic") {
    std::vector<ObservedRecord> rows;
    const int as[] = {1, 1, 1, 0, 0, 1, 0, 1};
    const int ys[] = {1, 0, 1, 1, 0, 1, 0, 0};
    for (int i = 0; i < 8; ++i) {
        ObservedRecord r;
        r.l0 = {static_cast<double>(i % 3)};
        r.a = as[i];
        r.y1 = ys[i];
        r.cluster_id = std::to_string(i);
        rows.push_back(r);
    }
    Dataset ds(Scenario::S1, one_numeric(false), rows);
    ScenarioSpec spec = ScenarioSpec::full(ds, 1);
    spec.g_adjust = {};
    auto t = ipw(ds, spec).target();
    // Intercept-only propensity 5/8: weights 8/5 on treated rows.
    CHECK(t.point == doctest::Approx(3.0 / 5.0).epsilon(1e-9));
    CHECK(t.ic[0] == doctest::Approx(8.0 / 5.0 - 3.0 / 5.0).epsilon(1e-9));
    CHECK(t.ic[3] == doctest::Approx(-3.0 / 5.0).epsilon(1e-9));
}

TEST_CASE("saturated models reproduce the empirical g-formula in S4") {
    auto ds = sample_observed(load_npsem(fixture("s4_saturated.json")), 7);
    for (int a : {1, 0}) {
        ScenarioSpec spec = ScenarioSpec::full(ds, a);
        auto [num, den, cond] = empirical_s4(ds, a);
        auto g = gcomp(ds, spec, saturated_sl());
        auto t = tmle(ds, spec, saturated_sl());
        auto w = ipw(ds, spec, false, saturated_sl());
        CAPTURE(a);
        CHECK(std::abs(g.get("numerator").point - num) < 1e-8);
        CHECK(std::abs(g.get("denominator").point - den) < 1e-8);
        CHECK(std::abs(g.target().point - cond) < 1e-8);
        CHECK(std::abs(t.target().point - cond) < 1e-8);
        CHECK(std::abs(w.target().point - cond) < 1e-8);
        for (const auto& part : t.parts)
            for (double e : part.diagnostics.epsilon) CHECK(std::abs(e) < 1e-6);
        CHECK(t.target().point == doctest::Approx(t.get("numerator").point / t.get("denominator").point));
    }
}

TEST_CASE("complete-data point treatment: all estimators agree with stratification") {
    auto ds = sample_observed(load_npsem(fixture("s1_mar.json")), 3);
    for (int a : {1, 0}) {
        ScenarioSpec spec = ScenarioSpec::full(ds, a);
        double oracle = stratified_s1(ds, a);
        CHECK(std::abs(gcomp(ds, spec, saturated_sl()).target().point - oracle) < 1e-8);
        CHECK(std::abs(tmle(ds, spec, saturated_sl()).target().point - oracle) < 1e-8);
        CHECK(std::abs(ipw(ds, spec, false, saturated_sl()).target().point - oracle) < 1e-8);
    }
}

TEST_CASE("targeting solves the efficient influence curve equation") {
    auto ds = sample_observed(load_npsem(fixture("s4_sl.json")), 4);
    SuperLearnerConfig sl;
    sl.library = {"mean", "glm", "hinge_spline"};
    sl.folds = 5;
    for (const auto& part : tmle(ds, ScenarioSpec::full(ds, 1), sl).parts) {
        CHECK(std::abs(part.diagnostics.eic_mean) < 1e-10);
        for (double c : part.diagnostics.component_means) CHECK(std::abs(c) < 1e-10);
        CHECK(std::abs(part.ic.mean()) < 1e-10);
    }
    auto s3 = sample_observed(load_npsem(fixture("s3_mar.json")), 4);
    auto t3 = tmle(s3, ScenarioSpec::full(s3, 0), sl).target();
    CHECK(std::abs(t3.diagnostics.eic_mean) < 1e-10);
}

TEST_CASE("propensity truncation") {
    auto ds = sample_observed(load_npsem(fixture("s4_mar.json")), 6);
    SuperLearnerConfig sl;
    sl.library = {"glm"};
    std::size_t prev = 0;
    for (double lo : {0.01, 0.3, 0.5, 0.7}) {
        ScenarioSpec spec = ScenarioSpec::full(ds, 1);
        spec.g_lo = lo;
        spec.g_hi = 0.999;
        auto nu = fit_nuisances(ds, spec, sl, NuisanceRole::G);
        std::size_t count = 0;
        for (const auto& g : nu.g) {
            for (Eigen::Index i = 0; i < g.truncated.size(); ++i) {
                if (!g.population[static_cast<std::size_t>(i)]) continue;
                if (g.degenerate) {
                    CHECK(g.truncated[i] == 1.0);
                    continue;
                }
                CHECK(g.truncated[i] >= lo);
                CHECK(g.truncated[i] <= 0.999);
                if (g.raw[i] < lo) {
                    CHECK(g.truncated[i] == lo);
                    ++count;
                } else if (g.raw[i] <= 0.999) {
                    CHECK(g.truncated[i] == g.raw[i]);
                }
            }
        }
        auto t = tmle(ds, spec, sl).target();
        CHECK(t.diagnostics.truncated >= count);
        CHECK(count >= prev);
        prev = count;
    }
    CHECK(prev > 0);
    ScenarioSpec bad = ScenarioSpec::full(ds, 1);
    bad.g_lo = 0.6;
    bad.g_hi = 0.4;
    CHECK_THROWS_AS(tmle(ds, bad, sl), ConfigError);
}

TEST_CASE("fully observed richer scenario collapses to the point-treatment problem") {
    auto s1 = sample_observed(load_npsem(fixture("s1_mar.json")), 13);
    std::vector<ObservedRecord> rows = s1.records();
    Dataset s2(Scenario::S2, s1.schema(), rows);
    SuperLearnerConfig sl;
    sl.library = {"mean", "glm"};
    sl.folds = 5;
    for (auto est : {Estimator::IPW, Estimator::GComp, Estimator::TMLE}) {
        auto a = estimate_rr(s1, ScenarioSpec::full(s1, 1), est, sl);
        auto b = estimate_rr(s2, ScenarioSpec::full(s2, 1), est, sl);
        CHECK(a.rr.point == doctest::Approx(b.rr.point).epsilon(1e-12));
        if (est != Estimator::GComp) CHECK(a.rr.se == doctest::Approx(b.rr.se).epsilon(1e-10));
    }
}

TEST_CASE("risk ratio and difference from the two arms") {
    auto ds = sample_observed(load_npsem(fixture("s4_mar.json")), 2);
    SuperLearnerConfig sl;
    sl.library = {"mean", "glm"};
    sl.folds = 5;
    auto r = estimate_rr(ds, ScenarioSpec::full(ds, 1), Estimator::TMLE, sl);
    const auto& t1 = r.arm1.target();
    const auto& t0 = r.arm0.target();
    CHECK(t1.a == 1);
    CHECK(t0.a == 0);
    CHECK(r.rr.point == doctest::Approx(t1.point / t0.point).epsilon(1e-14));
    CHECK(r.rd.point == doctest::Approx(t1.point - t0.point).epsilon(1e-14));
    Eigen::VectorXd log_ic = t1.ic / t1.point - t0.ic / t0.point;
    double se = clustered_se({log_ic, ds.cluster_map()});
    CHECK(r.rr.se == doctest::Approx(se).epsilon(1e-12));
    REQUIRE(r.rr.ci);
    CHECK(r.rr.ci->first == doctest::Approx(r.rr.point * std::exp(-1.959963984540054 * se)).epsilon(1e-12));
    CHECK(r.rd.se == doctest::Approx(clustered_se({t1.ic - t0.ic, ds.cluster_map()})).epsilon(1e-12));
    CHECK(iid_se(log_ic) <= r.rr.se * 1.5);

    auto cc = estimate_rr(ds, ScenarioSpec::full(ds, 1), Estimator::CC, sl);
    CHECK(cc.arm1.parts.size() == 1);
    CHECK(cc.arm1.target().estimand == "conditional");
    CHECK_THROWS_AS(parse_estimator("aipw"), ConfigError);
    CHECK(parse_estimator("gcomp") == Estimator::GComp);
}

TEST_CASE("estimator input errors") {
    auto s3 = sample_observed(load_npsem(fixture("s3_mar.json")), 1);
    std::vector<ObservedRecord> rows = s3.records();
    for (auto& r : rows)
        if (r.delta_a == 1 && *r.a == 1 && r.delta_y1 == 1) {
            r.l1[0].reset();
            break;
        }
    Dataset broken(Scenario::S3, s3.schema(), rows);
    SuperLearnerConfig sl;
    sl.library = {"glm"};
    CHECK_THROWS_AS(tmle(broken, ScenarioSpec::full(broken, 1), sl), DataError);

    auto s1 = sample_observed(load_npsem(fixture("s1_mar.json")), 1);
    rows = s1.records();
    for (auto& r : rows) r.a = 1;
    Dataset all_treated(Scenario::S1, s1.schema(), rows);
    CHECK_THROWS_AS(complete_case(all_treated, ScenarioSpec::full(all_treated, 0)), EstimationError);
    CHECK_THROWS_AS(tmle(all_treated, ScenarioSpec::full(all_treated, 0), sl), EstimationError);

    ScenarioSpec wrong = ScenarioSpec::full(s1, 1);
    wrong.scenario = Scenario::S4;
    CHECK_THROWS_AS(tmle(s1, wrong, sl), ConfigError);
    ScenarioSpec unknown = ScenarioSpec::full(s1, 1);
    unknown.q_adjust.l0.push_back("age");
    CHECK_THROWS_AS(gcomp(s1, unknown, sl), ConfigError);
}
