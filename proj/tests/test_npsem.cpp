#include <doctest.h>

#include <cmath>
#include <sstream>
#include <string>

#include "cstrata/data.hpp"
#include "cstrata/error.hpp"
#include "cstrata/npsem.hpp"

using namespace cstrata;

namespace {

std::string fixture(const std::string& name) { return std::string(CSTRATA_TEST_DATA) + "/" + name; }

std::string csv_text(const Dataset& ds) {
    std::ostringstream out;
    write_csv(out, ds);
    return out.str();
}

double expit_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Pairwise within-cluster correlation of a binary outcome.
double within_cluster_corr(const Dataset& ds) {
    double n = 0, sy = 0;
    for (const auto& r : ds.records()) {
        sy += *r.y1;
        n += 1;
    }
    double p = sy / n, cov = 0, pairs = 0;
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

}  // namespace

TEST_CASE("sampling is deterministic and execution-independent") {
    auto spec = load_npsem(fixture("s4_mar.json"));
    auto a = csv_text(sample_observed(spec, 11, Execution::Serial));
    auto b = csv_text(sample_observed(spec, 11, Execution::Parallel));
    auto c = csv_text(sample_observed(spec, 11, Execution::Serial));
    CHECK(a == b);
    CHECK(a == c);
    CHECK(a != csv_text(sample_observed(spec, 12)));
    auto iv = InterventionSpec::standard(Scenario::S4, 1);
    auto d1 = sample_counterfactual(spec, iv, 500, 3, Execution::Serial);
    auto d2 = sample_counterfactual(spec, iv, 500, 3, Execution::Parallel);
    CHECK(d1.y0 == d2.y0);
    CHECK(d1.y1 == d2.y1);
}

TEST_CASE("simulated data always validates") {
    for (auto name : {"s1_mar.json", "s2_mar.json", "s3_mar.json", "s4_mar.json", "s4_mnar.json",
                      "s4_saturated.json", "s4_sl.json"}) {
        auto ds = sample_observed(load_npsem(fixture(name)), 5);
        CAPTURE(name);
        CHECK(validate(ds).pass());
        CHECK(ds.size() == 1000 * (std::string(name).find("sat") != std::string::npos ? 3 : 1) +
                               (std::string(name).find("s4_mar") != std::string::npos ||
                                        std::string(name).find("s4_sl") != std::string::npos
                                    ? 1000
                                    : 0));
    }
}

TEST_CASE("forced measurement yields no missing values") {
    auto spec = npsem_from_json(R"({
      "scenario": "S4", "cluster": {"count": 300, "size": 2},
      "l0": [{"name": "w", "intercept": 0.1}],
      "l1": [{"name": "v", "intercept": -0.2, "coef": {"a": 0.5}}],
      "nodes": {"delta_a": {"intercept": "inf"}, "a": {"coef": {"w": 0.5}},
                "delta_y0": {"intercept": "inf"}, "y0": {"intercept": -50},
                "delta_y1": {"intercept": "inf"}, "y1": {"coef": {"a": 1, "v": 0.3}}}})");
    auto ds = sample_observed(spec, 2);
    for (const auto& r : ds.records()) {
        CHECK(r.a.has_value());
        CHECK(r.y0.has_value());
        CHECK(r.y1.has_value());
    }
    CHECK(validate(ds).pass());
}

TEST_CASE("cluster latent controls within-household correlation") {
    const char* base = R"({"scenario": "S1", "cluster": {"count": COUNT, "size": 4},
      "l0": [{"name": "w", "intercept": 0.0}],
      "nodes": {"a": {"coef": {"w": 0.5}}, "y1": {"intercept": -0.5, "coef": {"w": 0.4}, "loading": LOAD}}})";
    auto make = [&](const std::string& count, const std::string& load) {
        std::string s = base;
        s.replace(s.find("COUNT"), 5, count);
        s.replace(s.find("LOAD"), 4, load);
        return npsem_from_json(s);
    };
    auto iid = sample_observed(make("1000", "0"), 9);
    CHECK(std::abs(within_cluster_corr(iid)) < 0.08);

    auto clustered = sample_observed(make("100000", "2.0"), 9);
    double icc = within_cluster_corr(clustered);
    // Oracle by quadrature over U ~ N(0,1), w ~ Bernoulli(1/2) independent within household.
    double e1 = 0, e2 = 0;
    const int steps = 20000;
    const double lo = -10, hi = 10, h = (hi - lo) / steps;
    for (int k = 0; k <= steps; ++k) {
        double u = lo + k * h, wt = (k == 0 || k == steps ? 0.5 : 1.0) * h * std::exp(-u * u / 2) / std::sqrt(2 * M_PI);
        double p = 0.5 * expit_ref(-0.5 + 2.0 * u) + 0.5 * expit_ref(-0.1 + 2.0 * u);
        e1 += wt * p;
        e2 += wt * p * p;
    }
    double oracle = (e2 - e1 * e1) / (e1 * (1 - e1));
    CHECK(icc > 0.1);
    CHECK(std::abs(icc - oracle) < 0.01);
}

TEST_CASE("null exposure effect gives identical counterfactual arms") {
    auto spec = load_npsem(fixture("s1_mar.json"));
    spec.nodes[static_cast<std::size_t>(Node::Y1)]->terms.erase(
        spec.nodes[static_cast<std::size_t>(Node::Y1)]->terms.begin());  // drops the "a" term
    auto d1 = sample_counterfactual(spec, InterventionSpec::standard(Scenario::S1, 1), 2000, 4);
    auto d0 = sample_counterfactual(spec, InterventionSpec::standard(Scenario::S1, 0), 2000, 4);
    CHECK(d1.y1 == d0.y1);
    auto t = true_psi(spec, {1, 0}, TruthMethod::Exact);
    CHECK(t.at(1).psi == t.at(0).psi);
}

TEST_CASE("dynamic follow-up rule marks not-at-risk draws") {
    auto spec = load_npsem(fixture("s4_mar.json"));
    auto d = sample_counterfactual(spec, InterventionSpec::standard(Scenario::S4, 1), 3000, 8);
    std::size_t at_risk = 0;
    for (std::size_t i = 0; i < d.y0.size(); ++i) {
        if (d.y0[i] == 1) CHECK(d.y1[i] == -1);
        else {
            CHECK((d.y1[i] == 0 || d.y1[i] == 1));
            ++at_risk;
        }
    }
    CHECK(at_risk > 0);
    CHECK(at_risk < d.y0.size());
}

TEST_CASE("zero coefficients give probability one half") {
    auto spec = npsem_from_json(R"({"scenario": "S1", "cluster": {"count": 10},
      "l0": [{"name": "w"}], "nodes": {"a": {}, "y1": {}}})");
    auto t = true_psi(spec, {1, 0}, TruthMethod::Exact);
    CHECK(t.at(1).psi == doctest::Approx(0.5).epsilon(1e-15));
    auto mc = true_psi(spec, {1}, TruthMethod::MonteCarlo, 200000, 3);
    CHECK(std::abs(mc.at(1).psi - 0.5) < 4 * *mc.at(1).mc_se);
}

TEST_CASE("exact truth matches hand enumeration") {
    auto spec = npsem_from_json(R"({"scenario": "S1", "cluster": {"count": 10},
      "l0": [{"name": "l", "intercept": 0.4}],
      "nodes": {"a": {"coef": {"l": 1.0}}, "y1": {"intercept": -0.7, "coef": {"a": 0.9, "l": -1.3}}}})");
    double pl = expit_ref(0.4);
    for (int a : {0, 1}) {
        double hand = (1 - pl) * expit_ref(-0.7 + 0.9 * a) + pl * expit_ref(-0.7 + 0.9 * a - 1.3);
        CHECK(std::abs(true_psi(spec, {a}, TruthMethod::Exact).at(a).psi - hand) < 1e-15);
    }
}

TEST_CASE("unconfounded exposure collapses the g-formula") {
    auto spec = npsem_from_json(R"({"scenario": "S1", "cluster": {"count": 10},
      "l0": [{"name": "l", "intercept": -0.3}],
      "nodes": {"a": {"intercept": 0.6}, "y1": {"intercept": -0.2, "coef": {"a": 0.5, "l": 1.1}}}})");
    double pl = expit_ref(-0.3);
    for (int a : {0, 1}) {
        // E(Y | A=a) with A independent of L.
        double marginal = (1 - pl) * expit_ref(-0.2 + 0.5 * a) + pl * expit_ref(-0.2 + 0.5 * a + 1.1);
        CHECK(std::abs(gformula_exact(spec, {a}).at(a).psi - marginal) < 1e-14);
    }
}

TEST_CASE("Monte Carlo truth agrees with exact truth") {
    for (auto name : {"s3_mar.json", "s4_mar.json"}) {
        auto spec = load_npsem(fixture(name));
        auto ex = true_psi(spec, {1, 0}, TruthMethod::Exact);
        auto mc = true_psi(spec, {1, 0}, TruthMethod::MonteCarlo, 400000, 21);
        for (int a : {1, 0}) {
            CAPTURE(name);
            CAPTURE(a);
            CHECK(std::abs(ex.at(a).psi - mc.at(a).psi) < 3 * *mc.at(a).mc_se);
        }
    }
}

TEST_CASE("identification holds under MAR and fails under MNAR") {
    for (auto name : {"s1_mar.json", "s2_mar.json", "s3_mar.json", "s4_mar.json", "s4_saturated.json"}) {
        auto spec = load_npsem(fixture(name));
        auto t = true_psi(spec, {1, 0}, TruthMethod::Exact);
        auto g = gformula_exact(spec, {1, 0});
        for (int a : {1, 0}) {
            CAPTURE(name);
            CHECK(std::abs(t.at(a).psi - g.at(a).psi) < 1e-10);
        }
    }
    auto mnar = load_npsem(fixture("s4_mnar.json"));
    auto t = true_psi(mnar, {1, 0}, TruthMethod::Exact);
    auto g = gformula_exact(mnar, {1, 0});
    CHECK(std::abs(t.at(1).psi - g.at(1).psi) > 0.01);
}

TEST_CASE("scenario 4 reports are internally consistent") {
    auto spec = load_npsem(fixture("s4_mar.json"));
    for (auto method : {TruthMethod::Exact, TruthMethod::MonteCarlo}) {
        auto t = true_psi(spec, {1, 0}, method, 100000, 2);
        for (const auto& lvl : t.levels) {
            REQUIRE(lvl.numerator.has_value());
            CHECK(lvl.psi == doctest::Approx(*lvl.numerator / *lvl.denominator).epsilon(1e-14));
            CHECK(lvl.psi >= 0.0);
            CHECK(lvl.psi <= 1.0);
        }
    }
}

TEST_CASE("implied missingness rate matches simulation") {
    auto spec = load_npsem(fixture("s4_mar.json"));
    spec.cluster.count = 40000;
    auto ds = sample_observed(spec, 17);
    double rate = 0;
    for (const auto& r : ds.records()) rate += r.delta_a == 0;
    rate /= static_cast<double>(ds.size());
    double implied = exact_missing_rate(spec, Node::DeltaA);
    CHECK(std::abs(rate - implied) < 3 * std::sqrt(implied * (1 - implied) / static_cast<double>(ds.size())));
}

TEST_CASE("coupled counterfactuals reproduce factual outcomes") {
    auto spec = load_npsem(fixture("s4_mar.json"));
    auto ds = sample_observed(spec, 31);
    auto cf = sample_counterfactual(spec, InterventionSpec::standard(Scenario::S4, 1), ds.size(), 31);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& r = ds[i];
        if (r.delta_a != 1 || *r.a != 1 || *r.delta_y0 != 1) continue;
        CHECK(cf.y0[i] == *r.y0);
        if (*r.y0 == 0 && r.delta_y1 == 1) {
            CHECK(cf.y1[i] == *r.y1);
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("spec and intervention errors") {
    CHECK_THROWS_AS(npsem_from_json(R"({"scenario": "S1", "l0": [{"name": "w", "coef": {"a": 1}}],
        "nodes": {"a": {}, "y1": {}}})"),
                    ConfigError);
    CHECK_THROWS_AS(npsem_from_json(R"({"scenario": "S1", "nodes": {"a": {}}})"), ConfigError);
    CHECK_THROWS_AS(npsem_from_json(R"({"scenario": "S2", "nodes": {"a": {"coef": {"y1": 1}}, "delta_a": {}, "y1": {}}})"),
                    ConfigError);
    auto s4 = load_npsem(fixture("s4_mar.json"));
    CHECK_THROWS_AS(sample_counterfactual(s4, InterventionSpec::standard(Scenario::S3, 1), 10, 1), ConfigError);
    auto cont = load_npsem(fixture("s4_sl.json"));
    CHECK_FALSE(cont.discrete_exact());
    CHECK_THROWS_AS(true_psi(cont, {1}, TruthMethod::Exact), ConfigError);
    CHECK_THROWS_AS(gformula_exact(cont, {1}), ConfigError);
}
