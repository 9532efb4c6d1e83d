#include <doctest.h>

#include <cmath>

#include "cstrata/benchmark.hpp"
#include "cstrata/error.hpp"
#include "cstrata/rng.hpp"

using namespace cstrata;

namespace {

std::string fixture(const std::string& name) { return std::string(CSTRATA_TEST_DATA) + "/" + name; }

BenchmarkConfig small_config() {
    BenchmarkConfig c;
    c.spec = load_npsem(fixture("s4_mar.json"));
    c.reps = 4;
    c.sample_sizes = {400};
    c.estimators = {Estimator::CC, Estimator::IPW, Estimator::TMLE};
    c.sl.library = {"mean", "glm"};
    c.sl.folds = 3;
    c.seed = 77;
    return c;
}

}  // namespace

TEST_CASE("misspecification parsing") {
    CHECK(parse_misspecify("") == Misspecify::None);
    CHECK(parse_misspecify("none") == Misspecify::None);
    CHECK(parse_misspecify("g") == Misspecify::G);
    CHECK(parse_misspecify("q") == Misspecify::Q);
    CHECK(parse_misspecify("both") == Misspecify::Both);
    CHECK_THROWS_AS(parse_misspecify("Q"), ConfigError);
}

TEST_CASE("single replicate summary equals the raw estimate") {
    auto c = small_config();
    c.reps = 1;
    auto res = run_benchmark(c);
    REQUIRE(res.replicates.size() == 1);
    const auto& rep = res.replicates[0][0];
    CHECK(rep.n == 400);
    REQUIRE(res.summary.size() == 9);
    const double t1 = res.truth.at(1).psi, t0 = res.truth.at(0).psi;
    for (const auto& row : res.summary) {
        const auto& e = rep.estimates[static_cast<std::size_t>(&row - &res.summary[0]) / 3];
        REQUIRE(e.ok);
        CHECK(row.estimator == e.estimator);
        double v = row.estimand == "psi1" ? e.psi1 : row.estimand == "psi0" ? e.psi0 : e.rr;
        double truth = row.estimand == "psi1" ? t1 : row.estimand == "psi0" ? t0 : t1 / t0;
        CHECK(row.mean == v);
        CHECK(row.bias == doctest::Approx(v - truth).epsilon(1e-14));
        CHECK(row.mse == doctest::Approx((v - truth) * (v - truth)).epsilon(1e-12));
        CHECK(row.variance == 0.0);
        double lo = row.estimand == "psi1" ? e.lo1 : row.estimand == "psi0" ? e.lo0 : e.rr_lo;
        double hi = row.estimand == "psi1" ? e.hi1 : row.estimand == "psi0" ? e.hi0 : e.rr_hi;
        CHECK(row.coverage == (lo <= truth && truth <= hi ? 1.0 : 0.0));
        CHECK(row.mean_width == doctest::Approx(hi - lo));
    }
}

TEST_CASE("replicates do not depend on execution order") {
    auto c = small_config();
    c.exec = Execution::Serial;
    auto a = run_benchmark(c);
    c.exec = Execution::Parallel;
    auto b = run_benchmark(c);
    CHECK(benchmark_to_json(a, true) == benchmark_to_json(b, true));

    NpsemSpec sized = c.spec;
    sized.cluster.count = 400;
    auto one = run_replicate(c, sized, 2);
    CHECK(one.estimates[2].rr == a.replicates[0][2].estimates[2].rr);
    c.reps = 3;
    auto prefix = run_benchmark(c);
    for (std::size_t r = 0; r < 3; ++r)
        CHECK(prefix.replicates[0][r].estimates[2].rr == a.replicates[0][r].estimates[2].rr);
}

TEST_CASE("summary statistics over replicates") {
    TruthReport truth = true_psi(load_npsem(fixture("s1_mar.json")), {1, 0}, TruthMethod::Exact);
    std::vector<ReplicateResult> reps(3);
    const double vals[] = {0.4, 0.5, 0.9};
    for (std::size_t r = 0; r < 3; ++r) {
        ReplicateEstimate e;
        e.estimator = Estimator::IPW;
        e.ok = true;
        e.psi1 = vals[r];
        e.psi0 = 0.25;
        e.rr = vals[r] / 0.25;
        e.has_ci = true;
        e.lo1 = vals[r] - 0.1;
        e.hi1 = vals[r] + 0.1;
        reps[r].estimates.push_back(e);
    }
    reps[2].estimates[0].ok = false;
    auto rows = summarize(reps, truth, 100);
    const auto& psi1 = rows[0];
    CHECK(psi1.reps_ok == 2);
    CHECK(psi1.mean == doctest::Approx(0.45));
    CHECK(psi1.variance == doctest::Approx(0.005));
    CHECK(psi1.mc_se == doctest::Approx(std::sqrt(0.0025)));
    CHECK(psi1.mean_width == doctest::Approx(0.2));
    double t1 = truth.at(1).psi;
    CHECK(psi1.coverage == ((std::abs(0.4 - t1) <= 0.1) + (std::abs(0.5 - t1) <= 0.1)) / 2.0);
}

TEST_CASE("misspecification removes features from the chosen models") {
    auto c = small_config();
    c.reps = 1;
    c.estimators = {Estimator::GComp};
    auto base = run_benchmark(c);
    c.misspecify = Misspecify::G;
    auto g_only = run_benchmark(c);
    // g-computation ignores the propensity models.
    CHECK(g_only.replicates[0][0].estimates[0].rr == base.replicates[0][0].estimates[0].rr);
    c.misspecify = Misspecify::Q;
    auto q_all = run_benchmark(c);
    CHECK(q_all.replicates[0][0].estimates[0].rr != base.replicates[0][0].estimates[0].rr);
    c.drop = {"w1"};
    auto q_w1 = run_benchmark(c);
    CHECK(q_w1.replicates[0][0].estimates[0].rr != q_all.replicates[0][0].estimates[0].rr);
    c.reps = 0;
    CHECK_THROWS_AS(run_benchmark(c), ConfigError);
}
