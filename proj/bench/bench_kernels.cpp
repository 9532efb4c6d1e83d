// Serial vs OpenMP timings for the parallel kernels.
//
//   bench_kernels [--threads N] [--scale K]

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "cstrata/benchmark.hpp"
#include "cstrata/data.hpp"
#include "cstrata/learners.hpp"
#include "cstrata/npsem.hpp"
#include "cstrata/parallel.hpp"

using namespace cstrata;

namespace {

template <class F>
double seconds(F&& f) {
    auto t0 = std::chrono::steady_clock::now();
    f();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(const char* name, double serial, double parallel, bool same) {
    std::printf("%-28s serial %8.3f s   parallel %8.3f s   speedup %5.2fx   identical %s\n", name, serial, parallel,
                serial / parallel, same ? "yes" : "NO");
}

std::string csv(const Dataset& ds) {
    std::ostringstream out;
    write_csv(out, ds);
    return out.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Serial vs parallel kernel timings"};
    int threads = 0;
    int scale = 1;
    std::string data_dir = CSTRATA_TEST_DATA;
    app.add_option("--threads", threads, "OpenMP threads (0: default)");
    app.add_option("--scale", scale, "Problem size multiplier");
    app.add_option("--data", data_dir, "Directory holding the spec fixtures");
    CLI11_PARSE(app, argc, argv);
    ThreadCountScope scope(threads);
    std::printf("threads %d\n", max_threads());

    auto spec = load_npsem(data_dir + "/s4_sl.json");
    spec.cluster.count = 50000 * static_cast<std::size_t>(scale);
    Dataset a, b;
    double s = seconds([&] { a = sample_observed(spec, 1, Execution::Serial); });
    double p = seconds([&] { b = sample_observed(spec, 1, Execution::Parallel); });
    report("simulate", s, p, csv(a) == csv(b));

    auto iv = InterventionSpec::standard(Scenario::S4, 1);
    CounterfactualDraws ca, cb;
    const std::size_t draws = 400000 * static_cast<std::size_t>(scale);
    s = seconds([&] { ca = sample_counterfactual(spec, iv, draws, 2, Execution::Serial); });
    p = seconds([&] { cb = sample_counterfactual(spec, iv, draws, 2, Execution::Parallel); });
    report("counterfactual draws", s, p, ca.y0 == cb.y0 && ca.y1 == cb.y1);

    spec.cluster.count = 4000 * static_cast<std::size_t>(scale);
    auto ds = sample_observed(spec, 3);
    auto task_rows = static_cast<Eigen::Index>(ds.size());
    Eigen::MatrixXd x(task_rows, 2);
    Eigen::VectorXd y(task_rows);
    for (Eigen::Index i = 0; i < task_rows; ++i) {
        const auto& r = ds[static_cast<std::size_t>(i)];
        x(i, 0) = *r.l0[0];
        x(i, 1) = *r.l0[1];
        y[i] = r.a.value_or(0);
    }
    auto task = make_task(x, y);
    SuperLearnerConfig cfg;
    cfg.library = {"mean", "glm", "glm_interactions", "hinge_spline"};
    std::unique_ptr<EnsembleModel> ma, mb;
    cfg.exec = Execution::Serial;
    s = seconds([&] { ma = superlearner_fit(task, cfg); });
    cfg.exec = Execution::Parallel;
    p = seconds([&] { mb = superlearner_fit(task, cfg); });
    report("super learner (10-fold)", s, p, ma->alpha == mb->alpha && ma->cv_predictions == mb->cv_predictions);

    BenchmarkConfig bc;
    bc.spec = load_npsem(data_dir + "/s4_sl.json");
    bc.reps = 8 * static_cast<std::size_t>(scale);
    bc.sample_sizes = {1000};
    bc.sl.library = {"mean", "glm", "hinge_spline"};
    bc.truth_draws = 200000;
    BenchmarkResult ra, rb;
    bc.exec = Execution::Serial;
    s = seconds([&] { ra = run_benchmark(bc); });
    bc.exec = Execution::Parallel;
    p = seconds([&] { rb = run_benchmark(bc); });
    report("benchmark replicates", s, p, benchmark_to_json(ra, true) == benchmark_to_json(rb, true));
    return 0;
}
