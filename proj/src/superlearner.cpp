#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "cstrata/error.hpp"
#include "cstrata/learners.hpp"
#include "cstrata/npsem.hpp"
#include "cstrata/rng.hpp"

namespace cstrata {

namespace {

constexpr double kGapTol = 1e-10;
constexpr int kMaxMetaIter = 100000;

double point_loss(double y, double p, Loss loss) {
    if (loss == Loss::Squared) return (y - p) * (y - p);
    double q = clamp_prob(p);
    return -(y * std::log(q) + (1.0 - y) * std::log1p(-q));
}

/// Mean loss with gradient and Hessian in alpha.
struct MetaObjective {
    const Eigen::MatrixXd& z;
    const Eigen::VectorXd& y;
    const Eigen::VectorXd& w;
    Loss loss;
    double wsum;

    double value(const Eigen::VectorXd& alpha) const {
        Eigen::VectorXd p = z * alpha;
        double s = 0.0;
        for (Eigen::Index i = 0; i < y.size(); ++i)
            if (w[i] > 0) s += w[i] * point_loss(y[i], p[i], loss);
        return s / wsum;
    }

    void derivatives(const Eigen::VectorXd& alpha, Eigen::VectorXd& grad, Eigen::MatrixXd& hess) const {
        Eigen::VectorXd p = z * alpha;
        Eigen::VectorXd d1(y.size()), d2(y.size());
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            if (loss == Loss::Squared) {
                d1[i] = -2.0 * (y[i] - p[i]);
                d2[i] = 2.0;
            } else {
                double q = clamp_prob(p[i]);
                d1[i] = -y[i] / q + (1.0 - y[i]) / (1.0 - q);
                d2[i] = y[i] / (q * q) + (1.0 - y[i]) / ((1.0 - q) * (1.0 - q));
            }
            d1[i] *= w[i] / wsum;
            d2[i] *= w[i] / wsum;
        }
        grad = z.transpose() * d1;
        hess = z.transpose() * (z.array().colwise() * d2.array()).matrix();
    }
};

/// Minimizes g'(b - a) + 0.5 (b - a)' H (b - a) over the simplex by
/// accelerated projected gradient.
Eigen::VectorXd simplex_qp(const Eigen::VectorXd& alpha, const Eigen::VectorXd& grad, const Eigen::MatrixXd& hess,
                           int& iterations_left) {
    double lip = hess.diagonal().sum();
    if (!(lip > 0)) lip = 1.0;
    Eigen::VectorXd b = alpha, prev = alpha, yk = alpha;
    double t = 1.0;
    for (int it = 0; it < 5000 && iterations_left > 0; ++it, --iterations_left) {
        Eigen::VectorXd g = grad + hess * (yk - alpha);
        Eigen::VectorXd next = project_simplex(yk - g / lip);
        double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        yk = next + ((t - 1.0) / tn) * (next - prev);
        prev = b = next;
        t = tn;
        if ((next - yk).cwiseAbs().maxCoeff() < 1e-15) break;
    }
    return b;
}

/// Same quadratic model solved exactly by enumerating the faces of the
/// simplex; used for small libraries.
Eigen::VectorXd simplex_qp_exact(const Eigen::VectorXd& alpha, const Eigen::VectorXd& grad,
                                 const Eigen::MatrixXd& hess) {
    const Eigen::Index k = alpha.size();
    const Eigen::VectorXd c = grad - hess * alpha;
    auto model = [&](const Eigen::VectorXd& b) { return 0.5 * b.dot(hess * b) + c.dot(b); };
    Eigen::VectorXd best = alpha;
    double best_val = model(alpha);
    for (unsigned mask = 1; mask < (1u << k); ++mask) {
        std::vector<Eigen::Index> s;
        for (Eigen::Index j = 0; j < k; ++j)
            if (mask & (1u << j)) s.push_back(j);
        const auto m = static_cast<Eigen::Index>(s.size());
        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
        Eigen::VectorXd rhs(m + 1);
        for (Eigen::Index r = 0; r < m; ++r) {
            for (Eigen::Index q = 0; q < m; ++q) kkt(r, q) = hess(s[static_cast<std::size_t>(r)], s[static_cast<std::size_t>(q)]);
            kkt(r, m) = kkt(m, r) = 1.0;
            rhs[r] = -c[s[static_cast<std::size_t>(r)]];
        }
        rhs[m] = 1.0;
        Eigen::VectorXd sol = kkt.completeOrthogonalDecomposition().solve(rhs);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
        bool feasible = sol.allFinite();
        for (Eigen::Index r = 0; r < m && feasible; ++r) {
            if (sol[r] < -1e-12) feasible = false;
            b[s[static_cast<std::size_t>(r)]] = std::max(0.0, sol[r]);
        }
        if (!feasible || !(b.sum() > 0)) continue;
        b /= b.sum();
        double v = model(b);
        if (v < best_val) {
            best_val = v;
            best = b;
        }
    }
    return best;
}

}  // namespace

Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
    const Eigen::Index k = v.size();
    std::vector<double> u(v.data(), v.data() + k);
    std::sort(u.begin(), u.end(), std::greater<>());
    double css = 0.0, theta = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
        css += u[static_cast<std::size_t>(j)];
        double t = (css - 1.0) / static_cast<double>(j + 1);
        if (u[static_cast<std::size_t>(j)] - t > 0) theta = t;
    }
    Eigen::VectorXd out = (v.array() - theta).cwiseMax(0.0).matrix();
    double s = out.sum();
    return s > 0 ? Eigen::VectorXd(out / s) : Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
}

Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
    const Eigen::Index k = a.cols();
    Eigen::VectorXd x = Eigen::VectorXd::Zero(k);
    std::vector<bool> passive(static_cast<std::size_t>(k), false);
    const double tol = 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()) * static_cast<double>(a.rows());
    for (int outer = 0; outer < 3 * k + 10; ++outer) {
        Eigen::VectorXd wv = a.transpose() * (b - a * x);
        Eigen::Index best = -1;
        double best_w = tol;
        for (Eigen::Index j = 0; j < k; ++j)
            if (!passive[static_cast<std::size_t>(j)] && wv[j] > best_w) {
                best_w = wv[j];
                best = j;
            }
        if (best < 0) break;
        passive[static_cast<std::size_t>(best)] = true;
        for (int inner = 0; inner < 3 * k + 10; ++inner) {
            std::vector<Eigen::Index> idx;
            for (Eigen::Index j = 0; j < k; ++j)
                if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
            Eigen::MatrixXd ap(a.rows(), static_cast<Eigen::Index>(idx.size()));
            for (std::size_t c = 0; c < idx.size(); ++c) ap.col(static_cast<Eigen::Index>(c)) = a.col(idx[c]);
            Eigen::VectorXd zp = ap.colPivHouseholderQr().solve(b);
            Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
            for (std::size_t c = 0; c < idx.size(); ++c) z[idx[c]] = zp[static_cast<Eigen::Index>(c)];
            bool feasible = true;
            for (auto j : idx) feasible &= z[j] > 0;
            if (feasible) {
                x = z;
                break;
            }
            double step = 1.0;
            for (auto j : idx)
                if (z[j] <= 0) step = std::min(step, x[j] / (x[j] - z[j]));
            x += step * (z - x);
            for (auto j : idx)
                if (x[j] <= 1e-15) {
                    x[j] = 0.0;
                    passive[static_cast<std::size_t>(j)] = false;
                }
        }
    }
    return x;
}

double ensemble_risk(const Eigen::MatrixXd& z, const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& w, Loss loss) {
    return MetaObjective{z, y, w, loss, w.sum()}.value(alpha);
}

Eigen::VectorXd simplex_weights(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                Loss loss) {
    const Eigen::Index k = z.cols();
    if (k == 0) throw EstimationError("superlearner: empty library");
    MetaObjective obj{z, y, w, loss, w.sum()};

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(k);
    Eigen::Index best = 0;
    double best_val = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k; ++j) {
        Eigen::VectorXd e = Eigen::VectorXd::Unit(k, j);
        double v = obj.value(e);
        if (v < best_val) {
            best_val = v;
            best = j;
        }
    }
    alpha[best] = 1.0;
    if (k == 1) return alpha;
    double f = best_val;

    if (loss == Loss::Squared) {
        Eigen::VectorXd sw = w.array().sqrt().matrix();
        Eigen::VectorXd start = nnls(z.array().colwise() * sw.array(), (y.array() * sw.array()).matrix());
        if (start.sum() > 0) {
            start /= start.sum();
            double v = obj.value(start);
            if (v < f) {
                alpha = start;
                f = v;
            }
        }
    }

    int budget = kMaxMetaIter;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
    int stalled = 0;
    while (budget > 0) {
        obj.derivatives(alpha, grad, hess);
        double gap = grad.dot(alpha) - grad.minCoeff();
        if (gap < kGapTol) break;
        Eigen::VectorXd target = k <= 10 ? simplex_qp_exact(alpha, grad, hess) : simplex_qp(alpha, grad, hess, budget);
        Eigen::VectorXd dir = target - alpha;
        double slope = grad.dot(dir);
        if (!(slope < 0)) {
            // Fall back to the Frank-Wolfe vertex direction.
            Eigen::Index jmin = 0;
            grad.minCoeff(&jmin);
            dir = Eigen::VectorXd::Unit(k, jmin) - alpha;
            slope = grad.dot(dir);
            if (!(slope < 0)) break;
        }
        double t = 1.0;
        bool moved = false;
        for (int half = 0; half < 60; ++half, t *= 0.5) {
            Eigen::VectorXd cand = alpha + t * dir;
            double v = obj.value(cand);
            if (v <= f + 1e-4 * t * slope) {
                // Round-off level progress counts as a stall.
                stalled = f - v <= 1e-15 * std::abs(f) ? stalled + 1 : 0;
                alpha = cand;
                f = v;
                moved = true;
                break;
            }
        }
        --budget;
        if (!moved || stalled >= 3) break;
    }
    // Exact simplex: clip round-off and renormalize.
    alpha = alpha.cwiseMax(0.0);
    alpha /= alpha.sum();
    return alpha;
}

std::vector<int> assign_folds(const std::vector<int>& cluster_keys, int folds, std::uint64_t seed) {
    std::vector<int> distinct = cluster_keys;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (folds < 2) throw ConfigError("fold count must be at least 2");
    if (static_cast<std::size_t>(folds) > distinct.size())
        throw ConfigError("fold count " + std::to_string(folds) + " exceeds number of clusters " +
                          std::to_string(distinct.size()));
    Engine eng(stream_seed(seed, 0x5f01d));
    std::shuffle(distinct.begin(), distinct.end(), eng);
    std::map<int, int> fold_of;
    for (std::size_t c = 0; c < distinct.size(); ++c) fold_of[distinct[c]] = static_cast<int>(c % static_cast<std::size_t>(folds));
    std::vector<int> out(cluster_keys.size());
    for (std::size_t i = 0; i < cluster_keys.size(); ++i) out[i] = fold_of[cluster_keys[i]];
    return out;
}

Eigen::VectorXd EnsembleModel::predict(const Eigen::MatrixXd& x) const {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(x.rows());
    for (std::size_t k = 0; k < fits.size(); ++k)
        if (alpha[static_cast<Eigen::Index>(k)] > 0 && fits[k]) p += alpha[static_cast<Eigen::Index>(k)] * fits[k]->predict(x);
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = clamp_prob(p[i]);
    return p;
}

namespace {

RegressionTask subset(const RegressionTask& task, const std::vector<Eigen::Index>& rows) {
    RegressionTask t;
    const auto n = static_cast<Eigen::Index>(rows.size());
    t.x.resize(n, task.x.cols());
    t.y.resize(n);
    t.w.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        auto i = rows[static_cast<std::size_t>(r)];
        t.x.row(r) = task.x.row(i);
        t.y[r] = task.y[i];
        t.w[r] = task.w[i];
        if (!task.cluster.empty()) t.cluster.push_back(task.cluster[static_cast<std::size_t>(i)]);
    }
    t.groups = task.groups;
    return t;
}

}  // namespace

std::unique_ptr<EnsembleModel> superlearner_fit(const RegressionTask& task, const SuperLearnerConfig& config) {
    check_task(task);
    if (config.library.empty()) throw ConfigError("superlearner: library is empty");
    for (const auto& id : config.library)
        if (!is_known_learner(id)) throw ConfigError("superlearner: unknown learner '" + id + "'");
    if (config.folds < 2) throw ConfigError("superlearner: V must be at least 2");

    auto model = std::make_unique<EnsembleModel>();
    const auto n = static_cast<Eigen::Index>(task.rows());
    const auto K = config.library.size();

    std::vector<int> keys = task.cluster;
    if (keys.empty()) {
        keys.resize(static_cast<std::size_t>(n));
        std::iota(keys.begin(), keys.end(), 0);
    }
    std::vector<int> distinct = keys;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<bool> alive(K, true);
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(K));
    if (K == 1) {
        model->folds_used = 0;
    } else {
        if (distinct.size() < 2) throw EstimationError("superlearner: cross-validation needs at least 2 clusters");
        int V = std::min<int>(config.folds, static_cast<int>(distinct.size()));
        model->folds_used = V;
        model->fold = assign_folds(keys, V, config.seed);
        std::vector<std::vector<Eigen::Index>> train(static_cast<std::size_t>(V)), valid(static_cast<std::size_t>(V));
        for (Eigen::Index i = 0; i < n; ++i)
            for (int v = 0; v < V; ++v)
                (model->fold[static_cast<std::size_t>(i)] == v ? valid : train)[static_cast<std::size_t>(v)].push_back(i);

        const auto jobs = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(V) * K);
        std::vector<std::string> errors(static_cast<std::size_t>(jobs));
        auto run_job = [&](std::ptrdiff_t job) {
            auto v = static_cast<std::size_t>(job) / K, k = static_cast<std::size_t>(job) % K;
            try {
                auto sub = subset(task, train[v]);
                if (sub.w.sum() <= 0) throw EstimationError("training fold has zero weight");
                auto fitted = fit_learner(config.library[k], sub);
                Eigen::MatrixXd xv(static_cast<Eigen::Index>(valid[v].size()), task.x.cols());
                for (std::size_t r = 0; r < valid[v].size(); ++r) xv.row(static_cast<Eigen::Index>(r)) = task.x.row(valid[v][r]);
                Eigen::VectorXd pv = fitted->predict(xv);
                for (std::size_t r = 0; r < valid[v].size(); ++r) z(valid[v][r], static_cast<Eigen::Index>(k)) = pv[static_cast<Eigen::Index>(r)];
            } catch (const std::exception& e) {
                errors[static_cast<std::size_t>(job)] = e.what();
            }
        };
        if (config.exec == Execution::Parallel) {
#pragma omp parallel for schedule(dynamic)
            for (std::ptrdiff_t job = 0; job < jobs; ++job) run_job(job);
        } else {
            for (std::ptrdiff_t job = 0; job < jobs; ++job) run_job(job);
        }
        for (std::size_t job = 0; job < errors.size(); ++job)
            if (!errors[job].empty() && alive[job % K]) {
                alive[job % K] = false;
                model->warnings.push_back("learner '" + config.library[job % K] + "' dropped: " + errors[job]);
            }
    }

    // Fit, refit on full data, drop failures, re-solve.
    std::vector<std::unique_ptr<FittedModel>> full(K);
    for (int round = 0; round < static_cast<int>(K) + 1; ++round) {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < K; ++k)
            if (alive[k]) idx.push_back(k);
        if (idx.empty()) throw EstimationError("superlearner: every library member failed");
        Eigen::VectorXd alpha_sub = Eigen::VectorXd::Ones(1);
        Eigen::MatrixXd zs(n, static_cast<Eigen::Index>(idx.size()));
        for (std::size_t c = 0; c < idx.size(); ++c) zs.col(static_cast<Eigen::Index>(c)) = z.col(static_cast<Eigen::Index>(idx[c]));
        if (idx.size() > 1 || K > 1) alpha_sub = simplex_weights(zs, task.y, task.w, config.loss);
        bool failed = false;
        for (std::size_t c = 0; c < idx.size(); ++c) {
            auto k = idx[c];
            if (alpha_sub[static_cast<Eigen::Index>(c)] <= 0 || full[k]) continue;
            try {
                full[k] = fit_learner(config.library[k], task);
            } catch (const std::exception& e) {
                alive[k] = false;
                failed = true;
                model->warnings.push_back("learner '" + config.library[k] + "' dropped on full data: " + e.what());
            }
        }
        if (failed) continue;
        for (std::size_t c = 0; c < idx.size(); ++c) {
            model->ids.push_back(config.library[idx[c]]);
            model->fits.push_back(alpha_sub[static_cast<Eigen::Index>(c)] > 0 ? std::move(full[idx[c]]) : nullptr);
        }
        model->alpha = alpha_sub;
        model->cv_predictions = zs;
        model->cv_risk.resize(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t c = 0; c < idx.size(); ++c)
            model->cv_risk[static_cast<Eigen::Index>(c)] =
                K > 1 ? ensemble_risk(zs, Eigen::VectorXd::Unit(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(c)), task.y, task.w, config.loss)
                      : std::numeric_limits<double>::quiet_NaN();
        model->ensemble_cv_risk = K > 1 ? ensemble_risk(zs, alpha_sub, task.y, task.w, config.loss)
                                        : std::numeric_limits<double>::quiet_NaN();
        return model;
    }
    throw EstimationError("superlearner: could not fit library");
}

}  // namespace cstrata
