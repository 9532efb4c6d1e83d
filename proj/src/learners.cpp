#include "cstrata/learners.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "cstrata/error.hpp"
#include "cstrata/npsem.hpp"

namespace cstrata {

namespace {

constexpr double kScoreTol = 1e-8;
constexpr int kMaxIter = 100;
constexpr double kFallbackRidge = 1e-4;
constexpr double kSeparationCoef = 50.0;
constexpr double kSeparationEta = 30.0;

Eigen::VectorXd expit_vec(const Eigen::VectorXd& eta) {
    Eigen::VectorXd p(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) p[i] = clamp_prob(expit(eta[i]));
    return p;
}

bool constant_outcome(const RegressionTask& task, double& value) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (Eigen::Index i = 0; i < task.y.size(); ++i)
        if (task.w[i] > 0) {
            lo = std::min(lo, task.y[i]);
            hi = std::max(hi, task.y[i]);
        }
    value = lo;
    return hi - lo <= 0.0;
}

class ConstantModel : public FittedModel {
public:
    ConstantModel(double p, std::string id) : p_(clamp_prob(p)), id_(std::move(id)) {}
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override {
        return Eigen::VectorXd::Constant(x.rows(), p_);
    }
    std::string learner() const override { return id_; }
    double value() const { return p_; }

private:
    double p_;
    std::string id_;
};

/// A basis column computed from raw features.
struct BasisFn {
    enum class Kind { Linear, Product, HingeUp, HingeDown } kind = Kind::Linear;
    int j = 0;
    int k = 0;
    double knot = 0.0;

    double eval(const Eigen::MatrixXd& x, Eigen::Index row) const {
        switch (kind) {
        case Kind::Linear: return x(row, j);
        case Kind::Product: return x(row, j) * x(row, k);
        case Kind::HingeUp: return std::max(x(row, j) - knot, 0.0);
        case Kind::HingeDown: return std::max(knot - x(row, j), 0.0);
        }
        return 0.0;
    }
};

Eigen::MatrixXd build_design(const Eigen::MatrixXd& x, const std::vector<BasisFn>& basis) {
    Eigen::MatrixXd d(x.rows(), static_cast<Eigen::Index>(basis.size()) + 1);
    d.col(0).setOnes();
    for (std::size_t b = 0; b < basis.size(); ++b)
        for (Eigen::Index i = 0; i < x.rows(); ++i) d(i, static_cast<Eigen::Index>(b) + 1) = basis[b].eval(x, i);
    return d;
}

class BasisGlmModel : public FittedModel {
public:
    BasisGlmModel(std::vector<BasisFn> basis, Eigen::VectorXd beta, std::string id)
        : basis_(std::move(basis)), beta_(std::move(beta)), id_(std::move(id)) {}

    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override {
        return expit_vec(build_design(x, basis_) * beta_);
    }
    std::string learner() const override { return id_; }
    const Eigen::VectorXd& beta() const { return beta_; }
    int hinge_terms() const {
        return static_cast<int>(std::count_if(basis_.begin(), basis_.end(), [](const BasisFn& b) {
            return b.kind == BasisFn::Kind::HingeUp || b.kind == BasisFn::Kind::HingeDown;
        }));
    }

private:
    std::vector<BasisFn> basis_;
    Eigen::VectorXd beta_;
    std::string id_;
};

std::vector<BasisFn> linear_basis(Eigen::Index cols) {
    std::vector<BasisFn> b;
    for (Eigen::Index j = 0; j < cols; ++j) b.push_back({BasisFn::Kind::Linear, static_cast<int>(j), 0, 0.0});
    return b;
}

int group_of(const RegressionTask& task, Eigen::Index j) {
    return task.groups.empty() ? static_cast<int>(j) : task.groups[static_cast<std::size_t>(j)];
}

GlmFit irls_once(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double ridge,
                 bool& failed) {
    const Eigen::Index p = X.cols();
    GlmFit fit;
    fit.ridge = ridge;
    fit.beta = Eigen::VectorXd::Zero(p);
    double wsum = w.sum(), ybar = w.dot(y) / wsum;
    ybar = std::clamp(ybar, 1e-6, 1 - 1e-6);
    fit.beta[0] = std::log(ybar / (1 - ybar));
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, ridge);
    penalty[0] = 0.0;

    auto objective = [&](const Eigen::VectorXd& beta) {
        Eigen::VectorXd prob = expit_vec(X * beta);
        return weighted_nll(y, prob, w) + 0.5 * (penalty.array() * beta.array().square()).sum();
    };
    failed = false;
    double obj = objective(fit.beta);
    Eigen::MatrixXd H(p, p);
    for (int it = 0; it < kMaxIter; ++it) {
        fit.iterations = it + 1;
        Eigen::VectorXd prob = expit_vec(X * fit.beta);
        Eigen::VectorXd grad = X.transpose() * (w.array() * (y - prob).array()).matrix() -
                               (penalty.array() * fit.beta.array()).matrix();
        Eigen::VectorXd curv = (w.array() * prob.array() * (1.0 - prob.array())).matrix();
        H.noalias() = X.transpose() * (X.array().colwise() * curv.array()).matrix();
        H.diagonal() += penalty;
        if (grad.cwiseAbs().maxCoeff() < kScoreTol) {
            fit.converged = true;
            break;
        }
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success) {
            failed = true;
            break;
        }
        Eigen::VectorXd step = llt.solve(grad);
        if (!step.allFinite()) {
            failed = true;
            break;
        }
        double t = 1.0, next = obj;
        Eigen::VectorXd cand;
        for (int half = 0; half < 40; ++half) {
            cand = fit.beta + t * step;
            next = objective(cand);
            if (std::isfinite(next) && next <= obj + 1e-12 * std::abs(obj)) break;
            t *= 0.5;
        }
        fit.beta = cand;
        if (!fit.beta.allFinite() || fit.beta.cwiseAbs().maxCoeff() > kSeparationCoef) {
            failed = true;
            break;
        }
        bool stalled = (t * step).cwiseAbs().maxCoeff() < 1e-13 * (1.0 + fit.beta.cwiseAbs().maxCoeff());
        obj = next;
        if (stalled) {
            fit.converged = grad.cwiseAbs().maxCoeff() < 1e-6;
            break;
        }
    }
    if (!failed && ridge == 0.0) {
        // Saturated linear predictor: the unpenalized optimum is at infinity.
        Eigen::VectorXd eta = X * fit.beta;
        for (Eigen::Index i = 0; i < eta.size() && !failed; ++i)
            failed = w[i] > 0.0 && std::abs(eta[i]) > kSeparationEta;
    }
    if (!failed) {
        Eigen::VectorXd prob = expit_vec(X * fit.beta);
        Eigen::VectorXd curv = (w.array() * prob.array() * (1.0 - prob.array())).matrix();
        H.noalias() = X.transpose() * (X.array().colwise() * curv.array()).matrix();
        H.diagonal() += penalty;
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success) {
            failed = ridge == 0.0;
            fit.covariance = Eigen::MatrixXd::Constant(p, p, std::numeric_limits<double>::quiet_NaN());
        } else {
            fit.covariance = llt.solve(Eigen::MatrixXd::Identity(p, p));
        }
        fit.loss = weighted_nll(y, prob, w);
    }
    return fit;
}

std::unique_ptr<FittedModel> fit_basis_glm(const RegressionTask& task, std::vector<BasisFn> basis, double ridge,
                                           std::string id) {
    check_task(task);
    double c = 0.0;
    if (constant_outcome(task, c)) return std::make_unique<ConstantModel>(c, id);
    auto fit = irls_logistic(build_design(task.x, basis), task.y, task.w, ridge);
    return std::make_unique<BasisGlmModel>(std::move(basis), std::move(fit.beta), std::move(id));
}

}  // namespace

double weighted_nll(const Eigen::VectorXd& y, const Eigen::VectorXd& p, const Eigen::VectorXd& w) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (w[i] == 0.0) continue;
        double q = clamp_prob(p[i]);
        s -= w[i] * (y[i] * std::log(q) + (1.0 - y[i]) * std::log1p(-q));
    }
    return s;
}

RegressionTask make_task(Eigen::MatrixXd x, Eigen::VectorXd y) {
    RegressionTask t;
    t.w = Eigen::VectorXd::Ones(y.size());
    t.cluster.resize(static_cast<std::size_t>(y.size()));
    for (std::size_t i = 0; i < t.cluster.size(); ++i) t.cluster[i] = static_cast<int>(i);
    t.x = std::move(x);
    t.y = std::move(y);
    return t;
}

void check_task(const RegressionTask& task) {
    const auto n = task.y.size();
    if (task.x.rows() != n || task.w.size() != n)
        throw EstimationError("regression task: inconsistent row counts");
    if (!task.cluster.empty() && static_cast<Eigen::Index>(task.cluster.size()) != n)
        throw EstimationError("regression task: cluster map length mismatch");
    if (!task.groups.empty() && static_cast<Eigen::Index>(task.groups.size()) != task.x.cols())
        throw EstimationError("regression task: group map length mismatch");
    if (n == 0) throw EstimationError("regression task: no rows");
    if (!task.x.allFinite()) throw EstimationError("regression task: non-finite feature values");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(task.y[i] >= 0.0 && task.y[i] <= 1.0)) throw EstimationError("regression task: outcome outside [0,1]");
        if (!(task.w[i] >= 0.0) || !std::isfinite(task.w[i]))
            throw EstimationError("regression task: weights must be finite and non-negative");
    }
    if (task.w.sum() <= 0.0) throw EstimationError("regression task: all weights are zero");
}

GlmFit irls_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                     double ridge) {
    if (!design.allFinite()) throw EstimationError("glm: non-finite feature values");
    bool failed = false;
    GlmFit fit = irls_once(design, y, w, ridge, failed);
    if (failed && ridge == 0.0) fit = irls_once(design, y, w, kFallbackRidge, failed);
    if (failed || !fit.beta.allFinite()) {
        // Penalized refit still unstable: escalate the ridge until finite.
        double r = std::max(ridge, kFallbackRidge);
        for (int k = 0; k < 6 && (failed || !fit.beta.allFinite()); ++k) {
            r *= 10.0;
            fit = irls_once(design, y, w, r, failed);
        }
        if (!fit.beta.allFinite()) throw EstimationError("glm: IRLS failed to produce finite coefficients");
    }
    return fit;
}

std::unique_ptr<FittedModel> fit_mean(const RegressionTask& task) {
    check_task(task);
    return std::make_unique<ConstantModel>(task.w.dot(task.y) / task.w.sum(), "mean");
}

std::unique_ptr<FittedModel> fit_logistic_glm(const RegressionTask& task, double ridge) {
    return fit_basis_glm(task, linear_basis(task.x.cols()), ridge, "glm");
}

std::unique_ptr<FittedModel> fit_glm_interactions(const RegressionTask& task, double ridge) {
    auto basis = linear_basis(task.x.cols());
    for (Eigen::Index j = 0; j < task.x.cols(); ++j)
        for (Eigen::Index k = j + 1; k < task.x.cols(); ++k)
            if (group_of(task, j) != group_of(task, k))
                basis.push_back({BasisFn::Kind::Product, static_cast<int>(j), static_cast<int>(k), 0.0});
    return fit_basis_glm(task, std::move(basis), ridge, "glm_interactions");
}

std::unique_ptr<FittedModel> fit_hinge_spline(const RegressionTask& task, int max_terms) {
    check_task(task);
    if (task.rows() < 20) throw EstimationError("hinge_spline: needs at least 20 rows");
    double c = 0.0;
    if (constant_outcome(task, c)) return std::make_unique<ConstantModel>(c, "hinge_spline");

    auto basis = linear_basis(task.x.cols());
    Eigen::MatrixXd design = build_design(task.x, basis);
    GlmFit fit = irls_logistic(design, task.y, task.w);
    if (max_terms <= 0) return std::make_unique<BasisGlmModel>(std::move(basis), std::move(fit.beta), "hinge_spline");

    // Candidate hinges at interior deciles of each column.
    std::vector<BasisFn> candidates;
    const Eigen::Index n = task.x.rows();
    for (Eigen::Index j = 0; j < task.x.cols(); ++j) {
        std::vector<double> v(task.x.col(j).data(), task.x.col(j).data() + n);
        std::sort(v.begin(), v.end());
        std::vector<double> knots;
        for (int q = 1; q <= 9; ++q) {
            double t = v[static_cast<std::size_t>(std::floor(q / 10.0 * static_cast<double>(n - 1)))];
            if (t > v.front() && t < v.back() && (knots.empty() || t != knots.back())) knots.push_back(t);
        }
        for (double t : knots) {
            candidates.push_back({BasisFn::Kind::HingeUp, static_cast<int>(j), 0, t});
            candidates.push_back({BasisFn::Kind::HingeDown, static_cast<int>(j), 0, t});
        }
    }
    std::vector<Eigen::VectorXd> cand_cols;
    for (const auto& b : candidates) {
        Eigen::VectorXd col(n);
        for (Eigen::Index i = 0; i < n; ++i) col[i] = b.eval(task.x, i);
        cand_cols.push_back(std::move(col));
    }
    std::vector<bool> used(candidates.size(), false);

    for (int stage = 0; stage < max_terms; ++stage) {
        // Rank candidates by the score-test approximation of the loss drop.
        Eigen::VectorXd prob = expit_vec(design * fit.beta);
        Eigen::VectorXd resid = (task.w.array() * (task.y - prob).array()).matrix();
        Eigen::VectorXd curv = (task.w.array() * prob.array() * (1.0 - prob.array())).matrix();
        Eigen::MatrixXd H = design.transpose() * (design.array().colwise() * curv.array()).matrix();
        H.diagonal().tail(H.rows() - 1).array() += fit.ridge;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        int best = -1;
        double best_gain = 1e-9;
        for (std::size_t cidx = 0; cidx < candidates.size(); ++cidx) {
            if (used[cidx]) continue;
            const auto& col = cand_cols[cidx];
            double score = col.dot(resid);
            Eigen::VectorXd v = design.transpose() * (col.array() * curv.array()).matrix();
            double info = (col.array().square() * curv.array()).sum() - v.dot(ldlt.solve(v));
            if (!(info > 1e-10)) continue;
            double gain = 0.5 * score * score / info;
            if (gain > best_gain) {
                best_gain = gain;
                best = static_cast<int>(cidx);
            }
        }
        if (best < 0) break;
        auto trial_basis = basis;
        trial_basis.push_back(candidates[static_cast<std::size_t>(best)]);
        Eigen::MatrixXd trial_design(n, design.cols() + 1);
        trial_design << design, cand_cols[static_cast<std::size_t>(best)];
        GlmFit trial = irls_logistic(trial_design, task.y, task.w);
        used[static_cast<std::size_t>(best)] = true;
        if (!(trial.loss < fit.loss - 1e-9)) break;
        basis = std::move(trial_basis);
        design = std::move(trial_design);
        fit = std::move(trial);
    }
    return std::make_unique<BasisGlmModel>(std::move(basis), std::move(fit.beta), "hinge_spline");
}

int hinge_term_count(const FittedModel& model) {
    if (auto* m = dynamic_cast<const BasisGlmModel*>(&model)) return m->hinge_terms();
    return 0;
}

Eigen::VectorXd model_coefficients(const FittedModel& model) {
    if (auto* m = dynamic_cast<const BasisGlmModel*>(&model)) return m->beta();
    return {};
}

bool is_known_learner(const std::string& id) {
    return id == "mean" || id == "glm" || id == "glm_interactions" || id == "hinge_spline";
}

std::unique_ptr<FittedModel> fit_learner(const std::string& id, const RegressionTask& task) {
    if (id == "mean") return fit_mean(task);
    if (id == "glm") return fit_logistic_glm(task);
    if (id == "glm_interactions") return fit_glm_interactions(task);
    if (id == "hinge_spline") return fit_hinge_spline(task);
    throw ConfigError("unknown learner '" + id + "'");
}

}  // namespace cstrata
