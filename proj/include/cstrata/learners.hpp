#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cstrata/parallel.hpp"

namespace cstrata {

/// Design rows, outcome in [0,1], non-negative weights and a cluster key per
/// row.  `groups` ties expanded columns back to their source feature (dummy
/// columns of one categorical share a group); empty means one group per column.
struct RegressionTask {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    Eigen::VectorXd w;
    std::vector<int> cluster;
    std::vector<int> groups;

    std::size_t rows() const { return static_cast<std::size_t>(y.size()); }
};

/// Unit weights, one cluster per row.
RegressionTask make_task(Eigen::MatrixXd x, Eigen::VectorXd y);

/// Throws EstimationError on shape mismatch, non-finite features, outcomes
/// outside [0,1], negative or all-zero weights.
void check_task(const RegressionTask& task);

class FittedModel {
public:
    virtual ~FittedModel() = default;
    /// Probabilities clamped to [1e-12, 1 - 1e-12].
    virtual Eigen::VectorXd predict(const Eigen::MatrixXd& x) const = 0;
    virtual std::string learner() const = 0;
};

/// Weighted IRLS result on an explicit design (first column is the intercept).
struct GlmFit {
    Eigen::VectorXd beta;
    Eigen::MatrixXd covariance;  // inverse penalized information at beta
    double ridge = 0.0;          // penalty actually used
    double loss = 0.0;           // weighted negative log-likelihood
    int iterations = 0;
    bool converged = false;
};

/// Maximizes the weighted (ridge-penalized, intercept unpenalized) Bernoulli
/// log-likelihood.  Stops when max |score| < 1e-8 or after 100 iterations.
/// With ridge = 0, separation or singularity triggers a refit at ridge 1e-4.
GlmFit irls_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                     double ridge = 0.0);

/// Weighted negative log-likelihood of clamped probabilities.
double weighted_nll(const Eigen::VectorXd& y, const Eigen::VectorXd& p, const Eigen::VectorXd& w);

std::unique_ptr<FittedModel> fit_mean(const RegressionTask& task);
std::unique_ptr<FittedModel> fit_logistic_glm(const RegressionTask& task, double ridge = 0.0);
/// Main terms plus all pairwise products of columns from different groups.
std::unique_ptr<FittedModel> fit_glm_interactions(const RegressionTask& task, double ridge = 0.0);
/// Forward selection of hinge pairs max(x-t,0) / max(t-x,0), knots at deciles.
std::unique_ptr<FittedModel> fit_hinge_spline(const RegressionTask& task, int max_terms = 10);

/// Number of hinge terms a fitted hinge-spline model carries (0 for others).
int hinge_term_count(const FittedModel& model);
/// Coefficients (intercept first) of a GLM-family model; empty for others.
Eigen::VectorXd model_coefficients(const FittedModel& model);

/// Library identifiers: "mean", "glm", "glm_interactions", "hinge_spline".
bool is_known_learner(const std::string& id);
std::unique_ptr<FittedModel> fit_learner(const std::string& id, const RegressionTask& task);

/// Clusters sorted by key, shuffled by seed and dealt round-robin to V folds.
/// Throws ConfigError when V exceeds the number of distinct clusters.
std::vector<int> assign_folds(const std::vector<int>& cluster_keys, int folds, std::uint64_t seed);

enum class Loss { NegLogLik, Squared };

struct SuperLearnerConfig {
    int folds = 10;
    Loss loss = Loss::NegLogLik;
    std::vector<std::string> library{"mean", "glm", "hinge_spline"};
    std::uint64_t seed = 1;
    Execution exec = Execution::Parallel;
};

class EnsembleModel : public FittedModel {
public:
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const override;
    std::string learner() const override { return "superlearner"; }

    std::vector<std::string> ids;                  // surviving library members
    std::vector<std::unique_ptr<FittedModel>> fits; // null where weight is zero
    Eigen::VectorXd alpha;
    Eigen::VectorXd cv_risk;     // per member
    double ensemble_cv_risk = 0.0;
    Eigen::MatrixXd cv_predictions;  // rows x members
    std::vector<int> fold;           // per row
    int folds_used = 0;
    std::vector<std::string> warnings;
};

/// Convex weights minimizing the mean loss of Z alpha over the simplex.
/// Starts from the best vertex and never increases the loss.
Eigen::VectorXd simplex_weights(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                Loss loss);
double ensemble_risk(const Eigen::MatrixXd& z, const Eigen::VectorXd& alpha, const Eigen::VectorXd& y,
                     const Eigen::VectorXd& w, Loss loss);
/// Lawson-Hanson non-negative least squares.
Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b);
/// Euclidean projection onto the probability simplex.
Eigen::VectorXd project_simplex(const Eigen::VectorXd& v);

std::unique_ptr<EnsembleModel> superlearner_fit(const RegressionTask& task, const SuperLearnerConfig& config);

}  // namespace cstrata
