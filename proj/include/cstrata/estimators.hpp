#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cstrata/data.hpp"
#include "cstrata/learners.hpp"

namespace cstrata {

/// Feature names (bare, without the l0./l1. prefix) entering a regression.
struct AdjustmentSet {
    std::vector<std::string> l0;
    std::vector<std::string> l1;
};

struct ScenarioSpec {
    Scenario scenario = Scenario::S1;
    int a = 1;
    AdjustmentSet g_adjust;  // propensity and measurement models
    AdjustmentSet q_adjust;  // outcome regressions
    double g_lo = 0.01;
    double g_hi = 0.99;

    /// Adjusts every schema feature in both g and Q.
    static ScenarioSpec full(const Dataset& data, int a);
};

/// Throws ConfigError on bad bounds, unknown features or scenario mismatch.
void check_scenario_spec(const Dataset& data, const ScenarioSpec& spec);

struct Diagnostics {
    double g_min = 1.0;  // untruncated
    double g_max = 0.0;
    std::size_t truncated = 0;
    double eic_mean = 0.0;
    std::vector<double> component_means;  // per targeted level, innermost first
    std::vector<double> epsilon;          // fluctuation parameters, innermost first
};

struct EffectEstimate {
    std::string estimator;  // cc | ipw | gcomp | tmle
    std::string estimand;   // psi_a | numerator | denominator | conditional | rr | rd
    int a = -1;             // exposure level, -1 for contrasts
    double point = 0.0;
    Eigen::VectorXd ic;     // length N; empty for gcomp
    double se = 0.0;
    std::optional<std::pair<double, double>> ci;
    Diagnostics diagnostics;
    std::size_t n = 0;
    std::size_t m_clusters = 0;
};

/// All estimands an estimator produces for one exposure level.  Outside S4
/// there is one entry (psi_a); S4 yields numerator, denominator, conditional.
struct ArmResult {
    int a = 1;
    std::vector<EffectEstimate> parts;

    /// psi_a, or the conditional in S4.
    const EffectEstimate& target() const { return parts.back(); }
    const EffectEstimate& get(const std::string& estimand) const;
};

/// One fitted propensity or measurement factor.
struct GFactor {
    std::string name;
    std::vector<char> population;  // rows the factor is fit on
    std::vector<char> success;
    Eigen::VectorXd raw;        // untruncated prediction; NaN outside the population
    Eigen::VectorXd truncated;  // within (g_lo, g_hi), 1 where degenerate
    bool degenerate = false;    // indicator constant 1 in its population
    std::string learner_summary;
};

/// One sequential outcome regression, outermost first.
struct QFactor {
    std::string name;
    std::vector<char> population;
    Eigen::VectorXd initial;   // prediction on the population of the enclosing level
    Eigen::VectorXd outcome;   // pseudo-outcome on this factor's population
};

struct NuisanceEstimates {
    std::vector<GFactor> g;
    /// Per target (S4: numerator then denominator), outermost level first.
    std::vector<std::vector<QFactor>> q;
};

enum class NuisanceRole { G, Q, Both };

NuisanceEstimates fit_nuisances(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl,
                                NuisanceRole role);

ArmResult complete_case(const Dataset& data, const ScenarioSpec& spec);
ArmResult ipw(const Dataset& data, const ScenarioSpec& spec, bool glm_only = true,
              const SuperLearnerConfig& sl = {});
ArmResult gcomp(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl);
ArmResult tmle(const Dataset& data, const ScenarioSpec& spec, const SuperLearnerConfig& sl);

enum class Estimator { CC, IPW, GComp, TMLE };
Estimator parse_estimator(const std::string& id);
std::string to_string(Estimator e);

struct RrResult {
    Estimator estimator = Estimator::TMLE;
    ArmResult arm1;
    ArmResult arm0;
    EffectEstimate rr;
    EffectEstimate rd;
};

/// Runs the estimator at a=1 and a=0 on the same data (spec.a is ignored).
RrResult estimate_rr(const Dataset& data, const ScenarioSpec& spec, Estimator estimator,
                     const SuperLearnerConfig& sl, bool ipw_glm_only = true);

/// Clustered SE and 95% Wald CI filled in from the estimate's IC.
void attach_inference(EffectEstimate& est, const std::vector<int>& cluster);

/// SE treating every participant as its own cluster.
double iid_se(const Eigen::VectorXd& ic);

std::string estimate_to_json(const EffectEstimate& est);
std::string rr_to_json(const RrResult& result);

}  // namespace cstrata
