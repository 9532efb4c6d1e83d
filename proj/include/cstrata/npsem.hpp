#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cstrata/data.hpp"
#include "cstrata/parallel.hpp"

namespace cstrata {

/// Probability clamp applied to every logistic output.
inline constexpr double kProbFloor = 1e-12;
inline constexpr double kProbCeil = 1.0 - 1e-12;

double expit(double eta);
double clamp_prob(double p);

/// One factor of a product term: a variable's value, or the indicator that a
/// categorical variable equals `level`.
struct TermFactor {
    int var = -1;
    int level = -1;
};

struct Term {
    std::vector<TermFactor> factors;
    double coef = 0.0;
    std::string label;
};

/// Structural equation for a binary node: logit P(node=1) = intercept +
/// sum(coef * term) + loading * U_cluster.
struct NodeEquation {
    std::string name;
    double intercept = 0.0;
    std::vector<Term> terms;
    double loading = 0.0;
};

enum class CovariateType { Binary, Categorical, Gaussian };

struct CovariateEquation {
    std::string name;
    CovariateType type = CovariateType::Binary;
    std::vector<double> probs;          // categorical level probabilities
    std::vector<std::string> levels;    // categorical level names
    double intercept = 0.0;             // binary logit / gaussian mean
    std::vector<Term> terms;
    double loading = 0.0;
    double sd = 1.0;                    // gaussian
    bool shared = false;                // one draw per cluster
};

/// Fixed node order of the structural model; covariates occupy their own
/// slots before (L0) and after (L1) the exposure block.
enum class Node { DeltaA = 0, A, DeltaY0, Y0, DeltaY1, Y1 };
inline constexpr std::size_t kNodeCount = 6;
const char* node_name(Node n);

struct ClusterSpec {
    std::size_t count = 1;
    std::size_t size_min = 1;
    std::size_t size_max = 1;
    std::size_t communities = 0;  // 0: no community column
};

/// Parametric NPSEM over one of the four scenario skeletons.
struct NpsemSpec {
    Scenario scenario = Scenario::S1;
    std::vector<CovariateEquation> l0;
    std::vector<CovariateEquation> l1;
    std::array<std::optional<NodeEquation>, kNodeCount> nodes;
    ClusterSpec cluster;

    /// Variable slots: l0..., delta_a, a, delta_y0, y0, l1..., delta_y1, y1.
    std::size_t n_vars() const { return l0.size() + l1.size() + kNodeCount; }
    int node_var(Node n) const;
    int l0_var(std::size_t j) const { return static_cast<int>(j); }
    int l1_var(std::size_t j) const { return static_cast<int>(l0.size() + 4 + j); }

    bool discrete_exact() const;
    bool all_loadings_zero() const;
    Schema schema() const;
};

NpsemSpec npsem_from_json(const std::string& text);
NpsemSpec load_npsem(const std::string& path);

/// Checks ordering, shapes and finiteness; throws ConfigError.
void check_spec(const NpsemSpec& spec);

enum class DeltaY1Rule { None, Static, Dynamic };

struct InterventionSpec {
    Scenario scenario = Scenario::S1;
    int a = 1;
    bool set_delta_a = false;
    bool set_delta_y0 = false;
    DeltaY1Rule delta_y1 = DeltaY1Rule::None;

    /// The scenario's intervention: ensure measurement, set A=a, and (S4)
    /// measure follow-up only among those at risk at baseline.
    static InterventionSpec standard(Scenario s, int a);
};

/// Counterfactual outcomes, one per draw.  For S4, y1 holds -1 when Y0*=1
/// (not at risk; the dynamic rule sets delta_y1 to 0).
struct CounterfactualDraws {
    std::vector<int> y0;
    std::vector<int> y1;
    std::vector<int> cluster;
};

Dataset sample_observed(const NpsemSpec& spec, std::uint64_t seed,
                        Execution exec = Execution::Parallel);

/// Coupled with sample_observed: identical (spec, seed) share every
/// exogenous draw, so records whose factual intervention nodes already equal
/// the intervened values reproduce their factual outcomes.
CounterfactualDraws sample_counterfactual(const NpsemSpec& spec, const InterventionSpec& intervention,
                                          std::size_t n_draws, std::uint64_t seed,
                                          Execution exec = Execution::Parallel);

enum class TruthMethod { Exact, MonteCarlo };

struct TruthLevel {
    int a = 1;
    double psi = 0.0;  // S4: the conditional P(Y1*=1 | Y0*=0)
    std::optional<double> numerator;
    std::optional<double> denominator;
    std::optional<double> mc_se;
};

struct TruthReport {
    Scenario scenario = Scenario::S1;
    TruthMethod method = TruthMethod::Exact;
    std::vector<TruthLevel> levels;

    const TruthLevel& at(int a) const;
};

TruthReport true_psi(const NpsemSpec& spec, const std::vector<int>& a_levels, TruthMethod method,
                     std::size_t n_draws = 1000000, std::uint64_t seed = 1);

/// The scenario's identifying functional evaluated by exact summation under
/// the observed-data distribution the spec implies.
TruthReport gformula_exact(const NpsemSpec& spec, const std::vector<int>& a_levels);

/// Marginal probability that an indicator node equals zero, by enumeration.
double exact_missing_rate(const NpsemSpec& spec, Node node);

std::string truth_to_json(const TruthReport& report, const TruthReport* gformula = nullptr);

}  // namespace cstrata
