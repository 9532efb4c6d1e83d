#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace cstrata {

/// Per-participant influence-curve values with their dense cluster numbers.
struct InfluenceCurve {
    Eigen::VectorXd values;
    std::vector<int> cluster;  // 0..M-1
};

/// X_m = (M/N) sum of D over cluster m.
struct ClusterIc {
    Eigen::VectorXd values;
    std::size_t m() const { return static_cast<std::size_t>(values.size()); }
};

/// Throws DataError if a participant has no cluster or a cluster is empty.
ClusterIc aggregate_clusters(const InfluenceCurve& ic);

/// sd(X_m)/sqrt(M) with the (M-1) variance.  Requires M >= 2.
double ic_se(const ClusterIc& cluster_ic);

/// Clustered SE of an influence curve (aggregate then ic_se).
double clustered_se(const InfluenceCurve& ic);

/// Point estimate together with its influence curve.
struct Linearized {
    double point = 0.0;
    Eigen::VectorXd ic;
};

Linearized delta_method_ratio(const Linearized& num, const Linearized& den);
Linearized delta_method_log(const Linearized& est);

/// Standard normal quantile, |error| < 1e-9 on (0,1).
double normal_quantile(double p);

/// point -/+ z_{(1+level)/2} se.
std::pair<double, double> wald_ci(double point, double se, double level = 0.95);

}  // namespace cstrata
