#include "cstrata/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cstrata/error.hpp"

namespace cstrata {

ClusterIc aggregate_clusters(const InfluenceCurve& ic) {
    const auto n = ic.values.size();
    if (static_cast<std::size_t>(n) != ic.cluster.size())
        throw DataError("influence curve has " + std::to_string(n) + " values but " +
                        std::to_string(ic.cluster.size()) + " cluster labels");
    int m = 0;
    for (int c : ic.cluster) {
        if (c < 0) throw DataError("participant without a cluster");
        m = std::max(m, c + 1);
    }
    ClusterIc out;
    out.values = Eigen::VectorXd::Zero(m);
    std::vector<int> seen(static_cast<std::size_t>(m), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!std::isfinite(ic.values[i])) throw DataError("non-finite influence-curve value at row " + std::to_string(i));
        out.values[ic.cluster[static_cast<std::size_t>(i)]] += ic.values[i];
        seen[static_cast<std::size_t>(ic.cluster[static_cast<std::size_t>(i)])] = 1;
    }
    for (int c = 0; c < m; ++c)
        if (!seen[static_cast<std::size_t>(c)]) throw DataError("cluster " + std::to_string(c) + " has no participants");
    if (n > 0) out.values *= static_cast<double>(m) / static_cast<double>(n);
    return out;
}

double ic_se(const ClusterIc& cluster_ic) {
    const auto m = cluster_ic.values.size();
    if (m < 2) throw EstimationError("standard error needs at least 2 clusters, got " + std::to_string(m));
    double mean = cluster_ic.values.mean();
    double ss = (cluster_ic.values.array() - mean).square().sum();
    return std::sqrt(ss / static_cast<double>(m - 1)) / std::sqrt(static_cast<double>(m));
}

double clustered_se(const InfluenceCurve& ic) { return ic_se(aggregate_clusters(ic)); }

Linearized delta_method_ratio(const Linearized& num, const Linearized& den) {
    if (den.point == 0.0) throw EstimationError("ratio with zero denominator");
    if (num.ic.size() != den.ic.size()) throw EstimationError("ratio of influence curves with different lengths");
    Linearized out;
    out.point = num.point / den.point;
    out.ic = (num.ic - out.point * den.ic) / den.point;
    return out;
}

Linearized delta_method_log(const Linearized& est) {
    if (!(est.point > 0.0)) throw EstimationError("log of nonpositive estimate " + std::to_string(est.point));
    return {std::log(est.point), est.ic / est.point};
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("normal quantile needs p in (0,1)");
    // Acklam's rational approximation.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double lo = 0.02425;
    double x;
    if (p < lo) {
        double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= 1 - lo) {
        double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        double q = std::sqrt(-2 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    // Two Halley steps against the exact CDF.
    for (int k = 0; k < 2; ++k) {
        double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
        double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
        x -= u / (1 + x * u / 2);
    }
    return x;
}

std::pair<double, double> wald_ci(double point, double se, double level) {
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("confidence level must lie in (0,1)");
    if (!(se >= 0.0)) throw EstimationError("negative or undefined standard error");
    double z = normal_quantile(0.5 * (1.0 + level));
    return {point - z * se, point + z * se};
}

}  // namespace cstrata
