// Exact enumeration over discrete NPSEMs: counterfactual truth on one route,
// the identifying functional of the observed-data law on the other.

#include <cmath>
#include <functional>
#include <map>

#include <Eigen/Dense>
#include <json.hpp>

#include "cstrata/error.hpp"
#include "cstrata/npsem.hpp"

namespace cstrata {

namespace {

struct QuadPoint {
    double u;
    double w;
};

/// Gauss-Hermite rule for a standard normal latent (Golub-Welsch).
std::vector<QuadPoint> gauss_hermite_normal(int n) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    std::vector<QuadPoint> pts;
    for (int k = 0; k < n; ++k) {
        double v0 = es.eigenvectors()(0, k);
        pts.push_back({std::sqrt(2.0) * es.eigenvalues()(k), v0 * v0});
    }
    return pts;
}

std::vector<QuadPoint> latent_rule(const NpsemSpec& spec) {
    if (spec.all_loadings_zero()) return {{0.0, 1.0}};
    return gauss_hermite_normal(9);
}

double term_value(const Term& t, const std::vector<double>& vals) {
    double v = t.coef;
    for (const auto& f : t.factors) {
        double x = vals[static_cast<std::size_t>(f.var)];
        v *= f.level < 0 ? x : (static_cast<int>(x) == f.level ? 1.0 : 0.0);
    }
    return v;
}

double prob_one(double intercept, const std::vector<Term>& terms, double loading, double u,
                const std::vector<double>& vals) {
    double eta = intercept + loading * u;
    for (const auto& t : terms) eta += term_value(t, vals);
    return clamp_prob(expit(eta));
}

using Visitor = std::function<void(const std::vector<double>&, double)>;

/// Walks every joint configuration of the (possibly intervened) world.
class Enumerator {
public:
    Enumerator(const NpsemSpec& spec, const InterventionSpec* iv) : spec_(spec), iv_(iv) {
        if (!spec.discrete_exact()) throw ConfigError("exact enumeration requires a discrete spec");
        check_spec(spec);
        const std::size_t L0 = spec.l0.size();
        for (std::size_t j = 0; j < L0; ++j) slots_.push_back({Kind::L0, j});
        for (auto n : {Node::DeltaA, Node::A, Node::DeltaY0, Node::Y0})
            slots_.push_back({Kind::Node, static_cast<std::size_t>(n)});
        for (std::size_t j = 0; j < spec.l1.size(); ++j) slots_.push_back({Kind::L1, j});
        for (auto n : {Node::DeltaY1, Node::Y1}) slots_.push_back({Kind::Node, static_cast<std::size_t>(n)});
    }

    void run(const Visitor& visit) {
        std::vector<double> vals(spec_.n_vars(), 0.0);
        for (const auto& q : latent_rule(spec_)) {
            u_ = q.u;
            recurse(0, q.w, vals, visit);
        }
    }

private:
    enum class Kind { L0, L1, Node };
    struct Slot {
        Kind kind;
        std::size_t idx;
    };

    void branch(std::size_t k, double p, std::vector<double>& vals, const Visitor& visit, double value) {
        if (p <= 0.0) return;
        vals[k] = value;
        recurse(k + 1, p, vals, visit);
    }

    void recurse(std::size_t k, double p, std::vector<double>& vals, const Visitor& visit) {
        if (k == slots_.size()) {
            visit(vals, p);
            return;
        }
        const Slot& s = slots_[k];
        if (s.kind != Kind::Node) {
            const auto& c = s.kind == Kind::L0 ? spec_.l0[s.idx] : spec_.l1[s.idx];
            if (c.type == CovariateType::Categorical) {
                for (std::size_t lv = 0; lv < c.probs.size(); ++lv)
                    branch(k, p * c.probs[lv], vals, visit, static_cast<double>(lv));
            } else {
                double p1 = prob_one(c.intercept, c.terms, c.loading, u_, vals);
                branch(k, p * p1, vals, visit, 1.0);
                branch(k, p * (1.0 - p1), vals, visit, 0.0);
            }
            return;
        }
        const Node n = static_cast<Node>(s.idx);
        auto fixed = [&](double v) { branch(k, p, vals, visit, v); };
        const auto& eq = spec_.nodes[s.idx];
        if (!eq) return fixed(n == Node::Y0 ? 0.0 : 1.0);
        const bool s4 = spec_.scenario == Scenario::S4;
        auto val = [&](Node m) { return vals[static_cast<std::size_t>(spec_.node_var(m))]; };
        if (iv_) {
            if (n == Node::DeltaA && iv_->set_delta_a) return fixed(1.0);
            if (n == Node::A) return fixed(iv_->a);
            if (n == Node::DeltaY0 && iv_->set_delta_y0) return fixed(1.0);
            if (n == Node::DeltaY1 && iv_->delta_y1 == DeltaY1Rule::Static) return fixed(1.0);
            if (n == Node::DeltaY1 && iv_->delta_y1 == DeltaY1Rule::Dynamic) return fixed(val(Node::Y0) == 0 ? 1.0 : 0.0);
        } else if (n == Node::DeltaY1 && s4 && (val(Node::DeltaY0) == 0 || val(Node::Y0) == 1)) {
            return fixed(0.0);
        }
        double p1 = prob_one(eq->intercept, eq->terms, eq->loading, u_, vals);
        branch(k, p * p1, vals, visit, 1.0);
        branch(k, p * (1.0 - p1), vals, visit, 0.0);
    }

    const NpsemSpec& spec_;
    const InterventionSpec* iv_;
    std::vector<Slot> slots_;
    double u_ = 0.0;
};

/// Observed-data atom: NA coded as -1.
struct Atom {
    std::vector<double> l0, l1;
    int da = 1, a = -1, dy0 = -1, y0 = -1, dy1 = 1, y1 = -1;
    double p = 0.0;
};

std::vector<Atom> observed_law(const NpsemSpec& spec) {
    Enumerator en(spec, nullptr);
    const std::size_t L0 = spec.l0.size(), L1 = spec.l1.size();
    const bool s4 = spec.scenario == Scenario::S4;
    std::map<std::vector<double>, double> law;
    en.run([&](const std::vector<double>& v, double p) {
        auto get = [&](Node n) { return static_cast<int>(v[static_cast<std::size_t>(spec.node_var(n))]); };
        std::vector<double> key(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(L0));
        int da = get(Node::DeltaA), dy1 = get(Node::DeltaY1);
        key.push_back(da);
        key.push_back(da ? get(Node::A) : -1);
        int dy0 = s4 ? get(Node::DeltaY0) : -1;
        key.push_back(dy0);
        key.push_back(dy0 == 1 ? get(Node::Y0) : -1);
        for (std::size_t j = 0; j < L1; ++j) key.push_back(v[L0 + 4 + j]);
        key.push_back(dy1);
        key.push_back(dy1 ? get(Node::Y1) : -1);
        law[key] += p;
    });
    std::vector<Atom> atoms;
    for (const auto& [key, p] : law) {
        Atom at;
        at.l0.assign(key.begin(), key.begin() + static_cast<std::ptrdiff_t>(L0));
        std::size_t k = L0;
        at.da = static_cast<int>(key[k++]);
        at.a = static_cast<int>(key[k++]);
        at.dy0 = static_cast<int>(key[k++]);
        at.y0 = static_cast<int>(key[k++]);
        for (std::size_t j = 0; j < L1; ++j) at.l1.push_back(key[k++]);
        at.dy1 = static_cast<int>(key[k++]);
        at.y1 = static_cast<int>(key[k++]);
        at.p = p;
        atoms.push_back(std::move(at));
    }
    return atoms;
}

using AtomFilter = std::function<bool(const Atom&)>;
using AtomValue = std::function<double(const Atom&)>;

/// E[value | filter, key(atom) = key(ref)] under the atom law.
double cond_mean(const std::vector<const Atom*>& atoms, const AtomFilter& filter, const AtomValue& value) {
    double num = 0.0, den = 0.0;
    for (const auto* at : atoms)
        if (filter(*at)) {
            num += at->p * value(*at);
            den += at->p;
        }
    if (den <= 0.0) throw EstimationError("g-formula conditions on a zero-probability stratum");
    return num / den;
}

template <class KeyFn>
std::map<std::vector<double>, std::vector<const Atom*>> group_by(const std::vector<const Atom*>& atoms, KeyFn key) {
    std::map<std::vector<double>, std::vector<const Atom*>> out;
    for (const auto* at : atoms) out[key(*at)].push_back(at);
    return out;
}

struct GFormulaValue {
    double psi;
    std::optional<double> numerator, denominator;
};

GFormulaValue gformula_level(const NpsemSpec& spec, const std::vector<Atom>& law, int a) {
    std::vector<const Atom*> all;
    for (const auto& at : law) all.push_back(&at);
    auto strata = group_by(all, [](const Atom& at) { return at.l0; });
    auto mass = [](const std::vector<const Atom*>& g) {
        double s = 0.0;
        for (const auto* at : g) s += at->p;
        return s;
    };
    auto exposed = [a](const Atom& at) { return at.da == 1 && at.a == a; };

    switch (spec.scenario) {
    case Scenario::S1:
    case Scenario::S2: {
        double psi = 0.0;
        for (const auto& [l0, g] : strata)
            psi += mass(g) * cond_mean(g, exposed, [](const Atom& at) { return at.y1; });
        return {psi, {}, {}};
    }
    case Scenario::S3: {
        double psi = 0.0;
        for (const auto& [l0, g] : strata) {
            std::vector<const Atom*> ex;
            for (const auto* at : g)
                if (exposed(*at)) ex.push_back(at);
            double outer = 0.0, ex_mass = mass(ex);
            if (ex_mass <= 0.0) throw EstimationError("g-formula conditions on a zero-probability stratum");
            for (const auto& [l1, h] : group_by(ex, [](const Atom& at) { return at.l1; })) {
                double inner = cond_mean(h, [](const Atom& at) { return at.dy1 == 1; },
                                         [](const Atom& at) { return at.y1; });
                outer += mass(h) / ex_mass * inner;
            }
            psi += mass(g) * outer;
        }
        return {psi, {}, {}};
    }
    case Scenario::S4: {
        double num = 0.0, ey0 = 0.0;
        for (const auto& [l0, g] : strata) {
            std::vector<const Atom*> base;
            for (const auto* at : g)
                if (exposed(*at) && at->dy0 == 1) base.push_back(at);
            double base_mass = mass(base);
            if (base_mass <= 0.0) throw EstimationError("g-formula conditions on a zero-probability stratum");
            ey0 += mass(g) * cond_mean(base, [](const Atom&) { return true; },
                                       [](const Atom& at) { return at.y0; });
            // E[ I(Y0=0) E(Y1 | dY1=1, L1, Y0=0, ...) | dY0=1, A=a, dA=1, L0 ]
            double middle = 0.0;
            for (const auto& [hist, h] : group_by(base, [](const Atom& at) {
                     auto k = at.l1;
                     k.push_back(at.y0);
                     return k;
                 })) {
                if (h.front()->y0 != 0) continue;
                double inner = cond_mean(h, [](const Atom& at) { return at.dy1 == 1; },
                                         [](const Atom& at) { return at.y1; });
                middle += mass(h) / base_mass * inner;
            }
            num += mass(g) * middle;
        }
        double den = 1.0 - ey0;
        return {num / den, num, den};
    }
    }
    return {0.0, {}, {}};
}

}  // namespace

TruthReport true_psi(const NpsemSpec& spec, const std::vector<int>& a_levels, TruthMethod method,
                     std::size_t n_draws, std::uint64_t seed) {
    check_spec(spec);
    TruthReport rep;
    rep.scenario = spec.scenario;
    rep.method = method;
    const bool s4 = spec.scenario == Scenario::S4;
    for (int a : a_levels) {
        auto iv = InterventionSpec::standard(spec.scenario, a);
        TruthLevel lvl;
        lvl.a = a;
        if (method == TruthMethod::Exact) {
            if (!spec.discrete_exact())
                throw ConfigError("exact truth requested on a spec with continuous covariates");
            double py1 = 0.0, joint = 0.0, at_risk = 0.0;
            Enumerator en(spec, &iv);
            en.run([&](const std::vector<double>& v, double p) {
                int y0 = static_cast<int>(v[static_cast<std::size_t>(spec.node_var(Node::Y0))]);
                int y1 = static_cast<int>(v[static_cast<std::size_t>(spec.node_var(Node::Y1))]);
                py1 += p * y1;
                if (y0 == 0) {
                    at_risk += p;
                    joint += p * y1;
                }
            });
            if (s4) {
                lvl.numerator = joint;
                lvl.denominator = at_risk;
                lvl.psi = joint / at_risk;
            } else {
                lvl.psi = py1;
            }
        } else {
            if (n_draws == 0) throw ConfigError("monte carlo truth needs n_draws > 0");
            // Distinct stream per exposure level so the two arms are not coupled.
            auto draws = sample_counterfactual(spec, iv, n_draws, seed + static_cast<std::uint64_t>(a) * 7919u);
            const double n = static_cast<double>(n_draws);
            if (s4) {
                double joint = 0, at_risk = 0;
                for (std::size_t i = 0; i < draws.y0.size(); ++i)
                    if (draws.y0[i] == 0) {
                        at_risk += 1;
                        joint += draws.y1[i];
                    }
                lvl.numerator = joint / n;
                lvl.denominator = at_risk / n;
                lvl.psi = at_risk > 0 ? joint / at_risk : 0.0;
                lvl.mc_se = at_risk > 0 ? std::sqrt(lvl.psi * (1 - lvl.psi) / at_risk) : 0.0;
            } else {
                double s = 0;
                for (int y : draws.y1) s += y;
                lvl.psi = s / n;
                lvl.mc_se = std::sqrt(lvl.psi * (1 - lvl.psi) / n);
            }
        }
        rep.levels.push_back(lvl);
    }
    return rep;
}

TruthReport gformula_exact(const NpsemSpec& spec, const std::vector<int>& a_levels) {
    if (!spec.discrete_exact()) throw ConfigError("g-formula evaluation requires a discrete spec");
    auto law = observed_law(spec);
    TruthReport rep;
    rep.scenario = spec.scenario;
    rep.method = TruthMethod::Exact;
    for (int a : a_levels) {
        auto v = gformula_level(spec, law, a);
        rep.levels.push_back({a, v.psi, v.numerator, v.denominator, std::nullopt});
    }
    return rep;
}

double exact_missing_rate(const NpsemSpec& spec, Node node) {
    Enumerator en(spec, nullptr);
    double p0 = 0.0;
    const auto var = static_cast<std::size_t>(spec.node_var(node));
    en.run([&](const std::vector<double>& v, double p) {
        if (v[var] == 0.0) p0 += p;
    });
    return p0;
}

std::string truth_to_json(const TruthReport& report, const TruthReport* gformula) {
    using nlohmann::json;
    json j;
    j["scenario"] = to_string(report.scenario);
    j["method"] = report.method == TruthMethod::Exact ? "exact" : "monte_carlo";
    json levels = json::array();
    for (const auto& l : report.levels) {
        json e{{"a", l.a}, {"psi", l.psi}};
        if (l.numerator) e["numerator"] = *l.numerator;
        if (l.denominator) e["denominator"] = *l.denominator;
        if (l.numerator) e["conditional"] = l.psi;
        if (l.mc_se) e["mc_se"] = *l.mc_se;
        if (gformula) {
            const auto& g = gformula->at(l.a);
            e["gformula"] = g.psi;
            e["identification_gap"] = g.psi - l.psi;
        }
        levels.push_back(e);
    }
    j["levels"] = levels;
    bool has0 = false, has1 = false;
    for (const auto& l : report.levels) {
        has0 |= l.a == 0;
        has1 |= l.a == 1;
    }
    if (has0 && has1) {
        double p0 = report.at(0).psi, p1 = report.at(1).psi;
        j["rr"] = p0 > 0 ? json(p1 / p0) : json(nullptr);
        j["rd"] = p1 - p0;
        if (gformula) {
            double g0 = gformula->at(0).psi, g1 = gformula->at(1).psi;
            j["gformula_rr"] = g0 > 0 ? json(g1 / g0) : json(nullptr);
        }
    }
    return j.dump(2);
}

}  // namespace cstrata
