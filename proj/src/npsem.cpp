#include "cstrata/npsem.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "cstrata/error.hpp"
#include "cstrata/rng.hpp"

namespace cstrata {

using nlohmann::json;

double expit(double eta) {
    if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
    double e = std::exp(eta);
    return e / (1.0 + e);
}

double clamp_prob(double p) { return std::clamp(p, kProbFloor, kProbCeil); }

const char* node_name(Node n) {
    switch (n) {
    case Node::DeltaA: return "delta_a";
    case Node::A: return "a";
    case Node::DeltaY0: return "delta_y0";
    case Node::Y0: return "y0";
    case Node::DeltaY1: return "delta_y1";
    case Node::Y1: return "y1";
    }
    return "?";
}

namespace {

constexpr std::array<Node, kNodeCount> kAllNodes = {Node::DeltaA, Node::A,       Node::DeltaY0,
                                                    Node::Y0,     Node::DeltaY1, Node::Y1};

bool node_in_scenario(Scenario s, Node n) {
    switch (n) {
    case Node::DeltaA: return s != Scenario::S1;
    case Node::A: return true;
    case Node::DeltaY0:
    case Node::Y0: return s == Scenario::S4;
    case Node::DeltaY1: return s == Scenario::S3 || s == Scenario::S4;
    case Node::Y1: return true;
    }
    return false;
}

double read_number(const json& j) {
    if (j.is_string()) {
        auto s = j.get<std::string>();
        if (s == "inf" || s == "+inf" || s == "Infinity") return std::numeric_limits<double>::infinity();
        if (s == "-inf" || s == "-Infinity") return -std::numeric_limits<double>::infinity();
        throw ConfigError("spec: expected number, found '" + s + "'");
    }
    return j.get<double>();
}

/// Name -> slot resolution, restricted to the variables preceding a node.
struct Resolver {
    const NpsemSpec& spec;

    struct Slot {
        int var;
        const CovariateEquation* cov;
    };

    std::optional<Slot> lookup(const std::string& name) const {
        for (std::size_t j = 0; j < spec.l0.size(); ++j)
            if (spec.l0[j].name == name) return Slot{spec.l0_var(j), &spec.l0[j]};
        for (std::size_t j = 0; j < spec.l1.size(); ++j)
            if (spec.l1[j].name == name) return Slot{spec.l1_var(j), &spec.l1[j]};
        for (auto n : kAllNodes)
            if (name == node_name(n) && node_in_scenario(spec.scenario, n))
                return Slot{spec.node_var(n), nullptr};
        return std::nullopt;
    }

    std::vector<Term> parse_terms(const json& coef, int self_var, const std::string& owner) const {
        std::vector<Term> terms;
        if (coef.is_null()) return terms;
        for (auto it = coef.begin(); it != coef.end(); ++it) {
            Term t;
            t.label = it.key();
            t.coef = read_number(it.value());
            std::stringstream ss(it.key());
            std::string factor;
            while (std::getline(ss, factor, '*')) {
                std::string name = factor, level;
                if (auto eq = factor.find('='); eq != std::string::npos) {
                    name = factor.substr(0, eq);
                    level = factor.substr(eq + 1);
                }
                auto slot = lookup(name);
                if (!slot) throw ConfigError("spec: " + owner + " references unknown variable '" + name + "'");
                if (slot->var >= self_var)
                    throw ConfigError("spec: " + owner + " has parent '" + name +
                                      "' that does not precede it in the node ordering");
                TermFactor f{slot->var, -1};
                if (!level.empty()) {
                    if (!slot->cov || slot->cov->type != CovariateType::Categorical)
                        throw ConfigError("spec: level indicator on non-categorical '" + name + "'");
                    auto& lv = slot->cov->levels;
                    auto pos = std::find(lv.begin(), lv.end(), level);
                    if (pos == lv.end()) throw ConfigError("spec: unknown level '" + level + "' of '" + name + "'");
                    f.level = static_cast<int>(pos - lv.begin());
                }
                t.factors.push_back(f);
            }
            terms.push_back(std::move(t));
        }
        return terms;
    }
};

CovariateEquation parse_covariate_head(const json& j) {
    CovariateEquation c;
    c.name = j.at("name").get<std::string>();
    std::string type = j.value("type", "binary");
    if (type == "binary") {
        c.type = CovariateType::Binary;
    } else if (type == "categorical") {
        c.type = CovariateType::Categorical;
        for (const auto& p : j.at("probs")) c.probs.push_back(read_number(p));
        if (j.contains("levels")) {
            c.levels = j["levels"].get<std::vector<std::string>>();
        } else {
            for (std::size_t k = 0; k < c.probs.size(); ++k) c.levels.push_back(std::to_string(k));
        }
    } else if (type == "gaussian") {
        c.type = CovariateType::Gaussian;
        c.sd = j.contains("sd") ? read_number(j["sd"]) : 1.0;
    } else {
        throw ConfigError("spec: unknown covariate type '" + type + "'");
    }
    if (j.contains("intercept")) c.intercept = read_number(j["intercept"]);
    if (j.contains("mean")) c.intercept = read_number(j["mean"]);
    if (j.contains("loading")) c.loading = read_number(j["loading"]);
    c.shared = j.value("shared", false);
    return c;
}

}  // namespace

int NpsemSpec::node_var(Node n) const {
    const int L0 = static_cast<int>(l0.size());
    const int L1 = static_cast<int>(l1.size());
    switch (n) {
    case Node::DeltaA: return L0;
    case Node::A: return L0 + 1;
    case Node::DeltaY0: return L0 + 2;
    case Node::Y0: return L0 + 3;
    case Node::DeltaY1: return L0 + 4 + L1;
    case Node::Y1: return L0 + 5 + L1;
    }
    return -1;
}

bool NpsemSpec::discrete_exact() const {
    auto discrete = [](const std::vector<CovariateEquation>& cs) {
        return std::all_of(cs.begin(), cs.end(),
                           [](const auto& c) { return c.type != CovariateType::Gaussian; });
    };
    return discrete(l0) && discrete(l1);
}

bool NpsemSpec::all_loadings_zero() const {
    for (const auto& c : l0)
        if (c.loading != 0.0) return false;
    for (const auto& c : l1)
        if (c.loading != 0.0) return false;
    for (const auto& n : nodes)
        if (n && n->loading != 0.0) return false;
    return true;
}

Schema NpsemSpec::schema() const {
    Schema s;
    auto decl = [](const CovariateEquation& c) {
        FeatureDecl d{c.name, FeatureKind::Numeric, {}};
        if (c.type == CovariateType::Categorical) {
            d.kind = FeatureKind::Categorical;
            d.levels = c.levels;
        }
        return d;
    };
    for (const auto& c : l0) s.l0.push_back(decl(c));
    if (has_l1(scenario))
        for (const auto& c : l1) s.l1.push_back(decl(c));
    return s;
}

void check_spec(const NpsemSpec& spec) {
    if (spec.cluster.count == 0) throw ConfigError("spec: cluster count must be positive");
    if (spec.cluster.size_min == 0 || spec.cluster.size_max < spec.cluster.size_min)
        throw ConfigError("spec: invalid cluster size range");
    if (!has_l1(spec.scenario) && !spec.l1.empty())
        throw ConfigError("spec: l1 covariates are only allowed in S3/S4");
    for (auto n : kAllNodes) {
        bool present = spec.nodes[static_cast<std::size_t>(n)].has_value();
        if (node_in_scenario(spec.scenario, n) && !present)
            throw ConfigError(std::string("spec: missing equation for node '") + node_name(n) + "'");
        if (!node_in_scenario(spec.scenario, n) && present)
            throw ConfigError(std::string("spec: node '") + node_name(n) + "' is not part of scenario " +
                              to_string(spec.scenario));
    }
    auto finite_terms = [](const std::vector<Term>& ts, const std::string& owner) {
        for (const auto& t : ts)
            if (!std::isfinite(t.coef)) throw ConfigError("spec: non-finite coefficient in " + owner);
    };
    auto check_cov = [&](const CovariateEquation& c, bool in_l1) {
        if (!std::isfinite(c.loading)) throw ConfigError("spec: non-finite loading in " + c.name);
        finite_terms(c.terms, c.name);
        if (c.type == CovariateType::Categorical) {
            if (c.probs.size() < 2 || c.levels.size() != c.probs.size())
                throw ConfigError("spec: categorical '" + c.name + "' needs matching probs and levels");
            double sum = 0;
            for (double p : c.probs) {
                if (!(p >= 0)) throw ConfigError("spec: negative probability in " + c.name);
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("spec: probabilities of '" + c.name + "' must sum to 1");
            if (!c.terms.empty()) throw ConfigError("spec: categorical '" + c.name + "' takes no parents");
        }
        if (c.type == CovariateType::Gaussian && !(c.sd > 0 && std::isfinite(c.sd)))
            throw ConfigError("spec: gaussian '" + c.name + "' needs sd > 0");
        if (c.type == CovariateType::Gaussian && !std::isfinite(c.intercept))
            throw ConfigError("spec: gaussian '" + c.name + "' needs a finite mean");
        if (c.shared) {
            if (in_l1) throw ConfigError("spec: shared covariates must be baseline (l0)");
            for (const auto& t : c.terms)
                for (const auto& f : t.factors)
                    if (f.var >= static_cast<int>(spec.l0.size()) ||
                        !spec.l0[static_cast<std::size_t>(f.var)].shared)
                        throw ConfigError("spec: shared covariate '" + c.name + "' may only depend on shared covariates");
        }
    };
    for (const auto& c : spec.l0) check_cov(c, false);
    for (const auto& c : spec.l1) check_cov(c, true);
    for (const auto& n : spec.nodes)
        if (n) {
            if (!std::isfinite(n->loading)) throw ConfigError("spec: non-finite loading in " + n->name);
            finite_terms(n->terms, n->name);
            if (std::isnan(n->intercept)) throw ConfigError("spec: NaN intercept in " + n->name);
        }
}

NpsemSpec npsem_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("spec: ") + e.what());
    }
    NpsemSpec spec;
    try {
        spec.scenario = parse_scenario(j.at("scenario").get<std::string>());
        if (j.contains("cluster")) {
            const auto& c = j["cluster"];
            spec.cluster.count = c.value("count", std::size_t{1});
            if (c.contains("size")) {
                spec.cluster.size_min = spec.cluster.size_max = c["size"].get<std::size_t>();
            } else {
                spec.cluster.size_min = c.value("size_min", std::size_t{1});
                spec.cluster.size_max = c.value("size_max", spec.cluster.size_min);
            }
            spec.cluster.communities = c.value("communities", std::size_t{0});
        }
        // Heads first so that term resolution can see every name.
        if (j.contains("l0"))
            for (const auto& c : j["l0"]) spec.l0.push_back(parse_covariate_head(c));
        if (j.contains("l1"))
            for (const auto& c : j["l1"]) spec.l1.push_back(parse_covariate_head(c));
        const json nodes = j.value("nodes", json::object());
        for (auto it = nodes.begin(); it != nodes.end(); ++it) {
            auto pos = std::find_if(kAllNodes.begin(), kAllNodes.end(),
                                    [&](Node n) { return it.key() == node_name(n); });
            if (pos == kAllNodes.end()) throw ConfigError("spec: unknown node '" + it.key() + "'");
            NodeEquation eq;
            eq.name = it.key();
            eq.intercept = it.value().contains("intercept") ? read_number(it.value()["intercept"]) : 0.0;
            eq.loading = it.value().contains("loading") ? read_number(it.value()["loading"]) : 0.0;
            spec.nodes[static_cast<std::size_t>(*pos)] = std::move(eq);
        }
        Resolver resolver{spec};
        auto cov_terms = [&](const json& arr, std::vector<CovariateEquation>& covs, bool l1) {
            for (std::size_t k = 0; k < covs.size(); ++k) {
                int self = l1 ? spec.l1_var(k) : spec.l0_var(k);
                covs[k].terms = resolver.parse_terms(arr[k].value("coef", json()), self, covs[k].name);
            }
        };
        if (j.contains("l0")) cov_terms(j["l0"], spec.l0, false);
        if (j.contains("l1")) cov_terms(j["l1"], spec.l1, true);
        for (auto n : kAllNodes) {
            auto& eq = spec.nodes[static_cast<std::size_t>(n)];
            if (!eq) continue;
            eq->terms = resolver.parse_terms(nodes.at(node_name(n)).value("coef", json()), spec.node_var(n),
                                             eq->name);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("spec: ") + e.what());
    }
    check_spec(spec);
    return spec;
}

NpsemSpec load_npsem(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open spec '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return npsem_from_json(ss.str());
}

InterventionSpec InterventionSpec::standard(Scenario s, int a) {
    InterventionSpec iv;
    iv.scenario = s;
    iv.a = a;
    iv.set_delta_a = s != Scenario::S1;
    iv.set_delta_y0 = s == Scenario::S4;
    iv.delta_y1 = s == Scenario::S3 ? DeltaY1Rule::Static
                  : s == Scenario::S4 ? DeltaY1Rule::Dynamic
                                      : DeltaY1Rule::None;
    return iv;
}

const TruthLevel& TruthReport::at(int a) const {
    for (const auto& l : levels)
        if (l.a == a) return l;
    throw ConfigError("truth report has no level a=" + std::to_string(a));
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

double term_value(const Term& t, const std::vector<double>& vals) {
    double v = t.coef;
    for (const auto& f : t.factors) {
        double x = vals[static_cast<std::size_t>(f.var)];
        v *= f.level < 0 ? x : (static_cast<int>(x) == f.level ? 1.0 : 0.0);
    }
    return v;
}

double linear_predictor(double intercept, const std::vector<Term>& terms, double loading, double u,
                        const std::vector<double>& vals) {
    double eta = intercept;
    for (const auto& t : terms) eta += term_value(t, vals);
    if (loading != 0.0) eta += loading * u;
    return eta;
}

void check_intervention(const NpsemSpec& spec, const InterventionSpec& iv) {
    if (iv.scenario != spec.scenario) throw ConfigError("intervention scenario does not match spec");
    if (iv.a != 0 && iv.a != 1) throw ConfigError("intervention level must be 0 or 1");
    if (iv.set_delta_a && spec.scenario == Scenario::S1)
        throw ConfigError("S1 has no exposure measurement node to intervene on");
    if (iv.set_delta_y0 && spec.scenario != Scenario::S4)
        throw ConfigError("only S4 has a baseline measurement node");
    if (iv.delta_y1 == DeltaY1Rule::Dynamic && spec.scenario != Scenario::S4)
        throw ConfigError("dynamic follow-up rule requires S4");
    if (iv.delta_y1 == DeltaY1Rule::Static && spec.scenario != Scenario::S3)
        throw ConfigError("static follow-up rule requires S3");
}

struct ClusterDraw {
    std::vector<ObservedRecord> records;
    std::vector<int> y0_star, y1_star;
};

std::size_t cluster_size(const NpsemSpec& spec, std::uint64_t seed, std::size_t m) {
    const auto& c = spec.cluster;
    if (c.size_max == c.size_min) return c.size_min;
    auto range = static_cast<std::uint64_t>(c.size_max - c.size_min + 1);
    return c.size_min + static_cast<std::size_t>(stream_seed(seed, m, 1) % range);
}

/// Evaluates one cluster.  Every member consumes the same exogenous draws
/// whether or not a node is intervened on.
ClusterDraw draw_cluster(const NpsemSpec& spec, std::uint64_t seed, std::size_t m, std::size_t size,
                         const InterventionSpec* iv) {
    Engine eng = make_stream(seed, m);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double u = normal(eng);
    const std::size_t L0 = spec.l0.size(), L1 = spec.l1.size();
    std::vector<double> vals(spec.n_vars(), 0.0);

    auto draw_cov = [&](const CovariateEquation& c, double noise_u, double noise_z) {
        switch (c.type) {
        case CovariateType::Binary:
            return noise_u < expit(linear_predictor(c.intercept, c.terms, c.loading, u, vals)) ? 1.0 : 0.0;
        case CovariateType::Gaussian:
            return linear_predictor(c.intercept, c.terms, c.loading, u, vals) + c.sd * noise_z;
        case CovariateType::Categorical: {
            double acc = 0.0;
            for (std::size_t k = 0; k + 1 < c.probs.size(); ++k) {
                acc += c.probs[k];
                if (noise_u < acc) return static_cast<double>(k);
            }
            return static_cast<double>(c.probs.size() - 1);
        }
        }
        return 0.0;
    };
    // Cluster-level covariates: one draw per cluster.
    std::vector<double> shared_vals(L0, 0.0);
    for (std::size_t j = 0; j < L0; ++j) {
        double nu = uniform01(eng), nz = normal(eng);
        if (spec.l0[j].shared) {
            shared_vals[j] = draw_cov(spec.l0[j], nu, nz);
            vals[j] = shared_vals[j];
        }
    }

    auto bern_node = [&](Node n, double noise) {
        const auto& eq = spec.nodes[static_cast<std::size_t>(n)];
        if (!eq) return 1;  // structurally fixed indicator
        return noise < expit(linear_predictor(eq->intercept, eq->terms, eq->loading, u, vals)) ? 1 : 0;
    };

    ClusterDraw out;
    out.records.reserve(size);
    const bool s4 = spec.scenario == Scenario::S4;
    for (std::size_t k = 0; k < size; ++k) {
        std::fill(vals.begin(), vals.end(), 0.0);
        ObservedRecord rec;
        for (std::size_t j = 0; j < L0; ++j) {
            double nu = uniform01(eng), nz = normal(eng);
            vals[j] = spec.l0[j].shared ? shared_vals[j] : draw_cov(spec.l0[j], nu, nz);
        }
        auto set = [&](Node n, int v) { vals[static_cast<std::size_t>(spec.node_var(n))] = v; };
        auto get = [&](Node n) { return static_cast<int>(vals[static_cast<std::size_t>(spec.node_var(n))]); };

        double n_da = uniform01(eng), n_a = uniform01(eng), n_dy0 = uniform01(eng), n_y0 = uniform01(eng);
        set(Node::DeltaA, iv && iv->set_delta_a ? 1 : bern_node(Node::DeltaA, n_da));
        set(Node::A, iv ? iv->a : bern_node(Node::A, n_a));
        if (s4) {
            set(Node::DeltaY0, iv && iv->set_delta_y0 ? 1 : bern_node(Node::DeltaY0, n_dy0));
            set(Node::Y0, bern_node(Node::Y0, n_y0));
        }
        for (std::size_t j = 0; j < L1; ++j) {
            double nu = uniform01(eng), nz = normal(eng);
            vals[L0 + 4 + j] = draw_cov(spec.l1[j], nu, nz);
        }
        double n_dy1 = uniform01(eng), n_y1 = uniform01(eng);
        int dy1 = bern_node(Node::DeltaY1, n_dy1);
        if (iv) {
            if (iv->delta_y1 == DeltaY1Rule::Static) dy1 = 1;
            if (iv->delta_y1 == DeltaY1Rule::Dynamic) dy1 = get(Node::Y0) == 0 ? 1 : 0;
        } else if (s4 && (get(Node::DeltaY0) == 0 || get(Node::Y0) == 1)) {
            dy1 = 0;
        }
        set(Node::DeltaY1, dy1);
        set(Node::Y1, bern_node(Node::Y1, n_y1));

        if (iv) {
            if (s4) {
                out.y0_star.push_back(get(Node::Y0));
                out.y1_star.push_back(get(Node::Y0) == 0 ? get(Node::Y1) : -1);
            } else {
                out.y1_star.push_back(get(Node::Y1));
            }
            continue;
        }
        for (std::size_t j = 0; j < L0; ++j) rec.l0.emplace_back(vals[j]);
        rec.delta_a = get(Node::DeltaA);
        if (rec.delta_a) rec.a = get(Node::A);
        if (s4) {
            rec.delta_y0 = get(Node::DeltaY0);
            if (*rec.delta_y0) rec.y0 = get(Node::Y0);
        }
        if (has_l1(spec.scenario))
            for (std::size_t j = 0; j < L1; ++j) rec.l1.emplace_back(vals[L0 + 4 + j]);
        rec.delta_y1 = get(Node::DeltaY1);
        if (rec.delta_y1) rec.y1 = get(Node::Y1);
        rec.cluster_id = "h" + std::to_string(m);
        out.records.push_back(std::move(rec));
    }
    return out;
}

std::vector<ClusterDraw> draw_clusters(const NpsemSpec& spec, std::uint64_t seed,
                                       const std::vector<std::size_t>& sizes, const InterventionSpec* iv,
                                       Execution exec) {
    std::vector<ClusterDraw> out(sizes.size());
    const auto M = static_cast<std::ptrdiff_t>(sizes.size());
    if (exec == Execution::Parallel) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t m = 0; m < M; ++m)
            out[static_cast<std::size_t>(m)] =
                draw_cluster(spec, seed, static_cast<std::size_t>(m), sizes[static_cast<std::size_t>(m)], iv);
    } else {
        for (std::ptrdiff_t m = 0; m < M; ++m)
            out[static_cast<std::size_t>(m)] =
                draw_cluster(spec, seed, static_cast<std::size_t>(m), sizes[static_cast<std::size_t>(m)], iv);
    }
    return out;
}

}  // namespace

Dataset sample_observed(const NpsemSpec& spec, std::uint64_t seed, Execution exec) {
    check_spec(spec);
    std::vector<std::size_t> sizes(spec.cluster.count);
    for (std::size_t m = 0; m < sizes.size(); ++m) sizes[m] = cluster_size(spec, seed, m);
    auto clusters = draw_clusters(spec, seed, sizes, nullptr, exec);

    std::vector<ObservedRecord> records;
    std::vector<std::string> community;
    for (std::size_t m = 0; m < clusters.size(); ++m)
        for (auto& r : clusters[m].records) {
            records.push_back(std::move(r));
            if (spec.cluster.communities > 0)
                community.push_back("c" + std::to_string(m % spec.cluster.communities));
        }
    Dataset ds(spec.scenario, spec.schema(), std::move(records));
    if (spec.cluster.communities > 0) ds.set_extra_columns({{"community_id", std::move(community)}});
    return ds;
}

CounterfactualDraws sample_counterfactual(const NpsemSpec& spec, const InterventionSpec& intervention,
                                          std::size_t n_draws, std::uint64_t seed, Execution exec) {
    check_spec(spec);
    check_intervention(spec, intervention);
    std::vector<std::size_t> sizes;
    std::size_t total = 0;
    for (std::size_t m = 0; total < n_draws; ++m) {
        sizes.push_back(std::min(cluster_size(spec, seed, m), n_draws - total));
        total += sizes.back();
    }
    auto clusters = draw_clusters(spec, seed, sizes, &intervention, exec);
    CounterfactualDraws out;
    out.y1.reserve(n_draws);
    for (std::size_t m = 0; m < clusters.size(); ++m) {
        auto& c = clusters[m];
        out.y0.insert(out.y0.end(), c.y0_star.begin(), c.y0_star.end());
        out.y1.insert(out.y1.end(), c.y1_star.begin(), c.y1_star.end());
        out.cluster.insert(out.cluster.end(), c.y1_star.size(), static_cast<int>(m));
    }
    return out;
}

}  // namespace cstrata
