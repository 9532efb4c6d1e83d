#include "cstrata/data.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "cstrata/error.hpp"

namespace cstrata {

namespace {

constexpr std::string_view kNA = "NA";

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.emplace_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.emplace_back(trim(cur));
    return out;
}

std::string quote_if_needed(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q.push_back('"');
        q.push_back(c);
    }
    q.push_back('"');
    return q;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

[[noreturn]] void cell_error(std::size_t row, const std::string& col, std::string_view cell,
                             std::string_view what) {
    std::ostringstream os;
    os << "row " << row << ", column '" << col << "': " << what << " ('" << cell << "')";
    throw DataError(os.str());
}

int parse_indicator(std::string_view cell, std::size_t row, const std::string& col) {
    if (cell == "0") return 0;
    if (cell == "1") return 1;
    cell_error(row, col, cell, "expected indicator 0 or 1");
}

Binary parse_binary(std::string_view cell, std::size_t row, const std::string& col) {
    if (cell == kNA) return std::nullopt;
    return parse_indicator(cell, row, col);
}

Value parse_value(std::string_view cell, const FeatureDecl& decl, std::size_t row,
                  const std::string& col) {
    if (cell == kNA) return std::nullopt;
    if (decl.kind == FeatureKind::Categorical) {
        int idx = decl.level_index(cell);
        if (idx < 0) cell_error(row, col, cell, "unknown categorical level");
        return static_cast<double>(idx);
    }
    double v = 0.0;
    auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        cell_error(row, col, cell, "unparseable number");
    return v;
}

std::string format_value(const Value& v, const FeatureDecl& decl) {
    if (!v) return std::string(kNA);
    if (decl.kind == FeatureKind::Categorical) {
        auto idx = static_cast<std::size_t>(*v);
        return idx < decl.levels.size() ? decl.levels[idx] : format_double(*v);
    }
    return format_double(*v);
}

std::string format_binary(const Binary& b) { return b ? std::to_string(*b) : std::string(kNA); }

}  // namespace

Scenario parse_scenario(std::string_view tag) {
    if (tag == "S1" || tag == "s1" || tag == "1") return Scenario::S1;
    if (tag == "S2" || tag == "s2" || tag == "2") return Scenario::S2;
    if (tag == "S3" || tag == "s3" || tag == "3") return Scenario::S3;
    if (tag == "S4" || tag == "s4" || tag == "4") return Scenario::S4;
    throw ConfigError("unknown scenario tag '" + std::string(tag) + "'");
}

std::string to_string(Scenario s) {
    switch (s) {
    case Scenario::S1: return "S1";
    case Scenario::S2: return "S2";
    case Scenario::S3: return "S3";
    case Scenario::S4: return "S4";
    }
    return "?";
}

int FeatureDecl::level_index(std::string_view level) const {
    for (std::size_t i = 0; i < levels.size(); ++i)
        if (levels[i] == level) return static_cast<int>(i);
    return -1;
}

int Schema::find_l0(std::string_view name) const {
    for (std::size_t i = 0; i < l0.size(); ++i)
        if (l0[i].name == name) return static_cast<int>(i);
    return -1;
}

int Schema::find_l1(std::string_view name) const {
    for (std::size_t i = 0; i < l1.size(); ++i)
        if (l1[i].name == name) return static_cast<int>(i);
    return -1;
}

Dataset::Dataset(Scenario scenario, Schema schema, std::vector<ObservedRecord> records)
    : scenario_(scenario), schema_(std::move(schema)), records_(std::move(records)) {
    build_index();
}

void Dataset::build_index() {
    cluster_of_.assign(records_.size(), -1);
    cluster_ids_.clear();
    members_.clear();
    std::unordered_map<std::string, int> lookup;
    for (std::size_t i = 0; i < records_.size(); ++i) {
        auto [it, inserted] =
            lookup.try_emplace(records_[i].cluster_id, static_cast<int>(cluster_ids_.size()));
        if (inserted) {
            cluster_ids_.push_back(records_[i].cluster_id);
            members_.emplace_back();
        }
        cluster_of_[i] = it->second;
        members_[static_cast<std::size_t>(it->second)].push_back(i);
    }
}

std::map<std::string, std::vector<std::size_t>> Dataset::cluster_index() const {
    std::map<std::string, std::vector<std::size_t>> out;
    for (std::size_t m = 0; m < cluster_ids_.size(); ++m) out[cluster_ids_[m]] = members_[m];
    return out;
}

void Dataset::set_extra_columns(std::vector<ExtraColumn> extras) {
    for (const auto& e : extras)
        if (e.values.size() != records_.size())
            throw DataError("extra column '" + e.name + "' has wrong length");
    extras_ = std::move(extras);
}

Dataset Dataset::with_clusters(const std::vector<std::string>& ids) const {
    if (ids.size() != records_.size()) throw DataError("cluster id vector has wrong length");
    auto recs = records_;
    for (std::size_t i = 0; i < recs.size(); ++i) recs[i].cluster_id = ids[i];
    Dataset out(scenario_, schema_, std::move(recs));
    out.extras_ = extras_;
    return out;
}

bool ValidationReport::pass() const { return total() == 0; }

std::size_t ValidationReport::total() const {
    std::size_t t = 0;
    for (const auto& r : rules) t += r.count;
    return t;
}

std::string ValidationReport::summary() const {
    std::ostringstream os;
    for (const auto& r : rules) {
        if (r.count == 0) continue;
        os << r.name << ": " << r.count << " (rows";
        for (auto row : r.first_rows) os << ' ' << row;
        os << ")\n";
    }
    return os.str();
}

ValidationReport validate(const Dataset& dataset) {
    const Scenario sc = dataset.scenario();
    const Schema& schema = dataset.schema();
    ValidationReport report;
    auto add_rule = [&](std::string name) {
        report.rules.push_back({std::move(name), 0, {}});
        return report.rules.size() - 1;
    };
    const auto r_a_na = add_rule("delta_a=0 requires a=NA");
    const auto r_a_obs = add_rule("delta_a=1 requires a in {0,1}");
    const auto r_y1_na = add_rule("delta_y1=0 requires y1=NA");
    const auto r_y1_obs = add_rule("delta_y1=1 requires y1 in {0,1}");
    const auto r_y0_na = add_rule("delta_y0=0 requires y0=NA");
    const auto r_y0_obs = add_rule("delta_y0=1 requires y0 in {0,1}");
    const auto r_follow = add_rule("delta_y1=1 requires delta_y0=1 and y0=0");
    const auto r_absent = add_rule("field must be absent for scenario");
    const auto r_present = add_rule("field required for scenario");
    const auto r_forced = add_rule("indicator must be 1 for scenario");
    const auto r_l0 = add_rule("l0 covariate missing or out of range");
    const auto r_l1 = add_rule("l1 covariate out of range");
    const auto r_width = add_rule("record width does not match schema");
    const auto r_cluster = add_rule("empty cluster id");

    auto flag = [&](std::size_t rule, std::size_t row) {
        auto& r = report.rules[rule];
        ++r.count;
        if (r.first_rows.size() < 5) r.first_rows.push_back(row);
    };
    auto in_range = [](const Value& v, const FeatureDecl& d) {
        if (!v) return false;
        if (d.kind == FeatureKind::Categorical) {
            double x = *v;
            return x >= 0 && x < static_cast<double>(d.levels.size()) && x == static_cast<int>(x);
        }
        return std::isfinite(*v);
    };

    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& r = dataset[i];
        if (r.delta_a == 0 && r.a) flag(r_a_na, i);
        if (r.delta_a == 1 && (!r.a || (*r.a != 0 && *r.a != 1))) flag(r_a_obs, i);
        if (r.delta_y1 == 0 && r.y1) flag(r_y1_na, i);
        if (r.delta_y1 == 1 && (!r.y1 || (*r.y1 != 0 && *r.y1 != 1))) flag(r_y1_obs, i);
        if (r.delta_a != 0 && r.delta_a != 1) flag(r_a_obs, i);
        if (r.delta_y1 != 0 && r.delta_y1 != 1) flag(r_y1_obs, i);

        if (has_baseline_outcome(sc)) {
            if (!r.delta_y0) {
                flag(r_present, i);
            } else {
                if (*r.delta_y0 == 0 && r.y0) flag(r_y0_na, i);
                if (*r.delta_y0 == 1 && (!r.y0 || (*r.y0 != 0 && *r.y0 != 1))) flag(r_y0_obs, i);
            }
            if (r.delta_y1 == 1 && !(r.delta_y0 == 1 && r.y0 == 0)) flag(r_follow, i);
        } else if (r.delta_y0 || r.y0) {
            flag(r_absent, i);
        }
        if (sc == Scenario::S1 && r.delta_a != 1) flag(r_forced, i);
        if ((sc == Scenario::S1 || sc == Scenario::S2) && r.delta_y1 != 1) flag(r_forced, i);

        if (r.l0.size() != schema.l0.size()) {
            flag(r_width, i);
        } else {
            for (std::size_t j = 0; j < r.l0.size(); ++j)
                if (!in_range(r.l0[j], schema.l0[j])) {
                    flag(r_l0, i);
                    break;
                }
        }
        if (!has_l1(sc)) {
            if (!r.l1.empty()) flag(r_absent, i);
        } else if (r.l1.size() != schema.l1.size()) {
            flag(r_width, i);
        } else {
            // L1 may be NA; estimators flag NA inside a fitting subpopulation.
            for (std::size_t j = 0; j < r.l1.size(); ++j)
                if (r.l1[j] && !in_range(r.l1[j], schema.l1[j])) {
                    flag(r_l1, i);
                    break;
                }
        }
        if (r.cluster_id.empty()) flag(r_cluster, i);
    }
    return report;
}

std::vector<std::string> csv_columns(Scenario scenario, const Schema& schema) {
    std::vector<std::string> cols;
    for (const auto& f : schema.l0) cols.push_back("l0." + f.name);
    cols.insert(cols.end(), {"delta_a", "a"});
    if (has_baseline_outcome(scenario)) cols.insert(cols.end(), {"delta_y0", "y0"});
    if (has_l1(scenario))
        for (const auto& f : schema.l1) cols.push_back("l1." + f.name);
    cols.insert(cols.end(), {"delta_y1", "y1", "cluster_id"});
    return cols;
}

Schema infer_schema(const std::vector<std::string>& header) {
    Schema s;
    for (const auto& h : header) {
        if (h.rfind("l0.", 0) == 0) s.l0.push_back({h.substr(3), FeatureKind::Numeric, {}});
        else if (h.rfind("l1.", 0) == 0) s.l1.push_back({h.substr(3), FeatureKind::Numeric, {}});
    }
    return s;
}

Schema schema_from_json(const std::string& text) {
    Schema s;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("schema: ") + e.what());
    }
    auto read_list = [](const nlohmann::json& arr, std::vector<FeatureDecl>& out) {
        for (const auto& f : arr) {
            FeatureDecl d;
            d.name = f.at("name").get<std::string>();
            std::string kind = f.value("type", "numeric");
            if (kind == "categorical") {
                d.kind = FeatureKind::Categorical;
                d.levels = f.at("levels").get<std::vector<std::string>>();
                if (d.levels.empty()) throw ConfigError("schema: categorical '" + d.name + "' has no levels");
            } else if (kind != "numeric") {
                throw ConfigError("schema: unknown feature type '" + kind + "'");
            }
            out.push_back(std::move(d));
        }
    };
    try {
        if (j.contains("l0")) read_list(j["l0"], s.l0);
        if (j.contains("l1")) read_list(j["l1"], s.l1);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("schema: ") + e.what());
    }
    return s;
}

std::string schema_to_json(const Schema& schema) {
    auto dump_list = [](const std::vector<FeatureDecl>& fs) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& f : fs) {
            nlohmann::json d{{"name", f.name}};
            if (f.kind == FeatureKind::Categorical) {
                d["type"] = "categorical";
                d["levels"] = f.levels;
            } else {
                d["type"] = "numeric";
            }
            arr.push_back(d);
        }
        return arr;
    };
    nlohmann::json j{{"l0", dump_list(schema.l0)}, {"l1", dump_list(schema.l1)}};
    return j.dump(2);
}

Dataset read_csv(std::istream& in, Scenario scenario, const Schema* schema,
                 const std::string& cluster_col) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty CSV: no header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const auto header = split_csv_line(line);

    Schema sch = schema ? *schema : infer_schema(header);
    if (!has_l1(scenario)) sch.l1.clear();

    std::unordered_map<std::string, std::size_t> col_of;
    for (std::size_t c = 0; c < header.size(); ++c) col_of.emplace(header[c], c);

    auto require = [&](const std::string& name) {
        auto it = col_of.find(name);
        if (it == col_of.end()) throw DataError("missing column '" + name + "'");
        return it->second;
    };
    auto optional_col = [&](const std::string& name) -> std::optional<std::size_t> {
        auto it = col_of.find(name);
        if (it == col_of.end()) return std::nullopt;
        return it->second;
    };

    std::vector<std::size_t> l0_cols, l1_cols;
    for (const auto& f : sch.l0) l0_cols.push_back(require("l0." + f.name));
    for (const auto& f : sch.l1) l1_cols.push_back(require("l1." + f.name));
    // Indicators that are structurally 1 may be omitted for S1/S2.
    auto c_delta_a = scenario == Scenario::S1 ? optional_col("delta_a") : std::optional(require("delta_a"));
    auto c_a = require("a");
    std::optional<std::size_t> c_delta_y0, c_y0;
    if (has_baseline_outcome(scenario)) {
        c_delta_y0 = require("delta_y0");
        c_y0 = require("y0");
    }
    auto c_delta_y1 = (scenario == Scenario::S1 || scenario == Scenario::S2)
                          ? optional_col("delta_y1")
                          : std::optional(require("delta_y1"));
    auto c_y1 = require("y1");
    auto c_cluster = require(cluster_col);

    std::vector<bool> standard(header.size(), false);
    for (auto c : l0_cols) standard[c] = true;
    for (auto c : l1_cols) standard[c] = true;
    for (auto c : {c_delta_a, std::optional(c_a), c_delta_y0, c_y0, c_delta_y1, std::optional(c_y1),
                   std::optional(c_cluster)})
        if (c) standard[*c] = true;
    if (auto c = optional_col("cluster_id")) standard[*c] = true;
    std::vector<Dataset::ExtraColumn> extras;
    std::vector<std::size_t> extra_cols;
    for (std::size_t c = 0; c < header.size(); ++c)
        if (!standard[c]) {
            extras.push_back({header[c], {}});
            extra_cols.push_back(c);
        }

    std::vector<ObservedRecord> records;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            std::ostringstream os;
            os << "row " << row << ": expected " << header.size() << " cells, found " << cells.size();
            throw DataError(os.str());
        }
        ObservedRecord r;
        for (std::size_t j = 0; j < l0_cols.size(); ++j)
            r.l0.push_back(parse_value(cells[l0_cols[j]], sch.l0[j], row, header[l0_cols[j]]));
        for (std::size_t j = 0; j < l1_cols.size(); ++j)
            r.l1.push_back(parse_value(cells[l1_cols[j]], sch.l1[j], row, header[l1_cols[j]]));
        r.delta_a = c_delta_a ? parse_indicator(cells[*c_delta_a], row, "delta_a") : 1;
        r.a = parse_binary(cells[c_a], row, "a");
        if (c_delta_y0) {
            r.delta_y0 = parse_indicator(cells[*c_delta_y0], row, "delta_y0");
            r.y0 = parse_binary(cells[*c_y0], row, "y0");
        }
        r.delta_y1 = c_delta_y1 ? parse_indicator(cells[*c_delta_y1], row, "delta_y1") : 1;
        r.y1 = parse_binary(cells[c_y1], row, "y1");
        r.cluster_id = cells[c_cluster];
        for (std::size_t e = 0; e < extra_cols.size(); ++e)
            extras[e].values.push_back(cells[extra_cols[e]]);
        records.push_back(std::move(r));
    }
    Dataset ds(scenario, std::move(sch), std::move(records));
    ds.set_extra_columns(std::move(extras));
    return ds;
}

Dataset load_csv(const std::string& path, Scenario scenario, const Schema* schema,
                 const std::string& cluster_col) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return read_csv(in, scenario, schema, cluster_col);
}

void write_csv(std::ostream& out, const Dataset& dataset) {
    const Scenario sc = dataset.scenario();
    const Schema& schema = dataset.schema();
    auto cols = csv_columns(sc, schema);
    for (const auto& e : dataset.extra_columns()) cols.push_back(e.name);
    for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << quote_if_needed(cols[c]);
    out << '\n';
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& r = dataset[i];
        std::vector<std::string> cells;
        for (std::size_t j = 0; j < schema.l0.size(); ++j) cells.push_back(format_value(r.l0[j], schema.l0[j]));
        cells.push_back(std::to_string(r.delta_a));
        cells.push_back(format_binary(r.a));
        if (has_baseline_outcome(sc)) {
            cells.push_back(format_binary(r.delta_y0));
            cells.push_back(format_binary(r.y0));
        }
        if (has_l1(sc))
            for (std::size_t j = 0; j < schema.l1.size(); ++j)
                cells.push_back(format_value(j < r.l1.size() ? r.l1[j] : Value{}, schema.l1[j]));
        cells.push_back(std::to_string(r.delta_y1));
        cells.push_back(format_binary(r.y1));
        cells.push_back(r.cluster_id);
        for (const auto& e : dataset.extra_columns()) cells.push_back(e.values[i]);
        for (std::size_t c = 0; c < cells.size(); ++c) out << (c ? "," : "") << quote_if_needed(cells[c]);
        out << '\n';
    }
}

void write_csv(const std::string& path, const Dataset& dataset) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    write_csv(out, dataset);
    if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace cstrata
