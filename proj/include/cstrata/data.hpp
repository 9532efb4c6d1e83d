#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cstrata {

/// Observed-data layouts, from the point-treatment problem (S1) to missing
/// exposure, baseline outcome and follow-up outcome (S4).
enum class Scenario { S1, S2, S3, S4 };

Scenario parse_scenario(std::string_view tag);
std::string to_string(Scenario s);

/// S3 and S4 carry time-dependent covariates.
inline bool has_l1(Scenario s) { return s == Scenario::S3 || s == Scenario::S4; }
/// Only S4 measures the outcome at baseline.
inline bool has_baseline_outcome(Scenario s) { return s == Scenario::S4; }

enum class FeatureKind { Numeric, Categorical };

struct FeatureDecl {
    std::string name;
    FeatureKind kind = FeatureKind::Numeric;
    std::vector<std::string> levels;  // categorical only

    int level_index(std::string_view level) const;
};

struct Schema {
    std::vector<FeatureDecl> l0;
    std::vector<FeatureDecl> l1;

    /// Index into l0 (or l1) by bare feature name, -1 when absent.
    int find_l0(std::string_view name) const;
    int find_l1(std::string_view name) const;
};

/// NA-able binary cell.
using Binary = std::optional<int>;
/// NA-able covariate cell; categorical values hold the level index.
using Value = std::optional<double>;

struct ObservedRecord {
    std::vector<Value> l0;
    int delta_a = 1;
    Binary a;
    Binary delta_y0;  // ABSENT outside S4
    Binary y0;        // ABSENT outside S4
    std::vector<Value> l1;  // empty outside S3/S4
    int delta_y1 = 1;
    Binary y1;
    std::string cluster_id;
};

/// Immutable collection of records plus the cluster index.  Clusters are
/// numbered densely in order of first appearance.
class Dataset {
public:
    Dataset() = default;
    Dataset(Scenario scenario, Schema schema, std::vector<ObservedRecord> records);

    Scenario scenario() const { return scenario_; }
    const Schema& schema() const { return schema_; }
    const std::vector<ObservedRecord>& records() const { return records_; }
    const ObservedRecord& operator[](std::size_t i) const { return records_[i]; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    std::size_t n_clusters() const { return cluster_ids_.size(); }
    /// Dense cluster number of row i.
    int cluster_of(std::size_t i) const { return cluster_of_[i]; }
    const std::vector<int>& cluster_map() const { return cluster_of_; }
    const std::vector<std::string>& cluster_ids() const { return cluster_ids_; }
    const std::vector<std::size_t>& cluster_members(std::size_t m) const { return members_[m]; }
    std::map<std::string, std::vector<std::size_t>> cluster_index() const;

    /// Columns carried through ingestion without interpretation (e.g. a
    /// community id usable as an alternative clustering unit).
    struct ExtraColumn {
        std::string name;
        std::vector<std::string> values;
    };
    const std::vector<ExtraColumn>& extra_columns() const { return extras_; }
    void set_extra_columns(std::vector<ExtraColumn> extras);

    /// Same records, reclustered on the given per-row ids.
    Dataset with_clusters(const std::vector<std::string>& ids) const;

private:
    void build_index();

    Scenario scenario_ = Scenario::S1;
    Schema schema_;
    std::vector<ObservedRecord> records_;
    std::vector<int> cluster_of_;
    std::vector<std::string> cluster_ids_;
    std::vector<std::vector<std::size_t>> members_;
    std::vector<ExtraColumn> extras_;
};

struct ValidationReport {
    struct Rule {
        std::string name;
        std::size_t count = 0;
        std::vector<std::size_t> first_rows;  // at most five
    };
    std::vector<Rule> rules;

    bool pass() const;
    std::size_t total() const;
    std::string summary() const;
};

/// Reports every violated structural rule; never throws.
ValidationReport validate(const Dataset& dataset);

/// Column names for the scenario, in the order write_csv emits them.
std::vector<std::string> csv_columns(Scenario scenario, const Schema& schema);

/// Numeric-only schema inferred from `l0.` / `l1.` header prefixes.
Schema infer_schema(const std::vector<std::string>& header);

Schema schema_from_json(const std::string& text);
std::string schema_to_json(const Schema& schema);

/// Parses CSV text. When `schema` is null the schema is inferred from the
/// header.  `cluster_col` names the column used as clustering unit.
Dataset read_csv(std::istream& in, Scenario scenario, const Schema* schema = nullptr,
                 const std::string& cluster_col = "cluster_id");
Dataset load_csv(const std::string& path, Scenario scenario, const Schema* schema = nullptr,
                 const std::string& cluster_col = "cluster_id");

void write_csv(std::ostream& out, const Dataset& dataset);
void write_csv(const std::string& path, const Dataset& dataset);

}  // namespace cstrata
