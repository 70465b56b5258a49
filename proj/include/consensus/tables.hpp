#pragma once

// CSV tables: the shipped per-model fixtures, result tables, and reports.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "consensus/error.hpp"
#include "consensus/evaluation.hpp"
#include "consensus/io.hpp"

namespace consensus {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Parses a numeric cell; empty and "N/A" cells are missing.
inline std::optional<double> parse_cell(const std::string& cell, const std::string& where) {
    if (cell.empty() || cell == "N/A" || cell == "NA" || cell == "nan") return std::nullopt;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    require(ec == std::errc() && ptr == cell.data() + cell.size(), ErrorCode::ParseError,
            "cannot parse '" + cell + "' as a number (" + where + ")");
    return v;
}

/// A CSV with a header row. Lines starting with '#' are comments.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::optional<std::size_t> find(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    }

    std::size_t column_index(const std::vector<std::string>& names) const {
        for (const auto& n : names)
            if (auto i = find(n)) return *i;
        fail(ErrorCode::SchemaMismatch, "table has no column '" + names.front() + "'");
    }

    std::vector<std::optional<double>> numeric_column(const std::string& name) const {
        const std::size_t c = column_index({name});
        std::vector<std::optional<double>> out;
        out.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
            out.push_back(parse_cell(rows[r][c], "row " + std::to_string(r + 1) + ", column '" + name + "'"));
        return out;
    }
};

inline CsvTable parse_csv(const std::string& text, const std::string& source = "<csv>") {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped.front() == '#') continue;
        auto cells = split_csv_line(stripped);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        require(cells.size() == t.header.size(), ErrorCode::ParseError,
                source + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                    " cells, found " + std::to_string(cells.size()));
        t.rows.push_back(std::move(cells));
    }
    require(!t.header.empty(), ErrorCode::SchemaMismatch, source + ": missing header");
    return t;
}

inline CsvTable read_csv(const fs::path& path) { return parse_csv(read_text(path), path.string()); }

inline std::string format_number(double v) {
    if (std::isnan(v)) return "";
    std::ostringstream out;
    out.precision(10);
    out << v;
    return out.str();
}

// ---------------------------------------------------------------------------
// Per-model result rows (fixture and report schema)
// ---------------------------------------------------------------------------

struct ModelResultRow {
    std::string model_id;
    double performance = std::nan("");
    double score_lime = std::nan("");
    double score_sg = std::nan("");
    double map_lime = std::nan("");
    double map_sg = std::nan("");
};

/// Rows for individual models plus the committee's own row, if present.
struct ResultTable {
    std::vector<ModelResultRow> models;
    std::optional<ModelResultRow> consensus;

    std::size_t row_count() const { return models.size() + (consensus ? 1 : 0); }

    const ModelResultRow& find(const std::string& id) const {
        for (const auto& r : models)
            if (r.model_id == id) return r;
        if (consensus && consensus->model_id == id) return *consensus;
        fail(ErrorCode::InvalidArgument, "no row for model '" + id + "'");
    }
};

inline const std::vector<std::string>& id_aliases() {
    static const std::vector<std::string> v{"model_id", "id"};
    return v;
}

inline const std::map<std::string, std::vector<std::string>>& column_aliases() {
    static const std::map<std::string, std::vector<std::string>> m{
        {"performance", {"performance"}},
        {"score_lime", {"score_lime", "consensus_score_lime"}},
        {"score_sg", {"score_sg", "consensus_score_sg"}},
        {"map_lime", {"map_lime"}},
        {"map_sg", {"map_sg"}},
    };
    return m;
}

inline constexpr const char* kConsensusRowId = "consensus";

/// Loads a per-model table. Requires id, performance, score_lime and
/// score_sg columns; map_lime and map_sg are optional.
inline ResultTable load_fixture_table(const fs::path& path) {
    const CsvTable t = read_csv(path);
    auto optional_col = [&](const std::string& canonical) -> std::optional<std::size_t> {
        for (const auto& n : column_aliases().at(canonical))
            if (auto i = t.find(n)) return i;
        return std::nullopt;
    };
    const std::size_t id_col = t.column_index(id_aliases());
    std::map<std::string, std::size_t> cols;
    for (const char* required_col : {"performance", "score_lime", "score_sg"}) {
        auto c = optional_col(required_col);
        require(c.has_value(), ErrorCode::SchemaMismatch,
                "'" + path.string() + "' lacks the '" + required_col + "' column");
        cols[required_col] = *c;
    }
    for (const char* extra : {"map_lime", "map_sg"})
        if (auto c = optional_col(extra)) cols[extra] = *c;

    ResultTable out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& cells = t.rows[r];
        ModelResultRow row;
        row.model_id = cells[id_col];
        require(!row.model_id.empty(), ErrorCode::ParseError, path.string() + ": empty model id in row " + std::to_string(r + 1));
        auto get = [&](const std::string& name) {
            const auto it = cols.find(name);
            if (it == cols.end()) return std::nan("");
            return parse_cell(cells[it->second], path.string() + " row " + std::to_string(r + 1)).value_or(std::nan(""));
        };
        row.performance = get("performance");
        row.score_lime = get("score_lime");
        row.score_sg = get("score_sg");
        row.map_lime = get("map_lime");
        row.map_sg = get("map_sg");
        if (row.model_id == kConsensusRowId)
            out.consensus = row;
        else
            out.models.push_back(row);
    }
    return out;
}

inline std::string report_csv(const ResultTable& table) {
    std::string out = "id,performance,consensus_score_lime,consensus_score_sg,map_lime,map_sg\n";
    auto line = [&](const ModelResultRow& r) {
        out += r.model_id + "," + format_number(r.performance) + "," + format_number(r.score_lime) + "," +
               format_number(r.score_sg) + "," + format_number(r.map_lime) + "," + format_number(r.map_sg) + "\n";
    };
    for (const auto& r : table.models) line(r);
    if (table.consensus) line(*table.consensus);
    return out;
}

// ---------------------------------------------------------------------------
// Correlating two columns
// ---------------------------------------------------------------------------

enum class CorrelationMethod { pearson, spearman };

inline CorrelationMethod parse_correlation_method(const std::string& s) {
    if (s == "pearson") return CorrelationMethod::pearson;
    if (s == "spearman") return CorrelationMethod::spearman;
    fail(ErrorCode::InvalidArgument, "unknown correlation method '" + s + "'");
}

/// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
        i = j;
    }
    return ranks;
}

/// Spearman's rho (Pearson on average ranks) with the t-approximation p-value.
inline CorrelationResult spearman(std::span<const double> x, std::span<const double> y) {
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry);
}

inline CorrelationResult correlate(std::span<const double> x, std::span<const double> y, CorrelationMethod method) {
    return method == CorrelationMethod::pearson ? pearson(x, y) : spearman(x, y);
}

/// Pairs of two named columns over rows where both are present. The row
/// whose id is "consensus" describes the committee and is skipped unless
/// `include_consensus` is set.
inline std::pair<std::vector<double>, std::vector<double>> paired_columns(const CsvTable& t, const std::string& a,
                                                                          const std::string& b,
                                                                          bool include_consensus = false) {
    const auto resolve = [&](const std::string& name) {
        const auto it = column_aliases().find(name);
        if (it != column_aliases().end()) return t.column_index(it->second);
        for (const auto& [canonical, aliases] : column_aliases())
            if (std::find(aliases.begin(), aliases.end(), name) != aliases.end()) return t.column_index(aliases);
        return t.column_index({name});
    };
    const std::size_t ca = resolve(a), cb = resolve(b);
    std::optional<std::size_t> id_col;
    for (const auto& n : id_aliases())
        if (auto i = t.find(n)) {
            id_col = i;
            break;
        }
    std::vector<double> xs, ys;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (!include_consensus && id_col && t.rows[r][*id_col] == kConsensusRowId) continue;
        const auto x = parse_cell(t.rows[r][ca], "row " + std::to_string(r + 1));
        const auto y = parse_cell(t.rows[r][cb], "row " + std::to_string(r + 1));
        if (x && y) {
            xs.push_back(*x);
            ys.push_back(*y);
        }
    }
    return {xs, ys};
}

}  // namespace consensus
