#pragma once

// Versioned CSV and JSON report schemas, writers and validators.
//
// Every CSV starts with a header row naming its columns in schema order. Every
// JSON summary carries {"schema": name, "version": n}. Reals use the shortest
// round-trip decimal form; booleans are 0/1; token sequences are token names
// joined by single spaces; an empty cell marks an absent optional value.

#include <charconv>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rairl/envworld.hpp"
#include "rairl/error.hpp"
#include "rairl/evaluation.hpp"
#include "rairl/training.hpp"

namespace rairl {

enum class ColumnType { integer, real, boolean, text };

struct Column {
    std::string name;
    ColumnType type = ColumnType::text;
    bool optional = false;
};

struct CsvSchema {
    std::string name;
    int version = 1;
    std::vector<Column> columns;

    std::vector<std::string> header() const {
        std::vector<std::string> h;
        for (const auto& c : columns) {
            h.push_back(c.name);
        }
        return h;
    }
};

namespace schema {

inline CsvSchema run(std::size_t contexts) {
    CsvSchema s{"run", run_csv_version, {}};
    for (const auto& name : run_csv_header(contexts)) {
        ColumnType t = ColumnType::real;
        if (name == "iteration" || name == "distinct") {
            t = ColumnType::integer;
        } else if (name == "clamped") {
            t = ColumnType::boolean;
        }
        s.columns.push_back({name, t, false});
    }
    return s;
}

inline CsvSchema compactness() {
    return {"compactness",
            1,
            {{"sentence", ColumnType::integer},
             {"context", ColumnType::text},
             {"position", ColumnType::integer},
             {"original", ColumnType::text},
             {"replacement", ColumnType::text},
             {"same_class", ColumnType::boolean},
             {"distance", ColumnType::real},
             {"reward_delta", ColumnType::real}}};
}

inline CsvSchema diversity() {
    return {"diversity",
            1,
            {{"index", ColumnType::integer},
             {"context", ColumnType::text},
             {"tokens", ColumnType::text},
             {"novel", ColumnType::boolean}}};
}

inline CsvSchema topk() {
    return {"topk",
            1,
            {{"context", ColumnType::text},
             {"rank", ColumnType::integer},
             {"tokens", ColumnType::text},
             {"reward", ColumnType::real},
             {"metric", ColumnType::real}}};
}

inline CsvSchema kl() {
    return {"kl",
            1,
            {{"context", ColumnType::text}, {"support", ColumnType::integer}, {"kl", ColumnType::real}}};
}

inline CsvSchema diagnosis() {
    return {"diagnosis",
            1,
            {{"line", ColumnType::integer},
             {"context", ColumnType::text},
             {"tokens", ColumnType::text},
             {"flagged", ColumnType::integer, true},
             {"rewards", ColumnType::text},
             {"rewrite", ColumnType::text, true},
             {"baseline_position", ColumnType::integer, true},
             {"baseline_rewrite", ColumnType::text, true},
             {"original_metric", ColumnType::real},
             {"rewrite_metric", ColumnType::real, true},
             {"baseline_metric", ColumnType::real, true},
             {"improvement", ColumnType::real}}};
}

inline CsvSchema dynamics(std::size_t tokens) {
    CsvSchema s{"dynamics", 1, {{"step", ColumnType::integer}}};
    for (const char* prefix : {"pi_", "f_", "d_"}) {
        for (std::size_t k = 0; k < tokens; ++k) {
            s.columns.push_back({prefix + std::to_string(k), ColumnType::real});
        }
    }
    s.columns.push_back({"generator_grad_norm", ColumnType::real});
    s.columns.push_back({"discriminator_grad_norm", ColumnType::real});
    return s;
}

inline CsvSchema ablation() {
    return {"ablation",
            1,
            {{"name", ColumnType::text},
             {"loss", ColumnType::text},
             {"use_constant_term", ColumnType::boolean},
             {"use_conditional_term", ColumnType::boolean},
             {"status", ColumnType::text},
             {"iterations", ColumnType::integer},
             {"final_kl", ColumnType::real, true},
             {"final_abs_dev", ColumnType::real, true},
             {"distinct", ColumnType::integer, true},
             {"coverage", ColumnType::real, true},
             {"novel_ratio", ColumnType::real, true},
             {"rp_s", ColumnType::real, true},
             {"rp_d", ColumnType::real, true}}};
}

}  // namespace schema

// ---------------------------------------------------------------------------
// CSV text

inline std::string csv_escape(std::string_view cell) {
    if (cell.find_first_of(",\"\n\r") == std::string_view::npos) {
        return std::string(cell);
    }
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

class CsvWriter {
public:
    CsvWriter(std::ostream& os, CsvSchema schema) : os_(&os), schema_(std::move(schema)) {
        row(schema_.header());
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != schema_.columns.size()) {
            throw InvalidInput("csv " + schema_.name + ": row has " + std::to_string(cells.size()) +
                               " cells, schema has " + std::to_string(schema_.columns.size()));
        }
        for (std::size_t i = 0; i < cells.size(); ++i) {
            *os_ << (i ? "," : "") << csv_escape(cells[i]);
        }
        *os_ << '\n';
    }

private:
    std::ostream* os_;
    CsvSchema schema_;
};

/// RFC 4180 style reader; every record must end with a newline.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string cell;
    bool quoted = false;
    bool was_quoted = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cell += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell += c;
            }
            continue;
        }
        if (c == '"') {
            if (!cell.empty() || was_quoted) {
                throw FormatError("csv: stray quote in record " + std::to_string(rows.size() + 1));
            }
            quoted = true;
            was_quoted = true;
        } else if (c == ',') {
            row.push_back(std::move(cell));
            cell.clear();
            was_quoted = false;
        } else if (c == '\n') {
            row.push_back(std::move(cell));
            cell.clear();
            was_quoted = false;
            rows.push_back(std::move(row));
            row.clear();
        } else if (c == '\r') {
            continue;
        } else {
            cell += c;
        }
    }
    if (quoted) {
        throw FormatError("csv: unterminated quoted cell");
    }
    if (!cell.empty() || !row.empty()) {
        throw FormatError("csv: last record is not newline-terminated");
    }
    return rows;
}

namespace detail {

inline bool cell_matches(const std::string& cell, ColumnType t) {
    switch (t) {
        case ColumnType::text: return true;
        case ColumnType::boolean: return cell == "0" || cell == "1";
        case ColumnType::integer: {
            long long v = 0;
            const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            return !cell.empty() && r.ec == std::errc{} && r.ptr == cell.data() + cell.size();
        }
        case ColumnType::real: {
            if (cell == "nan" || cell == "inf" || cell == "-inf") {
                return true;
            }
            double v = 0;
            const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            return !cell.empty() && r.ec == std::errc{} && r.ptr == cell.data() + cell.size();
        }
    }
    return false;
}

}  // namespace detail

/// Checks header, cell counts and cell types. Returns the data row count.
inline std::size_t validate_csv(std::string_view text, const CsvSchema& s) {
    const auto rows = parse_csv(text);
    if (rows.empty()) {
        throw FormatError("csv " + s.name + ": missing header");
    }
    if (rows[0] != s.header()) {
        throw FormatError("csv " + s.name + ": header does not match schema version " + std::to_string(s.version));
    }
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != s.columns.size()) {
            throw FormatError("csv " + s.name + ": row " + std::to_string(r) + " has " +
                              std::to_string(rows[r].size()) + " cells");
        }
        for (std::size_t c = 0; c < s.columns.size(); ++c) {
            const auto& col = s.columns[c];
            const auto& cell = rows[r][c];
            if (cell.empty() && col.optional) {
                continue;
            }
            if (!detail::cell_matches(cell, col.type)) {
                throw FormatError("csv " + s.name + ": row " + std::to_string(r) + " column '" + col.name +
                                  "' has invalid value '" + cell + "'");
            }
        }
    }
    return rows.size() - 1;
}

// ---------------------------------------------------------------------------
// JSON summaries

struct SummarySchema {
    std::string name;
    int version = 1;
    std::vector<std::string> required;
};

namespace schema {

inline SummarySchema compactness_summary() {
    return {"compactness_summary", 1, {"probes", "skipped", "same_class", "different_class", "warnings", "scorer"}};
}
inline SummarySchema diversity_summary() {
    return {"diversity_summary", 1,
            {"generated", "distinct", "coverage", "novel_ratio", "generated_vocab", "reference_vocab"}};
}
inline SummarySchema topk_summary() { return {"topk_summary", 1, {"k", "samples", "contexts", "corpus_median"}}; }
inline SummarySchema kl_summary() { return {"kl_summary", 1, {"per_context", "mean"}}; }
inline SummarySchema diagnosis_summary() {
    return {"diagnosis_summary", 1, {"sequences", "flagged", "mean_improvement", "threshold", "scorer"}};
}
inline SummarySchema dynamics_summary() {
    return {"dynamics_summary", 1, {"p_true", "steps", "generator_rate", "discriminator_rate", "variants"}};
}
inline SummarySchema run_summary() {
    return {"run_summary", 1, {"iterations", "points", "aborted", "final"}};
}

}  // namespace schema

inline nlohmann::json make_summary(const SummarySchema& s) {
    return {{"schema", s.name}, {"version", s.version}};
}

inline void validate_summary(const nlohmann::json& j, const SummarySchema& s) {
    if (!j.is_object()) {
        throw FormatError(s.name + ": summary must be an object");
    }
    if (!j.contains("schema") || j.at("schema") != s.name) {
        throw FormatError(s.name + ": wrong or missing schema name");
    }
    if (!j.contains("version") || !j.at("version").is_number_integer()) {
        throw FormatError(s.name + ": missing version");
    }
    if (j.at("version").get<int>() != s.version) {
        throw VersionError(s.name + ": version " + j.at("version").dump() + " is not supported");
    }
    for (const auto& k : s.required) {
        if (!j.contains(k)) {
            throw FormatError(s.name + ": missing key '" + k + "'");
        }
    }
}

// ---------------------------------------------------------------------------
// Report builders

inline std::string token_text(const Vocabulary& v, std::span<const TokenId> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) {
            out += ' ';
        }
        out += v.name(tokens[i]);
    }
    return out;
}

/// Parses space-separated token names. Throws InvalidInput naming the token.
inline TokenSeq parse_tokens(const Vocabulary& v, std::string_view text) {
    TokenSeq out;
    std::istringstream is{std::string(text)};
    std::string word;
    while (is >> word) {
        out.push_back(v.id(word));
    }
    return out;
}

inline nlohmann::json optional_json(const std::optional<double>& x) {
    return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}

inline nlohmann::json correlations_json(const Correlations& c) {
    return {{"pearson", optional_json(c.pearson)},
            {"spearman", optional_json(c.spearman)},
            {"kendall", optional_json(c.kendall)},
            {"count", c.count}};
}

inline nlohmann::json write_compactness_report(std::ostream& csv, const CompactnessReport& rep,
                                               const GrammarWorld& world, const std::vector<SequenceSample>& corpus,
                                               SentenceScorer scorer) {
    CsvWriter w(csv, schema::compactness());
    const auto& v = world.vocab();
    for (const auto& p : rep.probes) {
        w.row({std::to_string(p.sentence), world.context(corpus[p.sentence].context).name, std::to_string(p.position),
               v.name(p.original), v.name(p.replacement), p.same_class ? "1" : "0", format_double(p.distance),
               format_double(p.reward_delta)});
    }
    auto j = make_summary(schema::compactness_summary());
    j["probes"] = rep.probes.size();
    j["skipped"] = rep.skipped;
    j["same_class"] = correlations_json(rep.same_class);
    j["different_class"] = correlations_json(rep.different_class);
    j["warnings"] = rep.warnings;
    j["scorer"] = std::string(to_string(scorer));
    return j;
}

inline nlohmann::json write_diversity_report(std::ostream& csv, const DiversityReport& rep, const GrammarWorld& world,
                                             const std::vector<SequenceSample>& generated,
                                             const std::vector<SequenceSample>& training) {
    CsvWriter w(csv, schema::diversity());
    std::set<TokenSeq> seen;
    for (const auto& s : training) {
        seen.insert(s.tokens);
    }
    for (std::size_t i = 0; i < generated.size(); ++i) {
        const auto& s = generated[i];
        w.row({std::to_string(i), world.context(s.context).name, token_text(world.vocab(), s.tokens),
               seen.contains(s.tokens) ? "0" : "1"});
    }
    auto j = make_summary(schema::diversity_summary());
    j["generated"] = rep.generated;
    j["distinct"] = rep.distinct;
    j["coverage"] = rep.coverage;
    j["novel_ratio"] = rep.novel_ratio;
    j["generated_vocab"] = rep.generated_vocab;
    j["reference_vocab"] = rep.reference_vocab;
    return j;
}

inline nlohmann::json write_kl_report(std::ostream& csv, const GrammarWorld& world, const Vector& kl,
                                      const std::vector<std::size_t>& support_sizes) {
    CsvWriter w(csv, schema::kl());
    auto j = make_summary(schema::kl_summary());
    double mean = 0.0;
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t c = 0; c < kl.size(); ++c) {
        w.row({world.context(c).name, std::to_string(support_sizes[c]), format_double(kl[c])});
        per[world.context(c).name] = kl[c];
        mean += kl[c] / static_cast<double>(kl.size());
    }
    j["per_context"] = per;
    j["mean"] = mean;
    return j;
}

inline void write_dynamics_csv(std::ostream& csv, const std::vector<GamePoint>& traj) {
    const std::size_t n = traj.empty() ? 0 : traj.front().pi.size();
    CsvWriter w(csv, schema::dynamics(n));
    for (const auto& p : traj) {
        std::vector<std::string> row{std::to_string(p.step)};
        for (const Vector* v : {&p.pi, &p.f, &p.d}) {
            for (double x : *v) {
                row.push_back(format_double(x));
            }
        }
        row.push_back(format_double(p.generator_grad_norm));
        row.push_back(format_double(p.discriminator_grad_norm));
        w.row(row);
    }
}

inline nlohmann::json run_summary_json(const RunRecord& rec) {
    auto j = make_summary(schema::run_summary());
    j["iterations"] = rec.points.empty() ? 0 : rec.points.back().iteration;
    j["points"] = rec.points.size();
    j["aborted"] = rec.abort.has_value();
    if (rec.abort) {
        j["abort"] = {{"iteration", rec.abort->iteration},
                      {"message", rec.abort->message},
                      {"disc_loss", rec.abort->disc_loss},
                      {"gen_loss", rec.abort->gen_loss}};
    }
    if (rec.points.empty()) {
        j["final"] = nullptr;
    } else {
        const auto window = [&](auto field) { return final_window_mean(rec, field); };
        j["final"] = {{"kl_mean", window([](const RunPoint& p) { return p.kl_mean; })},
                      {"mean_abs_dev", window([](const RunPoint& p) { return p.mean_abs_dev; })},
                      {"mean_d_gen", window([](const RunPoint& p) { return p.mean_d_gen; })},
                      {"distinct", rec.points.back().distinct},
                      {"coverage", rec.points.back().coverage},
                      {"novel_ratio", rec.points.back().novel_ratio}};
    }
    return j;
}

}  // namespace rairl
