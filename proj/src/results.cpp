#include "resa/results.hpp"

#include "resa/error.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <variant>

namespace resa {
namespace {

template <class Row>
using Member = std::variant<std::string Row::*, double Row::*, int Row::*, std::int64_t Row::*, bool Row::*>;

template <class Row>
struct Field {
    const char* name;
    Member<Row> member;
};

template <class Row>
struct Schema;

template <>
struct Schema<ResultRow> {
    static constexpr const char* kind = "result";
    static std::vector<Field<ResultRow>> fields() {
        return {{"run_id", &ResultRow::run_id}, {"mode", &ResultRow::mode}, {"block_size", &ResultRow::block_size},
            {"sparsity", &ResultRow::sparsity}, {"rectify_freq", &ResultRow::rectify_freq},
            {"max_steps", &ResultRow::max_steps}, {"prefix_len", &ResultRow::prefix_len},
            {"tokens_per_sec", &ResultRow::tokens_per_sec}, {"measured_ratio", &ResultRow::measured_ratio},
            {"predicted_ratio", &ResultRow::predicted_ratio},
            {"final_drift_max_abs", &ResultRow::final_drift_max_abs},
            {"tokens_emitted", &ResultRow::tokens_emitted}, {"selection_ratio", &ResultRow::selection_ratio},
            {"attention_ratio", &ResultRow::attention_ratio},
            {"rectification_ratio", &ResultRow::rectification_ratio},
            {"rectification_share", &ResultRow::rectification_share}};
    }
};

template <>
struct Schema<DriftRow> {
    static constexpr const char* kind = "drift";
    static std::vector<Field<DriftRow>> fields() {
        return {{"step", &DriftRow::step}, {"mode", &DriftRow::mode}, {"max_abs_drift", &DriftRow::max_abs_drift},
            {"mean_l2_drift", &DriftRow::mean_l2_drift}, {"sparsity", &DriftRow::sparsity},
            {"rectify_freq", &DriftRow::rectify_freq}, {"post_rectification", &DriftRow::post_rectification}};
    }
};

template <>
struct Schema<BenchRow> {
    static constexpr const char* kind = "bench";
    static std::vector<Field<BenchRow>> fields() {
        return {{"prefix", &BenchRow::prefix}, {"mode", &BenchRow::mode},
            {"mean_ms_per_step", &BenchRow::mean_ms_per_step}, {"p50", &BenchRow::p50}, {"p95", &BenchRow::p95}};
    }
};

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

template <class T>
T parse_number(std::string_view text, const char* field) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto res = std::from_chars(text.data(), end, value);
    if (res.ec != std::errc() || res.ptr != end) {
        throw Error(std::string("cannot parse field '") + field + "' from '" + std::string(text) + "'");
    }
    return value;
}

template <class Row>
void validate_row(const Row& row) {
    for (const auto& f : Schema<Row>::fields()) {
        std::visit(Overloaded{[&](std::string Row::*m) {
                                  if ((row.*m).find_first_of(",\"\n\r") != std::string::npos) {
                                      throw Error(std::string("field '") + f.name + "' contains CSV delimiters");
                                  }
                              },
                       [&](double Row::*m) {
                           if (!std::isfinite(row.*m)) {
                               throw Error(std::string("field '") + f.name + "' is not finite");
                           }
                       },
                       [](auto) {}},
            f.member);
    }
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        parts.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            return parts;
        }
        start = pos + 1;
    }
}

std::vector<std::string_view> nonempty_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    for (auto line : split(text, '\n')) {
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (!line.empty()) {
            lines.push_back(line);
        }
    }
    return lines;
}

template <class Row>
std::string emit_csv(const std::vector<Row>& rows) {
    const auto fields = Schema<Row>::fields();
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        out += i == 0 ? "" : ",";
        out += fields[i].name;
    }
    out += '\n';
    for (const auto& row : rows) {
        validate_row(row);
        for (std::size_t i = 0; i < fields.size(); ++i) {
            out += i == 0 ? "" : ",";
            out += std::visit(Overloaded{[&](std::string Row::*m) { return row.*m; },
                                  [&](double Row::*m) { return format_double(row.*m); },
                                  [&](bool Row::*m) { return std::string(row.*m ? "1" : "0"); },
                                  [&](auto m) { return std::to_string(row.*m); }},
                fields[i].member);
        }
        out += '\n';
    }
    return out;
}

template <class Row>
std::vector<Row> read_csv(std::string_view text) {
    const auto fields = Schema<Row>::fields();
    const auto lines = nonempty_lines(text);
    if (lines.empty()) {
        throw Error(std::string("empty ") + Schema<Row>::kind + " CSV");
    }
    const auto header = split(lines.front(), ',');
    if (header.size() != fields.size()) {
        throw Error(std::string("unexpected ") + Schema<Row>::kind + " CSV header");
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (header[i] != fields[i].name) {
            throw Error(std::string("unexpected ") + Schema<Row>::kind + " CSV header");
        }
    }
    std::vector<Row> rows;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const auto cells = split(lines[li], ',');
        if (cells.size() != fields.size()) {
            throw Error("CSV line " + std::to_string(li + 1) + " has the wrong number of cells");
        }
        Row row;
        for (std::size_t i = 0; i < fields.size(); ++i) {
            const auto cell = cells[i];
            const char* name = fields[i].name;
            std::visit(Overloaded{[&](std::string Row::*m) { row.*m = std::string(cell); },
                           [&](double Row::*m) { row.*m = parse_number<double>(cell, name); },
                           [&](int Row::*m) { row.*m = parse_number<int>(cell, name); },
                           [&](std::int64_t Row::*m) { row.*m = parse_number<std::int64_t>(cell, name); },
                           [&](bool Row::*m) { row.*m = parse_number<int>(cell, name) != 0; }},
                fields[i].member);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

template <class Row>
std::string emit_jsonl(const std::vector<Row>& rows) {
    std::string out;
    for (const auto& row : rows) {
        validate_row(row);
        nlohmann::ordered_json j;
        for (const auto& f : Schema<Row>::fields()) {
            std::visit([&](auto m) { j[f.name] = row.*m; }, f.member);
        }
        out += j.dump();
        out += '\n';
    }
    return out;
}

template <class Row>
std::vector<Row> read_jsonl(std::string_view text) {
    std::vector<Row> rows;
    for (const auto line : nonempty_lines(text)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(std::string("bad JSONL line: ") + e.what());
        }
        Row row;
        for (const auto& f : Schema<Row>::fields()) {
            if (!j.contains(f.name)) {
                throw Error(std::string("JSONL row lacks '") + f.name + "'");
            }
            std::visit(
                [&](auto m) {
                    using V = std::remove_reference_t<decltype(row.*m)>;
                    try {
                        row.*m = j.at(f.name).template get<V>();
                    } catch (const nlohmann::json::exception&) {
                        throw Error(std::string("JSONL field '") + f.name + "' has the wrong type");
                    }
                },
                f.member);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace

void validate(const ResultRow& row) { validate_row(row); }
void validate(const DriftRow& row) { validate_row(row); }
void validate(const BenchRow& row) { validate_row(row); }

std::string to_csv(const std::vector<ResultRow>& rows) { return emit_csv(rows); }
std::string to_csv(const std::vector<DriftRow>& rows) { return emit_csv(rows); }
std::string to_csv(const std::vector<BenchRow>& rows) { return emit_csv(rows); }

std::vector<ResultRow> parse_result_csv(std::string_view text) { return read_csv<ResultRow>(text); }
std::vector<DriftRow> parse_drift_csv(std::string_view text) { return read_csv<DriftRow>(text); }
std::vector<BenchRow> parse_bench_csv(std::string_view text) { return read_csv<BenchRow>(text); }

std::string to_jsonl(const std::vector<ResultRow>& rows) { return emit_jsonl(rows); }
std::string to_jsonl(const std::vector<DriftRow>& rows) { return emit_jsonl(rows); }
std::string to_jsonl(const std::vector<BenchRow>& rows) { return emit_jsonl(rows); }

std::vector<ResultRow> parse_result_jsonl(std::string_view text) { return read_jsonl<ResultRow>(text); }
std::vector<DriftRow> parse_drift_jsonl(std::string_view text) { return read_jsonl<DriftRow>(text); }
std::vector<BenchRow> parse_bench_jsonl(std::string_view text) { return read_jsonl<BenchRow>(text); }

} // namespace resa
