#pragma once

// Long-format case tables: one case (surgical procedure) with a binary
// outcome and one or more paO2 measurement rows, each carrying fully
// observed proxy vitals. Includes CSV I/O and a synthetic generator.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "rdof/error.hpp"
#include "rdof/rng.hpp"

namespace rdof {

struct MeasurementRow {
    std::optional<double> pao2;  // mmHg; nullopt when not measured
    std::vector<double> proxies;

    bool missing() const noexcept { return !pao2.has_value(); }
    friend bool operator==(const MeasurementRow&, const MeasurementRow&) = default;
};

struct CaseRecord {
    std::string case_id;
    int outcome = 0;  // post-operative complication, 0 or 1
    std::vector<MeasurementRow> measurements;

    friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

struct CaseTable {
    std::vector<CaseRecord> cases;
    std::vector<std::string> proxy_names;

    std::size_t size() const noexcept { return cases.size(); }
    std::size_t n_proxies() const noexcept { return proxy_names.size(); }

    std::size_t n_rows() const noexcept {
        std::size_t n = 0;
        for (const auto& c : cases) n += c.measurements.size();
        return n;
    }

    std::size_t n_missing() const noexcept {
        std::size_t n = 0;
        for (const auto& c : cases)
            for (const auto& m : c.measurements) n += m.missing() ? 1 : 0;
        return n;
    }

    std::vector<int> outcomes() const {
        std::vector<int> y;
        y.reserve(cases.size());
        for (const auto& c : cases) y.push_back(c.outcome);
        return y;
    }

    friend bool operator==(const CaseTable&, const CaseTable&) = default;
};

inline bool has_both_outcomes(const std::vector<int>& y) noexcept {
    bool zero = false, one = false;
    for (int v : y) (v ? one : zero) = true;
    return zero && one;
}

// Throws DataError describing the first violated invariant.
inline void validate(const CaseTable& table) {
    std::unordered_set<std::string> seen;
    for (const auto& c : table.cases) {
        if (!seen.insert(c.case_id).second) throw DataError("duplicate case_id '" + c.case_id + "'");
        if (c.outcome != 0 && c.outcome != 1)
            throw DataError("non-binary outcome for case '" + c.case_id + "'");
        if (c.measurements.empty()) throw DataError("case '" + c.case_id + "' has no measurement rows");
        for (const auto& m : c.measurements) {
            if (m.proxies.size() != table.proxy_names.size())
                throw DataError("proxy count mismatch in case '" + c.case_id + "'");
            if (m.pao2 && !(std::isfinite(*m.pao2) && *m.pao2 > 0.0))
                throw DataError("non-positive pao2 in case '" + c.case_id + "'");
            for (double p : m.proxies)
                if (!std::isfinite(p)) throw DataError("non-finite proxy in case '" + c.case_id + "'");
        }
    }
}

// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::optional<double> parse_double(std::string_view s) {
    double v = 0.0;
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

} // namespace detail

inline std::vector<std::string> csv_header(const CaseTable& table) {
    std::vector<std::string> cols{"case_id", "outcome", "pao2"};
    cols.insert(cols.end(), table.proxy_names.begin(), table.proxy_names.end());
    return cols;
}

// Header `case_id,outcome,pao2,proxy_1,...,proxy_K`; one line per measurement row.
// Missing paO2 is written as an empty field.
inline void write_csv(const CaseTable& table, std::ostream& out) {
    const auto header = csv_header(table);
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto& c : table.cases) {
        for (const auto& m : c.measurements) {
            out << c.case_id << ',' << c.outcome << ',';
            if (m.pao2) out << format_double(*m.pao2);
            for (double p : m.proxies) out << ',' << format_double(p);
            out << '\n';
        }
    }
}

inline void write_csv(const CaseTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open '" + path + "' for writing");
    write_csv(table, out);
    if (!out) throw ConfigError("write to '" + path + "' failed");
}

// Parses the long-format CSV. Rows of one case must be contiguous; a case_id
// that reappears after another case started is reported as a duplicate.
inline CaseTable read_csv(std::istream& in, const std::string& source = "<stream>") {
    auto fail = [&](std::size_t line_no, const std::string& msg) -> DataError {
        return DataError(source + ":" + std::to_string(line_no) + ": " + msg);
    };

    std::string line;
    if (!std::getline(in, line)) throw DataError(source + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

    CaseTable table;
    const auto header = detail::split_commas(line);
    if (header.size() < 4 || header[0] != "case_id" || header[1] != "outcome" || header[2] != "pao2")
        throw fail(1, "bad header, expected case_id,outcome,pao2,proxy_1,...,proxy_K");
    for (std::size_t j = 3; j < header.size(); ++j) {
        const std::string expected = "proxy_" + std::to_string(j - 2);
        if (header[j] != expected) throw fail(1, "bad header column '" + std::string(header[j]) + "', expected '" + expected + "'");
        table.proxy_names.push_back(expected);
    }
    const std::size_t width = header.size();

    std::unordered_set<std::string> closed;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_commas(line);
        if (fields.size() != width)
            throw fail(line_no, "malformed row: expected " + std::to_string(width) + " fields, got " + std::to_string(fields.size()));
        const std::string id(fields[0]);
        if (id.empty()) throw fail(line_no, "malformed row: empty case_id");

        int outcome = 0;
        if (fields[1] == "0") outcome = 0;
        else if (fields[1] == "1") outcome = 1;
        else throw fail(line_no, "non-binary outcome '" + std::string(fields[1]) + "'");

        MeasurementRow row;
        if (!(fields[2].empty() || fields[2] == "NA")) {
            auto v = detail::parse_double(fields[2]);
            if (!v) throw fail(line_no, "malformed row: bad pao2 '" + std::string(fields[2]) + "'");
            if (!(std::isfinite(*v) && *v > 0.0)) throw fail(line_no, "non-positive pao2");
            row.pao2 = *v;
        }
        for (std::size_t j = 3; j < width; ++j) {
            auto v = detail::parse_double(fields[j]);
            if (!v || !std::isfinite(*v)) throw fail(line_no, "malformed row: bad " + table.proxy_names[j - 3] + " '" + std::string(fields[j]) + "'");
            row.proxies.push_back(*v);
        }

        if (table.cases.empty() || table.cases.back().case_id != id) {
            if (closed.count(id)) throw fail(line_no, "duplicate case_id '" + id + "' (rows not contiguous)");
            if (!table.cases.empty()) closed.insert(table.cases.back().case_id);
            table.cases.push_back(CaseRecord{id, outcome, {}});
        } else if (table.cases.back().outcome != outcome) {
            throw fail(line_no, "inconsistent outcome within case '" + id + "'");
        }
        table.cases.back().measurements.push_back(std::move(row));
    }
    if (table.cases.empty()) throw DataError(source + ": empty file (no data rows)");
    validate(table);
    return table;
}

inline CaseTable load_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open input file '" + path + "'");
    return read_csv(in, path);
}

// Synthetic paO2-style data. Per case a latent log-level is drawn, each
// measurement varies around it, proxies are noisy copies of the true value,
// and the outcome depends on the case's mean true paO2.
struct GenConfig {
    std::size_t n_cases = 200;
    std::size_t min_measurements = 2;
    std::size_t max_measurements = 6;
    double missing_rate = 0.85;
    std::size_t n_proxies = 3;
    double effect_size = 0.0;       // log-odds per 100 mmHg of mean paO2
    double baseline_logit = 0.0;    // log-odds of the outcome at the median level
    double pao2_median = 210.0;
    double sigma_case = 0.10;       // between-case sd on the log scale
    double sigma_within = 0.2291;   // within-case sd on the log scale (marginal sd 0.25)
    double proxy_noise_base = 100.0; // proxy_j noise sd = base + step * (j - 1), mmHg
    double proxy_noise_step = 25.0;
    std::uint64_t seed = 1;

    void check() const {
        if (n_cases < 2) throw ConfigError("n_cases must be >= 2");
        if (min_measurements < 1 || max_measurements < min_measurements)
            throw ConfigError("measurements per case must satisfy 1 <= min <= max");
        if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ConfigError("missing_rate must lie in [0, 1)");
        if (n_proxies < 1) throw ConfigError("n_proxies must be >= 1");
        if (!(pao2_median > 0.0) || sigma_case < 0.0 || sigma_within < 0.0)
            throw ConfigError("invalid paO2 distribution parameters");
        if (!std::isfinite(effect_size) || !std::isfinite(baseline_logit)) throw ConfigError("non-finite effect parameters");
    }
};

namespace detail {

inline double round_tenth(double v) { return std::round(v * 10.0) / 10.0; }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// iid Bernoulli(p_i) outcomes, redrawn until both levels occur.
template <typename ProbFn>
std::vector<int> draw_outcomes(std::size_t n, Rng& rng, ProbFn prob) {
    std::vector<int> y(n);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        for (std::size_t i = 0; i < n; ++i) y[i] = rng.bernoulli(prob(i)) ? 1 : 0;
        if (has_both_outcomes(y)) return y;
    }
    throw NumericError("could not draw both outcome levels; outcome probabilities are degenerate");
}

} // namespace detail

inline CaseTable generate(const GenConfig& cfg) {
    cfg.check();
    Rng rng(cfg.seed);
    CaseTable table;
    for (std::size_t j = 1; j <= cfg.n_proxies; ++j) table.proxy_names.push_back("proxy_" + std::to_string(j));

    const double log_median = std::log(cfg.pao2_median);
    const std::size_t width = std::to_string(cfg.n_cases).size();
    std::vector<double> true_mean(cfg.n_cases);
    table.cases.reserve(cfg.n_cases);
    for (std::size_t i = 0; i < cfg.n_cases; ++i) {
        std::string id = std::to_string(i + 1);
        id = "case_" + std::string(width - id.size(), '0') + id;
        CaseRecord rec{std::move(id), 0, {}};

        const auto k = cfg.min_measurements + rng.below(cfg.max_measurements - cfg.min_measurements + 1);
        const double level = log_median + cfg.sigma_case * rng.normal();
        double sum = 0.0;
        for (std::size_t r = 0; r < k; ++r) {
            const double value = std::max(1.0, detail::round_tenth(std::exp(level + cfg.sigma_within * rng.normal())));
            sum += value;
            MeasurementRow row;
            for (std::size_t j = 0; j < cfg.n_proxies; ++j) {
                const double sd = cfg.proxy_noise_base + cfg.proxy_noise_step * static_cast<double>(j);
                row.proxies.push_back(detail::round_tenth(value + sd * rng.normal()));
            }
            if (!rng.bernoulli(cfg.missing_rate)) row.pao2 = value;
            rec.measurements.push_back(std::move(row));
        }
        true_mean[i] = sum / static_cast<double>(k);
        table.cases.push_back(std::move(rec));
    }

    const double intercept = cfg.baseline_logit - cfg.effect_size * cfg.pao2_median / 100.0;
    const auto y = detail::draw_outcomes(cfg.n_cases, rng, [&](std::size_t i) {
        return detail::sigmoid(intercept + cfg.effect_size * true_mean[i] / 100.0);
    });
    for (std::size_t i = 0; i < cfg.n_cases; ++i) table.cases[i].outcome = y[i];
    return table;
}

// Keeps every exposure; replaces outcomes by iid Bernoulli(0.5) draws with
// both levels present.
inline CaseTable null_scramble(const CaseTable& table, std::uint64_t seed) {
    if (table.size() < 2) throw DataError("null_scramble needs at least 2 cases");
    Rng rng(seed);
    auto y = detail::draw_outcomes(table.size(), rng, [](std::size_t) { return 0.5; });
    CaseTable out = table;
    for (std::size_t i = 0; i < out.size(); ++i) out.cases[i].outcome = y[i];
    return out;
}

// n cases drawn without replacement, kept in their original table order.
inline CaseTable draw_cases(const CaseTable& table, std::size_t n, std::uint64_t seed) {
    if (n > table.size()) throw ConfigError("cannot draw " + std::to_string(n) + " cases from a table of " + std::to_string(table.size()));
    std::vector<std::size_t> idx(table.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    CaseTable out;
    out.proxy_names = table.proxy_names;
    out.cases.reserve(n);
    for (auto i : idx) out.cases.push_back(table.cases[i]);
    return out;
}

} // namespace rdof
