#pragma once

// Declarative run configuration and the file/console outputs of a
// multiverse run. Argument parsing lives in tools/; everything here is
// callable from tests.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <system_error>

#include <nlohmann/json.hpp>

#include "rdof/adjust.hpp"
#include "rdof/dataset.hpp"
#include "rdof/error.hpp"
#include "rdof/multiverse.hpp"
#include "rdof/parallel.hpp"

namespace rdof {

struct RunConfig {
    std::optional<std::string> input;
    std::optional<GenConfig> generator;
    SpecTree tree = SpecTree::paper_default();
    std::size_t B = 1000;
    double alpha = 0.05;
    std::uint64_t master_seed = 1;
    std::string output_dir = "rdof_out";
    unsigned workers = 0;  // 0: default_workers()

    void check() const {
        if (input.has_value() == generator.has_value()) throw ConfigError("exactly one of 'input' or 'generator' must be given");
        if (generator) generator->check();
        if (B < 1) throw ConfigError("B must be >= 1");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
        if (output_dir.empty()) throw ConfigError("output directory must not be empty");
        rdof::check(tree);
    }

    unsigned effective_workers() const { return workers > 0 ? workers : default_workers(); }
};

namespace detail {

template <typename T>
T json_get(const nlohmann::json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known, const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown key '" + key + "' in " + where);
}

inline GenConfig generator_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("'generator' must be an object");
    reject_unknown_keys(j,
                        {"n_cases", "min_measurements", "max_measurements", "missing_rate", "n_proxies", "effect_size",
                         "baseline_logit", "pao2_median", "sigma_case", "sigma_within", "proxy_noise_base", "proxy_noise_step", "seed"},
                        "generator");
    GenConfig g;
    const std::string w = "generator";
    if (j.contains("n_cases")) g.n_cases = json_get<std::size_t>(j, "n_cases", w);
    if (j.contains("min_measurements")) g.min_measurements = json_get<std::size_t>(j, "min_measurements", w);
    if (j.contains("max_measurements")) g.max_measurements = json_get<std::size_t>(j, "max_measurements", w);
    if (j.contains("missing_rate")) g.missing_rate = json_get<double>(j, "missing_rate", w);
    if (j.contains("n_proxies")) g.n_proxies = json_get<std::size_t>(j, "n_proxies", w);
    if (j.contains("effect_size")) g.effect_size = json_get<double>(j, "effect_size", w);
    if (j.contains("baseline_logit")) g.baseline_logit = json_get<double>(j, "baseline_logit", w);
    if (j.contains("pao2_median")) g.pao2_median = json_get<double>(j, "pao2_median", w);
    if (j.contains("sigma_case")) g.sigma_case = json_get<double>(j, "sigma_case", w);
    if (j.contains("sigma_within")) g.sigma_within = json_get<double>(j, "sigma_within", w);
    if (j.contains("proxy_noise_base")) g.proxy_noise_base = json_get<double>(j, "proxy_noise_base", w);
    if (j.contains("proxy_noise_step")) g.proxy_noise_step = json_get<double>(j, "proxy_noise_step", w);
    if (j.contains("seed")) g.seed = json_get<std::uint64_t>(j, "seed", w);
    return g;
}

inline SpecTree tree_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("'spec_tree' must be an object");
    reject_unknown_keys(j, {"axes", "exclusions", "collapse_duplicates"}, "spec_tree");
    SpecTree tree;
    if (!j.contains("axes")) throw ConfigError("spec_tree.axes is required");
    for (const auto& a : j.at("axes")) {
        Axis axis;
        axis.name = json_get<std::string>(a, "name", "spec_tree.axes[]");
        axis.options = json_get<std::vector<std::string>>(a, "options", "spec_tree.axes[]");
        tree.axes.push_back(std::move(axis));
    }
    if (j.contains("exclusions"))
        for (const auto& e : j.at("exclusions")) {
            if (!e.is_object()) throw ConfigError("each exclusion must be an object of axis: option pairs");
            Exclusion ex;
            for (const auto& [axis, option] : e.items()) {
                if (!option.is_string()) throw ConfigError("exclusion option for '" + axis + "' must be a string");
                ex.match.emplace_back(axis, option.get<std::string>());
            }
            tree.exclusions.push_back(std::move(ex));
        }
    if (j.contains("collapse_duplicates")) tree.collapse_duplicates = json_get<bool>(j, "collapse_duplicates", "spec_tree");
    return tree;
}

} // namespace detail

// Keys: input | generator{...}, spec_tree{axes, exclusions, collapse_duplicates},
// B, alpha, master_seed, output_dir, workers. Absent keys keep defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    detail::reject_unknown_keys(j, {"input", "generator", "spec_tree", "B", "alpha", "master_seed", "output_dir", "workers"}, "config");
    RunConfig c;
    if (j.contains("input")) c.input = detail::json_get<std::string>(j, "input", "config");
    if (j.contains("generator")) c.generator = detail::generator_from_json(j.at("generator"));
    if (j.contains("spec_tree")) c.tree = detail::tree_from_json(j.at("spec_tree"));
    if (j.contains("B")) c.B = detail::json_get<std::size_t>(j, "B", "config");
    if (j.contains("alpha")) c.alpha = detail::json_get<double>(j, "alpha", "config");
    if (j.contains("master_seed")) c.master_seed = detail::json_get<std::uint64_t>(j, "master_seed", "config");
    if (j.contains("output_dir")) c.output_dir = detail::json_get<std::string>(j, "output_dir", "config");
    if (j.contains("workers")) c.workers = detail::json_get<unsigned>(j, "workers", "config");
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

// Exclusive marker file in the output directory; removed on destruction.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".rdof.lock") {
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw ConfigError("cannot create output directory '" + dir.string() + "': " + ec.message());
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) throw ConfigError("output directory '" + dir.string() + "' is locked (remove " + path_.string() + " if no run is active)");
        std::fclose(f);
    }
    ~DirectoryLock() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path path_;
};

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    return out;
}

inline CaseTable run_input(const RunConfig& cfg) {
    if (cfg.input) return load_csv(*cfg.input);
    return generate(*cfg.generator);
}

// The headline is the minP-adjusted p_(1); the raw value comes second.
inline void print_report(const AdjustmentReport& rep, std::ostream& out, bool show_holm) {
    const auto i = rep.argmin();
    const auto& spec = rep.raw.specs[i];
    out << "specifications: " << rep.m() << "   permutations: " << rep.B << "   seed: " << rep.master_seed
        << "   alpha: " << format_double(rep.alpha) << '\n';
    out << "smallest p-value p_(1): spec " << rep.raw.entries[i].spec_id << " (" << spec.label() << ")\n";
    out << std::left;
    out << "  " << std::setw(20) << "minP-adjusted" << format_double(rep.minp[i]) << '\n';
    out << "  " << std::setw(20) << "raw" << format_double(rep.raw.entries[i].p_value) << '\n';
    out << "  " << std::setw(20) << "Bonferroni" << format_double(rep.bonferroni[i]) << '\n';
    if (show_holm) out << "  " << std::setw(20) << "Holm" << format_double(rep.holm[i]) << '\n';
    const auto summary = report_summary(rep);
    out << "specs with minP < alpha: " << summary["n_rejected_minp"].get<std::size_t>() << " of " << rep.m()
        << "   (raw p < alpha: " << summary["n_rejected_raw"].get<std::size_t>() << ")\n";
}

// Writes pvalues.csv, report.csv and summary.json into cfg.output_dir.
inline AdjustmentReport execute_run(const RunConfig& cfg, std::ostream* console = nullptr, bool show_holm = false) {
    cfg.check();
    const std::filesystem::path dir(cfg.output_dir);
    DirectoryLock lock(dir);
    const auto table = run_input(cfg);
    validate(table);
    const auto rep = adjust_all(table, cfg.tree, cfg.B, cfg.alpha, cfg.master_seed, cfg.effective_workers());
    {
        auto out = open_output(dir / "pvalues.csv");
        write_pvalues_csv(rep.raw, out);
    }
    {
        auto out = open_output(dir / "report.csv");
        write_report_csv(rep, out);
    }
    {
        auto out = open_output(dir / "summary.json");
        out << report_summary(rep).dump(2) << '\n';
    }
    if (console) print_report(rep, *console, show_holm);
    return rep;
}

} // namespace rdof
