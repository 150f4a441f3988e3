// rdof: data generation, multiverse runs with multiplicity adjustment,
// and the FWER / power simulation studies.
//
// Exit codes: 0 success, 2 usage or config error, 3 data validation error,
// 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rdof/rdof.hpp"

namespace {

constexpr int kExitConfig = static_cast<int>(rdof::ErrorKind::Config);
constexpr int kExitNumeric = static_cast<int>(rdof::ErrorKind::Numeric);

struct GenFlags {
    std::size_t n = 200;
    std::uint64_t seed = 1;
    double effect = 0.0;
    double missing_rate = rdof::GenConfig{}.missing_rate;
    std::size_t proxies = rdof::GenConfig{}.n_proxies;
    std::string out;
};

int cmd_gen_data(const GenFlags& f) {
    rdof::GenConfig g;
    g.n_cases = f.n;
    g.seed = f.seed;
    g.effect_size = f.effect;
    g.missing_rate = f.missing_rate;
    g.n_proxies = f.proxies;
    const auto table = rdof::generate(g);
    {
        std::ofstream out(f.out, std::ios::binary);
        if (!out) throw rdof::ConfigError("cannot write '" + f.out + "'");
        rdof::write_csv(table, out);
        if (!out) throw rdof::ConfigError("write to '" + f.out + "' failed");
    }
    const auto rows = table.n_rows();
    std::size_t events = 0;
    for (const auto& c : table.cases) events += static_cast<std::size_t>(c.outcome);
    std::cout << "wrote " << table.size() << " cases, " << rows << " measurement rows to " << f.out << '\n'
              << "missing pao2: " << table.n_missing() << " rows (realized rate "
              << rdof::format_double(static_cast<double>(table.n_missing()) / static_cast<double>(rows)) << ")\n"
              << "outcome = 1: " << events << " cases\n";
    return 0;
}

struct RunFlags {
    std::string config;
    std::string input;
    std::size_t n = 0;
    std::uint64_t data_seed = 1;
    double effect = 0.0;
    double missing_rate = 0.0;
    std::size_t B = 0;
    double alpha = 0.0;
    std::uint64_t seed = 0;
    std::string out_dir;
    unsigned workers = 0;
    bool holm = false;
};

int cmd_run(const CLI::App& sub, const RunFlags& f) {
    rdof::RunConfig cfg;
    if (!f.config.empty()) cfg = rdof::load_run_config(f.config);
    const bool gen_flags = sub.count("--n") + sub.count("--data-seed") + sub.count("--effect") + sub.count("--missing-rate") > 0;
    if (sub.count("--input") && gen_flags) throw rdof::ConfigError("--input cannot be combined with generator flags");
    if (sub.count("--input")) {
        cfg.input = f.input;
        cfg.generator.reset();
    }
    if (gen_flags) {
        auto g = cfg.generator.value_or(rdof::GenConfig{});
        if (sub.count("--n")) g.n_cases = f.n;
        if (sub.count("--data-seed")) g.seed = f.data_seed;
        if (sub.count("--effect")) g.effect_size = f.effect;
        if (sub.count("--missing-rate")) g.missing_rate = f.missing_rate;
        cfg.generator = g;
        cfg.input.reset();
    }
    if (!cfg.input && !cfg.generator && f.config.empty()) cfg.generator = rdof::GenConfig{};
    if (sub.count("--B")) cfg.B = f.B;
    if (sub.count("--alpha")) cfg.alpha = f.alpha;
    if (sub.count("--seed")) cfg.master_seed = f.seed;
    if (sub.count("--out-dir")) cfg.output_dir = f.out_dir;
    if (sub.count("--workers")) cfg.workers = f.workers;
    rdof::execute_run(cfg, &std::cout, f.holm);
    return 0;
}

struct SimFlags {
    std::size_t runs = 0;
    std::size_t B = 0;
    std::vector<std::size_t> sizes;
    std::vector<double> alphas;
    double alpha = 0.0;
    double effect = 0.0;
    std::uint64_t seed = 0;
    std::string out;
    unsigned workers = 0;
    bool paper_scale = false;
};

rdof::ProgressFn progress_printer(const char* study) {
    return [study](std::size_t done, std::size_t total) {
        const std::size_t step = std::max<std::size_t>(1, total / 100);
        if (done % step == 0 || done == total) {
            std::cerr << '\r' << study << ": " << done << '/' << total << " runs" << (done == total ? "\n" : "") << std::flush;
        }
    };
}

void write_study(const rdof::StudyResult& res, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw rdof::ConfigError("cannot write '" + path + "'");
    rdof::write_study_csv(res, out);
    if (!out) throw rdof::ConfigError("write to '" + path + "' failed");
    std::cout << "wrote " << res.rows.size() << " rows to " << path << '\n';
}

int cmd_simulate_fwer(const CLI::App& sub, const SimFlags& f, unsigned workers) {
    auto cfg = f.paper_scale ? rdof::FwerStudyConfig::paper_scale() : rdof::FwerStudyConfig{};
    if (sub.count("--runs")) cfg.runs = f.runs;
    if (sub.count("--B")) cfg.B = f.B;
    if (sub.count("--sizes")) cfg.sample_sizes = f.sizes;
    if (sub.count("--alpha")) cfg.alpha = f.alpha;
    if (sub.count("--seed")) cfg.master_seed = f.seed;
    cfg.workers = workers;
    const auto res = rdof::run_fwer_study(cfg, rdof::SpecTree::paper_default(), progress_printer("fwer"));
    write_study(res, f.out.empty() ? "fwer.csv" : f.out);
    return 0;
}

int cmd_simulate_power(const CLI::App& sub, const SimFlags& f, unsigned workers) {
    auto cfg = f.paper_scale ? rdof::PowerStudyConfig::paper_scale() : rdof::PowerStudyConfig{};
    if (sub.count("--runs")) cfg.runs = f.runs;
    if (sub.count("--B")) cfg.B = f.B;
    if (sub.count("--sizes")) cfg.sample_sizes = f.sizes;
    if (sub.count("--alphas")) cfg.alphas = f.alphas;
    if (sub.count("--effect")) cfg.reference.effect_size = f.effect;
    if (sub.count("--seed")) cfg.master_seed = f.seed;
    cfg.workers = workers;
    const auto res = rdof::run_power_study(cfg, rdof::SpecTree::paper_default(), progress_printer("power"));
    write_study(res, f.out.empty() ? "power.csv" : f.out);
    return 0;
}

void add_sim_flags(CLI::App* app, SimFlags& f) {
    app->add_option("--runs", f.runs, "simulation runs per sample size");
    app->add_option("--B", f.B, "permutations per run");
    app->add_option("--sizes", f.sizes, "sample sizes, comma separated")->delimiter(',');
    app->add_option("--seed", f.seed, "master seed");
    app->add_option("--out", f.out, "results CSV path");
    app->add_option("--workers", f.workers, "worker threads (default: $RDOF_WORKERS or all cores)");
    app->add_flag("--paper-scale", f.paper_scale, "full-size study: 1000 runs, B = 1000, full size grid");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Researcher degrees of freedom: multiverse analysis with minP, Bonferroni and Holm adjustment"};
    app.require_subcommand(1);

    GenFlags gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic case table as CSV");
    gen_cmd->add_option("--n", gen.n, "number of cases");
    gen_cmd->add_option("--seed", gen.seed, "generator seed");
    gen_cmd->add_option("--effect", gen.effect, "log-odds per 100 mmHg of mean paO2");
    gen_cmd->add_option("--missing-rate", gen.missing_rate, "probability a paO2 value is unobserved");
    gen_cmd->add_option("--proxies", gen.proxies, "number of proxy vitals");
    gen_cmd->add_option("--out", gen.out, "output CSV path")->required();

    RunFlags run;
    auto* run_cmd = app.add_subcommand("run", "run the multiverse, adjust, and write reports");
    run_cmd->add_option("--config", run.config, "JSON run configuration");
    run_cmd->add_option("--input", run.input, "case table CSV");
    run_cmd->add_option("--n", run.n, "generate a table with this many cases");
    run_cmd->add_option("--data-seed", run.data_seed, "generator seed");
    run_cmd->add_option("--effect", run.effect, "generator effect size");
    run_cmd->add_option("--missing-rate", run.missing_rate, "generator missing rate");
    run_cmd->add_option("--B", run.B, "permutations");
    run_cmd->add_option("--alpha", run.alpha, "significance level");
    run_cmd->add_option("--seed", run.seed, "master seed");
    run_cmd->add_option("--out-dir", run.out_dir, "output directory");
    run_cmd->add_option("--workers", run.workers, "worker threads (default: $RDOF_WORKERS or all cores)");
    run_cmd->add_flag("--holm", run.holm, "also print the Holm-adjusted p_(1)");

    auto* sim_cmd = app.add_subcommand("simulate", "simulation studies");
    sim_cmd->require_subcommand(1);
    SimFlags fwer, power;
    auto* fwer_cmd = sim_cmd->add_subcommand("fwer", "family-wise error rate under the global null");
    add_sim_flags(fwer_cmd, fwer);
    fwer_cmd->add_option("--alpha", fwer.alpha, "significance level");
    auto* power_cmd = sim_cmd->add_subcommand("power", "proportion of significant specs under a real association");
    add_sim_flags(power_cmd, power);
    power_cmd->add_option("--alphas", power.alphas, "significance levels, comma separated")->delimiter(',');
    power_cmd->add_option("--effect", power.effect, "effect size of the reference table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*run_cmd) return cmd_run(*run_cmd, run);
        if (*fwer_cmd) return cmd_simulate_fwer(*fwer_cmd, fwer, fwer_cmd->count("--workers") ? fwer.workers : rdof::default_workers());
        if (*power_cmd) return cmd_simulate_power(*power_cmd, power, power_cmd->count("--workers") ? power.workers : rdof::default_workers());
    } catch (const rdof::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kExitNumeric;
    }
    return kExitConfig;
}
