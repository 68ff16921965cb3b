#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ttc/harness.hpp"
#include "ttc/textprep.hpp"

using namespace ttc;

int main(int argc, char** argv) {
    CLI::App app{"Time series and text forecasting experiments"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");

    auto* synth = app.add_subcommand("synth", "Write a synthetic corpus as JSONL");
    SynthConfig sc;
    std::uint64_t synth_seed = 0;
    std::string leak = "none", synth_out;
    synth->add_option("--out", synth_out, "Output file")->required();
    synth->add_option("--length", sc.length, "Number of days");
    synth->add_option("--channels", sc.channels, "Numeric channels");
    synth->add_option("--noise", sc.noise, "Innovation standard deviation");
    synth->add_option("--leak", leak, "none | direction | value");
    synth->add_option("--schema", sc.schema, "weather | medical");
    synth->add_option("--missing-rate", sc.missing_day_rate, "Fraction of interior days dropped");
    synth->add_option("--seed", synth_seed, "Generator seed");

    auto* prepare = app.add_subcommand("prepare", "Build a corpus from values.csv and daily text files");
    std::string prep_in, prep_out, prep_schema = "weather", prep_backend = "stub";
    PrepareOptions popt;
    bool no_summarize = false, no_refine = false;
    prepare->add_option("--input", prep_in, "Directory with values.csv and text/")->required();
    prepare->add_option("--out", prep_out, "Output JSONL")->required();
    prepare->add_option("--schema", prep_schema, "weather | medical");
    prepare->add_option("--backend", prep_backend, "stub | http (reads TTC_LM_* variables)");
    prepare->add_option("--chunk-size", popt.chunk_size, "Characters per chunk");
    prepare->add_flag("--no-summarize", no_summarize, "Keep the daily text as is");
    prepare->add_flag("--no-refine", no_refine, "Skip the refinement pass");

    auto* run = app.add_subcommand("run", "Run an experiment sweep");
    std::string config_path, run_out;
    run->add_option("--config", config_path, "Experiment config (JSON)")->required();
    run->add_option("--out", run_out, "Override the output directory");

    auto* report = app.add_subcommand("report", "Rebuild and print the tables of a finished run");
    std::string report_dir;
    report->add_option("--dir", report_dir, "Run directory")->required();

    auto* plot = app.add_subcommand("plot", "Plot first-day forecasts of a finished run as SVG");
    std::string plot_dir, plot_out;
    std::size_t plot_k = 1;
    std::vector<std::string> plot_models;
    plot->add_option("--dir", plot_dir, "Run directory")->required();
    plot->add_option("--k", plot_k, "Window size");
    plot->add_option("--models", plot_models, "Models to draw (default: all with values)")->delimiter(',');
    plot->add_option("--out", plot_out, "Output SVG (default: <dir>/plot_k<k>.svg)");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    spdlog::set_default_logger(spdlog::default_logger()->clone("ttc"));

    try {
        if (*synth) {
            sc.leak = parse_leak_mode(leak);
            save_corpus(generate_synthetic(sc, synth_seed), synth_out);
            std::cout << fmt::format("wrote {} days to {}\n", sc.length, synth_out);
        } else if (*prepare) {
            popt.summarize = !no_summarize;
            popt.refine = !no_refine;
            std::unique_ptr<LMClient> client;
            if (prep_backend == "http") {
                client = std::make_unique<HttpLMClient>(http_config_from_env());
            } else if (prep_backend == "stub") {
                client = std::make_unique<StubLMClient>();
            } else {
                throw ConfigError(fmt::format("unknown backend '{}'", prep_backend));
            }
            const auto corpus = prepare_corpus(prep_in, schema_by_id(prep_schema), *client, popt);
            save_corpus(corpus, prep_out);
            std::cout << fmt::format("wrote {} days to {}\n", corpus.size(), prep_out);
        } else if (*run) {
            ExperimentConfig config = ExperimentConfig::load(config_path);
            if (!run_out.empty()) config.output_dir = run_out;
            const auto result = run_experiment(config);
            for (const auto& t : result.tables) std::cout << table_to_markdown(t) << '\n';
            if (!result.failures.empty()) {
                std::cout << fmt::format("{} cell(s) failed; see {}\n", result.failures.size(),
                                         (config.output_dir / "failures.jsonl").string());
            }
        } else if (*report) {
            for (const auto& t : report_directory(report_dir)) std::cout << table_to_markdown(t) << '\n';
        } else if (*plot) {
            const auto preds = read_predictions(std::filesystem::path(plot_dir) / "predictions.jsonl");
            if (plot_models.empty()) {
                for (const auto& p : preds) {
                    if (p.k == plot_k && p.forecast.emits_time &&
                        std::find(plot_models.begin(), plot_models.end(), p.model) == plot_models.end()) {
                        plot_models.push_back(p.model);
                    }
                }
            }
            if (plot_out.empty()) plot_out = (std::filesystem::path(plot_dir) / fmt::format("plot_k{}.svg", plot_k)).string();
            const auto r = plot_forecasts(preds, plot_k, plot_models, plot_out);
            std::cout << fmt::format("wrote {} ({} lines)\n", plot_out, r.lines);
            for (const auto& m : r.omitted) std::cout << fmt::format("no forecasts for {}\n", m);
        }
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
