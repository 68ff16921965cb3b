#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttc/baselines.hpp"
#include "ttc/corpus.hpp"
#include "ttc/embed.hpp"
#include "ttc/lm_client.hpp"
#include "ttc/metrics.hpp"
#include "ttc/tiny_lm.hpp"

namespace ttc {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Every metric name the harness knows, in table order.
const std::vector<std::string>& known_metrics();
bool is_judge_metric(const std::string& metric);
/// True for rmse; text metrics are higher-is-better.
bool lower_is_better(const std::string& metric);

/// Registered model ids: input_copy, nlinear, nlinear_text, patchtst, every
/// "<variant>:<mode>" prompt model and hybrid.
const std::vector<std::string>& registered_models();
bool is_registered_model(const std::string& id);

struct ModelTraits {
    bool time = true;  ///< forecasts count towards RMSE
    bool text = false;
};
/// Throws ConfigError for unknown ids.
ModelTraits model_traits(const std::string& id);

struct ExperimentConfig {
    std::filesystem::path dataset;     ///< JSONL corpus; empty selects `synth`
    SynthConfig synth;
    std::uint64_t synth_seed = 0;
    std::string schema = "weather";
    std::string target;                ///< empty keeps the corpus target channel
    std::vector<std::size_t> ks;       ///< empty selects the schema default
    std::vector<std::string> models;
    std::uint64_t seed = 0;
    std::vector<std::string> metrics{"rmse", "cosine", "meteor", "rouge1", "rouge2", "rougeL"};
    SplitSpec split;
    double max_missing_fraction = 0.05;
    EmbedderConfig embedder;
    bool cosine_normalize = true;
    LmConfig lm;                       ///< tiny backend shared by LM models
    std::string lm_backend = "tiny";   ///< tiny | http (prompting only)
    std::string judge = "none";        ///< none | http
    std::size_t judge_parallel = 4;
    /// Keyed by model id, by prompt family ("text2text", ...) or "*".
    nlohmann::json model_options = nlohmann::json::object();
    std::filesystem::path output_dir = "results";
    bool parallel = false;

    /// Throws ConfigError.
    void validate() const;
    std::vector<std::size_t> effective_ks() const;
    /// Options for one model: "*", then its family, then its exact id.
    nlohmann::json options_for(const std::string& model_id) const;

    nlohmann::json to_json() const;
    /// Relative paths resolve against `base_dir`.
    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    static ExperimentConfig load(const std::filesystem::path& path);
};

/// Loads or synthesizes the corpus, applies the missing-day filter and the
/// target override.
AlignedCorpus load_experiment_corpus(const ExperimentConfig& config);

/// `k` is the window size the model will see.
std::unique_ptr<ForecastModel> make_model(const std::string& id, const ModelContext& context, std::size_t k);

// --- tables -----------------------------------------------------------------

enum class CellMark { none, best, second };

struct ResultsTable {
    std::string metric;
    std::vector<std::string> rows;          ///< model ids
    std::vector<std::size_t> ks;            ///< one column per k, labelled "k-k"
    std::vector<std::vector<std::optional<double>>> cells;  ///< rows x columns
    std::vector<std::vector<std::size_t>> parse_failures;   ///< rows x columns

    bool lower_is_better() const { return ttc::lower_is_better(metric); }
    /// Competition ranking per column: ties share the better rank, so a tie
    /// for best leaves no second place.
    std::vector<std::vector<CellMark>> marks() const;
    static std::string column_label(std::size_t k);
};

std::string table_to_csv(const ResultsTable& table);
std::string table_to_markdown(const ResultsTable& table);
ResultsTable table_from_csv(std::istream& in, const std::string& metric);

/// Writes <dir>/<metric>.csv and/or <dir>/<metric>.md per table.
void emit_tables(std::span<const ResultsTable> tables, const std::filesystem::path& dir, bool csv = true,
                 bool markdown = true);

/// One table per metric. Rows keep `models` order; RMSE tables list only
/// models that emit values and text tables only models that emit text.
std::vector<ResultsTable> build_tables(std::span<const ScoreReport> reports, const std::vector<std::string>& models,
                                       const std::vector<std::size_t>& ks, const std::vector<std::string>& metrics);

/// Parses scores.csv back into reports.
std::vector<ScoreReport> read_score_csv(std::istream& in);

// --- running ----------------------------------------------------------------

/// One model's forecast for one test window.
struct PredictionRecord {
    std::string model;
    std::size_t k = 0;
    std::string origin;  ///< date of the first input day
    std::vector<double> input_values;
    std::vector<double> truth_values;
    std::vector<std::string> truth_texts;
    Forecast forecast;

    nlohmann::json to_json() const;
    static PredictionRecord from_json(const nlohmann::json& j);
};

struct CellFailure {
    std::string model;
    std::size_t k = 0;
    std::string reason;
};

/// Scores one model's test predictions. RMSE pools every (window, day) pair;
/// text metrics average over days, then over windows. Judge metrics are
/// only computed when `judge` is set.
ScoreReport score_predictions(std::span<const PredictionRecord> predictions, const std::string& model_id,
                              const std::string& dataset_id, std::size_t k, bool emits_time, bool emits_text,
                              const std::vector<std::string>& metrics, const TextEmbedder& embedder,
                              bool cosine_normalize, LMClient* judge = nullptr, std::size_t judge_parallel = 4);

/// Memoizes completions by prompt and appends every new exchange to a JSONL
/// file, so judge scores can be re-derived without new calls.
class CachingClient : public LMClient {
public:
    CachingClient(std::shared_ptr<LMClient> inner, std::filesystem::path cache_file);

    std::string complete(const std::string& prompt, const DecodeParams& params) override;
    LMCapabilities capabilities() const override { return inner_->capabilities(); }
    std::string name() const override { return "cached(" + inner_->name() + ")"; }
    std::size_t hits() const { return hits_; }

private:
    std::shared_ptr<LMClient> inner_;
    std::filesystem::path file_;
    std::map<std::string, std::string> cache_;
    std::size_t hits_ = 0;
    std::mutex mutex_;
};

/// Externally supplied clients; unset members follow the config.
struct RunOptions {
    std::shared_ptr<LMClient> judge;
    std::shared_ptr<LMClient> lm_client;
};

struct ExperimentResult {
    std::vector<ScoreReport> reports;
    std::vector<ResultsTable> tables;
    std::vector<CellFailure> failures;
    std::vector<PredictionRecord> predictions;
};

/// For each k: windows, chronological split, fit every model, predict the
/// test windows and score them. A failing model is recorded per cell and the
/// run continues. Writes config.json, scores.csv, tables/, predictions.jsonl,
/// failures.jsonl and (with a judge) judge_cache.jsonl under output_dir.
ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Re-reads scores.csv and config.json in `dir` and rewrites its tables.
std::vector<ResultsTable> report_directory(const std::filesystem::path& dir);

std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

// --- plotting ---------------------------------------------------------------

struct PlotResult {
    std::vector<std::string> drawn;    ///< models with a line
    std::vector<std::string> omitted;  ///< requested models without forecasts
    std::size_t lines = 0;             ///< including the observed series
};

/// SVG line chart of the observed target over the test windows together with
/// each model's first-day forecast. Throws std::invalid_argument when no
/// requested model has numeric forecasts for `k`.
PlotResult plot_forecasts(std::span<const PredictionRecord> predictions, std::size_t k,
                          const std::vector<std::string>& models, const std::filesystem::path& out);

}  // namespace ttc
