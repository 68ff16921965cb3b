#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ttc/corpus.hpp"
#include "ttc/embed.hpp"
#include "ttc/lm_client.hpp"
#include "ttc/tiny_lm.hpp"

namespace ttc {

struct Forecast {
    std::vector<double> time_values;                ///< one per future day, finite
    std::optional<std::vector<std::string>> texts;  ///< present iff the model emits text
    std::string provenance;                         ///< model id (+ mode)
    bool emits_time = true;
    std::size_t parse_failures = 0;
    std::size_t prompt_tokens = 0;
};

/// Everything a model may need beyond its windows.
struct ModelContext {
    const Schema* schema = nullptr;
    std::size_t target_index = 0;
    std::uint64_t seed = 0;
    std::shared_ptr<const TextEmbedder> embedder;
    /// Trainable desk-scale backend for prompt models and the hybrid.
    std::shared_ptr<const TinyLm> lm;
    /// Optional external backend used by zero-shot / in-context prompting.
    std::shared_ptr<LMClient> lm_client;
    /// Per-model overrides (epochs, learning rates, ...).
    nlohmann::json options = nlohmann::json::object();
};

class ForecastModel {
public:
    virtual ~ForecastModel() = default;

    virtual std::string id() const = 0;
    virtual bool emits_time() const { return true; }
    virtual bool emits_text() const { return false; }

    virtual void fit(std::span<const WindowPair> train, std::span<const WindowPair> val) = 0;
    /// Throws std::logic_error before fit.
    virtual Forecast predict(std::span<const TimeTextRecord> input) const = 0;

    /// Fitted state only; the versioned header is added by save_model.
    virtual nlohmann::json state() const = 0;
    virtual void load_state(const nlohmann::json& state) = 0;
};

/// {"format": "ttc-model", "version": 1, "id": ..., "state": ...}
nlohmann::json save_model(const ForecastModel& model);
/// Restores `state` into a model built for the same id. Throws on a header
/// or id mismatch.
void load_model(ForecastModel& model, const nlohmann::json& file);

double target_value(const TimeTextRecord& record, std::size_t target_index);

class InputCopy : public ForecastModel {
public:
    explicit InputCopy(std::size_t target_index = 0) : target_index_(target_index) {}

    std::string id() const override { return "input_copy"; }
    bool emits_text() const override { return true; }
    void fit(std::span<const WindowPair>, std::span<const WindowPair>) override {}
    Forecast predict(std::span<const TimeTextRecord> input) const override;
    nlohmann::json state() const override { return nlohmann::json::object(); }
    void load_state(const nlohmann::json&) override {}

private:
    std::size_t target_index_;
};

/// Linear map on last-value-normalized inputs:
/// y = (x - x_last) W + b + x_last, W k x k, fit by least squares.
class NLinear : public ForecastModel {
public:
    explicit NLinear(std::size_t target_index = 0) : target_index_(target_index) {}

    std::string id() const override { return "nlinear"; }
    void fit(std::span<const WindowPair> train, std::span<const WindowPair> val) override;
    Forecast predict(std::span<const TimeTextRecord> input) const override;
    std::vector<double> predict_values(std::span<const double> x) const;

    bool fitted() const { return weights_.size() > 0; }
    const Eigen::MatrixXd& weights() const { return weights_; }
    const Eigen::RowVectorXd& bias() const { return bias_; }
    void set_parameters(Eigen::MatrixXd weights, Eigen::RowVectorXd bias);

    nlohmann::json state() const override;
    void load_state(const nlohmann::json& state) override;

private:
    std::size_t target_index_;
    Eigen::MatrixXd weights_;
    Eigen::RowVectorXd bias_;
};

/// NLinear with the k sentence embeddings of the input days appended to the
/// normalized values. Only the embedding block is ridge-penalized, so a zero
/// embedding block (or E = 0) reproduces NLinear exactly.
class NLinearText : public ForecastModel {
public:
    NLinearText(std::size_t target_index, std::shared_ptr<const TextEmbedder> embedder, double ridge = 10.0);

    std::string id() const override { return "nlinear_text"; }
    void fit(std::span<const WindowPair> train, std::span<const WindowPair> val) override;
    Forecast predict(std::span<const TimeTextRecord> input) const override;

    bool fitted() const { return time_weights_.size() > 0; }
    std::size_t embedding_dim() const { return embedding_dim_; }
    const Eigen::MatrixXd& time_weights() const { return time_weights_; }
    const Eigen::MatrixXd& text_weights() const { return text_weights_; }
    const Eigen::RowVectorXd& bias() const { return bias_; }
    void set_parameters(Eigen::MatrixXd time_weights, Eigen::MatrixXd text_weights, Eigen::RowVectorXd bias);

    nlohmann::json state() const override;
    void load_state(const nlohmann::json& state) override;

private:
    Eigen::RowVectorXd text_features(std::span<const TimeTextRecord> input) const;

    std::size_t target_index_;
    std::shared_ptr<const TextEmbedder> embedder_;
    double ridge_;
    std::size_t embedding_dim_ = 0;
    Eigen::MatrixXd time_weights_;
    Eigen::MatrixXd text_weights_;
    Eigen::RowVectorXd bias_;
};

struct PatchLayout {
    std::size_t patch_len = 0;
    std::size_t stride = 0;
    std::size_t patches = 0;
};

/// P=4, S=2 for k >= 4, otherwise P=S=k; patches = floor((k-P)/S) + 1.
PatchLayout patch_layout(std::size_t k);

struct PatchTstOptions {
    Eigen::Index dim = 64;
    Eigen::Index heads = 4;
    int layers = 2;
    int epochs = 40;
    int patience = 8;
    std::size_t batch = 16;
    double lr = 1e-3;
};

/// Small patch transformer with global standardization followed by
/// per-sample instance normalization.
class PatchTst : public ForecastModel {
public:
    PatchTst(std::size_t target_index, std::uint64_t seed, PatchTstOptions options = {});
    ~PatchTst() override;

    std::string id() const override { return "patchtst"; }
    void fit(std::span<const WindowPair> train, std::span<const WindowPair> val) override;
    Forecast predict(std::span<const TimeTextRecord> input) const override;
    std::vector<double> predict_values(std::span<const double> x) const;

    const std::vector<double>& train_losses() const { return train_losses_; }

    nlohmann::json state() const override;
    void load_state(const nlohmann::json& state) override;

private:
    struct Net;

    std::size_t target_index_;
    std::uint64_t seed_;
    PatchTstOptions options_;
    std::unique_ptr<Net> net_;
    double mean_ = 0.0;
    double std_ = 1.0;
    std::vector<double> train_losses_;
};

enum class PromptVariant { text2text, texttime2text, texttime2time, texttime2texttime };
enum class PromptMode { zero_shot, in_context, fine_tuned };

PromptVariant parse_prompt_variant(std::string_view s);
PromptMode parse_prompt_mode(std::string_view s);
std::string_view to_string(PromptVariant v);
std::string_view to_string(PromptMode m);

struct PromptSpec {
    const Schema* schema = nullptr;
    std::size_t k = 1;
    PromptVariant variant = PromptVariant::texttime2texttime;
    PromptMode mode = PromptMode::zero_shot;

    bool input_has_time() const { return variant != PromptVariant::text2text; }
    bool output_has_time() const {
        return variant == PromptVariant::texttime2time || variant == PromptVariant::texttime2texttime;
    }
    bool output_has_text() const { return variant != PromptVariant::texttime2time; }
};

/// Solved example for in-context prompting: the example's input days and
/// their true continuation.
struct PromptExample {
    std::span<const TimeTextRecord> input;
    std::span<const TimeTextRecord> target;
};

/// Pure function of its arguments. `example` must be present iff the mode
/// is in-context.
std::string build_prompt(const PromptSpec& spec, std::span<const TimeTextRecord> input,
                         std::size_t target_index, const std::optional<PromptExample>& example = std::nullopt);

/// The JSON answer a perfect model would give for `target` (days k+1..2k).
std::string render_response(const PromptSpec& spec, std::span<const TimeTextRecord> target,
                            std::size_t target_index);

/// Extracts the first balanced JSON object. Days or fields that are missing
/// or malformed fall back to the Input_Copy value / text; any fallback
/// counts as one parse failure.
Forecast parse_llm_forecast(std::string_view response, const PromptSpec& spec,
                            std::span<const TimeTextRecord> input, std::size_t target_index);

/// Returns the first substring that parses as a JSON object, if any.
std::optional<std::string> first_json_object(std::string_view text);

class PromptForecaster : public ForecastModel {
public:
    PromptForecaster(PromptSpec spec, ModelContext context);

    std::string id() const override;
    bool emits_time() const override { return spec_.output_has_time(); }
    bool emits_text() const override { return spec_.output_has_text(); }
    void fit(std::span<const WindowPair> train, std::span<const WindowPair> val) override;
    Forecast predict(std::span<const TimeTextRecord> input) const override;

    const PromptSpec& spec() const { return spec_; }
    const std::optional<FinetuneReport>& finetune_report() const { return report_; }
    /// Index into the training windows of the in-context example for a query.
    std::size_t example_index(const Date& query_start) const;

    nlohmann::json state() const override;
    void load_state(const nlohmann::json& state) override;

private:
    std::string complete(const std::string& prompt) const;

    PromptSpec spec_;
    ModelContext ctx_;
    bool fitted_ = false;
    std::vector<WindowPair> examples_;
    std::shared_ptr<TinyLm> tuned_;
    std::optional<FinetuneReport> report_;
    std::size_t max_new_tokens_ = 256;
};

}  // namespace ttc
