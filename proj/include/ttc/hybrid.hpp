#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttc/baselines.hpp"
#include "ttc/corpus.hpp"
#include "ttc/embed.hpp"
#include "ttc/nn.hpp"
#include "ttc/tiny_lm.hpp"

namespace ttc {

enum class LmTraining { full, adapters, frozen };
enum class TimeReadout { query, stage1 };

struct HybridConfig {
    std::size_t input_steps = 1;       ///< I (= k)
    std::size_t channels = 1;          ///< C
    std::size_t tokens_per_step = 40;  ///< N
    std::size_t embed_dim = 64;        ///< E, from the text embedder
    std::size_t hidden_dim = 64;       ///< fusion width
    std::size_t outputs = 1;           ///< O (= k, univariate target)
    std::size_t mlp_heads = 4;
    double lambda_time = 1.0;
    double lambda_text = 1.0;
    std::string embed_mode = "sentence";  ///< sentence | token
    LmTraining lm_training = LmTraining::full;
    TimeReadout time_readout = TimeReadout::query;
    bool pretrain_stage1 = true;
    /// Time heads predict the offset from the last observed target value.
    bool last_value_residual = true;
    std::size_t target_channel = 0;

    int stage1_epochs = 200;
    int stage1_patience = 10;
    double stage1_lr = 3e-3;
    std::size_t stage1_batch = 16;

    int stage2_epochs = 30;
    int stage2_patience = 5;
    double stage2_lr = 1e-3;
    std::size_t stage2_batch = 8;
    Eigen::Index adapter_rank = 8;

    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    nlohmann::json to_json() const;
    static HybridConfig from_json(const nlohmann::json& j);
};

/// Per-channel standardization statistics taken from training inputs.
struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> std;
    std::size_t target_index = 0;

    static ChannelStats fit(std::span<const WindowPair> train, std::size_t target_index);
    double standardize_target(double v) const { return (v - mean[target_index]) / std[target_index]; }
    double destandardize_target(double z) const { return z * std[target_index] + mean[target_index]; }
};

/// Per-step fusion of standardized channels with projected text features,
/// followed by a linear time head over the flattened hidden states (plus the
/// last standardized target value when the residual is enabled).
class Stage1Fuser {
public:
    Stage1Fuser() = default;
    Stage1Fuser(const HybridConfig& config, Rng& rng);

    struct Output {
        ag::Var hidden;     ///< I x hidden_dim
        ag::Var time_pred;  ///< 1 x O, standardized units
    };

    /// Throws std::invalid_argument naming the offending dimension.
    Output forward(const ag::Matrix& time_block, const ag::Matrix& text_embeds) const;
    /// 1 x O offset the time heads are relative to (zeros without residual).
    ag::Matrix time_offset(const ag::Matrix& time_block) const;

    nn::ParameterList parameters() const;
    std::size_t scalar_count() const { return parameters().scalar_count(); }

private:
    std::size_t input_steps_ = 0, channels_ = 0, embed_dim_ = 0, hidden_dim_ = 0, outputs_ = 0;
    std::size_t target_channel_ = 0;
    bool residual_ = false;
    nn::Linear text_proj_;
    std::vector<std::pair<nn::Linear, nn::Linear>> heads_;
    nn::Linear time_head_;
};

/// Numeric and tokenized view of one window, computed once.
struct PreparedWindow {
    ag::Matrix time_block;   ///< I x C, standardized
    ag::Matrix text_embeds;  ///< I x E
    ag::Matrix target;       ///< 1 x O, standardized
    std::vector<double> target_raw;
    std::vector<std::vector<int>> input_tokens;   ///< I blocks, at most N ids each
    std::vector<std::vector<int>> future_tokens;  ///< O blocks, at most N ids each
};

PreparedWindow prepare_window(std::span<const TimeTextRecord> input, std::span<const TimeTextRecord> target,
                              const HybridConfig& config, const ChannelStats& stats, const TextEmbedder& embedder,
                              const ByteTokenizer& tokenizer);

struct Stage1Result {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    double best_val = 0.0;
    int best_epoch = 0;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Adam on standardized MSE with early stopping; leaves the fuser at its
/// best-validation parameters. Non-finite losses raise TrainingError after
/// restoring the last good parameters.
Stage1Result stage1_pretrain(Stage1Fuser& fuser, std::span<const PreparedWindow> train,
                             std::span<const PreparedWindow> val, const HybridConfig& config);

class Stage2Model {
public:
    Stage2Model(const HybridConfig& config, const TinyLm& lm, Stage1Fuser fuser, ChannelStats stats);

    const HybridConfig& config() const { return config_; }
    const ChannelStats& stats() const { return stats_; }
    const Stage1Fuser& fuser() const { return fuser_; }
    Stage1Fuser& fuser() { return fuser_; }
    const TinyLm& lm() const { return lm_; }
    TinyLm& lm() { return lm_; }
    const nn::Linear& adapter() const { return adapter_; }
    nn::Linear& adapter() { return adapter_; }
    nn::Linear& time_head() { return time_head_; }
    const nn::Linear& time_head() const { return time_head_; }
    const ag::Var& queries() const { return queries_; }

    /// Parameters updated by end-to-end training under the configured LM mode.
    nn::ParameterList trainable_parameters() const;
    nn::ParameterList all_parameters() const;

    nlohmann::json to_json() const;
    static Stage2Model from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Stage2Model load(const std::filesystem::path& path);

private:
    HybridConfig config_;
    ChannelStats stats_;
    Stage1Fuser fuser_;
    TinyLm lm_;
    nn::Linear adapter_;
    ag::Var queries_;
    nn::Linear time_head_;
};

struct Stage2Sequence {
    ag::Var embeddings;  ///< T x E_lm
    ag::Mask mask;       ///< padding hidden
    std::vector<int> labels;  ///< T entries, -1 = ignore
    std::vector<Eigen::Index> readout_positions;  ///< one per future block
    ag::Var stage1_time;  ///< 1 x O
    ag::Matrix time_offset;  ///< 1 x O, added to the query readout
    std::size_t length() const { return labels.size(); }
};

/// Layout: per input step [adapter(hidden_i)] + N token slots, then per
/// future step [query_j] + N teacher-forced slots. Position p is labeled with
/// the id of slot p+1 of its block when that slot is real (text or
/// end-of-text); everything else is ignored.
Stage2Sequence build_stage2_sequence(const PreparedWindow& window, const Stage2Model& model);

struct Stage2Output {
    ag::Var text_logits;       ///< labeled rows x V
    std::vector<int> labels;   ///< compacted, one per logit row
    ag::Var time_pred;         ///< 1 x O, standardized
    std::vector<double> time_values;  ///< de-standardized
};

Stage2Output stage2_forward(const Stage2Sequence& sequence, const Stage2Model& model);

struct JointLoss {
    ag::Var total;
    double mse = 0.0;
    double ce = 0.0;
};

/// lambda_time * MSE + lambda_text * mean CE over non-ignored labels (CE is
/// 0 when every label is ignored).
JointLoss joint_loss(const ag::Var& text_logits, std::span<const int> labels, const ag::Var& time_pred,
                     const ag::Matrix& time_truth, double lambda_time, double lambda_text);

struct EpochRecord {
    int epoch = 0;
    double train_total = 0.0, train_mse = 0.0, train_ce = 0.0;
    double val_total = 0.0, val_mse = 0.0, val_ce = 0.0;
};

struct TrainState {
    std::vector<EpochRecord> history;  ///< history[0] is the untrained model
    int best_epoch = 0;
    double best_val = 0.0;
};

/// Joint training with teacher forcing and early stopping on validation joint
/// loss. Aborts with TrainingError when the loss stays above ten times its
/// initial value for three consecutive epochs.
TrainState train_end_to_end(Stage2Model& model, std::span<const PreparedWindow> train,
                            std::span<const PreparedWindow> val);

/// Mean validation losses without touching parameters.
EpochRecord evaluate_joint(const Stage2Model& model, std::span<const PreparedWindow> windows);

/// Greedy (or seeded) decoding of every future block; at most N tokens each.
Forecast hybrid_predict(std::span<const TimeTextRecord> input, const Stage2Model& model, const TextEmbedder& embedder,
                        const DecodeParams& params = {});

/// ForecastModel wrapper: Stage 1 pretraining followed by end-to-end training.
class HybridForecaster : public ForecastModel {
public:
    HybridForecaster(HybridConfig config, ModelContext context);

    std::string id() const override { return "hybrid"; }
    bool emits_text() const override { return true; }
    void fit(std::span<const WindowPair> train, std::span<const WindowPair> val) override;
    Forecast predict(std::span<const TimeTextRecord> input) const override;

    const Stage2Model* model() const { return model_.get(); }
    const Stage1Result& stage1_result() const { return stage1_; }
    const TrainState& train_state() const { return state_; }

    nlohmann::json state() const override;
    void load_state(const nlohmann::json& state) override;

private:
    HybridConfig config_;
    ModelContext ctx_;
    std::unique_ptr<Stage2Model> model_;
    Stage1Result stage1_;
    TrainState state_;
};

}  // namespace ttc
