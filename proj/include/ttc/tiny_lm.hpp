#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttc/lm_client.hpp"
#include "ttc/nn.hpp"

namespace ttc {

struct LmConfig {
    int vocab = 256;
    Eigen::Index dim = 64;
    int layers = 2;
    Eigen::Index heads = 4;
    Eigen::Index ffn_mult = 4;
    Eigen::Index max_context = 4096;
    bool final_norm = true;
    bool positional = true;
    std::uint64_t seed = 0;

    /// No blocks, no positions, no final norm: hidden states equal the
    /// input embeddings. Used for wiring checks.
    static LmConfig bypass(Eigen::Index dim, int vocab = 256);

    nlohmann::json to_json() const;
    static LmConfig from_json(const nlohmann::json& j);
};

/// Byte-level vocabulary. Id 0 is end-of-text (also used for padding);
/// byte b maps to 1 + (b - 1) mod (V - 1), which is the identity for V = 256.
class ByteTokenizer {
public:
    static constexpr int eos = 0;

    explicit ByteTokenizer(int vocab = 256);

    int vocab() const { return vocab_; }
    int id(unsigned char byte) const;
    std::vector<int> encode(std::string_view text) const;
    /// Stops at the first end-of-text id.
    std::string decode(std::span<const int> ids) const;

private:
    int vocab_;
};

/// Greedy argmax when temperature is 0, otherwise a softmax draw.
int sample_token(const Eigen::RowVectorXd& logits, const DecodeParams& params, Rng& rng);

struct AdapterSpec {
    std::vector<nn::AdapterTarget> targets{nn::AdapterTarget::attention, nn::AdapterTarget::feed_forward};
    Eigen::Index rank = 8;
    double alpha = 16.0;
    std::uint64_t seed = 0;
};

/// Small causal transformer language model over bytes.
class TinyLm {
public:
    explicit TinyLm(const LmConfig& config);

    const LmConfig& config() const { return config_; }
    const ByteTokenizer& tokenizer() const { return tokenizer_; }
    Eigen::Index dim() const { return config_.dim; }

    ag::Var embed_tokens(std::span<const int> ids) const;
    ag::Matrix embed_tokens_value(std::span<const int> ids) const;

    /// Final hidden states (T x dim) of a causal pass over positions 0..T-1.
    ag::Var forward(const ag::Var& embeddings, std::span<const std::uint8_t> key_mask) const;
    ag::Var logits(const ag::Var& hidden) const { return head_.forward(hidden); }
    ag::Matrix logits_value(const ag::Matrix& hidden) const { return head_.apply(hidden); }

    /// Incremental inference over a growing sequence with explicit
    /// absolute positions. Rows appended with mask false are skipped by
    /// later queries, exactly like padding in `forward`.
    class Session {
    public:
        explicit Session(const TinyLm& lm);
        ag::Matrix append(const ag::Matrix& embeddings, std::span<const Eigen::Index> positions,
                          std::span<const std::uint8_t> mask);
        ag::Matrix append(const ag::Matrix& embeddings, Eigen::Index first_position);
        std::size_t length() const { return length_; }

    private:
        const TinyLm* lm_;
        std::vector<nn::KvCache> caches_;
        std::size_t length_ = 0;
    };

    Session session() const { return Session(*this); }

    /// Decodes after `prompt`; stops at end-of-text or `max_tokens`.
    std::vector<int> generate(std::span<const int> prompt, const DecodeParams& params) const;
    /// Byte-level completion. Drops the head of prompts that would not fit
    /// in the context together with `max_tokens` generated bytes.
    std::string complete(std::string_view prompt, const DecodeParams& params) const;

    /// Mean cross-entropy of `completion` followed by end-of-text, given
    /// `prompt`. Prompt tokens are not scored.
    ag::Var completion_loss(std::span<const int> prompt, std::span<const int> completion) const;

    void attach_adapters(const AdapterSpec& spec);
    void detach_adapters();
    bool has_adapters() const { return has_adapters_; }

    nn::ParameterList base_parameters() const;
    nn::ParameterList adapter_parameters() const;

    /// Independent copy of every parameter (adapters included).
    TinyLm clone() const;

    nlohmann::json to_json() const;
    static TinyLm from_json(const nlohmann::json& j);

private:
    ag::Matrix position_rows(std::span<const Eigen::Index> positions) const;

    LmConfig config_;
    ByteTokenizer tokenizer_;
    ag::Var token_embedding_;
    ag::Var position_embedding_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm final_norm_;
    nn::Linear head_;
    bool has_adapters_ = false;
    AdapterSpec adapter_spec_;
};

/// LMClient over a shared TinyLm (read-only, so concurrent-safe).
class TinyLmClient : public LMClient {
public:
    explicit TinyLmClient(std::shared_ptr<const TinyLm> lm) : lm_(std::move(lm)) {}

    std::string complete(const std::string& prompt, const DecodeParams& params) override {
        return lm_->complete(prompt, params);
    }
    LMCapabilities capabilities() const override;
    std::string name() const override { return "tiny-lm"; }

private:
    std::shared_ptr<const TinyLm> lm_;
};

struct PromptCompletion {
    std::string prompt;
    std::string completion;
};

struct FinetuneConfig {
    AdapterSpec adapter;
    double lr = 5e-3;
    int epochs = 3;
    std::size_t max_pairs = 32;  ///< 0 keeps every pair
    std::uint64_t seed = 0;
};

struct FinetuneReport {
    std::vector<double> epoch_loss;
    std::uint64_t base_checksum_before = 0;
    std::uint64_t base_checksum_after = 0;
    std::size_t pairs_used = 0;
};

/// Trains low-rank adapters only (attached here if absent). Throws
/// std::invalid_argument when the config targets no sub-layer, and
/// std::logic_error if base weights changed.
FinetuneReport finetune_lm(TinyLm& lm, std::span<const PromptCompletion> pairs, const FinetuneConfig& config);

}  // namespace ttc
