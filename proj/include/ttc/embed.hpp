#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace ttc {

/// Lowercases and splits on every non-alphanumeric ASCII byte. Bytes >= 0x80
/// count as word characters so multibyte words survive intact.
std::vector<std::string> word_tokens(std::string_view text);

struct TokenizedText {
    std::vector<int> ids;         ///< length <= N
    Eigen::MatrixXd matrix;       ///< N x E, padding rows zero
    std::vector<bool> mask;       ///< length N, true on real tokens
};

class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;
    virtual std::size_t dim() const = 0;
    virtual std::size_t vocab_size() const = 0;
    /// Unit-norm sentence vector; empty text maps to the sentinel e_1.
    virtual Eigen::VectorXd embed_sentence(std::string_view text) const = 0;
    /// Head-truncated / zero-padded to exactly N rows.
    virtual TokenizedText tokenize(std::string_view text, std::size_t max_tokens) const = 0;
    virtual std::string name() const = 0;

    /// Masked mean of the token rows (zero vector when no tokens).
    Eigen::VectorXd mean_token_embedding(std::string_view text, std::size_t max_tokens) const;
};

Eigen::VectorXd empty_text_sentinel(std::size_t dim);

/// Deterministic desk-scale embedder: each word maps to a seeded,
/// hash-derived unit vector; ids are the word hash modulo the vocabulary.
class HashStubEmbedder : public TextEmbedder {
public:
    explicit HashStubEmbedder(std::size_t dim = 64, std::size_t vocab = 4096, std::uint64_t seed = 0);

    std::size_t dim() const override { return dim_; }
    std::size_t vocab_size() const override { return vocab_; }
    Eigen::VectorXd embed_sentence(std::string_view text) const override;
    TokenizedText tokenize(std::string_view text, std::size_t max_tokens) const override;
    std::string name() const override { return "stub"; }

    Eigen::VectorXd token_vector(std::string_view word) const;
    int token_id(std::string_view word) const;
    /// Fraction of distinct words whose id is shared with another word.
    double id_collision_rate(const std::vector<std::string>& words) const;

private:
    std::size_t dim_;
    std::size_t vocab_;
    std::uint64_t seed_;
};

/// OpenAI-compatible `/v1/embeddings` client (e.g. a served bge-small-en).
class HttpEmbedder : public TextEmbedder {
public:
    HttpEmbedder(std::string base_url, std::string model, std::size_t dim, std::string api_key = {},
                 std::size_t vocab = 4096);

    std::size_t dim() const override { return dim_; }
    std::size_t vocab_size() const override { return vocab_; }
    Eigen::VectorXd embed_sentence(std::string_view text) const override;
    TokenizedText tokenize(std::string_view text, std::size_t max_tokens) const override;
    std::string name() const override { return "http:" + model_; }

private:
    std::vector<Eigen::VectorXd> request(const std::vector<std::string>& inputs) const;

    std::string base_url_;
    std::string model_;
    std::size_t dim_;
    std::string api_key_;
    std::size_t vocab_;
};

struct EmbedderConfig {
    std::string backend = "stub";  ///< stub | http
    std::string mode = "sentence";  ///< sentence | token
    std::size_t dim = 64;
    std::size_t vocab = 4096;
    std::uint64_t seed = 0;
    std::string base_url;
    std::string model = "BAAI/bge-small-en-v1.5";
};

std::shared_ptr<const TextEmbedder> make_embedder(const EmbedderConfig& config);

}  // namespace ttc
