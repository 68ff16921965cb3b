#include "ttc/embed.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <unordered_map>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ttc/util.hpp"

namespace ttc {

std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    for (const char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        const bool word = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
        if (word) {
            current += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch;
        } else if (!current.empty()) {
            out.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) out.push_back(std::move(current));
    return out;
}

Eigen::VectorXd empty_text_sentinel(std::size_t dim) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
    if (dim > 0) e(0) = 1.0;
    return e;
}

Eigen::VectorXd TextEmbedder::mean_token_embedding(std::string_view text, std::size_t max_tokens) const {
    const TokenizedText t = tokenize(text, max_tokens);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim()));
    std::size_t count = 0;
    for (std::size_t i = 0; i < t.mask.size(); ++i) {
        if (t.mask[i]) {
            sum += t.matrix.row(static_cast<Eigen::Index>(i)).transpose();
            ++count;
        }
    }
    return count == 0 ? sum : Eigen::VectorXd(sum / static_cast<double>(count));
}

HashStubEmbedder::HashStubEmbedder(std::size_t dim, std::size_t vocab, std::uint64_t seed)
    : dim_(dim), vocab_(vocab), seed_(seed) {
    if (vocab_ == 0) throw std::invalid_argument("embedder vocabulary must be positive");
}

Eigen::VectorXd HashStubEmbedder::token_vector(std::string_view word) const {
    Rng rng(mix64(fnv1a64(word) ^ mix64(seed_)));
    Eigen::VectorXd v(static_cast<Eigen::Index>(dim_));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
    const double n = v.norm();
    return n > 0 ? Eigen::VectorXd(v / n) : empty_text_sentinel(dim_);
}

int HashStubEmbedder::token_id(std::string_view word) const {
    return static_cast<int>(mix64(fnv1a64(word) ^ seed_) % vocab_);
}

double HashStubEmbedder::id_collision_rate(const std::vector<std::string>& words) const {
    std::unordered_map<std::string, int> unique;
    for (const auto& w : words) unique.emplace(w, token_id(w));
    std::unordered_map<int, int> per_id;
    for (const auto& [w, id] : unique) ++per_id[id];
    std::size_t colliding = 0;
    for (const auto& [w, id] : unique) {
        if (per_id[id] > 1) ++colliding;
    }
    return unique.empty() ? 0.0 : static_cast<double>(colliding) / static_cast<double>(unique.size());
}

Eigen::VectorXd HashStubEmbedder::embed_sentence(std::string_view text) const {
    const auto words = word_tokens(text);
    if (words.empty() || dim_ == 0) return empty_text_sentinel(dim_);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
    for (const auto& w : words) sum += token_vector(w);
    const double n = sum.norm();
    if (!(n > 1e-12)) return empty_text_sentinel(dim_);
    return sum / n;
}

TokenizedText HashStubEmbedder::tokenize(std::string_view text, std::size_t max_tokens) const {
    if (max_tokens == 0) throw std::invalid_argument("tokenize requires N >= 1");
    const auto words = word_tokens(text);
    TokenizedText out;
    out.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(max_tokens), static_cast<Eigen::Index>(dim_));
    out.mask.assign(max_tokens, false);
    const std::size_t n = std::min(words.size(), max_tokens);
    for (std::size_t i = 0; i < n; ++i) {
        out.ids.push_back(token_id(words[i]));
        out.matrix.row(static_cast<Eigen::Index>(i)) = token_vector(words[i]).transpose();
        out.mask[i] = true;
    }
    return out;
}

HttpEmbedder::HttpEmbedder(std::string base_url, std::string model, std::size_t dim, std::string api_key,
                           std::size_t vocab)
    : base_url_(std::move(base_url)), model_(std::move(model)), dim_(dim), api_key_(std::move(api_key)), vocab_(vocab) {
    if (base_url_.empty()) throw std::invalid_argument("HttpEmbedder requires a base URL");
}

std::vector<Eigen::VectorXd> HttpEmbedder::request(const std::vector<std::string>& inputs) const {
    httplib::Client client(base_url_);
    client.set_read_timeout(60, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const nlohmann::json body = {{"model", model_}, {"input", inputs}};
    auto res = client.Post("/v1/embeddings", headers, body.dump(), "application/json");
    if (!res) throw std::runtime_error("embedding request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw std::runtime_error("embedding endpoint returned HTTP " + std::to_string(res->status));
    const auto reply = nlohmann::json::parse(res->body);
    std::vector<Eigen::VectorXd> out;
    for (const auto& item : reply.at("data")) {
        const auto values = item.at("embedding").get<std::vector<double>>();
        if (values.size() != dim_) {
            throw std::runtime_error("embedding endpoint returned dim " + std::to_string(values.size()) + ", expected " +
                                     std::to_string(dim_));
        }
        out.emplace_back(Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())));
    }
    if (out.size() != inputs.size()) throw std::runtime_error("embedding endpoint returned wrong item count");
    return out;
}

Eigen::VectorXd HttpEmbedder::embed_sentence(std::string_view text) const {
    if (word_tokens(text).empty()) return empty_text_sentinel(dim_);
    Eigen::VectorXd v = request({std::string(text)}).front();
    const double n = v.norm();
    return n > 1e-12 ? Eigen::VectorXd(v / n) : empty_text_sentinel(dim_);
}

TokenizedText HttpEmbedder::tokenize(std::string_view text, std::size_t max_tokens) const {
    if (max_tokens == 0) throw std::invalid_argument("tokenize requires N >= 1");
    auto words = word_tokens(text);
    if (words.size() > max_tokens) words.resize(max_tokens);
    TokenizedText out;
    out.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(max_tokens), static_cast<Eigen::Index>(dim_));
    out.mask.assign(max_tokens, false);
    if (words.empty()) return out;
    const auto vectors = request(words);
    for (std::size_t i = 0; i < words.size(); ++i) {
        out.ids.push_back(static_cast<int>(fnv1a64(words[i]) % vocab_));
        out.matrix.row(static_cast<Eigen::Index>(i)) = vectors[i].transpose();
        out.mask[i] = true;
    }
    return out;
}

std::shared_ptr<const TextEmbedder> make_embedder(const EmbedderConfig& config) {
    if (config.mode != "sentence" && config.mode != "token") {
        throw std::invalid_argument("embedder mode must be sentence or token");
    }
    if (config.backend == "stub") return std::make_shared<HashStubEmbedder>(config.dim, config.vocab, config.seed);
    if (config.backend == "http") {
        std::string key;
        if (const char* k = std::getenv("TTC_EMBED_API_KEY")) key = k;
        return std::make_shared<HttpEmbedder>(config.base_url, config.model, config.dim, key, config.vocab);
    }
    throw std::invalid_argument("unknown embedder backend '" + config.backend + "'");
}

}  // namespace ttc
