#include "ttc/tiny_lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

namespace ttc {

using ag::Matrix;
using ag::Var;

LmConfig LmConfig::bypass(Eigen::Index dim, int vocab) {
    LmConfig c;
    c.vocab = vocab;
    c.dim = dim;
    c.layers = 0;
    c.final_norm = false;
    c.positional = false;
    return c;
}

nlohmann::json LmConfig::to_json() const {
    return {{"vocab", vocab},           {"dim", dim},
            {"layers", layers},         {"heads", heads},
            {"ffn_mult", ffn_mult},     {"max_context", max_context},
            {"final_norm", final_norm}, {"positional", positional},
            {"seed", seed}};
}

LmConfig LmConfig::from_json(const nlohmann::json& j) {
    LmConfig c;
    c.vocab = j.value("vocab", c.vocab);
    c.dim = j.value("dim", c.dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.max_context = j.value("max_context", c.max_context);
    c.final_norm = j.value("final_norm", c.final_norm);
    c.positional = j.value("positional", c.positional);
    c.seed = j.value("seed", c.seed);
    return c;
}

ByteTokenizer::ByteTokenizer(int vocab) : vocab_(vocab) {
    if (vocab < 2) throw std::invalid_argument("vocabulary needs at least two ids");
}

int ByteTokenizer::id(unsigned char byte) const {
    const int b = byte == 0 ? vocab_ - 1 : byte;
    return 1 + (b - 1) % (vocab_ - 1);
}

std::vector<int> ByteTokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (const char c : text) ids.push_back(id(static_cast<unsigned char>(c)));
    return ids;
}

std::string ByteTokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (const int t : ids) {
        if (t == eos) break;
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

TinyLm::TinyLm(const LmConfig& config) : config_(config), tokenizer_(config.vocab) {
    if (config.dim <= 0 || config.layers < 0 || config.max_context <= 0) {
        throw std::invalid_argument("invalid language model dimensions");
    }
    Rng rng(mix64(config.seed ^ 0x7419a3c2ULL));
    token_embedding_ =
        ag::parameter(nn::normal_init(config.vocab, config.dim, 1.0 / std::sqrt(double(config.dim)), rng));
    if (config.positional) {
        position_embedding_ = ag::parameter(nn::normal_init(config.max_context, config.dim, 0.02, rng));
    }
    for (int l = 0; l < config.layers; ++l) blocks_.emplace_back(config.dim, config.heads, config.ffn_mult, rng);
    if (config.final_norm) final_norm_ = nn::LayerNorm(config.dim);
    head_ = nn::Linear(config.dim, config.vocab, rng);
    // Wide output head: with a frozen base, adapters can only rotate the
    // normalized hidden state, so the head scale bounds achievable confidence.
    head_.weight.mutable_value() = nn::normal_init(config.dim, config.vocab, 3.0 / std::sqrt(double(config.dim)), rng);
}

Var TinyLm::embed_tokens(std::span<const int> ids) const { return ag::gather_rows(token_embedding_, ids); }

Matrix TinyLm::embed_tokens_value(std::span<const int> ids) const {
    Matrix out(static_cast<Eigen::Index>(ids.size()), config_.dim);
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(Eigen::Index(i)) = token_embedding_.value().row(ids[i]);
    return out;
}

Matrix TinyLm::position_rows(std::span<const Eigen::Index> positions) const {
    Matrix out(static_cast<Eigen::Index>(positions.size()), config_.dim);
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (positions[i] < 0 || positions[i] >= config_.max_context) {
            throw std::out_of_range(fmt::format("position {} outside the context of {}", positions[i], config_.max_context));
        }
        out.row(Eigen::Index(i)) = position_embedding_.value().row(positions[i]);
    }
    return out;
}

Var TinyLm::forward(const Var& embeddings, std::span<const std::uint8_t> key_mask) const {
    const Eigen::Index t = embeddings.rows();
    if (t > config_.max_context) {
        throw std::length_error(fmt::format("sequence of {} positions exceeds the context of {}", t, config_.max_context));
    }
    if (embeddings.cols() != config_.dim) {
        throw std::invalid_argument(fmt::format("embedding width {} != model dim {}", embeddings.cols(), config_.dim));
    }
    Var x = embeddings;
    if (config_.positional) {
        std::vector<int> pos(static_cast<std::size_t>(t));
        std::iota(pos.begin(), pos.end(), 0);
        x = ag::add(x, ag::gather_rows(position_embedding_, pos));
    }
    for (const auto& block : blocks_) x = block.forward(x, key_mask, true);
    if (config_.final_norm) x = final_norm_.forward(x);
    return x;
}

TinyLm::Session::Session(const TinyLm& lm) : lm_(&lm), caches_(lm.blocks_.size()) {}

Matrix TinyLm::Session::append(const Matrix& embeddings, std::span<const Eigen::Index> positions,
                               std::span<const std::uint8_t> mask) {
    if (static_cast<std::size_t>(embeddings.rows()) != positions.size() || positions.size() != mask.size()) {
        throw std::invalid_argument("session append: rows, positions and mask differ in length");
    }
    Matrix x = embeddings;
    if (lm_->config_.positional) x += lm_->position_rows(positions);
    for (std::size_t l = 0; l < lm_->blocks_.size(); ++l) x = lm_->blocks_[l].apply_incremental(x, mask, caches_[l]);
    if (lm_->config_.final_norm) x = lm_->final_norm_.apply(x);
    length_ += positions.size();
    return x;
}

Matrix TinyLm::Session::append(const Matrix& embeddings, Eigen::Index first_position) {
    std::vector<Eigen::Index> pos(static_cast<std::size_t>(embeddings.rows()));
    std::iota(pos.begin(), pos.end(), first_position);
    const ag::Mask mask(pos.size(), 1);
    return append(embeddings, pos, mask);
}

int sample_token(const Eigen::RowVectorXd& logits, const DecodeParams& params, Rng& rng) {
    Eigen::Index best = 0;
    if (params.temperature <= 0.0) {
        logits.maxCoeff(&best);
        return static_cast<int>(best);
    }
    const Eigen::RowVectorXd z = logits / params.temperature;
    const Eigen::RowVectorXd p = (z.array() - z.maxCoeff()).exp().matrix();
    double u = rng.uniform() * p.sum();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        u -= p(i);
        if (u <= 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(p.size() - 1);
}

std::vector<int> TinyLm::generate(std::span<const int> prompt, const DecodeParams& params) const {
    std::vector<int> out;
    if (params.max_tokens == 0) return out;
    if (static_cast<Eigen::Index>(prompt.size()) >= config_.max_context) {
        throw std::length_error("prompt fills the whole context");
    }
    ag::NoGradGuard no_grad;
    Rng rng(mix64(params.seed + 0x51ed2701ULL));
    Session s = session();
    Eigen::Index pos = 0;
    Matrix hidden;
    if (prompt.empty()) {
        const int eos = ByteTokenizer::eos;
        hidden = s.append(embed_tokens_value(std::span<const int>(&eos, 1)), pos++);
    } else {
        hidden = s.append(embed_tokens_value(prompt), pos);
        pos += static_cast<Eigen::Index>(prompt.size());
    }
    Eigen::RowVectorXd logits = logits_value(hidden.bottomRows(1)).row(0);
    while (out.size() < params.max_tokens) {
        const int t = sample_token(logits, params, rng);
        if (t == ByteTokenizer::eos) break;
        out.push_back(t);
        if (pos >= config_.max_context || out.size() == params.max_tokens) break;
        hidden = s.append(embed_tokens_value(std::span<const int>(&t, 1)), pos++);
        logits = logits_value(hidden).row(0);
    }
    return out;
}

std::string TinyLm::complete(std::string_view prompt, const DecodeParams& params) const {
    std::vector<int> ids = tokenizer_.encode(prompt);
    DecodeParams p = params;
    p.max_tokens = std::min<std::size_t>(p.max_tokens, static_cast<std::size_t>(config_.max_context / 2));
    const std::size_t budget = static_cast<std::size_t>(config_.max_context) - p.max_tokens;
    if (ids.size() > budget) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(budget));
    const auto out = generate(ids, p);
    return tokenizer_.decode(out);
}

Var TinyLm::completion_loss(std::span<const int> prompt, std::span<const int> completion) const {
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), completion.begin(), completion.end());
    seq.push_back(ByteTokenizer::eos);
    std::size_t p = prompt.size();
    const auto limit = static_cast<std::size_t>(config_.max_context) + 1;
    if (seq.size() > limit) {
        const std::size_t drop = seq.size() - limit;
        if (drop >= p) throw std::length_error("completion does not fit in the context");
        seq.erase(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(drop));
        p -= drop;
    }
    if (p == 0) {
        seq.insert(seq.begin(), ByteTokenizer::eos);
        p = 1;
    }
    const std::span<const int> inputs(seq.data(), seq.size() - 1);
    const ag::Mask mask(inputs.size(), 1);
    const Var hidden = forward(embed_tokens(inputs), mask);
    const auto scored = static_cast<Eigen::Index>(seq.size() - p);
    const Var logits = head_.forward(ag::slice_rows(hidden, static_cast<Eigen::Index>(p) - 1, scored));
    const std::vector<int> labels(seq.begin() + static_cast<std::ptrdiff_t>(p), seq.end());
    return ag::cross_entropy(logits, labels);
}

void TinyLm::attach_adapters(const AdapterSpec& spec) {
    if (spec.targets.empty()) throw std::invalid_argument("adapter config targets no sub-layer");
    Rng rng(mix64(spec.seed ^ 0xada97e45ULL));
    for (auto& block : blocks_) {
        block.detach_lora();
        block.attach_lora(spec.targets, spec.rank, spec.alpha, rng);
    }
    has_adapters_ = true;
    adapter_spec_ = spec;
}

void TinyLm::detach_adapters() {
    for (auto& block : blocks_) block.detach_lora();
    has_adapters_ = false;
}

nn::ParameterList TinyLm::base_parameters() const {
    nn::ParameterList out;
    out.add("token_embedding", token_embedding_);
    if (config_.positional) out.add("position_embedding", position_embedding_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(fmt::format("block{}", l), out);
    if (config_.final_norm) final_norm_.collect("final_norm", out);
    head_.collect("head", out);
    return out;
}

nn::ParameterList TinyLm::adapter_parameters() const {
    nn::ParameterList out;
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect_lora(fmt::format("block{}", l), out);
    return out;
}

namespace {

void copy_values(const nn::ParameterList& from, const nn::ParameterList& to) {
    for (std::size_t i = 0; i < from.size(); ++i) {
        Var dst = to.items()[i].var;
        dst.mutable_value() = from.items()[i].var.value();
    }
}

nlohmann::json adapter_spec_json(const AdapterSpec& spec) {
    std::vector<std::string> targets;
    for (const auto t : spec.targets) {
        targets.emplace_back(t == nn::AdapterTarget::attention ? "attention" : "feed_forward");
    }
    return {{"targets", targets}, {"rank", spec.rank}, {"alpha", spec.alpha}, {"seed", spec.seed}};
}

AdapterSpec adapter_spec_from_json(const nlohmann::json& j) {
    AdapterSpec spec;
    spec.targets.clear();
    for (const auto& t : j.at("targets")) {
        spec.targets.push_back(t.get<std::string>() == "attention" ? nn::AdapterTarget::attention
                                                                   : nn::AdapterTarget::feed_forward);
    }
    spec.rank = j.at("rank").get<Eigen::Index>();
    spec.alpha = j.at("alpha").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    return spec;
}

}  // namespace

TinyLm TinyLm::clone() const {
    TinyLm copy(config_);
    if (has_adapters_) copy.attach_adapters(adapter_spec_);
    copy_values(base_parameters(), copy.base_parameters());
    copy_values(adapter_parameters(), copy.adapter_parameters());
    return copy;
}

nlohmann::json TinyLm::to_json() const {
    nlohmann::json j = {{"format", "ttc-tiny-lm"}, {"version", 1}, {"config", config_.to_json()},
                        {"base", base_parameters().to_json()}};
    if (has_adapters_) {
        j["adapter_spec"] = adapter_spec_json(adapter_spec_);
        j["adapters"] = adapter_parameters().to_json();
    }
    return j;
}

TinyLm TinyLm::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ttc-tiny-lm" || j.value("version", 0) != 1) {
        throw std::runtime_error("not a version-1 tiny LM checkpoint");
    }
    TinyLm lm(LmConfig::from_json(j.at("config")));
    lm.base_parameters().load_json(j.at("base"));
    if (j.contains("adapter_spec")) {
        lm.attach_adapters(adapter_spec_from_json(j.at("adapter_spec")));
        lm.adapter_parameters().load_json(j.at("adapters"));
    }
    return lm;
}

LMCapabilities TinyLmClient::capabilities() const {
    LMCapabilities caps;
    caps.max_context_chars = static_cast<std::size_t>(lm_->config().max_context);
    caps.concurrent_safe = true;
    return caps;
}

FinetuneReport finetune_lm(TinyLm& lm, std::span<const PromptCompletion> pairs, const FinetuneConfig& config) {
    if (config.adapter.targets.empty()) throw std::invalid_argument("adapter config targets no sub-layer");
    if (!lm.has_adapters()) lm.attach_adapters(config.adapter);

    FinetuneReport report;
    report.base_checksum_before = lm.base_parameters().checksum();

    Rng rng(mix64(config.seed ^ 0xf17e7a9eULL));
    std::vector<std::size_t> chosen(pairs.size());
    std::iota(chosen.begin(), chosen.end(), 0);
    if (config.max_pairs > 0 && chosen.size() > config.max_pairs) {
        for (std::size_t i = 0; i < config.max_pairs; ++i) std::swap(chosen[i], chosen[i + rng.index(chosen.size() - i)]);
        chosen.resize(config.max_pairs);
        std::sort(chosen.begin(), chosen.end());
    }
    report.pairs_used = chosen.size();

    std::vector<std::pair<std::vector<int>, std::vector<int>>> encoded;
    for (const auto i : chosen) {
        encoded.emplace_back(lm.tokenizer().encode(pairs[i].prompt), lm.tokenizer().encode(pairs[i].completion));
    }

    const nn::ParameterList adapters = lm.adapter_parameters();
    const bool trainable = adapters.scalar_count() > 0;
    nn::FreezeGuard freeze(lm.base_parameters().vars());
    nn::Adam::Options opt;
    opt.lr = config.lr;
    opt.clip_norm = 1.0;
    nn::Adam adam(adapters.vars(), opt);

    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs && !encoded.empty(); ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double total = 0.0;
        for (const auto idx : order) {
            adam.zero_grad();
            const Var loss = lm.completion_loss(encoded[idx].first, encoded[idx].second);
            total += loss.scalar();
            if (trainable) {
                ag::backward(loss);
                adam.step();
            }
        }
        report.epoch_loss.push_back(total / static_cast<double>(order.size()));
    }

    report.base_checksum_after = lm.base_parameters().checksum();
    if (report.base_checksum_after != report.base_checksum_before) {
        throw std::logic_error("adapter fine-tuning modified base weights");
    }
    return report;
}

}  // namespace ttc
