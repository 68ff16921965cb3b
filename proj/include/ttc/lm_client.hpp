#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace ttc {

struct DecodeParams {
    std::size_t max_tokens = 512;
    double temperature = 0.0;  ///< 0 selects greedy decoding
    std::uint64_t seed = 0;
};

struct LMCapabilities {
    std::size_t max_context_chars = 128000;
    bool concurrent_safe = false;
};

/// Raised by clients. `retryable` distinguishes transient failures
/// (timeouts, rate limits) from permanent ones.
class LMError : public std::runtime_error {
public:
    LMError(const std::string& what, bool retryable) : std::runtime_error(what), retryable_(retryable) {}
    bool retryable() const { return retryable_; }

private:
    bool retryable_;
};

class LMClient {
public:
    virtual ~LMClient() = default;
    virtual std::string complete(const std::string& prompt, const DecodeParams& params) = 0;
    virtual LMCapabilities capabilities() const = 0;
    virtual std::string name() const = 0;
};

/// Adapts a callable; handy for scripted judges and fault-injection tests.
class FunctionClient : public LMClient {
public:
    using Fn = std::function<std::string(const std::string&, const DecodeParams&)>;
    explicit FunctionClient(Fn fn, LMCapabilities caps = {}) : fn_(std::move(fn)), caps_(caps) {}

    std::string complete(const std::string& prompt, const DecodeParams& params) override { return fn_(prompt, params); }
    LMCapabilities capabilities() const override { return caps_; }
    std::string name() const override { return "function"; }

private:
    Fn fn_;
    LMCapabilities caps_;
};

/// Rule-based stand-in for the curation LM. Recognises the built-in
/// extract / refine / combine prompts:
///   extract: keeps sentences mentioning any listed variable,
///   refine:  returns the summary, or the first sentence of the original when
///            the summary is empty,
///   combine: joins the parts with a space.
/// Anything else yields an empty completion.
class StubLMClient : public LMClient {
public:
    explicit StubLMClient(std::size_t max_context_chars = 128000) : max_context_(max_context_chars) {}

    std::string complete(const std::string& prompt, const DecodeParams& params) override;
    LMCapabilities capabilities() const override { return {max_context_, true}; }
    std::string name() const override { return "stub"; }

private:
    std::size_t max_context_;
};

/// Wraps a client and fails the first `fail_first` calls, then fails each
/// later call with probability `failure_rate` drawn from a seeded stream.
class FaultInjectingClient : public LMClient {
public:
    FaultInjectingClient(LMClient& inner, int fail_first, double failure_rate = 0.0, std::uint64_t seed = 0,
                         bool retryable = true);

    std::string complete(const std::string& prompt, const DecodeParams& params) override;
    LMCapabilities capabilities() const override;
    std::string name() const override { return "faulty(" + inner_.name() + ")"; }
    int calls() const;
    int failures() const;

private:
    LMClient& inner_;
    int fail_first_;
    double failure_rate_;
    std::uint64_t state_;
    bool retryable_;
    int calls_ = 0;
    int failures_ = 0;
    mutable std::mutex mutex_;
};

struct HttpClientConfig {
    std::string base_url;  ///< e.g. "https://api.openai.com"
    std::string api_key;
    std::string model = "gpt-4o-mini";
    std::string path = "/v1/chat/completions";
    int timeout_seconds = 60;
    std::size_t max_context_chars = 400000;
};

/// OpenAI-compatible chat-completions client.
class HttpLMClient : public LMClient {
public:
    explicit HttpLMClient(HttpClientConfig config);

    std::string complete(const std::string& prompt, const DecodeParams& params) override;
    LMCapabilities capabilities() const override { return {config_.max_context_chars, true}; }
    std::string name() const override { return "http:" + config_.model; }

private:
    HttpClientConfig config_;
};

/// Reads TTC_LM_BASE_URL, TTC_LM_API_KEY and TTC_LM_MODEL. Throws when the
/// base URL is unset.
HttpClientConfig http_config_from_env();

/// Sentence split on '.', '!' or '?' followed by whitespace or end of text.
std::vector<std::string> split_sentences(const std::string& text);

}  // namespace ttc
