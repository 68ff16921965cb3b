#include "ttc/lm_client.hpp"

#include <cstdlib>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ttc/util.hpp"

namespace ttc {

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string current;
    for (std::size_t i = 0; i < text.size(); ++i) {
        current += text[i];
        const char c = text[i];
        const bool boundary = (c == '.' || c == '!' || c == '?') &&
                              (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])));
        if (boundary) {
            auto s = trim(current);
            if (!s.empty()) out.push_back(std::move(s));
            current.clear();
        }
    }
    auto s = trim(current);
    if (!s.empty()) out.push_back(std::move(s));
    return out;
}

namespace {

// Text between `marker` and the next blank-line section (or end).
std::string section(const std::string& prompt, const std::string& marker, const std::string& stop = {}) {
    const auto pos = prompt.find(marker);
    if (pos == std::string::npos) return {};
    const auto begin = pos + marker.size();
    const auto end = stop.empty() ? std::string::npos : prompt.find(stop, begin);
    return prompt.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
}

std::vector<std::string> parse_variables(const std::string& prompt) {
    const auto line = section(prompt, "Variables: ", "\n");
    std::vector<std::string> vars;
    std::size_t start = 0;
    while (start <= line.size()) {
        auto comma = line.find(',', start);
        if (comma == std::string::npos) comma = line.size();
        auto v = trim(line.substr(start, comma - start));
        if (!v.empty()) vars.push_back(to_lower(v));
        start = comma + 1;
    }
    return vars;
}

}  // namespace

std::string StubLMClient::complete(const std::string& prompt, const DecodeParams&) {
    if (prompt.find("\nText:\n") != std::string::npos) {
        const auto vars = parse_variables(prompt);
        std::vector<std::string> kept;
        for (auto& s : split_sentences(section(prompt, "\nText:\n"))) {
            const auto lower = to_lower(s);
            for (const auto& v : vars) {
                if (lower.find(v) != std::string::npos) {
                    kept.push_back(s);
                    break;
                }
            }
        }
        return join(kept, " ");
    }
    if (prompt.find("\nSummary:\n") != std::string::npos && prompt.find("\n\nOriginal:\n") != std::string::npos) {
        const auto summary = trim(section(prompt, "\nSummary:\n", "\n\nOriginal:\n"));
        if (!summary.empty()) return summary;
        const auto sentences = split_sentences(section(prompt, "\n\nOriginal:\n"));
        return sentences.empty() ? std::string{} : sentences.front();
    }
    if (prompt.find("\nPart 1:\n") != std::string::npos) {
        std::vector<std::string> parts;
        for (int i = 1;; ++i) {
            const std::string marker = "Part " + std::to_string(i) + ":\n";
            if (prompt.find(marker) == std::string::npos) break;
            parts.push_back(trim(section(prompt, marker, "\n\nPart " + std::to_string(i + 1) + ":\n")));
        }
        return join(parts, " ");
    }
    return {};
}

FaultInjectingClient::FaultInjectingClient(LMClient& inner, int fail_first, double failure_rate, std::uint64_t seed,
                                           bool retryable)
    : inner_(inner), fail_first_(fail_first), failure_rate_(failure_rate), state_(seed), retryable_(retryable) {}

std::string FaultInjectingClient::complete(const std::string& prompt, const DecodeParams& params) {
    {
        std::lock_guard lock(mutex_);
        ++calls_;
        bool fail = calls_ <= fail_first_;
        if (!fail && failure_rate_ > 0.0) {
            state_ = mix64(state_);
            fail = static_cast<double>(state_ >> 11) * 0x1.0p-53 < failure_rate_;
        }
        if (fail) {
            ++failures_;
            throw LMError("injected timeout", retryable_);
        }
    }
    return inner_.complete(prompt, params);
}

LMCapabilities FaultInjectingClient::capabilities() const { return inner_.capabilities(); }

int FaultInjectingClient::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

int FaultInjectingClient::failures() const {
    std::lock_guard lock(mutex_);
    return failures_;
}

HttpLMClient::HttpLMClient(HttpClientConfig config) : config_(std::move(config)) {
    if (config_.base_url.empty()) throw std::invalid_argument("HttpLMClient requires a base URL");
}

std::string HttpLMClient::complete(const std::string& prompt, const DecodeParams& params) {
    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout_seconds, 0);
    client.set_read_timeout(config_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    nlohmann::json body = {
        {"model", config_.model},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
        {"max_tokens", params.max_tokens},
        {"temperature", params.temperature},
        {"seed", params.seed},
    };
    auto res = client.Post(config_.path, headers, body.dump(), "application/json");
    if (!res) throw LMError("LM request failed: " + httplib::to_string(res.error()), true);
    if (res->status == 429 || res->status >= 500) {
        throw LMError("LM endpoint returned HTTP " + std::to_string(res->status), true);
    }
    if (res->status != 200) {
        throw LMError("LM endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body, false);
    }
    try {
        const auto reply = nlohmann::json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw LMError(std::string("malformed LM response: ") + e.what(), false);
    }
}

HttpClientConfig http_config_from_env() {
    HttpClientConfig cfg;
    const char* url = std::getenv("TTC_LM_BASE_URL");
    if (url == nullptr || *url == '\0') throw std::invalid_argument("TTC_LM_BASE_URL is not set");
    cfg.base_url = url;
    if (const char* key = std::getenv("TTC_LM_API_KEY")) cfg.api_key = key;
    if (const char* model = std::getenv("TTC_LM_MODEL"); model != nullptr && *model != '\0') cfg.model = model;
    return cfg;
}

}  // namespace ttc
