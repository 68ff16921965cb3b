#include <doctest.h>

#include <atomic>
#include <optional>
#include <thread>

// Eigen first: httplib pulls in resolv.h, whose _res macro clashes with Eigen.
#include "ttc/embed.hpp"
#include "ttc/lm_client.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

using namespace ttc;
using nlohmann::json;

namespace {

/// Local server on an ephemeral port, stopped on destruction.
class LocalServer {
public:
    LocalServer() {
        port_ = server.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LocalServer() {
        server.stop();
        thread_.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

    httplib::Server server;

private:
    int port_ = 0;
    std::thread thread_;
};

}  // namespace

TEST_CASE("chat client round trip and errors") {
    LocalServer s;
    std::atomic<int> status{200};
    json last;
    s.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        last = json::parse(req.body);
        last["auth"] = req.get_header_value("Authorization");
        res.status = status;
        const std::string content = "echo: " + last["messages"][0]["content"].get<std::string>();
        res.set_content(status == 299 ? "not json" : json{{"choices", {{{"message", {{"content", content}}}}}}}.dump(),
                        "application/json");
    });
    HttpClientConfig cfg;
    cfg.base_url = s.url();
    cfg.api_key = "secret";
    cfg.model = "m1";
    HttpLMClient client(cfg);
    DecodeParams d;
    d.max_tokens = 7;
    CHECK(client.complete("hi", d) == "echo: hi");
    CHECK(last["model"] == "m1");
    CHECK(last["max_tokens"] == 7);
    CHECK(last["auth"] == "Bearer secret");
    CHECK(client.name() == "http:m1");

    auto code_of = [&](int code) -> std::optional<bool> {
        status = code;
        try {
            client.complete("x", d);
        } catch (const LMError& e) {
            return e.retryable();
        }
        return std::nullopt;
    };
    CHECK(code_of(429) == true);
    CHECK(code_of(503) == true);
    CHECK(code_of(400) == false);
    CHECK(code_of(299) == false);

    cfg.base_url = "http://127.0.0.1:1";
    cfg.timeout_seconds = 1;
    HttpLMClient dead(cfg);
    try {
        dead.complete("x", d);
        FAIL("expected a connection error");
    } catch (const LMError& e) {
        CHECK(e.retryable());
    }
}

TEST_CASE("embedding client") {
    LocalServer s;
    s.server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
        const auto body = json::parse(req.body);
        json data = json::array();
        for (const auto& in : body["input"]) {
            const double n = double(in.get<std::string>().size());
            data.push_back({{"embedding", {n, 1.0, 0.0}}});
        }
        res.set_content(json{{"data", data}}.dump(), "application/json");
    });
    HttpEmbedder e(s.url(), "bge", 3);
    const auto v = e.embed_sentence("abcd");
    CHECK(v.norm() == doctest::Approx(1.0));
    CHECK(v(0) == doctest::Approx(4.0 / std::sqrt(17.0)));
    CHECK(e.embed_sentence("") == empty_text_sentinel(3));
    const auto t = e.tokenize("a bb ccc dddd", 3);
    CHECK(t.ids.size() == 3);
    CHECK(t.mask == std::vector<bool>{true, true, true});
    CHECK(t.matrix(2, 0) == 3.0);
    HttpEmbedder wrong(s.url(), "bge", 5);
    CHECK_THROWS(wrong.embed_sentence("x"));
}

TEST_CASE("environment configuration") {
    unsetenv("TTC_LM_BASE_URL");
    CHECK_THROWS_AS(http_config_from_env(), std::invalid_argument);
    setenv("TTC_LM_BASE_URL", "http://localhost:9", 1);
    setenv("TTC_LM_MODEL", "tiny", 1);
    const auto c = http_config_from_env();
    CHECK(c.base_url == "http://localhost:9");
    CHECK(c.model == "tiny");
    unsetenv("TTC_LM_BASE_URL");
    unsetenv("TTC_LM_MODEL");
}
