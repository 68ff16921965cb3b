#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ttc/harness.hpp"
#include "ttc/util.hpp"

using namespace ttc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("ttc_harness_" + name);
    fs::remove_all(d);
    return d;
}

ResultsTable table(const std::string& metric, std::vector<std::vector<std::optional<double>>> cells) {
    ResultsTable t;
    t.metric = metric;
    for (std::size_t r = 0; r < cells.size(); ++r) t.rows.push_back("m" + std::to_string(r));
    for (std::size_t c = 0; c < cells.front().size(); ++c) t.ks.push_back(c + 1);
    t.cells = std::move(cells);
    t.parse_failures.assign(t.rows.size(), std::vector<std::size_t>(t.ks.size(), 0));
    return t;
}

ExperimentConfig small_config(const fs::path& out) {
    ExperimentConfig c;
    c.synth.length = 400;
    c.synth.seasonal_amplitude = 0.0;
    c.synth.ar_coefficient = 0.5;
    c.synth_seed = 3;
    c.ks = {1, 2};
    c.models = {"input_copy", "nlinear"};
    c.seed = 5;
    c.output_dir = out;
    return c;
}

PredictionRecord record(const std::string& model, std::vector<double> pred, std::vector<double> truth,
                        std::vector<std::string> texts = {}, std::vector<std::string> truth_texts = {}) {
    PredictionRecord p;
    p.model = model;
    p.k = pred.size();
    p.origin = "2020-01-01";
    p.input_values = truth;
    p.truth_values = std::move(truth);
    p.truth_texts = truth_texts.empty() ? std::vector<std::string>(p.k, "ref") : std::move(truth_texts);
    p.forecast.time_values = std::move(pred);
    if (!texts.empty()) p.forecast.texts = std::move(texts);
    return p;
}

}  // namespace

TEST_CASE("registry") {
    const auto& ids = registered_models();
    CHECK(ids.size() == 4 + 12 + 1);
    CHECK(is_registered_model("texttime2time:fine-tuned"));
    CHECK_FALSE(is_registered_model("texttime2time"));
    CHECK(model_traits("nlinear").time);
    CHECK_FALSE(model_traits("nlinear").text);
    CHECK_FALSE(model_traits("text2text:zero-shot").time);
    CHECK(model_traits("texttime2texttime:in-context").text);
    CHECK(model_traits("hybrid").text);
    CHECK_THROWS_AS(model_traits("gpt5"), ConfigError);
    CHECK(lower_is_better("rmse"));
    CHECK_FALSE(lower_is_better("rouge1"));
    CHECK(is_judge_metric("gpt_f1"));
    CHECK_FALSE(is_judge_metric("meteor"));
}

TEST_CASE("config validation and round trip") {
    ExperimentConfig c;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.models = {"nlinear", "nlinear"};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.models = {"nlinear", "mystery"};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.models = {"nlinear"};
    c.ks = {0};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.ks = {};
    CHECK_NOTHROW(c.validate());
    CHECK(c.effective_ks() == std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7});
    c.schema = "medical";
    CHECK(c.effective_ks().size() == 6);
    c.metrics = {"bleu"};
    CHECK_THROWS_AS(c.validate(), ConfigError);

    const auto j = nlohmann::json::parse(R"({"models": "all", "ks": [1, 3], "seed": 9,
        "model_options": {"*": {"epochs": 2}, "text2text": {"epochs": 3}, "text2text:in-context": {"lr": 0.5}}})");
    const auto cfg = ExperimentConfig::from_json(j, "/base");
    CHECK(cfg.models == registered_models());
    CHECK(cfg.ks == std::vector<std::size_t>{1, 3});
    const auto o = cfg.options_for("text2text:in-context");
    CHECK(o.at("epochs") == 3);
    CHECK(o.at("lr") == 0.5);
    CHECK(cfg.options_for("nlinear").at("epochs") == 2);
    const auto back = ExperimentConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json::parse(R"({"models": ["nlinear"], "colour": 1})")),
                    ConfigError);
}

TEST_CASE("table marks") {
    SUBCASE("single cell is best") {
        CHECK(table("rmse", {{1.0}}).marks()[0][0] == CellMark::best);
    }
    SUBCASE("tie for best leaves no second") {
        const auto m = table("rmse", {{1.0}, {1.0}, {2.0}}).marks();
        CHECK(m[0][0] == CellMark::best);
        CHECK(m[1][0] == CellMark::best);
        CHECK(m[2][0] == CellMark::none);
    }
    SUBCASE("direction follows the metric") {
        const auto lo = table("rmse", {{3.0}, {1.0}, {2.0}}).marks();
        CHECK(lo[1][0] == CellMark::best);
        CHECK(lo[2][0] == CellMark::second);
        const auto hi = table("rouge1", {{0.3}, {0.1}, {0.2}}).marks();
        CHECK(hi[0][0] == CellMark::best);
        CHECK(hi[2][0] == CellMark::second);
    }
    SUBCASE("missing cells are skipped") {
        const auto m = table("rmse", {{std::nullopt}, {5.0}}).marks();
        CHECK(m[0][0] == CellMark::none);
        CHECK(m[1][0] == CellMark::best);
    }
    SUBCASE("marks do not depend on row order") {
        Rng rng(6);
        for (int t = 0; t < 50; ++t) {
            std::vector<std::vector<std::optional<double>>> cells(6);
            for (auto& r : cells) r = {double(rng.index(4)), double(rng.index(10))};
            auto a = table("rmse", cells);
            std::vector<std::size_t> perm{5, 2, 0, 4, 1, 3};
            auto b = a;
            for (std::size_t i = 0; i < 6; ++i) {
                b.rows[i] = a.rows[perm[i]];
                b.cells[i] = a.cells[perm[i]];
            }
            const auto ma = a.marks(), mb = b.marks();
            for (std::size_t i = 0; i < 6; ++i) CHECK(mb[i] == ma[perm[i]]);
        }
    }
}

TEST_CASE("table rendering") {
    auto t = table("rmse", {{1.23456, std::nullopt}, {2.0, 3.0}});
    t.parse_failures[1][1] = 2;
    const auto md = table_to_markdown(t);
    CHECK(md.find("| Model | 1-1 | 2-2 |") != std::string::npos);
    CHECK(md.find("| m0 | **1.2346** | — |") != std::string::npos);
    CHECK(md.find("| m1 | <u>2.0000</u> | **3.0000** |") != std::string::npos);
    CHECK(md.find("Parse failures: m1 at 2-2: 2") != std::string::npos);

    std::istringstream in(table_to_csv(t));
    const auto back = table_from_csv(in, "rmse");
    CHECK(back.rows == t.rows);
    CHECK(back.ks == t.ks);
    CHECK(back.cells == t.cells);
}

TEST_CASE("tables keep models that emit the metric") {
    std::vector<ScoreReport> reports{
        {"input_copy", "w", 1, {{"rmse", 2.0}, {"rouge1", 0.4}}, {}},
        {"nlinear", "w", 1, {{"rmse", 1.5}}, {}},
        {"text2text:zero-shot", "w", 1, {{"rouge1", 0.2}}, {{"rouge1", 3}}},
    };
    const std::vector<std::string> models{"input_copy", "nlinear", "text2text:zero-shot"};
    const auto ts = build_tables(reports, models, {1, 2}, {"rmse", "rouge1"});
    REQUIRE(ts.size() == 2);
    CHECK(ts[0].rows == std::vector<std::string>{"input_copy", "nlinear"});
    CHECK(ts[1].rows == std::vector<std::string>{"input_copy", "text2text:zero-shot"});
    CHECK(ts[0].cells[1][0] == 1.5);
    CHECK_FALSE(ts[0].cells[1][1]);
    CHECK(ts[1].parse_failures[1][0] == 3);
}

TEST_CASE("score csv round trip") {
    std::vector<ScoreReport> reports{{"a", "w", 2, {{"rmse", 0.1}, {"meteor", 1.0 / 3.0}}, {{"meteor", 1}}}};
    std::stringstream s;
    write_score_csv(s, reports);
    const auto back = read_score_csv(s);
    REQUIRE(back.size() == 1);
    CHECK(back[0].metrics == reports[0].metrics);
    CHECK(back[0].parse_failures.at("meteor") == 1);
    std::istringstream bad("wrong,header\n");
    CHECK_THROWS(read_score_csv(bad));
}

TEST_CASE("rmse pools every window day") {
    const HashStubEmbedder emb(8);
    Rng rng(2);
    std::vector<PredictionRecord> ps;
    std::vector<double> all_p, all_t;
    for (int w = 0; w < 7; ++w) {
        std::vector<double> p(3), t(3);
        for (int i = 0; i < 3; ++i) {
            p[i] = rng.normal();
            t[i] = rng.normal() * 4;
        }
        all_p.insert(all_p.end(), p.begin(), p.end());
        all_t.insert(all_t.end(), t.begin(), t.end());
        ps.push_back(record("nlinear", p, t));
    }
    const auto r = score_predictions(ps, "nlinear", "w", 3, true, false, {"rmse"}, emb, true);
    CHECK(std::abs(r.metrics.at("rmse") - rmse(all_p, all_t)) < 1e-9);
}

TEST_CASE("text metrics average per day then per window") {
    const HashStubEmbedder emb(8);
    std::vector<PredictionRecord> ps{
        record("m", {0, 0}, {0, 0}, {"a b", "x"}, {"a b", "a b"}),
        record("m", {0}, {0}, {"q"}, {"q"}),
    };
    const auto r = score_predictions(ps, "m", "w", 2, false, true, {"rouge1"}, emb, true);
    // Window means 0.5 and 1.0, averaged to 0.75.
    CHECK(r.metrics.at("rouge1") == doctest::Approx(0.75));
    CHECK(r.metrics.count("rmse") == 0);
}

TEST_CASE("judge metrics use the client and count parse failures") {
    const HashStubEmbedder emb(8);
    auto inner = std::make_shared<FunctionClient>(
        [](const std::string& prompt, const DecodeParams&) -> std::string {
            if (prompt.find("TP total count") != std::string::npos) {
                return "TP total count: 1\nFP total count: 1\nFN total count: 0";
            }
            return prompt.find("Output: bad") != std::string::npos ? "unsure" : "7";
        },
        LMCapabilities{100000, true});
    std::vector<PredictionRecord> ps{record("m", {0}, {0}, {"good"}), record("m", {0}, {0}, {"bad"})};
    const auto dir = scratch("judge");
    fs::create_directories(dir);
    CachingClient cached(inner, dir / "cache.jsonl");
    const auto r = score_predictions(ps, "m", "w", 1, false, true, {"gpt_score", "gpt_f1"}, emb, true, &cached, 2);
    CHECK(r.metrics.at("gpt_score") == 7.0);
    CHECK(r.parse_failures.at("gpt_score") == 1);
    CHECK(r.metrics.at("gpt_f1") == doctest::Approx(2.0 / 3.0));
    const auto lines = slurp(dir / "cache.jsonl");
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 4);
    DecodeParams d;
    CachingClient again(inner, dir / "cache.jsonl");
    CHECK(again.complete(semantic_judge_prompt("ref", "good"), d) == "7");
    CHECK(again.hits() == 1);
    fs::remove_all(dir);
}

TEST_CASE("small experiment") {
    const auto dir = scratch("run");
    auto cfg = small_config(dir);
    const auto res = run_experiment(cfg);
    CHECK(res.failures.empty());
    REQUIRE(res.tables.size() == cfg.metrics.size());
    const auto& rm = res.tables[0];
    CHECK(rm.metric == "rmse");
    CHECK(rm.rows == cfg.models);
    CHECK(rm.ks == cfg.ks);
    // At k=1 the normalized input is identically zero, so NLinear is the last
    // value plus a learned bias and can only tie input_copy.
    CHECK(*rm.cells[1][0] == doctest::Approx(*rm.cells[0][0]).epsilon(0.01));
    CHECK(*rm.cells[0][1] > *rm.cells[1][1]);
    for (const char* f : {"config.json", "scores.csv", "predictions.jsonl", "failures.jsonl", "tables/rmse.csv",
                          "tables/rmse.md", "tables/rouge1.md"})
        CHECK_MESSAGE(fs::exists(dir / f), f);

    // The stored predictions reproduce the table value.
    const auto preds = read_predictions(dir / "predictions.jsonl");
    std::vector<double> p, t;
    for (const auto& r : preds) {
        if (r.model != "nlinear" || r.k != 2) continue;
        p.insert(p.end(), r.forecast.time_values.begin(), r.forecast.time_values.end());
        t.insert(t.end(), r.truth_values.begin(), r.truth_values.end());
    }
    CHECK(std::abs(rmse(p, t) - *rm.cells[1][1]) < 1e-9);

    const auto scores = slurp(dir / "scores.csv");
    const auto tables = slurp(dir / "tables" / "rmse.md");
    fs::remove(dir / "tables" / "rmse.md");
    report_directory(dir);
    CHECK(slurp(dir / "tables" / "rmse.md") == tables);

    run_experiment(cfg);
    CHECK(slurp(dir / "scores.csv") == scores);
    cfg.parallel = true;
    run_experiment(cfg);
    CHECK(slurp(dir / "scores.csv") == scores);
    fs::remove_all(dir);

    cfg.models.clear();
    CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
}

TEST_CASE("model failures are recorded per cell") {
    const auto dir = scratch("fail");
    auto cfg = small_config(dir);
    cfg.models = {"input_copy", "patchtst"};
    cfg.model_options = {{"patchtst", {{"heads", 3}}}};  // 64 is not divisible by 3
    const auto res = run_experiment(cfg);
    CHECK(res.failures.size() == 2);
    CHECK(res.failures[0].model == "patchtst");
    CHECK_FALSE(res.tables[0].cells[1][0]);
    CHECK(res.tables[0].cells[0][0]);
    CHECK(slurp(dir / "failures.jsonl").find("patchtst") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("judge metrics without a judge are a config error") {
    auto cfg = small_config(scratch("nojudge"));
    cfg.metrics = {"gpt_score"};
    CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
}

TEST_CASE("plots") {
    std::vector<PredictionRecord> ps;
    for (int w = 0; w < 5; ++w) {
        auto a = record("nlinear", {double(w)}, {double(w) + 1});
        a.origin = Date::from_ymd(2020, 1, 1 + w).iso();
        auto b = a;
        b.model = "patchtst";
        ps.push_back(a);
        ps.push_back(b);
    }
    const auto dir = scratch("plot");
    fs::create_directories(dir);
    const auto r = plot_forecasts(ps, 1, {"nlinear", "patchtst"}, dir / "a.svg");
    CHECK(r.lines == 3);
    CHECK(r.drawn.size() == 2);
    const auto svg = slurp(dir / "a.svg");
    CHECK(svg.rfind("<svg", 0) == 0);
    plot_forecasts(ps, 1, {"nlinear", "patchtst"}, dir / "b.svg");
    CHECK(slurp(dir / "b.svg") == svg);

    const auto partial = plot_forecasts(ps, 1, {"nlinear", "hybrid"}, dir / "c.svg");
    CHECK(partial.lines == 2);
    CHECK(partial.omitted == std::vector<std::string>{"hybrid"});
    CHECK(slurp(dir / "c.svg").find("hybrid") != std::string::npos);
    CHECK_THROWS_AS(plot_forecasts(ps, 2, {"nlinear"}, dir / "d.svg"), std::invalid_argument);
    fs::remove_all(dir);
}
