#include "ttc/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ttc/hybrid.hpp"
#include "ttc/util.hpp"

namespace ttc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kVariants{"text2text", "texttime2text", "texttime2time", "texttime2texttime"};
const std::vector<std::string> kModes{"zero-shot", "in-context", "fine-tuned"};

std::string dump_json(const json& j, int indent = -1) {
    return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

void write_text(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
    out << content;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (const double x : v) s += x;
    return s / double(v.size());
}

json synth_to_json(const SynthConfig& s) {
    return {{"length", s.length},
            {"channels", s.channels},
            {"noise", s.noise},
            {"leak", to_string(s.leak)},
            {"start", s.start.iso()},
            {"ar_coefficient", s.ar_coefficient},
            {"seasonal_amplitude", s.seasonal_amplitude},
            {"seasonal_period", s.seasonal_period},
            {"level", s.level},
            {"missing_day_rate", s.missing_day_rate}};
}

SynthConfig synth_from_json(const json& j) {
    SynthConfig s;
    s.length = j.value("length", s.length);
    s.channels = j.value("channels", s.channels);
    s.noise = j.value("noise", s.noise);
    s.leak = parse_leak_mode(j.value("leak", std::string(to_string(s.leak))));
    if (j.contains("start")) s.start = Date::parse(j.at("start").get<std::string>());
    s.ar_coefficient = j.value("ar_coefficient", s.ar_coefficient);
    s.seasonal_amplitude = j.value("seasonal_amplitude", s.seasonal_amplitude);
    s.seasonal_period = j.value("seasonal_period", s.seasonal_period);
    s.level = j.value("level", s.level);
    s.missing_day_rate = j.value("missing_day_rate", s.missing_day_rate);
    return s;
}

json embedder_to_json(const EmbedderConfig& e) {
    return {{"backend", e.backend}, {"mode", e.mode},         {"dim", e.dim},    {"vocab", e.vocab},
            {"seed", e.seed},       {"base_url", e.base_url}, {"model", e.model}};
}

EmbedderConfig embedder_from_json(const json& j) {
    EmbedderConfig e;
    e.backend = j.value("backend", e.backend);
    e.mode = j.value("mode", e.mode);
    e.dim = j.value("dim", e.dim);
    e.vocab = j.value("vocab", e.vocab);
    e.seed = j.value("seed", e.seed);
    e.base_url = j.value("base_url", e.base_url);
    e.model = j.value("model", e.model);
    return e;
}

}  // namespace

// --- registry -----------------------------------------------------------------

const std::vector<std::string>& known_metrics() {
    static const std::vector<std::string> m{"rmse",   "cosine",    "meteor",        "rouge1",     "rouge2",
                                            "rougeL", "gpt_score", "gpt_precision", "gpt_recall", "gpt_f1"};
    return m;
}

bool is_judge_metric(const std::string& metric) { return metric.rfind("gpt_", 0) == 0; }

bool lower_is_better(const std::string& metric) { return metric == "rmse"; }

const std::vector<std::string>& registered_models() {
    static const std::vector<std::string> ids = [] {
        std::vector<std::string> v{"input_copy", "nlinear", "nlinear_text", "patchtst"};
        for (const auto& variant : kVariants) {
            for (const auto& mode : kModes) v.push_back(variant + ":" + mode);
        }
        v.push_back("hybrid");
        return v;
    }();
    return ids;
}

bool is_registered_model(const std::string& id) {
    const auto& ids = registered_models();
    return std::find(ids.begin(), ids.end(), id) != ids.end();
}

ModelTraits model_traits(const std::string& id) {
    if (!is_registered_model(id)) throw ConfigError(fmt::format("unknown model '{}'", id));
    if (id == "input_copy" || id == "hybrid") return {true, true};
    const auto colon = id.find(':');
    if (colon == std::string::npos) return {true, false};
    PromptSpec spec;
    spec.variant = parse_prompt_variant(id.substr(0, colon));
    return {spec.output_has_time(), spec.output_has_text()};
}

std::unique_ptr<ForecastModel> make_model(const std::string& id, const ModelContext& ctx, std::size_t k) {
    const json& o = ctx.options;
    if (id == "input_copy") return std::make_unique<InputCopy>(ctx.target_index);
    if (id == "nlinear") return std::make_unique<NLinear>(ctx.target_index);
    if (id == "nlinear_text") {
        if (!ctx.embedder) throw ConfigError("nlinear_text needs a text embedder");
        return std::make_unique<NLinearText>(ctx.target_index, ctx.embedder, o.value("ridge", 10.0));
    }
    if (id == "patchtst") {
        PatchTstOptions p;
        p.dim = o.value("dim", p.dim);
        p.heads = o.value("heads", p.heads);
        p.layers = o.value("layers", p.layers);
        p.epochs = o.value("epochs", p.epochs);
        p.patience = o.value("patience", p.patience);
        p.batch = o.value("batch", p.batch);
        p.lr = o.value("lr", p.lr);
        return std::make_unique<PatchTst>(ctx.target_index, ctx.seed, p);
    }
    if (id == "hybrid") return std::make_unique<HybridForecaster>(HybridConfig::from_json(o), ctx);
    const auto colon = id.find(':');
    if (colon == std::string::npos || !is_registered_model(id)) throw ConfigError(fmt::format("unknown model '{}'", id));
    PromptSpec spec;
    spec.schema = ctx.schema;
    spec.k = k;
    spec.variant = parse_prompt_variant(id.substr(0, colon));
    spec.mode = parse_prompt_mode(id.substr(colon + 1));
    return std::make_unique<PromptForecaster>(spec, ctx);
}

// --- config -------------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (models.empty()) throw ConfigError("config lists no models");
    for (const auto& m : models) {
        if (!is_registered_model(m)) throw ConfigError(fmt::format("unknown model '{}'", m));
    }
    std::set<std::string> seen;
    for (const auto& m : models) {
        if (!seen.insert(m).second) throw ConfigError(fmt::format("model '{}' listed twice", m));
    }
    for (const auto k : ks) {
        if (k == 0) throw ConfigError("window sizes must be positive");
    }
    if (metrics.empty()) throw ConfigError("config lists no metrics");
    for (const auto& m : metrics) {
        if (std::find(known_metrics().begin(), known_metrics().end(), m) == known_metrics().end()) {
            throw ConfigError(fmt::format("unknown metric '{}'", m));
        }
    }
    try {
        schema_by_id(schema);
        split.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (lm_backend != "tiny" && lm_backend != "http") throw ConfigError(fmt::format("unknown lm_backend '{}'", lm_backend));
    if (judge != "none" && judge != "http") throw ConfigError(fmt::format("unknown judge '{}'", judge));
    if (!(max_missing_fraction >= 0.0 && max_missing_fraction <= 1.0)) {
        throw ConfigError("max_missing_fraction must lie in [0, 1]");
    }
    if (!model_options.is_object()) throw ConfigError("model_options must be an object");
}

std::vector<std::size_t> ExperimentConfig::effective_ks() const {
    if (!ks.empty()) return ks;
    const std::size_t top = schema == "medical" ? 6 : 7;
    std::vector<std::size_t> out;
    for (std::size_t k = 1; k <= top; ++k) out.push_back(k);
    return out;
}

json ExperimentConfig::options_for(const std::string& model_id) const {
    json out = json::object();
    auto merge = [&](const std::string& key) {
        if (model_options.contains(key)) out.update(model_options.at(key));
    };
    merge("*");
    const auto colon = model_id.find(':');
    if (colon != std::string::npos) merge(model_id.substr(0, colon));
    merge(model_id);
    return out;
}

json ExperimentConfig::to_json() const {
    json j = {{"dataset", dataset.string()},
              {"synth", synth_to_json(synth)},
              {"synth_seed", synth_seed},
              {"schema", schema},
              {"target", target},
              {"ks", effective_ks()},
              {"models", models},
              {"seed", seed},
              {"metrics", metrics},
              {"split", {{"train", split.train}, {"val", split.val}, {"test", split.test}}},
              {"max_missing_fraction", max_missing_fraction},
              {"embedder", embedder_to_json(embedder)},
              {"cosine_normalize", cosine_normalize},
              {"lm", lm.to_json()},
              {"lm_backend", lm_backend},
              {"judge", judge},
              {"judge_parallel", judge_parallel},
              {"model_options", model_options},
              {"output_dir", output_dir.string()},
              {"parallel", parallel}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
    static const std::set<std::string> keys{"dataset", "synth",           "synth_seed", "schema",           "target",
                                            "ks",      "models",          "seed",       "metrics",          "split",
                                            "max_missing_fraction",       "embedder",   "cosine_normalize", "lm",
                                            "lm_backend", "judge",        "judge_parallel", "model_options",
                                            "output_dir", "parallel"};
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!keys.count(key)) throw ConfigError(fmt::format("unknown config key '{}'", key));
    }
    auto resolve = [&](const std::string& p) {
        const fs::path path(p);
        return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    ExperimentConfig c;
    try {
        if (j.contains("dataset") && !j.at("dataset").get<std::string>().empty()) {
            c.dataset = resolve(j.at("dataset").get<std::string>());
        }
        c.schema = j.value("schema", c.schema);
        if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"));
        c.synth.schema = c.schema;
        c.synth_seed = j.value("synth_seed", c.synth_seed);
        c.target = j.value("target", c.target);
        c.ks = j.value("ks", c.ks);
        if (j.contains("models")) {
            const auto& m = j.at("models");
            if (m.is_string() && m.get<std::string>() == "all") {
                c.models = registered_models();
            } else {
                c.models = m.get<std::vector<std::string>>();
            }
        }
        c.seed = j.value("seed", c.seed);
        c.metrics = j.value("metrics", c.metrics);
        if (j.contains("split")) {
            const auto& s = j.at("split");
            c.split.train = s.value("train", c.split.train);
            c.split.val = s.value("val", c.split.val);
            c.split.test = s.value("test", c.split.test);
        }
        c.max_missing_fraction = j.value("max_missing_fraction", c.max_missing_fraction);
        if (j.contains("embedder")) c.embedder = embedder_from_json(j.at("embedder"));
        c.cosine_normalize = j.value("cosine_normalize", c.cosine_normalize);
        if (j.contains("lm")) c.lm = LmConfig::from_json(j.at("lm"));
        c.lm_backend = j.value("lm_backend", c.lm_backend);
        c.judge = j.value("judge", c.judge);
        c.judge_parallel = j.value("judge_parallel", c.judge_parallel);
        c.model_options = j.value("model_options", c.model_options);
        if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>());
        c.parallel = j.value("parallel", c.parallel);
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("malformed config: {}", e.what()));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return from_json(j, path.parent_path());
}

AlignedCorpus load_experiment_corpus(const ExperimentConfig& config) {
    AlignedCorpus raw = config.dataset.empty() ? generate_synthetic(config.synth, config.synth_seed)
                                               : load_corpus(config.dataset, config.schema);
    FilterResult filtered = filter_missing(raw, config.max_missing_fraction);
    if (const auto* r = std::get_if<MissingDataRejection>(&filtered)) {
        throw CorpusError(fmt::format("corpus rejected: {:.4f} of days are absent (threshold {:.4f})",
                                      r->missing_fraction, r->threshold));
    }
    AlignedCorpus corpus = std::get<AlignedCorpus>(std::move(filtered));
    if (!config.target.empty() && config.target != corpus.target_channel()) {
        return AlignedCorpus(corpus.schema_id(), corpus.channel_names(), config.target, corpus.records());
    }
    return corpus;
}

// --- tables -------------------------------------------------------------------

std::string ResultsTable::column_label(std::size_t k) { return fmt::format("{}-{}", k, k); }

std::vector<std::vector<CellMark>> ResultsTable::marks() const {
    std::vector<std::vector<CellMark>> out(rows.size(), std::vector<CellMark>(ks.size(), CellMark::none));
    const bool lower = lower_is_better();
    for (std::size_t c = 0; c < ks.size(); ++c) {
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto& v = cells[r][c];
            if (!v || !std::isfinite(*v)) continue;
            std::size_t better = 0;
            for (std::size_t o = 0; o < rows.size(); ++o) {
                const auto& w = cells[o][c];
                if (w && std::isfinite(*w) && (lower ? *w < *v : *w > *v)) ++better;
            }
            if (better == 0) out[r][c] = CellMark::best;
            if (better == 1) out[r][c] = CellMark::second;
        }
    }
    return out;
}

std::string table_to_csv(const ResultsTable& t) {
    std::string out = "model";
    for (const auto k : t.ks) out += "," + ResultsTable::column_label(k);
    out += '\n';
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        out += t.rows[r];
        for (std::size_t c = 0; c < t.ks.size(); ++c) {
            out += ',';
            if (t.cells[r][c]) out += format_roundtrip(*t.cells[r][c]);
        }
        out += '\n';
    }
    return out;
}

std::string table_to_markdown(const ResultsTable& t) {
    const auto marks = t.marks();
    std::string out = fmt::format("### {} ({})\n\n| Model |", t.metric, t.lower_is_better() ? "lower is better" : "higher is better");
    for (const auto k : t.ks) out += " " + ResultsTable::column_label(k) + " |";
    out += "\n|---|";
    for (std::size_t c = 0; c < t.ks.size(); ++c) out += "---:|";
    out += '\n';
    std::vector<std::string> notes;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        out += "| " + t.rows[r] + " |";
        for (std::size_t c = 0; c < t.ks.size(); ++c) {
            if (!t.cells[r][c]) {
                out += " — |";
                continue;
            }
            std::string v = fmt::format("{:.4f}", *t.cells[r][c]);
            if (marks[r][c] == CellMark::best) v = "**" + v + "**";
            if (marks[r][c] == CellMark::second) v = "<u>" + v + "</u>";
            out += " " + v + " |";
            const std::size_t pf = t.parse_failures.empty() ? 0 : t.parse_failures[r][c];
            if (pf > 0) notes.push_back(fmt::format("{} at {}: {}", t.rows[r], ResultsTable::column_label(t.ks[c]), pf));
        }
        out += '\n';
    }
    if (!notes.empty()) {
        out += "\nParse failures: ";
        for (std::size_t i = 0; i < notes.size(); ++i) out += (i ? "; " : "") + notes[i];
        out += '\n';
    }
    return out;
}

ResultsTable table_from_csv(std::istream& in, const std::string& metric) {
    ResultsTable t;
    t.metric = metric;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty table");
    const auto header = split_csv_line(line);
    if (header.empty() || header[0] != "model") throw std::runtime_error("table header must start with 'model'");
    for (std::size_t i = 1; i < header.size(); ++i) t.ks.push_back(std::stoul(header[i].substr(0, header[i].find('-'))));
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw std::runtime_error(fmt::format("ragged table row '{}'", line));
        t.rows.push_back(cells[0]);
        std::vector<std::optional<double>> row;
        for (std::size_t i = 1; i < cells.size(); ++i) {
            row.push_back(cells[i].empty() ? std::nullopt : std::optional<double>(std::stod(cells[i])));
        }
        t.cells.push_back(std::move(row));
        t.parse_failures.emplace_back(t.ks.size(), 0);
    }
    return t;
}

void emit_tables(std::span<const ResultsTable> tables, const fs::path& dir, bool csv, bool markdown) {
    fs::create_directories(dir);
    for (const auto& t : tables) {
        if (csv) write_text(dir / (t.metric + ".csv"), table_to_csv(t));
        if (markdown) write_text(dir / (t.metric + ".md"), table_to_markdown(t));
    }
}

std::vector<ResultsTable> build_tables(std::span<const ScoreReport> reports, const std::vector<std::string>& models,
                                       const std::vector<std::size_t>& ks, const std::vector<std::string>& metrics) {
    std::vector<ResultsTable> out;
    for (const auto& metric : metrics) {
        ResultsTable t;
        t.metric = metric;
        t.ks = ks;
        for (const auto& m : models) {
            const ModelTraits traits = model_traits(m);
            if (metric == "rmse" ? !traits.time : !traits.text) continue;
            t.rows.push_back(m);
            std::vector<std::optional<double>> row(ks.size());
            std::vector<std::size_t> pf(ks.size(), 0);
            for (std::size_t c = 0; c < ks.size(); ++c) {
                for (const auto& r : reports) {
                    if (r.model_id != m || r.k != ks[c]) continue;
                    const auto it = r.metrics.find(metric);
                    if (it != r.metrics.end()) row[c] = it->second;
                    const auto p = r.parse_failures.find(metric);
                    if (p != r.parse_failures.end()) pf[c] = p->second;
                }
            }
            t.cells.push_back(std::move(row));
            t.parse_failures.push_back(std::move(pf));
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<ScoreReport> read_score_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "model,k,metric,value,n_parse_failures") {
        throw std::runtime_error("scores file has an unexpected header");
    }
    std::vector<ScoreReport> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 5) throw std::runtime_error(fmt::format("malformed score row '{}'", line));
        const std::size_t k = std::stoul(cells[1]);
        auto it = std::find_if(out.begin(), out.end(), [&](const ScoreReport& r) { return r.model_id == cells[0] && r.k == k; });
        if (it == out.end()) {
            out.emplace_back();
            it = std::prev(out.end());
            it->model_id = cells[0];
            it->k = k;
        }
        it->metrics[cells[2]] = std::stod(cells[3]);
        it->parse_failures[cells[2]] = std::stoul(cells[4]);
    }
    return out;
}

// --- predictions and scoring ----------------------------------------------------

json PredictionRecord::to_json() const {
    json pred = {{"provenance", forecast.provenance},
                 {"time_values", forecast.time_values},
                 {"emits_time", forecast.emits_time},
                 {"parse_failures", forecast.parse_failures},
                 {"prompt_tokens", forecast.prompt_tokens}};
    pred["texts"] = forecast.texts ? json(*forecast.texts) : json(nullptr);
    return {{"model", model},
            {"k", k},
            {"origin", origin},
            {"input_values", input_values},
            {"truth_values", truth_values},
            {"truth_texts", truth_texts},
            {"forecast", pred}};
}

PredictionRecord PredictionRecord::from_json(const json& j) {
    PredictionRecord r;
    r.model = j.at("model").get<std::string>();
    r.k = j.at("k").get<std::size_t>();
    r.origin = j.at("origin").get<std::string>();
    r.input_values = j.at("input_values").get<std::vector<double>>();
    r.truth_values = j.at("truth_values").get<std::vector<double>>();
    r.truth_texts = j.at("truth_texts").get<std::vector<std::string>>();
    const auto& f = j.at("forecast");
    r.forecast.provenance = f.at("provenance").get<std::string>();
    r.forecast.time_values = f.at("time_values").get<std::vector<double>>();
    r.forecast.emits_time = f.at("emits_time").get<bool>();
    r.forecast.parse_failures = f.at("parse_failures").get<std::size_t>();
    r.forecast.prompt_tokens = f.at("prompt_tokens").get<std::size_t>();
    if (!f.at("texts").is_null()) r.forecast.texts = f.at("texts").get<std::vector<std::string>>();
    return r;
}

std::vector<PredictionRecord> read_predictions(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
    std::vector<PredictionRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(PredictionRecord::from_json(json::parse(line)));
    }
    return out;
}

ScoreReport score_predictions(std::span<const PredictionRecord> preds, const std::string& model_id,
                              const std::string& dataset_id, std::size_t k, bool emits_time, bool emits_text,
                              const std::vector<std::string>& metrics, const TextEmbedder& embedder,
                              bool cosine_normalize, LMClient* judge, std::size_t judge_parallel) {
    ScoreReport report;
    report.model_id = model_id;
    report.dataset_id = dataset_id;
    report.k = k;
    std::size_t parse_failures = 0;
    for (const auto& p : preds) parse_failures += p.forecast.parse_failures;
    auto wants = [&](const char* m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };

    if (emits_time && wants("rmse")) {
        std::vector<double> pred, truth;
        for (const auto& p : preds) {
            if (p.forecast.time_values.size() != p.truth_values.size()) {
                throw std::runtime_error(fmt::format("{}: forecast length {} for {} target days", model_id,
                                                     p.forecast.time_values.size(), p.truth_values.size()));
            }
            pred.insert(pred.end(), p.forecast.time_values.begin(), p.forecast.time_values.end());
            truth.insert(truth.end(), p.truth_values.begin(), p.truth_values.end());
        }
        if (!pred.empty()) {
            report.metrics["rmse"] = rmse(pred, truth);
            report.parse_failures["rmse"] = parse_failures;
        }
    }
    if (!emits_text || preds.empty()) return report;

    auto text_of = [&](const PredictionRecord& p, std::size_t d) -> const std::string& {
        static const std::string empty;
        return p.forecast.texts && d < p.forecast.texts->size() ? (*p.forecast.texts)[d] : empty;
    };
    using Fn = std::function<double(const std::string&, const std::string&)>;
    const std::vector<std::pair<std::string, Fn>> overlap{
        {"cosine", [&](const std::string& r, const std::string& c) { return cosine_similarity(r, c, embedder, cosine_normalize); }},
        {"meteor", [](const std::string& r, const std::string& c) { return meteor(r, c); }},
        {"rouge1", [](const std::string& r, const std::string& c) { return rouge_n(r, c, 1).f1; }},
        {"rouge2", [](const std::string& r, const std::string& c) { return rouge_n(r, c, 2).f1; }},
        {"rougeL", [](const std::string& r, const std::string& c) { return rouge_l(r, c).f1; }}};
    for (const auto& [name, fn] : overlap) {
        if (!wants(name.c_str())) continue;
        std::vector<double> per_window;
        for (const auto& p : preds) {
            std::vector<double> days;
            for (std::size_t d = 0; d < p.truth_texts.size(); ++d) days.push_back(fn(p.truth_texts[d], text_of(p, d)));
            per_window.push_back(mean(days));
        }
        report.metrics[name] = mean(per_window);
        report.parse_failures[name] = parse_failures;
    }

    const bool semantic = wants("gpt_score");
    const bool facts = wants("gpt_precision") || wants("gpt_recall") || wants("gpt_f1");
    if (!judge || (!semantic && !facts)) return report;
    std::vector<TextPair> pairs;
    std::vector<std::size_t> owner;
    for (std::size_t w = 0; w < preds.size(); ++w) {
        for (std::size_t d = 0; d < preds[w].truth_texts.size(); ++d) {
            pairs.push_back({preds[w].truth_texts[d], text_of(preds[w], d)});
            owner.push_back(w);
        }
    }
    // Per-window means over parsed judgements, then the mean over windows
    // that had at least one.
    auto macro = [&](const std::vector<std::optional<double>>& values) {
        std::vector<std::vector<double>> per(preds.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i]) per[owner[i]].push_back(*values[i]);
        }
        std::vector<double> windows;
        for (const auto& v : per) {
            if (!v.empty()) windows.push_back(mean(v));
        }
        return windows.empty() ? std::optional<double>() : std::optional<double>(mean(windows));
    };
    if (semantic) {
        const auto judged = judge_semantic_batch(pairs, *judge, judge_parallel);
        std::vector<std::optional<double>> v;
        std::size_t failed = 0;
        for (const auto& j : judged) {
            v.push_back(j.ok() ? std::optional<double>(*j.score) : std::nullopt);
            failed += !j.ok();
        }
        if (const auto m = macro(v)) report.metrics["gpt_score"] = *m;
        report.parse_failures["gpt_score"] = failed;
    }
    if (facts) {
        const auto judged = judge_f1_batch(pairs, *judge, judge_parallel);
        std::vector<std::optional<double>> p, r, f;
        std::size_t failed = 0;
        for (const auto& j : judged) {
            p.push_back(j.ok() ? std::optional<double>(j.result->precision) : std::nullopt);
            r.push_back(j.ok() ? std::optional<double>(j.result->recall) : std::nullopt);
            f.push_back(j.ok() ? std::optional<double>(j.result->f1) : std::nullopt);
            failed += !j.ok();
        }
        const std::pair<const char*, const std::vector<std::optional<double>>*> parts[] = {
            {"gpt_precision", &p}, {"gpt_recall", &r}, {"gpt_f1", &f}};
        for (const auto& [name, values] : parts) {
            if (!wants(name)) continue;
            if (const auto m = macro(*values)) report.metrics[name] = *m;
            report.parse_failures[name] = failed;
        }
    }
    return report;
}

// --- judge cache ----------------------------------------------------------------

CachingClient::CachingClient(std::shared_ptr<LMClient> inner, fs::path cache_file)
    : inner_(std::move(inner)), file_(std::move(cache_file)) {
    if (!inner_) throw std::invalid_argument("caching client needs an inner client");
    std::ifstream in(file_);
    std::string line;
    while (in && std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("prompt") || !j.contains("response")) continue;
        cache_[j.at("prompt").get<std::string>()] = j.at("response").get<std::string>();
    }
}

std::string CachingClient::complete(const std::string& prompt, const DecodeParams& params) {
    {
        std::lock_guard lock(mutex_);
        const auto it = cache_.find(prompt);
        if (it != cache_.end()) {
            ++hits_;
            return it->second;
        }
    }
    std::string response = inner_->complete(prompt, params);
    std::lock_guard lock(mutex_);
    cache_.emplace(prompt, response);
    if (file_.has_parent_path()) fs::create_directories(file_.parent_path());
    std::ofstream out(file_, std::ios::app | std::ios::binary);
    out << dump_json({{"prompt", prompt}, {"response", response}, {"model", inner_->name()}}) << '\n';
    return response;
}

// --- experiment ------------------------------------------------------------------

namespace {

struct CellOutcome {
    std::optional<ScoreReport> report;
    std::optional<CellFailure> failure;
    std::vector<PredictionRecord> predictions;
};

CellOutcome run_cell(const std::string& id, std::size_t k, const Split& split, ModelContext ctx,
                     const ExperimentConfig& config, const std::string& dataset_id, LMClient* judge) {
    CellOutcome out;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        ctx.options = config.options_for(id);
        auto model = make_model(id, ctx, k);
        model->fit(split.train, split.val);
        for (const auto& w : split.test) {
            PredictionRecord p;
            p.model = id;
            p.k = k;
            p.origin = w.input_records.front().date.iso();
            for (const auto& r : w.input_records) p.input_values.push_back(target_value(r, ctx.target_index));
            for (const auto& r : w.target_records) {
                p.truth_values.push_back(target_value(r, ctx.target_index));
                p.truth_texts.push_back(r.text);
            }
            p.forecast = model->predict(w.input_records);
            out.predictions.push_back(std::move(p));
        }
        const ModelTraits traits = model_traits(id);
        out.report = score_predictions(out.predictions, id, dataset_id, k, traits.time, traits.text, config.metrics,
                                       *ctx.embedder, config.cosine_normalize, judge, config.judge_parallel);
        out.report->validate();
    } catch (const std::exception& e) {
        out.report.reset();
        out.predictions.clear();
        out.failure = CellFailure{id, k, e.what()};
        spdlog::warn("{} at k={} failed: {}", id, k, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("{} k={} done in {:.1f}s", id, k, secs);
    return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    const AlignedCorpus corpus = load_experiment_corpus(config);
    const Schema& schema = schema_by_id(corpus.schema_id());
    const auto embedder = make_embedder(config.embedder);

    std::shared_ptr<LMClient> lm_client = options.lm_client;
    if (!lm_client && config.lm_backend == "http") lm_client = std::make_shared<HttpLMClient>(http_config_from_env());

    const bool needs_judge = std::any_of(config.metrics.begin(), config.metrics.end(), is_judge_metric);
    std::shared_ptr<LMClient> judge;
    if (needs_judge) {
        std::shared_ptr<LMClient> inner = options.judge;
        if (!inner && config.judge == "http") inner = std::make_shared<HttpLMClient>(http_config_from_env());
        if (!inner) throw ConfigError("judge metrics requested but no judge is configured");
        judge = std::make_shared<CachingClient>(inner, config.output_dir / "judge_cache.jsonl");
    }

    const auto lm = std::make_shared<const TinyLm>(config.lm);
    ModelContext base;
    base.schema = &schema;
    base.target_index = corpus.target_index();
    base.seed = config.seed;
    base.embedder = embedder;
    base.lm = lm;
    base.lm_client = lm_client;

    ExperimentResult result;
    const auto ks = config.effective_ks();
    for (const auto k : ks) {
        Split split;
        try {
            split = chronological_split(make_windows(corpus, k), config.split);
            if (split.train.empty() || split.test.empty()) {
                throw CorpusError(fmt::format("k={} leaves {} training and {} test windows", k, split.train.size(),
                                              split.test.size()));
            }
        } catch (const std::exception& e) {
            for (const auto& id : config.models) result.failures.push_back({id, k, e.what()});
            spdlog::warn("k={} skipped: {}", k, e.what());
            continue;
        }
        std::vector<CellOutcome> outcomes(config.models.size());
        if (config.parallel) {
            std::vector<std::future<CellOutcome>> jobs;
            for (const auto& id : config.models) {
                ModelContext ctx = base;
                ctx.lm = std::make_shared<const TinyLm>(lm->clone());
                jobs.push_back(std::async(std::launch::async, run_cell, id, k, std::cref(split), ctx,
                                          std::cref(config), corpus.schema_id(), judge.get()));
            }
            for (std::size_t i = 0; i < jobs.size(); ++i) outcomes[i] = jobs[i].get();
        } else {
            for (std::size_t i = 0; i < config.models.size(); ++i) {
                outcomes[i] = run_cell(config.models[i], k, split, base, config, corpus.schema_id(), judge.get());
            }
        }
        for (auto& o : outcomes) {
            if (o.report) result.reports.push_back(std::move(*o.report));
            if (o.failure) result.failures.push_back(std::move(*o.failure));
            for (auto& p : o.predictions) result.predictions.push_back(std::move(p));
        }
    }

    // Model-major order for every artifact.
    auto rank = [&](const std::string& id) {
        return std::find(config.models.begin(), config.models.end(), id) - config.models.begin();
    };
    std::stable_sort(result.reports.begin(), result.reports.end(), [&](const auto& a, const auto& b) {
        return std::pair(rank(a.model_id), a.k) < std::pair(rank(b.model_id), b.k);
    });
    std::stable_sort(result.predictions.begin(), result.predictions.end(), [&](const auto& a, const auto& b) {
        return std::pair(rank(a.model), a.k) < std::pair(rank(b.model), b.k);
    });
    result.tables = build_tables(result.reports, config.models, ks, config.metrics);

    const fs::path& dir = config.output_dir;
    fs::create_directories(dir);
    write_text(dir / "config.json", dump_json(config.to_json(), 2) + "\n");
    std::ostringstream scores;
    write_score_csv(scores, result.reports);
    write_text(dir / "scores.csv", scores.str());
    emit_tables(result.tables, dir / "tables");
    std::string lines;
    for (const auto& p : result.predictions) lines += dump_json(p.to_json()) + "\n";
    write_text(dir / "predictions.jsonl", lines);
    lines.clear();
    for (const auto& f : result.failures) lines += dump_json({{"model", f.model}, {"k", f.k}, {"reason", f.reason}}) + "\n";
    write_text(dir / "failures.jsonl", lines);
    return result;
}

std::vector<ResultsTable> report_directory(const fs::path& dir) {
    const json cfg = json::parse(read_text(dir / "config.json"));
    std::istringstream scores(read_text(dir / "scores.csv"));
    const auto reports = read_score_csv(scores);
    const auto tables = build_tables(reports, cfg.at("models").get<std::vector<std::string>>(),
                                     cfg.at("ks").get<std::vector<std::size_t>>(),
                                     cfg.at("metrics").get<std::vector<std::string>>());
    emit_tables(tables, dir / "tables");
    return tables;
}

// --- plotting -----------------------------------------------------------------------

PlotResult plot_forecasts(std::span<const PredictionRecord> preds, std::size_t k, const std::vector<std::string>& models,
                          const fs::path& out) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    // Observed first target day per test window, keyed by window origin.
    std::map<std::string, double> observed;
    std::map<std::string, std::map<std::string, double>> forecasts;
    for (const auto& p : preds) {
        if (p.k != k || p.truth_values.empty()) continue;
        observed[p.origin] = p.truth_values.front();
        if (p.forecast.emits_time && !p.forecast.time_values.empty()) forecasts[p.model][p.origin] = p.forecast.time_values.front();
    }
    PlotResult result;
    for (const auto& m : models) {
        if (forecasts.count(m) && !observed.empty()) {
            result.drawn.push_back(m);
        } else {
            result.omitted.push_back(m);
        }
    }
    if (result.drawn.empty()) throw std::invalid_argument(fmt::format("no numeric forecasts to plot for k={}", k));

    std::vector<std::string> origins;
    for (const auto& [o, _] : observed) origins.push_back(o);
    double lo = observed.begin()->second, hi = lo;
    for (const auto& [_, v] : observed) lo = std::min(lo, v), hi = std::max(hi, v);
    for (const auto& m : result.drawn) {
        for (const auto& [_, v] : forecasts[m]) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    if (hi - lo < 1e-9) hi = lo + 1.0;
    const double width = 900, height = 420, left = 60, right = 200, top = 30, bottom = 40;
    const double pw = width - left - right, ph = height - top - bottom;
    auto x_of = [&](std::size_t i) { return left + (origins.size() > 1 ? pw * double(i) / double(origins.size() - 1) : pw / 2); };
    auto y_of = [&](double v) { return top + ph * (1.0 - (v - lo) / (hi - lo)); };

    std::string svg = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
        "font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        width, height);
    svg += fmt::format("<text x=\"{:.0f}\" y=\"18\">{}-{} forecasts (first target day)</text>\n", left, k, k);
    svg += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"none\" stroke=\"#999\"/>\n",
                       left, top, pw, ph);
    svg += fmt::format("<text x=\"4\" y=\"{:.1f}\">{:.2f}</text>\n<text x=\"4\" y=\"{:.1f}\">{:.2f}</text>\n", top + 4, hi,
                       top + ph, lo);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{}</text>\n",
                       left, height - 12, origins.front(), left + pw, height - 12, origins.back());
    auto polyline = [&](const std::map<std::string, double>& series, const char* colour, const char* dash) {
        std::string pts;
        for (std::size_t i = 0; i < origins.size(); ++i) {
            const auto it = series.find(origins[i]);
            if (it != series.end()) pts += fmt::format("{:.2f},{:.2f} ", x_of(i), y_of(it->second));
        }
        if (!pts.empty()) pts.pop_back();
        return fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{} points=\"{}\"/>\n", colour, dash, pts);
    };
    svg += polyline(observed, "#000000", "");
    double ly = top + 10;
    svg += fmt::format("<line x1=\"{0:.0f}\" y1=\"{1:.0f}\" x2=\"{2:.0f}\" y2=\"{1:.0f}\" stroke=\"#000000\"/><text x=\"{3:.0f}\" y=\"{4:.0f}\">observed</text>\n",
                       width - right + 10, ly, width - right + 30, width - right + 35, ly + 4);
    for (std::size_t i = 0; i < result.drawn.size(); ++i) {
        const char* colour = palette[i % std::size(palette)];
        svg += polyline(forecasts[result.drawn[i]], colour, " stroke-dasharray=\"4 2\"");
        ly += 18;
        svg += fmt::format("<line x1=\"{0:.0f}\" y1=\"{1:.0f}\" x2=\"{2:.0f}\" y2=\"{1:.0f}\" stroke=\"{3}\"/><text x=\"{4:.0f}\" y=\"{5:.0f}\">{6}</text>\n",
                           width - right + 10, ly, width - right + 30, colour, width - right + 35, ly + 4, result.drawn[i]);
    }
    for (const auto& m : result.omitted) {
        ly += 18;
        svg += fmt::format("<text x=\"{:.0f}\" y=\"{:.0f}\" fill=\"#777\">{} (no forecasts)</text>\n", width - right + 10, ly + 4, m);
    }
    svg += "</svg>\n";
    write_text(out, svg);
    result.lines = 1 + result.drawn.size();
    return result;
}

}  // namespace ttc
