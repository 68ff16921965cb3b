#include "ttc/baselines.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "ttc/util.hpp"

namespace ttc {

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[std::size_t(c)] = m(r, c);
        rows.push_back(row);
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    Eigen::MatrixXd m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
    const auto& data = j.at("data");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = data.at(std::size_t(r)).at(std::size_t(c)).get<double>();
    }
    return m;
}

std::vector<double> target_values(std::span<const TimeTextRecord> records, std::size_t target_index) {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(target_value(r, target_index));
    return out;
}

void require_fitted(bool fitted, std::string_view id) {
    if (!fitted) throw std::logic_error(fmt::format("{}: predict called before fit", id));
}

void require_length(std::size_t got, std::size_t want, std::string_view id) {
    if (got != want) throw std::invalid_argument(fmt::format("{}: expected {} input days, got {}", id, want, got));
}

/// Minimum-norm least squares for A X = B.
Eigen::MatrixXd least_squares(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(a);
    return cod.solve(b);
}

nlohmann::json record_to_json(const TimeTextRecord& r) {
    return {{"date", r.date.iso()}, {"values", r.values}, {"text", r.text}};
}

TimeTextRecord record_from_json(const nlohmann::json& j) {
    TimeTextRecord r;
    r.date = Date::parse(j.at("date").get<std::string>());
    r.values = j.at("values").get<std::vector<double>>();
    r.text = j.at("text").get<std::string>();
    r.missing_flags.assign(r.values.size(), false);
    return r;
}

}  // namespace

double target_value(const TimeTextRecord& record, std::size_t target_index) {
    if (target_index >= record.values.size()) {
        throw std::out_of_range(fmt::format("target channel {} missing on {}", target_index, record.date.iso()));
    }
    return record.values[target_index];
}

nlohmann::json save_model(const ForecastModel& model) {
    return {{"format", "ttc-model"}, {"version", 1}, {"id", model.id()}, {"state", model.state()}};
}

void load_model(ForecastModel& model, const nlohmann::json& file) {
    if (file.value("format", "") != "ttc-model" || file.value("version", 0) != 1) {
        throw std::runtime_error("not a version-1 ttc model file");
    }
    const auto id = file.at("id").get<std::string>();
    if (id != model.id()) throw std::runtime_error(fmt::format("model file holds '{}', expected '{}'", id, model.id()));
    model.load_state(file.at("state"));
}

// --- Input_Copy ---------------------------------------------------------------

Forecast InputCopy::predict(std::span<const TimeTextRecord> input) const {
    Forecast f;
    f.time_values = target_values(input, target_index_);
    std::vector<std::string> texts;
    for (const auto& r : input) texts.push_back(r.text);
    f.texts = std::move(texts);
    f.provenance = id();
    return f;
}

// --- NLinear ------------------------------------------------------------------

void NLinear::fit(std::span<const WindowPair> train, std::span<const WindowPair>) {
    if (train.empty()) throw std::invalid_argument("nlinear: no training windows");
    const auto k = static_cast<Eigen::Index>(train.front().k());
    Eigen::MatrixXd a(static_cast<Eigen::Index>(train.size()), k + 1);
    Eigen::MatrixXd b(a.rows(), k);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const auto& w = train[std::size_t(i)];
        const auto x = target_values(w.input_records, target_index_);
        const auto y = target_values(w.target_records, target_index_);
        const double last = x.back();
        for (Eigen::Index j = 0; j < k; ++j) {
            a(i, j) = x[std::size_t(j)] - last;
            b(i, j) = y[std::size_t(j)] - last;
        }
        a(i, k) = 1.0;
    }
    const Eigen::MatrixXd theta = least_squares(a, b);
    weights_ = theta.topRows(k);
    bias_ = theta.row(k);
}

std::vector<double> NLinear::predict_values(std::span<const double> x) const {
    require_fitted(fitted(), id());
    require_length(x.size(), std::size_t(weights_.rows()), id());
    const double last = x.back();
    Eigen::RowVectorXd v(weights_.rows());
    for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = x[std::size_t(j)] - last;
    const Eigen::RowVectorXd y = v * weights_ + bias_;
    std::vector<double> out(std::size_t(y.size()));
    for (Eigen::Index j = 0; j < y.size(); ++j) out[std::size_t(j)] = y(j) + last;
    return out;
}

Forecast NLinear::predict(std::span<const TimeTextRecord> input) const {
    Forecast f;
    f.time_values = predict_values(target_values(input, target_index_));
    f.provenance = id();
    return f;
}

void NLinear::set_parameters(Eigen::MatrixXd weights, Eigen::RowVectorXd bias) {
    if (weights.rows() != weights.cols() || bias.size() != weights.cols()) {
        throw std::invalid_argument("nlinear: weights must be k x k with a length-k bias");
    }
    weights_ = std::move(weights);
    bias_ = std::move(bias);
}

nlohmann::json NLinear::state() const {
    return {{"weights", matrix_to_json(weights_)}, {"bias", matrix_to_json(bias_)}};
}

void NLinear::load_state(const nlohmann::json& state) {
    set_parameters(matrix_from_json(state.at("weights")), matrix_from_json(state.at("bias")));
}

// --- NLinear + text embeddings ------------------------------------------------

NLinearText::NLinearText(std::size_t target_index, std::shared_ptr<const TextEmbedder> embedder, double ridge)
    : target_index_(target_index), embedder_(std::move(embedder)), ridge_(ridge) {
    if (ridge < 0.0) throw std::invalid_argument("nlinear_text: ridge must be nonnegative");
}

Eigen::RowVectorXd NLinearText::text_features(std::span<const TimeTextRecord> input) const {
    const auto e = static_cast<Eigen::Index>(embedder_ ? embedder_->dim() : 0);
    Eigen::RowVectorXd f(e * static_cast<Eigen::Index>(input.size()));
    for (std::size_t i = 0; i < input.size() && e > 0; ++i) {
        f.segment(static_cast<Eigen::Index>(i) * e, e) = embedder_->embed_sentence(input[i].text).transpose();
    }
    return f;
}

void NLinearText::fit(std::span<const WindowPair> train, std::span<const WindowPair>) {
    if (train.empty()) throw std::invalid_argument("nlinear_text: no training windows");
    const auto k = static_cast<Eigen::Index>(train.front().k());
    embedding_dim_ = embedder_ ? embedder_->dim() : 0;
    const Eigen::Index te = k * static_cast<Eigen::Index>(embedding_dim_);
    const auto n = static_cast<Eigen::Index>(train.size());
    const Eigen::Index extra = ridge_ > 0.0 ? te : 0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + extra, k + 1 + te);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n + extra, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& w = train[std::size_t(i)];
        const auto x = target_values(w.input_records, target_index_);
        const auto y = target_values(w.target_records, target_index_);
        const double last = x.back();
        for (Eigen::Index j = 0; j < k; ++j) {
            a(i, j) = x[std::size_t(j)] - last;
            b(i, j) = y[std::size_t(j)] - last;
        }
        a(i, k) = 1.0;
        if (te > 0) a.block(i, k + 1, 1, te) = text_features(w.input_records);
    }
    // Penalty rows sqrt(ridge) * [0 0 I] on the embedding block only.
    for (Eigen::Index r = 0; r < extra; ++r) a(n + r, k + 1 + r) = std::sqrt(ridge_);
    const Eigen::MatrixXd theta = least_squares(a, b);
    time_weights_ = theta.topRows(k);
    bias_ = theta.row(k);
    text_weights_ = theta.bottomRows(te);
}

Forecast NLinearText::predict(std::span<const TimeTextRecord> input) const {
    require_fitted(fitted(), id());
    require_length(input.size(), std::size_t(time_weights_.rows()), id());
    const std::size_t current = embedder_ ? embedder_->dim() : 0;
    if (current != embedding_dim_) {
        throw std::invalid_argument(
            fmt::format("nlinear_text: embedder dim {} does not match fitted dim {}", current, embedding_dim_));
    }
    const auto x = target_values(input, target_index_);
    const double last = x.back();
    Eigen::RowVectorXd v(time_weights_.rows());
    for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = x[std::size_t(j)] - last;
    Eigen::RowVectorXd y = v * time_weights_ + bias_;
    if (text_weights_.rows() > 0) y += text_features(input) * text_weights_;
    Forecast f;
    for (Eigen::Index j = 0; j < y.size(); ++j) f.time_values.push_back(y(j) + last);
    f.provenance = id();
    return f;
}

void NLinearText::set_parameters(Eigen::MatrixXd time_weights, Eigen::MatrixXd text_weights, Eigen::RowVectorXd bias) {
    const Eigen::Index k = time_weights.rows();
    if (time_weights.cols() != k || bias.size() != k || text_weights.cols() != k || (k > 0 && text_weights.rows() % k)) {
        throw std::invalid_argument("nlinear_text: inconsistent parameter shapes");
    }
    embedding_dim_ = k > 0 ? std::size_t(text_weights.rows() / k) : 0;
    time_weights_ = std::move(time_weights);
    text_weights_ = std::move(text_weights);
    bias_ = std::move(bias);
}

nlohmann::json NLinearText::state() const {
    return {{"time_weights", matrix_to_json(time_weights_)},
            {"text_weights", matrix_to_json(text_weights_)},
            {"bias", matrix_to_json(bias_)},
            {"ridge", ridge_}};
}

void NLinearText::load_state(const nlohmann::json& state) {
    ridge_ = state.value("ridge", ridge_);
    set_parameters(matrix_from_json(state.at("time_weights")), matrix_from_json(state.at("text_weights")),
                   matrix_from_json(state.at("bias")));
}

// --- PatchTST -----------------------------------------------------------------

PatchLayout patch_layout(std::size_t k) {
    if (k == 0) throw std::invalid_argument("patch layout needs k >= 1");
    PatchLayout p;
    if (k >= 4) {
        p.patch_len = 4;
        p.stride = 2;
    } else {
        p.patch_len = k;
        p.stride = k;
    }
    p.patches = (k - p.patch_len) / p.stride + 1;
    return p;
}

struct PatchTst::Net {
    Net(std::size_t k, const PatchTstOptions& o, Rng& rng)
        : k(k),
          layout(patch_layout(k)),
          embed(Eigen::Index(layout.patch_len), o.dim, rng),
          pos(ag::parameter(nn::normal_init(Eigen::Index(layout.patches), o.dim, 0.02, rng))),
          head(Eigen::Index(layout.patches) * o.dim, Eigen::Index(k), rng) {
        for (int l = 0; l < o.layers; ++l) blocks.emplace_back(o.dim, o.heads, 2, rng);
        embed.collect("embed", params);
        params.add("pos", pos);
        for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect(fmt::format("block{}", l), params);
        head.collect("head", params);
    }

    /// Normalized length-k input row -> 1 x k output in the same units.
    ag::Var forward(const Eigen::RowVectorXd& x) const {
        ag::Matrix patches(Eigen::Index(layout.patches), Eigen::Index(layout.patch_len));
        for (std::size_t p = 0; p < layout.patches; ++p) {
            patches.row(Eigen::Index(p)) = x.segment(Eigen::Index(p * layout.stride), Eigen::Index(layout.patch_len));
        }
        ag::Var h = ag::add(embed.forward(ag::constant(patches)), pos);
        const ag::Mask mask(layout.patches, 1);
        for (const auto& b : blocks) h = b.forward(h, mask, false);
        return head.forward(ag::reshape(h, 1, h.rows() * h.cols()));
    }

    std::size_t k;
    PatchLayout layout;
    nn::Linear embed;
    ag::Var pos;
    std::vector<nn::TransformerBlock> blocks;
    nn::Linear head;
    nn::ParameterList params;
};

PatchTst::PatchTst(std::size_t target_index, std::uint64_t seed, PatchTstOptions options)
    : target_index_(target_index), seed_(seed), options_(options) {}

PatchTst::~PatchTst() = default;

namespace {

struct InstanceNorm {
    double mean = 0.0;
    double scale = 1.0;
};

InstanceNorm instance_norm(const Eigen::RowVectorXd& z) {
    InstanceNorm n;
    n.mean = z.mean();
    n.scale = std::sqrt((z.array() - n.mean).square().mean() + 1e-5);
    return n;
}

}  // namespace

void PatchTst::fit(std::span<const WindowPair> train, std::span<const WindowPair> val) {
    if (train.empty()) throw std::invalid_argument("patchtst: no training windows");
    const std::size_t k = train.front().k();
    Rng rng(mix64(seed_ ^ 0x9a7c4e11ULL));
    net_ = std::make_unique<Net>(k, options_, rng);

    std::vector<double> all;
    for (const auto& w : train) {
        for (const double v : target_values(w.input_records, target_index_)) all.push_back(v);
    }
    mean_ = std::accumulate(all.begin(), all.end(), 0.0) / double(all.size());
    double var = 0.0;
    for (const double v : all) var += (v - mean_) * (v - mean_);
    std_ = std::sqrt(var / double(all.size()));
    if (!(std_ > 1e-8)) std_ = 1.0;

    auto standardized = [&](std::span<const WindowPair> ws, bool targets) {
        std::vector<Eigen::RowVectorXd> out;
        for (const auto& w : ws) {
            const auto v = target_values(targets ? w.target_records : w.input_records, target_index_);
            Eigen::RowVectorXd r(Eigen::Index(v.size()));
            for (std::size_t i = 0; i < v.size(); ++i) r(Eigen::Index(i)) = (v[i] - mean_) / std_;
            out.push_back(std::move(r));
        }
        return out;
    };
    const auto tx = standardized(train, false);
    const auto ty = standardized(train, true);
    const auto vx = standardized(val, false);
    const auto vy = standardized(val, true);

    auto sample_loss = [&](const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) {
        const InstanceNorm n = instance_norm(x);
        const Eigen::RowVectorXd xn = (x.array() - n.mean) / n.scale;
        const ag::Var out = ag::add_constant(ag::scale(net_->forward(xn), n.scale),
                                             ag::Matrix::Constant(1, Eigen::Index(k), n.mean));
        return ag::mse(out, y);
    };
    auto eval = [&](const std::vector<Eigen::RowVectorXd>& xs, const std::vector<Eigen::RowVectorXd>& ys) {
        ag::NoGradGuard guard;
        double total = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) total += sample_loss(xs[i], ys[i]).scalar();
        return total / double(xs.size());
    };

    nn::Adam::Options opt;
    opt.lr = options_.lr;
    opt.clip_norm = 5.0;
    nn::Adam adam(net_->params.vars(), opt);
    std::vector<std::size_t> order(tx.size());
    std::iota(order.begin(), order.end(), 0);
    const bool have_val = !vx.empty();
    double best = std::numeric_limits<double>::infinity();
    nlohmann::json best_params = net_->params.to_json();
    int stale = 0;
    double last_finite = std::numeric_limits<double>::quiet_NaN();
    train_losses_.clear();
    for (int epoch = 0; epoch < options_.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += options_.batch) {
            const std::size_t end = std::min(order.size(), start + options_.batch);
            adam.zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const ag::Var loss = sample_loss(tx[order[b]], ty[order[b]]);
                if (!std::isfinite(loss.scalar())) {
                    throw std::runtime_error(fmt::format(
                        "patchtst: non-finite loss at epoch {}, sample {} (last finite epoch loss {}, lr {})", epoch,
                        order[b], last_finite, options_.lr));
                }
                epoch_total += loss.scalar();
                ag::backward(loss);
            }
            adam.step(1.0 / double(end - start));
        }
        const double train_loss = epoch_total / double(order.size());
        last_finite = train_loss;
        train_losses_.push_back(train_loss);
        const double monitored = have_val ? eval(vx, vy) : train_loss;
        if (monitored < best) {
            best = monitored;
            best_params = net_->params.to_json();
            stale = 0;
        } else if (++stale >= options_.patience) {
            break;
        }
    }
    net_->params.load_json(best_params);
}

std::vector<double> PatchTst::predict_values(std::span<const double> x) const {
    require_fitted(net_ != nullptr, id());
    require_length(x.size(), net_->k, id());
    ag::NoGradGuard guard;
    Eigen::RowVectorXd z(Eigen::Index(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) z(Eigen::Index(i)) = (x[i] - mean_) / std_;
    const InstanceNorm n = instance_norm(z);
    const Eigen::RowVectorXd out = net_->forward((z.array() - n.mean) / n.scale).value().row(0);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (out(Eigen::Index(i)) * n.scale + n.mean) * std_ + mean_;
    return y;
}

Forecast PatchTst::predict(std::span<const TimeTextRecord> input) const {
    Forecast f;
    f.time_values = predict_values(target_values(input, target_index_));
    f.provenance = id();
    return f;
}

nlohmann::json PatchTst::state() const {
    require_fitted(net_ != nullptr, id());
    return {{"k", net_->k}, {"mean", mean_}, {"std", std_}, {"params", net_->params.to_json()}};
}

void PatchTst::load_state(const nlohmann::json& state) {
    Rng rng(0);
    net_ = std::make_unique<Net>(state.at("k").get<std::size_t>(), options_, rng);
    mean_ = state.at("mean").get<double>();
    std_ = state.at("std").get<double>();
    net_->params.load_json(state.at("params"));
}

// --- prompts ------------------------------------------------------------------

PromptVariant parse_prompt_variant(std::string_view s) {
    if (s == "text2text") return PromptVariant::text2text;
    if (s == "texttime2text") return PromptVariant::texttime2text;
    if (s == "texttime2time") return PromptVariant::texttime2time;
    if (s == "texttime2texttime") return PromptVariant::texttime2texttime;
    throw std::invalid_argument(fmt::format("unknown prompt variant '{}'", s));
}

PromptMode parse_prompt_mode(std::string_view s) {
    if (s == "zero-shot") return PromptMode::zero_shot;
    if (s == "in-context" || s == "in-context-1") return PromptMode::in_context;
    if (s == "fine-tuned") return PromptMode::fine_tuned;
    throw std::invalid_argument(fmt::format("unknown prompt mode '{}'", s));
}

std::string_view to_string(PromptVariant v) {
    switch (v) {
        case PromptVariant::text2text: return "text2text";
        case PromptVariant::texttime2text: return "texttime2text";
        case PromptVariant::texttime2time: return "texttime2time";
        case PromptVariant::texttime2texttime: return "texttime2texttime";
    }
    return "?";
}

std::string_view to_string(PromptMode m) {
    switch (m) {
        case PromptMode::zero_shot: return "zero-shot";
        case PromptMode::in_context: return "in-context";
        case PromptMode::fine_tuned: return "fine-tuned";
    }
    return "?";
}

namespace {

using Field = std::pair<std::string, std::string>;

std::string json_block(const std::vector<Field>& fields) {
    std::string out = "{\n";
    for (std::size_t i = 0; i < fields.size(); ++i) {
        out += fmt::format("    \"{}\": {}{}\n", fields[i].first, fields[i].second, i + 1 < fields.size() ? "," : "");
    }
    out += "}";
    return out;
}

std::string json_string(std::string_view s) { return nlohmann::json(std::string(s)).dump(); }

std::string number(double v, int decimals) { return std::isfinite(v) ? format_decimal(v, decimals) : "null"; }

std::string day_key(std::size_t day, std::string_view field) { return fmt::format("day_{}_{}", day, field); }

std::string input_block(const PromptSpec& spec, std::span<const TimeTextRecord> input, std::size_t target_index) {
    const Schema& s = *spec.schema;
    std::vector<Field> fields;
    for (std::size_t i = 0; i < input.size(); ++i) {
        const std::size_t d = i + 1;
        fields.emplace_back(day_key(d, "date"), json_string(input[i].date.iso()));
        fields.emplace_back(day_key(d, s.text_key), json_string(input[i].text));
        if (spec.input_has_time()) {
            fields.emplace_back(day_key(d, s.target_key), number(target_value(input[i], target_index), s.decimals));
        }
    }
    return json_block(fields);
}

std::string output_schema_block(const PromptSpec& spec) {
    const Schema& s = *spec.schema;
    std::vector<Field> fields;
    for (std::size_t d = spec.k + 1; d <= 2 * spec.k; ++d) {
        fields.emplace_back(day_key(d, "date"), json_string("YYYY-MM-DD"));
        if (spec.output_has_text()) fields.emplace_back(day_key(d, s.text_key), json_string(s.text_placeholder));
        if (spec.output_has_time()) fields.emplace_back(day_key(d, s.target_key), json_string("A Float Number"));
    }
    return json_block(fields);
}

std::string days(std::size_t k) { return fmt::format("{} {}", k, k == 1 ? "day" : "days"); }

std::optional<double> coerce_number(const nlohmann::json& v) {
    if (v.is_number()) {
        const double d = v.get<double>();
        return std::isfinite(d) ? std::optional<double>(d) : std::nullopt;
    }
    if (v.is_string()) {
        const std::string s = trim(v.get<std::string>());
        double d = 0.0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), d);
        if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty() && std::isfinite(d)) return d;
    }
    return std::nullopt;
}

}  // namespace

std::string build_prompt(const PromptSpec& spec, std::span<const TimeTextRecord> input, std::size_t target_index,
                         const std::optional<PromptExample>& example) {
    if (spec.schema == nullptr) throw std::invalid_argument("prompt spec has no schema");
    if (input.size() != spec.k) {
        throw std::invalid_argument(fmt::format("prompt expects {} input days, got {}", spec.k, input.size()));
    }
    if (example.has_value() != (spec.mode == PromptMode::in_context)) {
        throw std::invalid_argument("an example is required exactly for in-context prompts");
    }
    const Schema& s = *spec.schema;
    std::string out = fmt::format(
        "Given the {0} information of the first {1}, predict the {0} information of the next {1}. "
        "Output the result strictly in the following JSON format and no additional text:\n\n",
        s.domain, days(spec.k));
    out += output_schema_block(spec);
    out += "\n\n";
    if (example) {
        out += "Example:\n";
        out += s.input_label + "\n";
        out += input_block(spec, example->input, target_index);
        out += "\nResponse:\n";
        out += render_response(spec, example->target, target_index);
        out += "\n\n###\n\n";
    }
    out += s.input_label + "\n";
    out += input_block(spec, input, target_index);
    out += "\n";
    return out;
}

std::string render_response(const PromptSpec& spec, std::span<const TimeTextRecord> target, std::size_t target_index) {
    const Schema& s = *spec.schema;
    std::vector<Field> fields;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const std::size_t d = spec.k + 1 + i;
        fields.emplace_back(day_key(d, "date"), json_string(target[i].date.iso()));
        if (spec.output_has_text()) fields.emplace_back(day_key(d, s.text_key), json_string(target[i].text));
        if (spec.output_has_time()) {
            fields.emplace_back(day_key(d, s.target_key), number(target_value(target[i], target_index), s.decimals));
        }
    }
    return json_block(fields);
}

std::optional<std::string> first_json_object(std::string_view text) {
    for (std::size_t start = text.find('{'); start != std::string_view::npos; start = text.find('{', start + 1)) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (escaped) {
                    escaped = false;
                } else if (c == '\\') {
                    escaped = true;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}' && --depth == 0) {
                const std::string candidate(text.substr(start, i - start + 1));
                const auto parsed = nlohmann::json::parse(candidate, nullptr, false);
                if (!parsed.is_discarded() && parsed.is_object()) return candidate;
                break;
            }
        }
    }
    return std::nullopt;
}

Forecast parse_llm_forecast(std::string_view response, const PromptSpec& spec, std::span<const TimeTextRecord> input,
                            std::size_t target_index) {
    const Schema& s = *spec.schema;
    Forecast f;
    f.emits_time = spec.output_has_time();
    const auto body = first_json_object(response);
    const nlohmann::json obj = body ? nlohmann::json::parse(*body) : nlohmann::json::object();
    bool failed = !body.has_value();
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < spec.k; ++i) {
        const std::size_t d = spec.k + 1 + i;
        const double fallback_value = i < input.size() ? target_value(input[i], target_index) : 0.0;
        const std::string fallback_text = i < input.size() ? input[i].text : std::string();
        if (spec.output_has_time()) {
            const auto key = day_key(d, s.target_key);
            std::optional<double> v;
            if (obj.contains(key)) v = coerce_number(obj.at(key));
            if (!v) failed = true;
            f.time_values.push_back(v.value_or(fallback_value));
        } else {
            f.time_values.push_back(fallback_value);
        }
        if (spec.output_has_text()) {
            const auto key = day_key(d, s.text_key);
            if (obj.contains(key) && obj.at(key).is_string()) {
                texts.push_back(obj.at(key).get<std::string>());
            } else {
                failed = true;
                texts.push_back(fallback_text);
            }
        }
    }
    if (spec.output_has_text()) f.texts = std::move(texts);
    f.parse_failures = failed ? 1 : 0;
    return f;
}

PromptForecaster::PromptForecaster(PromptSpec spec, ModelContext context) : spec_(spec), ctx_(std::move(context)) {
    if (spec_.schema == nullptr) spec_.schema = ctx_.schema;
    if (spec_.schema == nullptr) throw std::invalid_argument("prompt model needs a schema");
}

std::string PromptForecaster::id() const { return fmt::format("{}:{}", to_string(spec_.variant), to_string(spec_.mode)); }

std::size_t PromptForecaster::example_index(const Date& query_start) const {
    if (examples_.empty()) throw std::logic_error("no in-context examples available");
    const std::uint64_t h = mix64(ctx_.seed ^ mix64(static_cast<std::uint64_t>(query_start.days())));
    return static_cast<std::size_t>(h % examples_.size());
}

void PromptForecaster::fit(std::span<const WindowPair> train, std::span<const WindowPair>) {
    if (!train.empty()) {
        if (train.front().k() != spec_.k) throw std::invalid_argument("prompt model k does not match the windows");
        const auto sample = render_response(spec_, train.front().target_records, ctx_.target_index);
        max_new_tokens_ = std::min<std::size_t>(ctx_.options.value("max_new_tokens", sample.size() + sample.size() / 4 + 16), 2048);
    }
    if (spec_.mode == PromptMode::in_context) {
        if (train.empty()) throw std::invalid_argument("in-context prompting needs training windows");
        examples_.assign(train.begin(), train.end());
    }
    if (spec_.mode == PromptMode::fine_tuned) {
        if (!ctx_.lm) throw std::invalid_argument("fine-tuning needs a trainable language model backend");
        std::vector<PromptCompletion> pairs;
        for (const auto& w : train) {
            pairs.push_back({build_prompt(spec_, w.input_records, ctx_.target_index),
                             render_response(spec_, w.target_records, ctx_.target_index)});
        }
        FinetuneConfig cfg;
        cfg.epochs = ctx_.options.value("finetune_epochs", 2);
        cfg.max_pairs = ctx_.options.value("finetune_pairs", std::size_t{16});
        cfg.lr = ctx_.options.value("finetune_lr", 5e-3);
        cfg.adapter.rank = ctx_.options.value("adapter_rank", Eigen::Index{8});
        cfg.seed = ctx_.seed;
        cfg.adapter.seed = ctx_.seed;
        tuned_ = std::make_shared<TinyLm>(*ctx_.lm);
        report_ = finetune_lm(*tuned_, pairs, cfg);
    }
    fitted_ = true;
}

std::string PromptForecaster::complete(const std::string& prompt) const {
    DecodeParams params;
    params.max_tokens = max_new_tokens_;
    params.seed = ctx_.seed;
    if (spec_.mode == PromptMode::fine_tuned) return tuned_->complete(prompt, params);
    if (ctx_.lm_client) return ctx_.lm_client->complete(prompt, params);
    if (ctx_.lm) return ctx_.lm->complete(prompt, params);
    throw std::logic_error(fmt::format("{}: no language model backend configured", id()));
}

Forecast PromptForecaster::predict(std::span<const TimeTextRecord> input) const {
    require_fitted(fitted_, id());
    std::optional<PromptExample> example;
    if (spec_.mode == PromptMode::in_context) {
        const auto& w = examples_[example_index(input.front().date)];
        example = PromptExample{w.input_records, w.target_records};
    }
    const std::string prompt = build_prompt(spec_, input, ctx_.target_index, example);
    Forecast f = parse_llm_forecast(complete(prompt), spec_, input, ctx_.target_index);
    f.provenance = id();
    f.prompt_tokens = prompt.size();
    return f;
}

nlohmann::json PromptForecaster::state() const {
    nlohmann::json j = {{"k", spec_.k}, {"max_new_tokens", max_new_tokens_}};
    if (spec_.mode == PromptMode::in_context) {
        nlohmann::json ex = nlohmann::json::array();
        for (const auto& w : examples_) {
            nlohmann::json in = nlohmann::json::array();
            nlohmann::json out = nlohmann::json::array();
            for (const auto& r : w.input_records) in.push_back(record_to_json(r));
            for (const auto& r : w.target_records) out.push_back(record_to_json(r));
            ex.push_back({{"input", in}, {"target", out}});
        }
        j["examples"] = ex;
    }
    if (tuned_) {
        j["adapter_rank"] = tuned_->adapter_parameters().size() ? tuned_->adapter_parameters().items()[0].var.cols() : 0;
        j["adapters"] = tuned_->adapter_parameters().to_json();
    }
    return j;
}

void PromptForecaster::load_state(const nlohmann::json& state) {
    if (state.at("k").get<std::size_t>() != spec_.k) throw std::runtime_error("prompt model file has a different k");
    max_new_tokens_ = state.at("max_new_tokens").get<std::size_t>();
    examples_.clear();
    if (state.contains("examples")) {
        for (const auto& e : state.at("examples")) {
            WindowPair w;
            for (const auto& r : e.at("input")) w.input_records.push_back(record_from_json(r));
            for (const auto& r : e.at("target")) w.target_records.push_back(record_from_json(r));
            examples_.push_back(std::move(w));
        }
    }
    if (state.contains("adapters")) {
        if (!ctx_.lm) throw std::runtime_error("fine-tuned prompt model needs its base language model");
        tuned_ = std::make_shared<TinyLm>(*ctx_.lm);
        AdapterSpec spec;
        spec.rank = state.at("adapter_rank").get<Eigen::Index>();
        tuned_->attach_adapters(spec);
        tuned_->adapter_parameters().load_json(state.at("adapters"));
    }
    fitted_ = true;
}

}  // namespace ttc
