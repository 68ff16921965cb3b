#include "ttc/hybrid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ttc/util.hpp"

namespace ttc {

using ag::Matrix;
using ag::Var;

namespace {

std::string_view to_string(LmTraining m) {
    switch (m) {
        case LmTraining::full: return "full";
        case LmTraining::adapters: return "adapters";
        case LmTraining::frozen: return "frozen";
    }
    return "?";
}

LmTraining parse_lm_training(std::string_view s) {
    if (s == "full") return LmTraining::full;
    if (s == "adapters") return LmTraining::adapters;
    if (s == "frozen") return LmTraining::frozen;
    throw std::invalid_argument(fmt::format("unknown lm_training '{}'", s));
}

TimeReadout parse_time_readout(std::string_view s) {
    if (s == "query") return TimeReadout::query;
    if (s == "stage1") return TimeReadout::stage1;
    throw std::invalid_argument(fmt::format("unknown time_readout '{}'", s));
}

/// Longest byte prefix of `text` that fits in `n` bytes without splitting a
/// UTF-8 sequence.
std::string_view byte_prefix(std::string_view text, std::size_t n) {
    if (text.size() <= n) return text;
    std::size_t cut = 0;
    for (const auto b : utf8_boundaries(text)) {
        if (b <= n) cut = b;
    }
    return text.substr(0, cut);
}

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
}

}  // namespace

// --- config -------------------------------------------------------------------

void HybridConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(fmt::format("hybrid config: {} must be positive", name));
    };
    positive(input_steps, "input_steps");
    positive(channels, "channels");
    positive(tokens_per_step, "tokens_per_step");
    positive(embed_dim, "embed_dim");
    positive(hidden_dim, "hidden_dim");
    positive(outputs, "outputs");
    positive(mlp_heads, "mlp_heads");
    if (target_channel >= channels) {
        throw std::invalid_argument(fmt::format("hybrid config: target_channel {} is not below channels {}",
                                                target_channel, channels));
    }
    if (!(lambda_time >= 0.0) || !(lambda_text >= 0.0) || !std::isfinite(lambda_time) || !std::isfinite(lambda_text)) {
        throw std::invalid_argument("hybrid config: lambdas must be finite and nonnegative");
    }
    if (embed_mode != "sentence" && embed_mode != "token") {
        throw std::invalid_argument(fmt::format("hybrid config: unknown embed_mode '{}'", embed_mode));
    }
}

nlohmann::json HybridConfig::to_json() const {
    return {{"input_steps", input_steps},
            {"channels", channels},
            {"tokens_per_step", tokens_per_step},
            {"embed_dim", embed_dim},
            {"hidden_dim", hidden_dim},
            {"outputs", outputs},
            {"mlp_heads", mlp_heads},
            {"lambda_time", lambda_time},
            {"lambda_text", lambda_text},
            {"embed_mode", embed_mode},
            {"lm_training", to_string(lm_training)},
            {"time_readout", time_readout == TimeReadout::query ? "query" : "stage1"},
            {"pretrain_stage1", pretrain_stage1},
            {"last_value_residual", last_value_residual},
            {"target_channel", target_channel},
            {"stage1_epochs", stage1_epochs},
            {"stage1_patience", stage1_patience},
            {"stage1_lr", stage1_lr},
            {"stage1_batch", stage1_batch},
            {"stage2_epochs", stage2_epochs},
            {"stage2_patience", stage2_patience},
            {"stage2_lr", stage2_lr},
            {"stage2_batch", stage2_batch},
            {"adapter_rank", adapter_rank},
            {"seed", seed}};
}

HybridConfig HybridConfig::from_json(const nlohmann::json& j) {
    HybridConfig c;
    c.input_steps = j.value("input_steps", c.input_steps);
    c.channels = j.value("channels", c.channels);
    c.tokens_per_step = j.value("tokens_per_step", c.tokens_per_step);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.outputs = j.value("outputs", c.outputs);
    c.mlp_heads = j.value("mlp_heads", c.mlp_heads);
    c.lambda_time = j.value("lambda_time", c.lambda_time);
    c.lambda_text = j.value("lambda_text", c.lambda_text);
    c.embed_mode = j.value("embed_mode", c.embed_mode);
    c.lm_training = parse_lm_training(j.value("lm_training", std::string(to_string(c.lm_training))));
    c.time_readout = parse_time_readout(j.value("time_readout", std::string("query")));
    c.pretrain_stage1 = j.value("pretrain_stage1", c.pretrain_stage1);
    c.last_value_residual = j.value("last_value_residual", c.last_value_residual);
    c.target_channel = j.value("target_channel", c.target_channel);
    c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
    c.stage1_patience = j.value("stage1_patience", c.stage1_patience);
    c.stage1_lr = j.value("stage1_lr", c.stage1_lr);
    c.stage1_batch = j.value("stage1_batch", c.stage1_batch);
    c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
    c.stage2_patience = j.value("stage2_patience", c.stage2_patience);
    c.stage2_lr = j.value("stage2_lr", c.stage2_lr);
    c.stage2_batch = j.value("stage2_batch", c.stage2_batch);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.seed = j.value("seed", c.seed);
    return c;
}

ChannelStats ChannelStats::fit(std::span<const WindowPair> train, std::size_t target_index) {
    if (train.empty()) throw std::invalid_argument("channel statistics need training windows");
    const std::size_t c = train.front().input_records.front().values.size();
    ChannelStats s;
    s.target_index = target_index;
    s.mean.assign(c, 0.0);
    s.std.assign(c, 0.0);
    std::size_t n = 0;
    for (const auto& w : train) {
        for (const auto& r : w.input_records) {
            for (std::size_t j = 0; j < c; ++j) s.mean[j] += r.values[j];
            ++n;
        }
    }
    for (auto& m : s.mean) m /= double(n);
    for (const auto& w : train) {
        for (const auto& r : w.input_records) {
            for (std::size_t j = 0; j < c; ++j) s.std[j] += (r.values[j] - s.mean[j]) * (r.values[j] - s.mean[j]);
        }
    }
    for (auto& v : s.std) {
        v = std::sqrt(v / double(n));
        if (!(v > 1e-8)) v = 1.0;
    }
    return s;
}

// --- Stage 1 ------------------------------------------------------------------

Stage1Fuser::Stage1Fuser(const HybridConfig& config, Rng& rng)
    : input_steps_(config.input_steps),
      channels_(config.channels),
      embed_dim_(config.embed_dim),
      hidden_dim_(config.hidden_dim),
      outputs_(config.outputs),
      target_channel_(config.target_channel),
      residual_(config.last_value_residual),
      text_proj_(Eigen::Index(config.embed_dim), Eigen::Index(config.hidden_dim), rng) {
    const auto h = Eigen::Index(config.hidden_dim);
    for (std::size_t i = 0; i < config.mlp_heads; ++i) {
        heads_.emplace_back(nn::Linear(Eigen::Index(config.channels) + h, h, rng), nn::Linear(h, h, rng));
    }
    time_head_ = nn::Linear(Eigen::Index(config.input_steps) * h, Eigen::Index(config.outputs), rng);
}

Stage1Fuser::Output Stage1Fuser::forward(const Matrix& time_block, const Matrix& text_embeds) const {
    auto check = [](Eigen::Index got, std::size_t want, const char* what) {
        if (got != Eigen::Index(want)) {
            throw std::invalid_argument(fmt::format("stage 1: {} is {}, expected {}", what, got, want));
        }
    };
    check(time_block.rows(), input_steps_, "time block steps (input_steps)");
    check(time_block.cols(), channels_, "time block width (channels)");
    check(text_embeds.rows(), input_steps_, "text block steps (input_steps)");
    check(text_embeds.cols(), embed_dim_, "text embedding width (embed_dim)");

    const Var projected = text_proj_.forward(ag::constant(text_embeds));
    const std::vector<Var> parts{ag::constant(time_block), projected};
    const Var fused = ag::hcat(parts);
    std::vector<Var> outs;
    outs.reserve(heads_.size());
    for (const auto& [fc1, fc2] : heads_) outs.push_back(fc2.forward(ag::softplus(fc1.forward(fused))));
    Output out;
    out.hidden = outs.size() == 1 ? outs.front() : ag::mean_of(outs);
    out.time_pred = time_head_.forward(ag::reshape(out.hidden, 1, out.hidden.rows() * out.hidden.cols()));
    if (residual_) out.time_pred = ag::add(out.time_pred, ag::constant(time_offset(time_block)));
    return out;
}

Matrix Stage1Fuser::time_offset(const Matrix& time_block) const {
    if (!residual_) return Matrix::Zero(1, Eigen::Index(outputs_));
    const double last = time_block(time_block.rows() - 1, Eigen::Index(target_channel_));
    return Matrix::Constant(1, Eigen::Index(outputs_), last);
}

nn::ParameterList Stage1Fuser::parameters() const {
    nn::ParameterList p;
    text_proj_.collect("text_proj", p);
    for (std::size_t i = 0; i < heads_.size(); ++i) {
        heads_[i].first.collect(fmt::format("head{}.fc1", i), p);
        heads_[i].second.collect(fmt::format("head{}.fc2", i), p);
    }
    time_head_.collect("time_head", p);
    return p;
}

PreparedWindow prepare_window(std::span<const TimeTextRecord> input, std::span<const TimeTextRecord> target,
                              const HybridConfig& config, const ChannelStats& stats, const TextEmbedder& embedder,
                              const ByteTokenizer& tokenizer) {
    if (input.size() != config.input_steps) {
        throw std::invalid_argument(
            fmt::format("hybrid: window has {} input days, expected {}", input.size(), config.input_steps));
    }
    if (embedder.dim() != config.embed_dim) {
        throw std::invalid_argument(
            fmt::format("hybrid: embedder dim {} does not match embed_dim {}", embedder.dim(), config.embed_dim));
    }
    const auto n = config.tokens_per_step;
    auto tokens = [&](const std::string& text) {
        return tokenizer.encode(byte_prefix(text, n));
    };
    PreparedWindow w;
    w.time_block.resize(Eigen::Index(input.size()), Eigen::Index(config.channels));
    w.text_embeds.resize(Eigen::Index(input.size()), Eigen::Index(config.embed_dim));
    for (std::size_t i = 0; i < input.size(); ++i) {
        if (input[i].values.size() != config.channels) {
            throw std::invalid_argument(fmt::format("hybrid: {} has {} channels, expected {}", input[i].date.iso(),
                                                    input[i].values.size(), config.channels));
        }
        for (std::size_t c = 0; c < config.channels; ++c) {
            w.time_block(Eigen::Index(i), Eigen::Index(c)) = (input[i].values[c] - stats.mean[c]) / stats.std[c];
        }
        const Eigen::VectorXd e = config.embed_mode == "token" ? embedder.mean_token_embedding(input[i].text, n)
                                                               : embedder.embed_sentence(input[i].text);
        w.text_embeds.row(Eigen::Index(i)) = e.transpose();
        w.input_tokens.push_back(tokens(input[i].text));
    }
    w.target = Matrix::Zero(1, Eigen::Index(config.outputs));
    for (std::size_t j = 0; j < target.size() && j < config.outputs; ++j) {
        const double v = target_value(target[j], stats.target_index);
        w.target_raw.push_back(v);
        w.target(0, Eigen::Index(j)) = stats.standardize_target(v);
        w.future_tokens.push_back(tokens(target[j].text));
    }
    return w;
}

Stage1Result stage1_pretrain(Stage1Fuser& fuser, std::span<const PreparedWindow> train,
                             std::span<const PreparedWindow> val, const HybridConfig& config) {
    if (train.empty()) throw std::invalid_argument("stage 1: no training windows");
    nn::ParameterList params = fuser.parameters();
    nn::Adam::Options opt;
    opt.lr = config.stage1_lr;
    opt.clip_norm = 5.0;
    nn::Adam adam(params.vars(), opt);
    Rng rng(mix64(config.seed ^ 0x5a9e1001ULL));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const auto monitor = val.empty() ? train : val;

    auto val_loss = [&] {
        ag::NoGradGuard guard;
        double total = 0.0;
        for (const auto& w : monitor) total += ag::mse(fuser.forward(w.time_block, w.text_embeds).time_pred, w.target).scalar();
        return total / double(monitor.size());
    };

    Stage1Result result;
    result.best_val = val_loss();
    std::vector<Matrix> best = params.snapshot();
    int stale = 0;
    for (int epoch = 1; epoch <= config.stage1_epochs; ++epoch) {
        shuffle(order, rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.stage1_batch) {
            const std::size_t end = std::min(order.size(), start + config.stage1_batch);
            adam.zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const auto& w = train[order[b]];
                const Var loss = ag::mse(fuser.forward(w.time_block, w.text_embeds).time_pred, w.target);
                if (!std::isfinite(loss.scalar())) {
                    params.restore(best);
                    throw TrainingError(fmt::format(
                        "stage 1: non-finite loss at epoch {}; restored parameters from epoch {} (val mse {})", epoch,
                        result.best_epoch, result.best_val));
                }
                total += loss.scalar();
                ag::backward(loss);
            }
            adam.step(1.0 / double(end - start));
        }
        result.train_loss.push_back(total / double(order.size()));
        const double v = val_loss();
        result.val_loss.push_back(v);
        if (v < result.best_val) {
            result.best_val = v;
            result.best_epoch = epoch;
            best = params.snapshot();
            stale = 0;
        } else if (++stale >= config.stage1_patience) {
            break;
        }
    }
    params.restore(best);
    return result;
}

// --- Stage 2 ------------------------------------------------------------------

Stage2Model::Stage2Model(const HybridConfig& config, const TinyLm& lm, Stage1Fuser fuser, ChannelStats stats)
    : config_(config), stats_(std::move(stats)), fuser_(std::move(fuser)), lm_(lm.clone()) {
    config_.validate();
    const auto need = Eigen::Index((config.input_steps + config.outputs) * (1 + config.tokens_per_step));
    if (need > lm_.config().max_context) {
        throw std::length_error(fmt::format("hybrid sequence needs a context of {} positions; the language model has {}",
                                            need, lm_.config().max_context));
    }
    Rng rng(mix64(config.seed ^ 0x2b5e7f31ULL));
    const Eigen::Index e = lm_.dim();
    adapter_ = nn::Linear(Eigen::Index(config.hidden_dim), e, rng);
    queries_ = ag::parameter(nn::normal_init(Eigen::Index(config.outputs), e, 1.0 / std::sqrt(double(e)), rng));
    time_head_ = nn::Linear(e, 1, rng);
    if (config.lm_training == LmTraining::adapters && !lm_.has_adapters()) {
        AdapterSpec spec;
        spec.rank = config.adapter_rank;
        spec.seed = config.seed;
        lm_.attach_adapters(spec);
    }
}

namespace {

nn::ParameterList head_parameters(const nn::Linear& adapter, const Var& queries, const nn::Linear& time_head) {
    nn::ParameterList p;
    adapter.collect("adapter", p);
    p.add("queries", queries);
    time_head.collect("time_head", p);
    return p;
}

}  // namespace

nn::ParameterList Stage2Model::trainable_parameters() const {
    nn::ParameterList p = fuser_.parameters();
    p.append(head_parameters(adapter_, queries_, time_head_));
    switch (config_.lm_training) {
        case LmTraining::full:
            p.append(lm_.base_parameters());
            p.append(lm_.adapter_parameters());
            break;
        case LmTraining::adapters: p.append(lm_.adapter_parameters()); break;
        case LmTraining::frozen: break;
    }
    return p;
}

nn::ParameterList Stage2Model::all_parameters() const {
    nn::ParameterList p = fuser_.parameters();
    p.append(head_parameters(adapter_, queries_, time_head_));
    p.append(lm_.base_parameters());
    p.append(lm_.adapter_parameters());
    return p;
}

nlohmann::json Stage2Model::to_json() const {
    return {{"format", "ttc-hybrid"},
            {"version", 1},
            {"config", config_.to_json()},
            {"stats", {{"mean", stats_.mean}, {"std", stats_.std}, {"target_index", stats_.target_index}}},
            {"fuser", fuser_.parameters().to_json()},
            {"heads", head_parameters(adapter_, queries_, time_head_).to_json()},
            {"lm", lm_.to_json()}};
}

Stage2Model Stage2Model::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ttc-hybrid" || j.value("version", 0) != 1) {
        throw std::runtime_error("not a version-1 hybrid checkpoint");
    }
    const HybridConfig config = HybridConfig::from_json(j.at("config"));
    ChannelStats stats;
    stats.mean = j.at("stats").at("mean").get<std::vector<double>>();
    stats.std = j.at("stats").at("std").get<std::vector<double>>();
    stats.target_index = j.at("stats").at("target_index").get<std::size_t>();
    Rng rng(0);
    Stage1Fuser fuser(config, rng);
    fuser.parameters().load_json(j.at("fuser"));
    Stage2Model model(config, TinyLm::from_json(j.at("lm")), std::move(fuser), std::move(stats));
    head_parameters(model.adapter_, model.queries_, model.time_head_).load_json(j.at("heads"));
    return model;
}

void Stage2Model::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
    out << to_json().dump() << '\n';
}

Stage2Model Stage2Model::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
    return from_json(nlohmann::json::parse(in));
}

namespace {

/// Slot ids for one block: the text, end-of-text if there is room, then
/// padding. `mask` marks the text and end-of-text slots.
void fill_slots(const std::vector<int>& text, std::size_t n, std::vector<int>& ids, ag::Mask& mask) {
    ids.assign(n, ByteTokenizer::eos);
    mask.assign(n, 0);
    for (std::size_t i = 0; i < text.size() && i < n; ++i) {
        ids[i] = text[i];
        mask[i] = 1;
    }
    if (text.size() < n) mask[text.size()] = 1;
}

}  // namespace

Stage2Sequence build_stage2_sequence(const PreparedWindow& window, const Stage2Model& model) {
    const HybridConfig& c = model.config();
    const std::size_t n = c.tokens_per_step;
    const std::size_t total = (c.input_steps + c.outputs) * (1 + n);
    if (Eigen::Index(total) > model.lm().config().max_context) {
        throw std::length_error(fmt::format("hybrid sequence needs a context of {} positions; the language model has {}",
                                            total, model.lm().config().max_context));
    }
    const auto s1 = model.fuser().forward(window.time_block, window.text_embeds);
    const Var adapted = model.adapter().forward(s1.hidden);

    Stage2Sequence seq;
    seq.stage1_time = s1.time_pred;
    seq.time_offset = model.fuser().time_offset(window.time_block);
    seq.labels.reserve(total);
    seq.mask.reserve(total);
    std::vector<Var> pieces;
    std::vector<int> ids;
    ag::Mask slot_mask;
    for (std::size_t i = 0; i < c.input_steps; ++i) {
        pieces.push_back(ag::slice_rows(adapted, Eigen::Index(i), 1));
        fill_slots(window.input_tokens.at(i), n, ids, slot_mask);
        pieces.push_back(model.lm().embed_tokens(ids));
        seq.mask.push_back(1);
        seq.mask.insert(seq.mask.end(), slot_mask.begin(), slot_mask.end());
        seq.labels.insert(seq.labels.end(), n + 1, -1);
    }
    static const std::vector<int> no_text;
    for (std::size_t j = 0; j < c.outputs; ++j) {
        const auto q = seq.labels.size();
        seq.readout_positions.push_back(Eigen::Index(q));
        pieces.push_back(ag::slice_rows(model.queries(), Eigen::Index(j), 1));
        fill_slots(j < window.future_tokens.size() ? window.future_tokens[j] : no_text, n, ids, slot_mask);
        pieces.push_back(model.lm().embed_tokens(ids));
        seq.mask.push_back(1);
        seq.mask.insert(seq.mask.end(), slot_mask.begin(), slot_mask.end());
        seq.labels.insert(seq.labels.end(), n + 1, -1);
        for (std::size_t s = 0; s < n; ++s) {
            if (slot_mask[s]) seq.labels[q + s] = ids[s];
        }
    }
    seq.embeddings = ag::vcat(pieces);
    return seq;
}

Stage2Output stage2_forward(const Stage2Sequence& sequence, const Stage2Model& model) {
    const Var hidden = model.lm().forward(sequence.embeddings, sequence.mask);
    if (!hidden.value().allFinite()) throw TrainingError("stage 2: non-finite language model activations");
    Stage2Output out;
    std::vector<int> rows;
    for (std::size_t p = 0; p < sequence.labels.size(); ++p) {
        if (sequence.labels[p] >= 0) {
            rows.push_back(int(p));
            out.labels.push_back(sequence.labels[p]);
        }
    }
    const Eigen::Index v = model.lm().config().vocab;
    out.text_logits = rows.empty() ? ag::constant(Matrix::Zero(0, v)) : model.lm().logits(ag::gather_rows(hidden, rows));
    if (model.config().time_readout == TimeReadout::query) {
        std::vector<int> readout(sequence.readout_positions.begin(), sequence.readout_positions.end());
        const Var t = model.time_head().forward(ag::gather_rows(hidden, readout));
        out.time_pred = ag::add(ag::reshape(t, 1, t.rows()), ag::constant(sequence.time_offset));
    } else {
        out.time_pred = sequence.stage1_time;
    }
    for (Eigen::Index j = 0; j < out.time_pred.cols(); ++j) {
        out.time_values.push_back(model.stats().destandardize_target(out.time_pred.value()(0, j)));
    }
    return out;
}

JointLoss joint_loss(const Var& text_logits, std::span<const int> labels, const Var& time_pred, const Matrix& time_truth,
                     double lambda_time, double lambda_text) {
    const Var mse = ag::mse(time_pred, time_truth);
    const Var ce = ag::cross_entropy(text_logits, labels);
    JointLoss out;
    out.mse = mse.scalar();
    out.ce = ce.scalar();
    out.total = ag::add(ag::scale(mse, lambda_time), ag::scale(ce, lambda_text));
    return out;
}

EpochRecord evaluate_joint(const Stage2Model& model, std::span<const PreparedWindow> windows) {
    ag::NoGradGuard guard;
    EpochRecord r;
    if (windows.empty()) return r;
    const auto& c = model.config();
    for (const auto& w : windows) {
        const auto out = stage2_forward(build_stage2_sequence(w, model), model);
        const auto loss = joint_loss(out.text_logits, out.labels, out.time_pred, w.target, c.lambda_time, c.lambda_text);
        r.val_total += loss.total.scalar();
        r.val_mse += loss.mse;
        r.val_ce += loss.ce;
    }
    const double n = double(windows.size());
    r.val_total /= n;
    r.val_mse /= n;
    r.val_ce /= n;
    return r;
}

TrainState train_end_to_end(Stage2Model& model, std::span<const PreparedWindow> train,
                            std::span<const PreparedWindow> val) {
    if (train.empty()) throw std::invalid_argument("stage 2: no training windows");
    const HybridConfig& c = model.config();
    const auto monitor = val.empty() ? train : val;
    nn::ParameterList params = model.trainable_parameters();

    // Leaves outside the trainable set are treated as constants.
    std::vector<Var> frozen;
    {
        const auto all = model.all_parameters();
        std::vector<const ag::Node*> keep;
        for (const auto& p : params.items()) keep.push_back(p.var.node());
        for (const auto& p : all.items()) {
            if (std::find(keep.begin(), keep.end(), p.var.node()) == keep.end()) frozen.push_back(p.var);
        }
    }
    nn::FreezeGuard freeze(frozen);

    nn::Adam::Options opt;
    opt.lr = c.stage2_lr;
    opt.clip_norm = 1.0;
    nn::Adam adam(params.vars(), opt);
    Rng rng(mix64(c.seed ^ 0x3c6ef372ULL));

    TrainState state;
    EpochRecord initial = evaluate_joint(model, monitor);
    state.history.push_back(initial);
    state.best_val = initial.val_total;
    std::vector<Matrix> best = params.snapshot();
    const double limit = 10.0 * initial.val_total;
    int above = 0;
    int stale = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= c.stage2_epochs; ++epoch) {
        shuffle(order, rng);
        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += c.stage2_batch) {
            const std::size_t end = std::min(order.size(), start + c.stage2_batch);
            adam.zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const auto& w = train[order[b]];
                const auto out = stage2_forward(build_stage2_sequence(w, model), model);
                const auto loss = joint_loss(out.text_logits, out.labels, out.time_pred, w.target, c.lambda_time,
                                             c.lambda_text);
                if (!std::isfinite(loss.total.scalar())) {
                    params.restore(best);
                    throw TrainingError(fmt::format(
                        "stage 2: non-finite joint loss at epoch {} (mse {}, ce {}); restored epoch {} (val {})", epoch,
                        loss.mse, loss.ce, state.best_epoch, state.best_val));
                }
                rec.train_total += loss.total.scalar();
                rec.train_mse += loss.mse;
                rec.train_ce += loss.ce;
                ag::backward(loss.total);
            }
            adam.step(1.0 / double(end - start));
        }
        const double n = double(order.size());
        rec.train_total /= n;
        rec.train_mse /= n;
        rec.train_ce /= n;
        const EpochRecord v = evaluate_joint(model, monitor);
        rec.val_total = v.val_total;
        rec.val_mse = v.val_mse;
        rec.val_ce = v.val_ce;
        state.history.push_back(rec);
        spdlog::debug("hybrid epoch {}: train {:.4f} (mse {:.4f}, ce {:.4f}) val {:.4f}", epoch, rec.train_total,
                      rec.train_mse, rec.train_ce, rec.val_total);

        above = rec.val_total > limit ? above + 1 : 0;
        if (above >= 3) {
            params.restore(best);
            throw TrainingError(fmt::format(
                "stage 2 diverged: validation loss {} exceeded ten times the initial {} for 3 epochs (epoch {})",
                rec.val_total, initial.val_total, epoch));
        }
        if (rec.val_total < state.best_val) {
            state.best_val = rec.val_total;
            state.best_epoch = epoch;
            best = params.snapshot();
            stale = 0;
        } else if (++stale >= c.stage2_patience) {
            break;
        }
    }
    params.restore(best);
    return state;
}

Forecast hybrid_predict(std::span<const TimeTextRecord> input, const Stage2Model& model, const TextEmbedder& embedder,
                        const DecodeParams& params) {
    const HybridConfig& c = model.config();
    const TinyLm& lm = model.lm();
    const PreparedWindow w = prepare_window(input, {}, c, model.stats(), embedder, lm.tokenizer());
    ag::NoGradGuard guard;
    const auto s1 = model.fuser().forward(w.time_block, w.text_embeds);
    const Matrix adapted = model.adapter().forward(s1.hidden).value();
    const Matrix offset = model.fuser().time_offset(w.time_block);
    const std::size_t n = c.tokens_per_step;

    auto session = lm.session();
    Eigen::Index pos = 0;
    std::vector<int> ids;
    ag::Mask slot_mask;
    for (std::size_t i = 0; i < c.input_steps; ++i) {
        fill_slots(w.input_tokens[i], n, ids, slot_mask);
        std::vector<int> real;
        std::vector<Eigen::Index> positions{pos};
        for (std::size_t s = 0; s < n; ++s) {
            if (slot_mask[s]) {
                real.push_back(ids[s]);
                positions.push_back(pos + 1 + Eigen::Index(s));
            }
        }
        Matrix rows(Eigen::Index(positions.size()), lm.dim());
        rows.row(0) = adapted.row(Eigen::Index(i));
        if (!real.empty()) rows.bottomRows(Eigen::Index(real.size())) = lm.embed_tokens_value(real);
        const ag::Mask visible(positions.size(), 1);
        session.append(rows, positions, visible);
        pos += Eigen::Index(1 + n);
    }

    Rng rng(mix64(params.seed ^ 0x0dec0de5ULL));
    Forecast f;
    f.provenance = "hybrid";
    std::vector<std::string> texts;
    const ag::Mask one(1, 1);
    for (std::size_t j = 0; j < c.outputs; ++j) {
        const Eigen::Index q[1] = {pos};
        const Matrix hq = session.append(model.queries().value().row(Eigen::Index(j)), q, one);
        if (c.time_readout == TimeReadout::query) {
            const double z = model.time_head().apply(hq)(0, 0) + offset(0, Eigen::Index(j));
            f.time_values.push_back(model.stats().destandardize_target(z));
        } else {
            f.time_values.push_back(model.stats().destandardize_target(s1.time_pred.value()(0, Eigen::Index(j))));
        }
        Eigen::RowVectorXd logits = lm.logits_value(hq).row(0);
        std::vector<int> generated;
        for (std::size_t s = 0; s < n; ++s) {
            const int t = sample_token(logits, params, rng);
            const Eigen::Index p[1] = {pos + 1 + Eigen::Index(s)};
            const Matrix h = session.append(lm.embed_tokens_value(std::span<const int>(&t, 1)), p, one);
            if (t == ByteTokenizer::eos) break;
            generated.push_back(t);
            logits = lm.logits_value(h).row(0);
        }
        texts.push_back(lm.tokenizer().decode(generated));
        pos += Eigen::Index(1 + n);
    }
    for (const double v : f.time_values) {
        if (!std::isfinite(v)) throw TrainingError("hybrid: non-finite time prediction");
    }
    f.texts = std::move(texts);
    return f;
}

// --- ForecastModel wrapper -----------------------------------------------------

HybridForecaster::HybridForecaster(HybridConfig config, ModelContext context)
    : config_(std::move(config)), ctx_(std::move(context)) {}

void HybridForecaster::fit(std::span<const WindowPair> train, std::span<const WindowPair> val) {
    if (!ctx_.lm || !ctx_.embedder) throw std::invalid_argument("hybrid needs a language model and a text embedder");
    if (train.empty()) throw std::invalid_argument("hybrid: no training windows");
    HybridConfig c = config_;
    c.input_steps = c.outputs = train.front().k();
    c.channels = train.front().input_records.front().values.size();
    c.embed_dim = ctx_.embedder->dim();
    c.target_channel = ctx_.target_index;
    c.seed = ctx_.seed;
    c.validate();

    const ChannelStats stats = ChannelStats::fit(train, ctx_.target_index);
    const ByteTokenizer& tok = ctx_.lm->tokenizer();
    auto prepare = [&](std::span<const WindowPair> ws) {
        std::vector<PreparedWindow> out;
        out.reserve(ws.size());
        for (const auto& w : ws) out.push_back(prepare_window(w.input_records, w.target_records, c, stats, *ctx_.embedder, tok));
        return out;
    };
    const auto tr = prepare(train);
    const auto va = prepare(val);

    Rng rng(mix64(c.seed ^ 0x77f1e5a3ULL));
    Stage1Fuser fuser(c, rng);
    if (c.pretrain_stage1) stage1_ = stage1_pretrain(fuser, tr, va, c);
    model_ = std::make_unique<Stage2Model>(c, *ctx_.lm, std::move(fuser), stats);
    state_ = train_end_to_end(*model_, tr, va);
}

Forecast HybridForecaster::predict(std::span<const TimeTextRecord> input) const {
    if (!model_) throw std::logic_error("hybrid: predict called before fit");
    DecodeParams params;
    params.seed = ctx_.seed;
    return hybrid_predict(input, *model_, *ctx_.embedder, params);
}

nlohmann::json HybridForecaster::state() const {
    if (!model_) throw std::logic_error("hybrid: nothing to save before fit");
    return model_->to_json();
}

void HybridForecaster::load_state(const nlohmann::json& state) {
    model_ = std::make_unique<Stage2Model>(Stage2Model::from_json(state));
}

}  // namespace ttc
