#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "../support/oracles.hpp"
#include "ttc/hybrid.hpp"

using namespace ttc;

namespace {

LmConfig toy_lm_config() {
    LmConfig c;
    c.vocab = 8;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.ffn_mult = 2;
    c.max_context = 64;
    c.seed = 3;
    return c;
}

HybridConfig toy_config(std::size_t steps = 2, std::size_t n = 3) {
    HybridConfig c;
    c.input_steps = steps;
    c.outputs = steps;
    c.channels = 2;
    c.tokens_per_step = n;
    c.embed_dim = 4;
    c.hidden_dim = 3;
    c.mlp_heads = 2;
    c.seed = 11;
    return c;
}

std::vector<TimeTextRecord> records(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    static const char* words[] = {"rain", "sun", "wind", "fog", "warm", "cold"};
    std::vector<TimeTextRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        TimeTextRecord r;
        r.date = Date::from_ymd(2020, 1, 1) + std::int64_t(i);
        r.values = {rng.normal() * 3 + 10, rng.normal()};
        r.missing_flags = {false, false};
        r.text = std::string(words[rng.index(6)]) + (i % 2 ? "" : " ok");
        out.push_back(r);
    }
    return out;
}

ChannelStats unit_stats(std::size_t channels) {
    ChannelStats s;
    s.mean.assign(channels, 0.0);
    s.std.assign(channels, 1.0);
    return s;
}

}  // namespace

TEST_CASE("config validation names the field") {
    HybridConfig c = toy_config();
    c.hidden_dim = 0;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("hidden_dim"), std::invalid_argument);
    c = toy_config();
    c.embed_mode = "pixels";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = toy_config();
    c.target_channel = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = toy_config();
    c.lambda_text = -1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("config json round trip") {
    HybridConfig c = toy_config();
    c.lm_training = LmTraining::adapters;
    c.time_readout = TimeReadout::stage1;
    c.lambda_time = 2.0;
    const HybridConfig back = HybridConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.lm_training == LmTraining::adapters);
    CHECK(back.time_readout == TimeReadout::stage1);
}

TEST_CASE("standardization round trip") {
    ChannelStats s;
    s.mean = {3.5, -2.0};
    s.std = {0.25, 7.0};
    Rng rng(1);
    for (std::size_t t = 0; t < 2; ++t) {
        s.target_index = t;
        for (int i = 0; i < 100; ++i) {
            const double v = rng.normal() * 50;
            CHECK(std::abs(s.standardize_target(s.destandardize_target(v)) - v) < 1e-10);
            CHECK(std::abs(s.destandardize_target(s.standardize_target(v)) - v) < 1e-10);
        }
    }
}

TEST_CASE("channel statistics use training inputs and guard constant channels") {
    std::vector<WindowPair> ws(2);
    for (int i = 0; i < 2; ++i) {
        TimeTextRecord r;
        r.values = {double(i * 2), 5.0};
        ws[i].input_records = {r};
        ws[i].target_records = {r};
    }
    const ChannelStats s = ChannelStats::fit(ws, 0);
    CHECK(s.mean[0] == doctest::Approx(1.0));
    CHECK(s.std[0] == doctest::Approx(1.0));
    CHECK(s.mean[1] == doctest::Approx(5.0));
    CHECK(s.std[1] == 1.0);
    CHECK_THROWS_AS(ChannelStats::fit({}, 0), std::invalid_argument);
}

TEST_CASE("stage 1 shape contract") {
    const HybridConfig c = toy_config(3);
    Rng rng(1);
    Stage1Fuser f(c, rng);
    const auto out = f.forward(ag::Matrix::Random(3, 2), ag::Matrix::Random(3, 4));
    CHECK(out.hidden.rows() == 3);
    CHECK(out.hidden.cols() == 3);
    CHECK(out.time_pred.rows() == 1);
    CHECK(out.time_pred.cols() == 3);
    CHECK_THROWS_WITH_AS(f.forward(ag::Matrix::Random(3, 3), ag::Matrix::Random(3, 4)),
                         doctest::Contains("channels"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(f.forward(ag::Matrix::Random(3, 2), ag::Matrix::Random(3, 5)),
                         doctest::Contains("embed_dim"), std::invalid_argument);
    CHECK_THROWS_AS(f.forward(ag::Matrix::Random(2, 2), ag::Matrix::Random(2, 4)), std::invalid_argument);
}

TEST_CASE("stage 1 hidden rows depend only on their own step") {
    const HybridConfig c = toy_config(3);
    Rng rng(2);
    Stage1Fuser f(c, rng);
    ag::Matrix t = ag::Matrix::Random(3, 2), e = ag::Matrix::Random(3, 4);
    const ag::Matrix base = f.forward(t, e).hidden.value();
    for (Eigen::Index step = 0; step < 3; ++step) {
        ag::Matrix t2 = t, e2 = e;
        t2.row(step).setRandom();
        e2.row(step).setRandom();
        const ag::Matrix h = f.forward(t2, e2).hidden.value();
        for (Eigen::Index i = 0; i < 3; ++i) {
            if (i == step) {
                CHECK((h.row(i) - base.row(i)).norm() > 0);
            } else {
                CHECK(h.row(i) == base.row(i));
            }
        }
    }
}

TEST_CASE("stage 1 gradients match finite differences") {
    for (const bool residual : {false, true}) {
        HybridConfig c = toy_config(3);
        c.last_value_residual = residual;
        Rng rng(4);
        Stage1Fuser f(c, rng);
        const ag::Matrix t = ag::Matrix::Random(3, 2), e = ag::Matrix::Random(3, 4), y = ag::Matrix::Random(1, 3);
        const auto res = oracle::check_gradients(f.parameters(), [&] { return ag::mse(f.forward(t, e).time_pred, y); });
        INFO(res.worst);
        CHECK(res.checked == f.scalar_count());
        CHECK(res.max_rel_error < 1e-4);
    }
}

TEST_CASE("prepared windows truncate tokens and standardize") {
    HybridConfig c = toy_config(2, 3);
    const HashStubEmbedder emb(4);
    const ByteTokenizer tok(8);
    ChannelStats s = unit_stats(2);
    s.mean[0] = 10;
    s.std[0] = 2;
    auto rs = records(4, 9);
    rs[0].text = "ab\xc3\xa9z";  // a multi-byte scalar straddles the cut
    const auto w = prepare_window(std::span(rs).first(2), std::span(rs).subspan(2), c, s, emb, tok);
    CHECK(w.input_tokens[0].size() == 2);
    for (const auto& b : w.input_tokens) CHECK(b.size() <= 3);
    CHECK(w.time_block(1, 0) == doctest::Approx((rs[1].values[0] - 10) / 2));
    CHECK(w.target(0, 1) == doctest::Approx((rs[3].values[0] - 10) / 2));
    CHECK(w.target_raw[1] == rs[3].values[0]);
    CHECK_THROWS_AS(prepare_window(std::span(rs).first(3), {}, c, s, emb, tok), std::invalid_argument);
    const HashStubEmbedder wrong(5);
    CHECK_THROWS_WITH_AS(prepare_window(std::span(rs).first(2), {}, c, s, wrong, tok), doctest::Contains("embed_dim"),
                         std::invalid_argument);
}

TEST_CASE("stage 2 sequence layout") {
    const TinyLm lm(toy_lm_config());
    const HashStubEmbedder emb(4);
    for (std::size_t steps : {1, 2, 3}) {
        for (std::size_t n : {1, 2, 4}) {
            const HybridConfig c = toy_config(steps, n);
            Rng rng(1);
            const Stage2Model m(c, lm, Stage1Fuser(c, rng), unit_stats(2));
            const auto rs = records(2 * steps, steps * 10 + n);
            const auto w = prepare_window(std::span(rs).first(steps), std::span(rs).subspan(steps), c, m.stats(), emb,
                                          lm.tokenizer());
            const auto seq = build_stage2_sequence(w, m);
            const std::size_t expected = (steps + steps) * (1 + n);
            CHECK(seq.length() == expected);
            CHECK(std::size_t(seq.embeddings.rows()) == expected);
            CHECK(seq.mask.size() == expected);
            REQUIRE(seq.readout_positions.size() == steps);
            for (std::size_t j = 0; j < steps; ++j) {
                const std::size_t q = std::size_t(seq.readout_positions[j]);
                CHECK(q == (steps + j) * (1 + n));
                // Text labels sit on the positions that predict each slot.
                const auto& text = w.future_tokens[j];
                for (std::size_t s = 0; s < n; ++s) {
                    if (s < text.size()) {
                        CHECK(seq.labels[q + s] == text[s]);
                    } else if (s == text.size()) {
                        CHECK(seq.labels[q + s] == ByteTokenizer::eos);
                    } else {
                        CHECK(seq.labels[q + s] == -1);
                    }
                }
                CHECK(seq.labels[q + n] == -1);
            }
            for (std::size_t p = 0; p < steps * (1 + n); ++p) CHECK(seq.labels[p] == -1);
        }
    }
}

TEST_CASE("stage 2 rejects sequences longer than the context") {
    LmConfig lc = toy_lm_config();
    lc.max_context = 15;
    const TinyLm lm(lc);
    const HybridConfig c = toy_config(2, 3);  // needs 16
    Rng rng(1);
    CHECK_THROWS_WITH_AS(Stage2Model(c, lm, Stage1Fuser(c, rng), unit_stats(2)), doctest::Contains("16"),
                         std::length_error);
}

TEST_CASE("joint loss closed forms") {
    const ag::Var logits = ag::constant(ag::Matrix::Zero(3, 4));
    const std::vector<int> labels{0, 3, 1};
    const ag::Matrix truth = ag::Matrix::Constant(1, 2, 1.5);
    const ag::Var perfect = ag::constant(truth);
    CHECK(joint_loss(logits, labels, perfect, truth, 1.0, 1.0).total.scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(joint_loss(logits, labels, perfect, truth, 1.0, 0.5).total.scalar() ==
          doctest::Approx(0.5 * std::log(4.0)).epsilon(1e-12));

    const ag::Var off = ag::constant(ag::Matrix::Constant(1, 2, 2.5));
    const double mse = joint_loss(logits, labels, off, truth, 1.0, 0.0).total.scalar();
    CHECK(mse == doctest::Approx(1.0));
    // Linear in each weight with the other fixed.
    for (const double lt : {0.0, 0.5, 2.0, 3.0}) {
        const double l = joint_loss(logits, labels, off, truth, lt, 1.0).total.scalar();
        CHECK(l == doctest::Approx(lt * mse + std::log(4.0)).epsilon(1e-12));
    }
    const std::vector<int> ignored{-1, -1, -1};
    const auto none = joint_loss(logits, ignored, off, truth, 1.0, 1.0);
    CHECK(none.ce == 0.0);
    CHECK(none.total.scalar() == doctest::Approx(1.0));
}

TEST_CASE("joint loss gradients through the adapter and the language model") {
    for (const auto readout : {TimeReadout::query, TimeReadout::stage1}) {
        HybridConfig c = toy_config(2, 2);
        c.time_readout = readout;
        const TinyLm lm(toy_lm_config());
        const HashStubEmbedder emb(4);
        Rng rng(5);
        Stage2Model m(c, lm, Stage1Fuser(c, rng), unit_stats(2));
        // Nonzero queries and heads so every path carries gradient.
        const auto rs = records(4, 21);
        const auto w = prepare_window(std::span(rs).first(2), std::span(rs).subspan(2), c, m.stats(), emb,
                                      m.lm().tokenizer());
        auto loss = [&] {
            const auto out = stage2_forward(build_stage2_sequence(w, m), m);
            return joint_loss(out.text_logits, out.labels, out.time_pred, w.target, 1.0, 0.7).total;
        };
        nn::ParameterList params = m.fuser().parameters();
        m.adapter().collect("adapter", params);
        if (readout == TimeReadout::query) {
            params.add("queries", m.queries());
            m.time_head().collect("time_head", params);
        }
        const auto res = oracle::check_gradients(params, loss);
        INFO(res.worst);
        CHECK(res.max_rel_error < 1e-4);
    }
}

TEST_CASE("bypass language model wiring") {
    HybridConfig c = toy_config(2, 2);
    c.last_value_residual = false;
    const TinyLm lm(LmConfig::bypass(6, 8));
    const HashStubEmbedder emb(4);
    Rng rng(5);
    Stage2Model m(c, lm, Stage1Fuser(c, rng), unit_stats(2));
    m.time_head().weight.mutable_value() = ag::Matrix::Zero(6, 1);
    m.time_head().weight.mutable_value()(0, 0) = 1.0;
    m.time_head().bias.mutable_value().setZero();
    const auto rs = records(4, 3);
    const auto w = prepare_window(std::span(rs).first(2), std::span(rs).subspan(2), c, m.stats(), emb, m.lm().tokenizer());
    const auto seq = build_stage2_sequence(w, m);
    const ag::Matrix hidden = m.lm().forward(seq.embeddings, seq.mask).value();
    const ag::Matrix adapted = m.adapter().forward(m.fuser().forward(w.time_block, w.text_embeds).hidden).value();
    // Each input block starts with the adapted fusion vector.
    for (Eigen::Index i = 0; i < 2; ++i) CHECK((hidden.row(i * 3) - adapted.row(i)).norm() < 1e-12);
    const auto out = stage2_forward(seq, m);
    for (Eigen::Index j = 0; j < 2; ++j) {
        CHECK(out.time_pred.value()(0, j) == doctest::Approx(m.queries().value()(j, 0)).epsilon(1e-12));
    }
}

TEST_CASE("training is deterministic and decoding is greedy") {
    HybridConfig c = toy_config(1, 3);
    c.stage2_epochs = 3;
    c.stage1_epochs = 3;
    const TinyLm lm(toy_lm_config());
    const HashStubEmbedder emb(4);
    const auto rs = records(12, 8);
    std::vector<PreparedWindow> ws;
    for (std::size_t i = 0; i + 2 <= rs.size(); ++i) {
        ws.push_back(prepare_window(std::span(rs).subspan(i, 1), std::span(rs).subspan(i + 1, 1), c, unit_stats(2), emb,
                                    lm.tokenizer()));
    }
    auto run = [&] {
        Rng rng(1);
        Stage1Fuser f(c, rng);
        stage1_pretrain(f, ws, {}, c);
        Stage2Model m(c, lm, std::move(f), unit_stats(2));
        const auto state = train_end_to_end(m, ws, {});
        return std::make_pair(std::move(m), state);
    };
    auto [m1, s1] = run();
    auto [m2, s2] = run();
    REQUIRE(s1.history.size() == s2.history.size());
    for (std::size_t i = 0; i < s1.history.size(); ++i) CHECK(s1.history[i].val_total == s2.history[i].val_total);
    CHECK(s1.history[0].epoch == 0);

    const auto f1 = hybrid_predict(std::span(rs).first(1), m1, emb);
    const auto f2 = hybrid_predict(std::span(rs).first(1), m1, emb);
    CHECK(f1.time_values == f2.time_values);
    CHECK(f1.texts == f2.texts);
    REQUIRE(f1.texts);
    CHECK(f1.texts->size() == 1);
    CHECK(f1.texts->front().size() <= 3);

    const auto path = std::filesystem::temp_directory_path() / "ttc_hybrid_ckpt.json";
    m1.save(path);
    const Stage2Model loaded = Stage2Model::load(path);
    std::filesystem::remove(path);
    const auto f3 = hybrid_predict(std::span(rs).first(1), loaded, emb);
    CHECK(f3.time_values == f1.time_values);
    CHECK(f3.texts == f1.texts);
}

TEST_CASE("frozen language model keeps its parameters") {
    HybridConfig c = toy_config(1, 2);
    c.lm_training = LmTraining::frozen;
    c.stage2_epochs = 2;
    const TinyLm lm(toy_lm_config());
    const HashStubEmbedder emb(4);
    const auto rs = records(6, 2);
    std::vector<PreparedWindow> ws;
    for (std::size_t i = 0; i + 2 <= rs.size(); ++i) {
        ws.push_back(prepare_window(std::span(rs).subspan(i, 1), std::span(rs).subspan(i + 1, 1), c, unit_stats(2), emb,
                                    lm.tokenizer()));
    }
    Rng rng(1);
    Stage2Model m(c, lm, Stage1Fuser(c, rng), unit_stats(2));
    const auto before = m.lm().base_parameters().checksum();
    const auto heads_before = m.trainable_parameters().checksum();
    train_end_to_end(m, ws, {});
    CHECK(m.lm().base_parameters().checksum() == before);
    CHECK(m.trainable_parameters().checksum() != heads_before);
    CHECK(lm.base_parameters().checksum() == before);
}

TEST_CASE("adapter training leaves base weights untouched") {
    HybridConfig c = toy_config(1, 2);
    c.lm_training = LmTraining::adapters;
    c.adapter_rank = 2;
    c.stage2_epochs = 2;
    const TinyLm lm(toy_lm_config());
    Rng rng(1);
    Stage2Model m(c, lm, Stage1Fuser(c, rng), unit_stats(2));
    CHECK(m.lm().has_adapters());
    CHECK_FALSE(lm.has_adapters());
    const HashStubEmbedder emb(4);
    const auto rs = records(6, 2);
    std::vector<PreparedWindow> ws;
    for (std::size_t i = 0; i + 2 <= rs.size(); ++i) {
        ws.push_back(prepare_window(std::span(rs).subspan(i, 1), std::span(rs).subspan(i + 1, 1), c, unit_stats(2), emb,
                                    m.lm().tokenizer()));
    }
    const auto base = m.lm().base_parameters().checksum();
    const auto adapters = m.lm().adapter_parameters().checksum();
    train_end_to_end(m, ws, {});
    CHECK(m.lm().base_parameters().checksum() == base);
    CHECK(m.lm().adapter_parameters().checksum() != adapters);
}

TEST_CASE("runaway training aborts with diagnostics") {
    HybridConfig c = toy_config(1, 2);
    c.stage2_lr = 1e4;
    c.stage2_epochs = 20;
    c.stage2_patience = 20;
    const TinyLm lm(toy_lm_config());
    const HashStubEmbedder emb(4);
    const auto rs = records(8, 4);
    std::vector<PreparedWindow> ws;
    for (std::size_t i = 0; i + 2 <= rs.size(); ++i) {
        ws.push_back(prepare_window(std::span(rs).subspan(i, 1), std::span(rs).subspan(i + 1, 1), c, unit_stats(2), emb,
                                    lm.tokenizer()));
    }
    Rng rng(1);
    Stage2Model m(c, lm, Stage1Fuser(c, rng), unit_stats(2));
    CHECK_THROWS_AS(train_end_to_end(m, ws, {}), TrainingError);
    CHECK_THROWS_AS(train_end_to_end(m, {}, {}), std::invalid_argument);
}

TEST_CASE("forecaster requires fit and its dependencies") {
    ModelContext ctx;
    HybridForecaster h(HybridConfig{}, ctx);
    CHECK_THROWS_AS(h.predict({}), std::logic_error);
    CHECK_THROWS_AS(h.state(), std::logic_error);
    std::vector<WindowPair> ws(1);
    CHECK_THROWS_AS(h.fit(ws, {}), std::invalid_argument);
}
