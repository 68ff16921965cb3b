#include "ttc/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ostream>
#include <regex>
#include <thread>

#include "ttc/stemmer.hpp"
#include "ttc/templates.hpp"
#include "ttc/util.hpp"

namespace ttc {

double rmse(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size()) {
        throw std::invalid_argument("rmse: length mismatch (" + std::to_string(pred.size()) + " vs " +
                                    std::to_string(truth.size()) + ")");
    }
    if (pred.empty()) throw std::invalid_argument("rmse: empty series");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!std::isfinite(pred[i]) || !std::isfinite(truth[i])) throw std::invalid_argument("rmse: non-finite value");
        const double d = pred[i] - truth[i];
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(pred.size()));
}

double cosine_similarity(std::string_view reference, std::string_view candidate, const TextEmbedder& embedder,
                         bool normalize) {
    Eigen::VectorXd a = embedder.embed_sentence(reference);
    Eigen::VectorXd b = embedder.embed_sentence(candidate);
    if (normalize) {
        a.normalize();
        b.normalize();
        return std::clamp(a.dot(b), -1.0, 1.0);
    }
    return a.dot(b);
}

namespace {

PRF make_prf(double overlap, double cand_total, double ref_total) {
    PRF r;
    r.precision = cand_total > 0 ? overlap / cand_total : 0.0;
    r.recall = ref_total > 0 ? overlap / ref_total : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(std::span<const std::string> toks, int n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    const auto un = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + un <= toks.size(); ++i) ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + un)];
    return counts;
}

}  // namespace

PRF rouge_n_tokens(std::span<const std::string> reference, std::span<const std::string> candidate, int n) {
    if (n < 1) throw std::invalid_argument("rouge_n: n must be positive");
    const auto ref = ngram_counts(reference, n);
    const auto cand = ngram_counts(candidate, n);
    std::size_t overlap = 0, ref_total = 0, cand_total = 0;
    for (const auto& [g, c] : ref) ref_total += c;
    for (const auto& [g, c] : cand) {
        cand_total += c;
        if (const auto it = ref.find(g); it != ref.end()) overlap += std::min(c, it->second);
    }
    return make_prf(static_cast<double>(overlap), static_cast<double>(cand_total), static_cast<double>(ref_total));
}

PRF rouge_n(std::string_view reference, std::string_view candidate, int n) {
    return rouge_n_tokens(word_tokens(reference), word_tokens(candidate), n);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

PRF rouge_l(std::string_view reference, std::string_view candidate) {
    const auto ref = word_tokens(reference);
    const auto cand = word_tokens(candidate);
    const auto lcs = static_cast<double>(lcs_length(ref, cand));
    return make_prf(lcs, static_cast<double>(cand.size()), static_cast<double>(ref.size()));
}

MeteorDetail meteor_detail(std::string_view reference, std::string_view candidate, const SynonymFn& synonyms) {
    const auto ref = word_tokens(reference);
    const auto cand = word_tokens(candidate);
    std::vector<int> cand_to_ref(cand.size(), -1);
    std::vector<bool> ref_used(ref.size(), false);

    auto stage = [&](auto&& same) {
        for (std::size_t i = 0; i < cand.size(); ++i) {
            if (cand_to_ref[i] >= 0) continue;
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!ref_used[j] && same(cand[i], ref[j])) {
                    cand_to_ref[i] = static_cast<int>(j);
                    ref_used[j] = true;
                    break;
                }
            }
        }
    };
    stage([](const std::string& a, const std::string& b) { return a == b; });
    stage([](const std::string& a, const std::string& b) { return porter_stem(a) == porter_stem(b); });
    if (synonyms) stage(synonyms);

    MeteorDetail d;
    int prev_ref = -2;
    bool prev_matched = false;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        const int j = cand_to_ref[i];
        if (j < 0) {
            prev_matched = false;
            continue;
        }
        ++d.matches;
        if (!(prev_matched && j == prev_ref + 1)) ++d.chunks;
        prev_ref = j;
        prev_matched = true;
    }
    if (d.matches == 0) return d;
    const double m = static_cast<double>(d.matches);
    d.precision = m / static_cast<double>(cand.size());
    d.recall = m / static_cast<double>(ref.size());
    d.fmean = 10.0 * d.precision * d.recall / (d.recall + 9.0 * d.precision);
    d.penalty = 0.5 * std::pow(static_cast<double>(d.chunks) / m, 3.0);
    d.score = d.fmean * (1.0 - d.penalty);
    return d;
}

double meteor(std::string_view reference, std::string_view candidate, const SynonymFn& synonyms) {
    return meteor_detail(reference, candidate, synonyms).score;
}

std::string semantic_judge_prompt(std::string_view ground_truth, std::string_view output) {
    return builtin_template("judge_semantic")
        .render({{"ground_truth", std::string(ground_truth)}, {"output", std::string(output)}});
}

std::string f1_judge_prompt(std::string_view ground_truth, std::string_view output) {
    return builtin_template("judge_f1").render({{"ground_truth", std::string(ground_truth)}, {"output", std::string(output)}});
}

int parse_semantic_score(std::string_view response) {
    std::size_t i = 0;
    while (i < response.size()) {
        if (!std::isdigit(static_cast<unsigned char>(response[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < response.size() && std::isdigit(static_cast<unsigned char>(response[j]))) ++j;
        const bool preceded_by_decimal_point = i >= 2 && response[i - 1] == '.' &&
                                               std::isdigit(static_cast<unsigned char>(response[i - 2]));
        const bool decimal = j + 1 < response.size() && response[j] == '.' &&
                             std::isdigit(static_cast<unsigned char>(response[j + 1]));
        if (!decimal && !preceded_by_decimal_point && j - i <= 2) {
            const int v = std::stoi(std::string(response.substr(i, j - i)));
            if (v >= 1 && v <= 10) return v;
        }
        i = j;
    }
    throw JudgeParseError("no integer score in [1, 10] found in judge response");
}

FactCounts parse_fact_counts(std::string_view response) {
    static const std::regex kLine(R"((tp|fp|fn)[\s*_]+total[\s*_]+count[\s*_]*[:=]?[\s*_]*(\d+))",
                                  std::regex::icase | std::regex::ECMAScript);
    std::optional<std::uint64_t> tp, fp, fn;
    const std::string text(response);
    for (auto it = std::sregex_iterator(text.begin(), text.end(), kLine); it != std::sregex_iterator(); ++it) {
        const std::string label = to_lower((*it)[1].str());
        const auto value = std::stoull((*it)[2].str());
        if (label == "tp") tp = value;
        if (label == "fp") fp = value;
        if (label == "fn") fn = value;
    }
    std::string missing;
    if (!tp) missing += " TP";
    if (!fp) missing += " FP";
    if (!fn) missing += " FN";
    if (!missing.empty()) throw JudgeParseError("judge response lacks total count for:" + missing);
    return FactCounts{*tp, *fp, *fn, text};
}

FactScore score_fact_counts(FactCounts counts) {
    FactScore s;
    const auto tp = static_cast<double>(counts.tp);
    const auto fp = static_cast<double>(counts.fp);
    const auto fn = static_cast<double>(counts.fn);
    s.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    s.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    s.counts = std::move(counts);
    return s;
}

SemanticJudgement gpt_semantic_score(std::string_view reference, std::string_view candidate, LMClient& judge) {
    SemanticJudgement j;
    try {
        j.raw_response = judge.complete(semantic_judge_prompt(reference, candidate), {});
        j.score = parse_semantic_score(j.raw_response);
    } catch (const std::exception& e) {
        j.error = e.what();
    }
    return j;
}

FactJudgement gpt_f1(std::string_view reference, std::string_view candidate, LMClient& judge) {
    FactJudgement j;
    try {
        j.raw_response = judge.complete(f1_judge_prompt(reference, candidate), {});
        j.result = score_fact_counts(parse_fact_counts(j.raw_response));
    } catch (const std::exception& e) {
        j.error = e.what();
    }
    return j;
}

namespace {

template <class Result, class Fn>
std::vector<Result> run_bounded(std::size_t n, LMClient& judge, std::size_t max_parallel, Fn&& fn) {
    std::vector<Result> out(n);
    const std::size_t workers =
        judge.capabilities().concurrent_safe ? std::max<std::size_t>(1, std::min(max_parallel, n)) : 1;
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) out[i] = fn(i);
        });
    }
    for (auto& t : pool) t.join();
    return out;
}

}  // namespace

std::vector<SemanticJudgement> judge_semantic_batch(std::span<const TextPair> pairs, LMClient& judge,
                                                    std::size_t max_parallel) {
    return run_bounded<SemanticJudgement>(pairs.size(), judge, max_parallel, [&](std::size_t i) {
        return gpt_semantic_score(pairs[i].reference, pairs[i].candidate, judge);
    });
}

std::vector<FactJudgement> judge_f1_batch(std::span<const TextPair> pairs, LMClient& judge, std::size_t max_parallel) {
    return run_bounded<FactJudgement>(pairs.size(), judge, max_parallel,
                                      [&](std::size_t i) { return gpt_f1(pairs[i].reference, pairs[i].candidate, judge); });
}

void ScoreReport::validate() const {
    for (const auto& [name, v] : metrics) {
        auto check = [&](double lo, double hi) {
            if (!(v >= lo - 1e-12 && v <= hi + 1e-12)) {
                throw std::domain_error("metric " + name + "=" + format_roundtrip(v) + " outside [" +
                                        format_roundtrip(lo) + ", " + format_roundtrip(hi) + "]");
            }
        };
        if (name == "rmse") {
            check(0, INFINITY);
        } else if (name == "cosine") {
            check(-1, 1);
        } else if (name == "gpt_score") {
            check(1, 10);
        } else if (name == "meteor" || name.rfind("rouge", 0) == 0 || name.rfind("gpt_", 0) == 0) {
            check(0, 1);
        }
    }
}

void write_score_csv(std::ostream& out, std::span<const ScoreReport> reports) {
    out << "model,k,metric,value,n_parse_failures\n";
    for (const auto& r : reports) {
        for (const auto& [name, v] : r.metrics) {
            const auto it = r.parse_failures.find(name);
            out << r.model_id << ',' << r.k << ',' << name << ',' << format_roundtrip(v) << ','
                << (it == r.parse_failures.end() ? 0 : it->second) << '\n';
        }
    }
}

}  // namespace ttc
