#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ttc/embed.hpp"
#include "ttc/lm_client.hpp"

namespace ttc {

// --- numeric ----------------------------------------------------------------

double rmse(std::span<const double> pred, std::span<const double> truth);

// --- embedding similarity ---------------------------------------------------

/// Dot product of L2-normalized sentence embeddings; `normalize = false`
/// gives the raw dot product of whatever the embedder returns.
double cosine_similarity(std::string_view reference, std::string_view candidate, const TextEmbedder& embedder,
                         bool normalize = true);

// --- overlap metrics --------------------------------------------------------

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Clipped n-gram overlap over word_tokens(); empty denominators give 0.
PRF rouge_n(std::string_view reference, std::string_view candidate, int n);
PRF rouge_n_tokens(std::span<const std::string> reference, std::span<const std::string> candidate, int n);
PRF rouge_l(std::string_view reference, std::string_view candidate);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Optional synonym stage for METEOR: true when the two words are synonyms.
using SynonymFn = std::function<bool(const std::string&, const std::string&)>;

struct MeteorDetail {
    std::size_t matches = 0;
    std::size_t chunks = 0;
    double precision = 0.0;
    double recall = 0.0;
    double fmean = 0.0;
    double penalty = 0.0;
    double score = 0.0;
};

/// Alignment stages: exact, Porter stem, then synonyms when provided. Each
/// stage greedily pairs a candidate word with the first unmatched reference
/// word. Fmean = 10PR/(R+9P), penalty = 0.5 (chunks/m)^3.
MeteorDetail meteor_detail(std::string_view reference, std::string_view candidate, const SynonymFn& synonyms = {});
double meteor(std::string_view reference, std::string_view candidate, const SynonymFn& synonyms = {});

// --- LM-judged metrics ------------------------------------------------------

std::string semantic_judge_prompt(std::string_view ground_truth, std::string_view output);
std::string f1_judge_prompt(std::string_view ground_truth, std::string_view output);

class JudgeParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// First standalone integer in [1, 10]; throws JudgeParseError if none.
int parse_semantic_score(std::string_view response);

struct FactCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::string rationale_text;
};

/// Reads the "TP/FP/FN total count: <n>" lines (case and spacing
/// insensitive; the last occurrence of each label wins). Throws
/// JudgeParseError when any label lacks a count.
FactCounts parse_fact_counts(std::string_view response);

struct FactScore {
    FactCounts counts;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

FactScore score_fact_counts(FactCounts counts);

/// Outcome of one judge call. `ok()` is false on a parse failure, which is
/// excluded from averages and counted.
struct SemanticJudgement {
    std::optional<int> score;
    std::string raw_response;
    std::string error;
    bool ok() const { return score.has_value(); }
};

struct FactJudgement {
    std::optional<FactScore> result;
    std::string raw_response;
    std::string error;
    bool ok() const { return result.has_value(); }
};

SemanticJudgement gpt_semantic_score(std::string_view reference, std::string_view candidate, LMClient& judge);
FactJudgement gpt_f1(std::string_view reference, std::string_view candidate, LMClient& judge);

struct TextPair {
    std::string reference;
    std::string candidate;
};

/// Judges every pair with at most `max_parallel` concurrent calls (only when
/// the client is concurrent-safe). Results keep the input order.
std::vector<SemanticJudgement> judge_semantic_batch(std::span<const TextPair> pairs, LMClient& judge,
                                                    std::size_t max_parallel = 4);
std::vector<FactJudgement> judge_f1_batch(std::span<const TextPair> pairs, LMClient& judge,
                                          std::size_t max_parallel = 4);

// --- reports ----------------------------------------------------------------

struct ScoreReport {
    std::string model_id;
    std::string dataset_id;
    std::size_t k = 0;
    std::map<std::string, double> metrics;
    std::map<std::string, std::size_t> parse_failures;

    /// Throws std::domain_error when a known metric is out of its range.
    void validate() const;
};

/// CSV with header "model,k,metric,value,n_parse_failures".
void write_score_csv(std::ostream& out, std::span<const ScoreReport> reports);

}  // namespace ttc
