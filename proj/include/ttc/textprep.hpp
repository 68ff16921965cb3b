#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttc/corpus.hpp"
#include "ttc/date.hpp"
#include "ttc/lm_client.hpp"

namespace ttc {

struct RawDocument {
    Date date;
    std::string body;
};

struct Chunk {
    std::size_t index = 0;
    std::string text;
};

/// Splits the body into pieces of `chunk_size` Unicode scalar values; only
/// the last chunk may be shorter.
std::vector<Chunk> chunk_text(const RawDocument& doc, std::size_t chunk_size = 1000);

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    double multiplier = 2.0;
};

/// A pipeline stage result. `flagged_empty` marks an empty summary.
struct Summary {
    std::string text;
    bool flagged_empty = false;
    int retries = 0;
};

class PipelineError : public std::runtime_error {
public:
    PipelineError(const std::string& what, std::optional<std::size_t> chunk_index, std::string day, bool retryable)
        : std::runtime_error(what), chunk_index_(chunk_index), day_(std::move(day)), retryable_(retryable) {}

    std::optional<std::size_t> chunk_index() const { return chunk_index_; }
    const std::string& day() const { return day_; }
    bool retryable() const { return retryable_; }

private:
    std::optional<std::size_t> chunk_index_;
    std::string day_;
    bool retryable_;
};

Summary summarize_chunk(const Chunk& chunk, std::span<const std::string> variables, LMClient& client,
                        const RetryPolicy& retry = {});

/// The raw body is cut from its tail until the prompt fits the client's context.
Summary refine_summary(const std::string& summary, const RawDocument& raw, LMClient& client,
                       const RetryPolicy& retry = {});

/// Empty parts are dropped; a single remaining part is returned verbatim.
Summary combine_summaries(std::span<const std::string> parts, std::span<const std::string> variables,
                          LMClient& client, const RetryPolicy& retry = {}, std::string_view day = {});

/// The refine prompt that would be sent, after context truncation.
std::string build_refine_prompt(const std::string& summary, const RawDocument& raw, std::size_t max_context_chars);

struct PrepareOptions {
    std::size_t chunk_size = 1000;
    bool summarize = true;  ///< false passes text through (already-short daily notes)
    bool refine = true;
    bool parallel = true;
    RetryPolicy retry;
};

/// chunk -> summarize (concurrently when the client allows) -> refine each
/// chunk summary against its raw chunk -> combine.
Summary prepare_document(const RawDocument& doc, std::span<const std::string> variables, LMClient& client,
                         const PrepareOptions& options = {});

/// Builds a corpus from `input_dir/values.csv` (header "date,<channel>...",
/// empty cells are missing) and `input_dir/text/YYYY-MM-DD.txt`. Days without
/// a text file become missing-text records.
AlignedCorpus prepare_corpus(const std::filesystem::path& input_dir, const Schema& schema, LMClient& client,
                             const PrepareOptions& options = {});

}  // namespace ttc
