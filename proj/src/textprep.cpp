#include "ttc/textprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "ttc/templates.hpp"
#include "ttc/util.hpp"

namespace ttc {
namespace {

// Runs `call` under the retry policy. Throws PipelineError once attempts are
// exhausted or on a non-retryable failure.
template <class Call>
std::string with_retries(const RetryPolicy& retry, Call&& call, int& retries, std::optional<std::size_t> chunk_index,
                         std::string_view day, std::string_view stage) {
    auto backoff = retry.initial_backoff;
    for (int attempt = 1;; ++attempt) {
        try {
            return call();
        } catch (const LMError& e) {
            const bool last = attempt >= retry.max_attempts;
            if (!e.retryable() || last) {
                std::string where = std::string(stage);
                if (chunk_index) where += " of chunk " + std::to_string(*chunk_index);
                if (!day.empty()) where += " for day " + std::string(day);
                throw PipelineError(where + " failed after " + std::to_string(attempt) + " attempt(s): " + e.what(),
                                    chunk_index, std::string(day), e.retryable());
            }
            ++retries;
            spdlog::warn("{} attempt {} failed ({}); retrying in {} ms", stage, attempt, e.what(), backoff.count());
            if (backoff.count() > 0) std::this_thread::sleep_for(backoff);
            backoff = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) * retry.multiplier));
        }
    }
}

Summary finish(std::string text, int retries) {
    Summary s;
    s.text = trim(text);
    s.flagged_empty = s.text.empty();
    s.retries = retries;
    return s;
}

std::string variable_list(std::span<const std::string> variables) { return join(variables, ", "); }

}  // namespace

std::vector<Chunk> chunk_text(const RawDocument& doc, std::size_t chunk_size) {
    if (chunk_size == 0) throw std::invalid_argument("chunk_size must be positive");
    const auto bounds = utf8_boundaries(doc.body);
    const std::size_t scalars = bounds.size() - 1;
    std::vector<Chunk> out;
    for (std::size_t start = 0, index = 0; start < scalars; start += chunk_size, ++index) {
        const std::size_t end = std::min(start + chunk_size, scalars);
        out.push_back({index, doc.body.substr(bounds[start], bounds[end] - bounds[start])});
    }
    return out;
}

Summary summarize_chunk(const Chunk& chunk, std::span<const std::string> variables, LMClient& client,
                        const RetryPolicy& retry) {
    if (variables.empty()) throw std::invalid_argument("summarize_chunk requires at least one variable");
    if (chunk.text.empty()) return finish({}, 0);
    const std::string prompt =
        builtin_template("extract").render({{"variables", variable_list(variables)}, {"chunk", chunk.text}});
    int retries = 0;
    auto text = with_retries(
        retry, [&] { return client.complete(prompt, {}); }, retries, chunk.index, {}, "summarize");
    return finish(std::move(text), retries);
}

std::string build_refine_prompt(const std::string& summary, const RawDocument& raw, std::size_t max_context_chars) {
    const PromptTemplate& tpl = builtin_template("refine");
    std::string prompt = tpl.render({{"summary", summary}, {"raw", raw.body}});
    const std::size_t length = utf8_length(prompt);
    if (length <= max_context_chars) return prompt;
    const std::size_t overhead = length - utf8_length(raw.body);
    const std::size_t keep = max_context_chars > overhead ? max_context_chars - overhead : 0;
    return tpl.render({{"summary", summary}, {"raw", utf8_prefix(raw.body, keep)}});
}

Summary refine_summary(const std::string& summary, const RawDocument& raw, LMClient& client, const RetryPolicy& retry) {
    if (summary.empty() && raw.body.empty()) return finish({}, 0);
    const std::string prompt = build_refine_prompt(summary, raw, client.capabilities().max_context_chars);
    int retries = 0;
    auto text = with_retries(
        retry, [&] { return client.complete(prompt, {}); }, retries, std::nullopt, raw.date.iso(), "refine");
    return finish(std::move(text), retries);
}

Summary combine_summaries(std::span<const std::string> parts, std::span<const std::string> variables, LMClient& client,
                          const RetryPolicy& retry, std::string_view day) {
    if (parts.empty()) throw std::invalid_argument("combine_summaries requires at least one part");
    std::vector<std::string> nonempty;
    for (const auto& p : parts) {
        if (!trim(p).empty()) nonempty.push_back(trim(p));
    }
    if (nonempty.empty()) return finish({}, 0);
    if (nonempty.size() == 1) return finish(nonempty.front(), 0);

    std::string rendered;
    for (std::size_t i = 0; i < nonempty.size(); ++i) {
        if (i) rendered += "\n\n";
        rendered += "Part " + std::to_string(i + 1) + ":\n" + nonempty[i];
    }
    const std::string prompt =
        builtin_template("combine").render({{"variables", variable_list(variables)}, {"parts", rendered}});
    int retries = 0;
    auto text = with_retries(
        retry, [&] { return client.complete(prompt, {}); }, retries, std::nullopt, day, "combine");
    return finish(std::move(text), retries);
}

Summary prepare_document(const RawDocument& doc, std::span<const std::string> variables, LMClient& client,
                         const PrepareOptions& options) {
    if (!options.summarize) return finish(doc.body, 0);
    const auto chunks = chunk_text(doc, options.chunk_size);
    if (chunks.empty()) return finish({}, 0);

    auto process = [&](const Chunk& chunk) {
        Summary s = summarize_chunk(chunk, variables, client, options.retry);
        if (options.refine) {
            const int earlier = s.retries;
            s = refine_summary(s.text, RawDocument{doc.date, chunk.text}, client, options.retry);
            s.retries += earlier;
        }
        return s;
    };

    std::vector<Summary> results(chunks.size());
    if (options.parallel && client.capabilities().concurrent_safe && chunks.size() > 1) {
        std::vector<std::future<Summary>> futures;
        futures.reserve(chunks.size());
        for (const auto& c : chunks) futures.push_back(std::async(std::launch::async, process, std::cref(c)));
        for (std::size_t i = 0; i < futures.size(); ++i) results[i] = futures[i].get();
    } else {
        for (std::size_t i = 0; i < chunks.size(); ++i) results[i] = process(chunks[i]);
    }

    std::vector<std::string> parts;
    int retries = 0;
    for (const auto& r : results) {
        parts.push_back(r.text);
        retries += r.retries;
    }
    Summary combined = combine_summaries(parts, variables, client, options.retry, doc.date.iso());
    combined.retries += retries;
    return combined;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

AlignedCorpus prepare_corpus(const std::filesystem::path& input_dir, const Schema& schema, LMClient& client,
                             const PrepareOptions& options) {
    const auto values_path = input_dir / "values.csv";
    std::ifstream in(values_path);
    if (!in) throw CorpusError("cannot open " + values_path.string());
    std::string line;
    if (!std::getline(in, line)) throw CorpusError(values_path.string() + " is empty");
    const auto header = split_csv_line(line);
    if (header.empty() || header.front() != "date") throw CorpusError("values.csv header must start with 'date'");
    const std::vector<std::string> channels(header.begin() + 1, header.end());

    std::vector<TimeTextRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw CorpusError("values.csv line " + std::to_string(line_no) + ": expected " +
                              std::to_string(header.size()) + " cells");
        }
        TimeTextRecord r;
        r.date = Date::parse(cells[0]);
        for (std::size_t c = 1; c < cells.size(); ++c) {
            if (cells[c].empty()) {
                r.values.push_back(std::nan(""));
                r.missing_flags.push_back(true);
                continue;
            }
            std::size_t used = 0;
            double v = 0;
            try {
                v = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[c].size()) {
                throw CorpusError("values.csv line " + std::to_string(line_no) + ": non-numeric value '" + cells[c] + "'");
            }
            r.values.push_back(v);
            r.missing_flags.push_back(false);
        }

        const auto text_path = input_dir / "text" / (r.date.iso() + ".txt");
        RawDocument doc{r.date, {}};
        if (std::ifstream tf(text_path, std::ios::binary); tf) {
            std::ostringstream ss;
            ss << tf.rdbuf();
            doc.body = ss.str();
        }
        const Summary s = prepare_document(doc, schema.variables, client, options);
        r.text = s.text;
        r.text_missing = s.flagged_empty;
        records.push_back(std::move(r));
    }
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.date < b.date; });
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].date == records[i - 1].date) throw CorpusError("duplicate date " + records[i].date.iso());
    }
    return AlignedCorpus(schema.id, channels, schema.target_key, std::move(records));
}

}  // namespace ttc
