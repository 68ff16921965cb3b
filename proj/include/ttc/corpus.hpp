#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ttc/date.hpp"

namespace ttc {

/// On-disk vocabulary of one dataset family.
struct Schema {
    std::string id;
    std::string text_key;          ///< e.g. "weather_forecast"
    std::string target_key;        ///< e.g. "temp"
    int decimals = 1;              ///< stored numeric precision
    std::string domain;            ///< "weather" / "medical", used in prompts
    std::string text_placeholder;  ///< "Weather description"
    std::string input_label;       ///< label line preceding the input JSON
    std::vector<std::string> variables;  ///< text-extraction focus variables
};

/// Throws std::invalid_argument for ids other than "weather" and "medical".
const Schema& schema_by_id(std::string_view id);

struct CorpusError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TimeTextRecord {
    Date date;
    std::vector<double> values;
    std::string text;
    std::vector<bool> missing_flags;
    bool text_missing = false;

    bool operator==(const TimeTextRecord& other) const;
};

/// Ordered daily series of (values, text) records. Immutable once built.
class AlignedCorpus {
public:
    AlignedCorpus() = default;
    /// Validates every invariant; throws CorpusError on violation.
    AlignedCorpus(std::string schema_id, std::vector<std::string> channel_names, std::string target_channel,
                  std::vector<TimeTextRecord> records);

    const std::string& schema_id() const { return schema_id_; }
    const std::vector<std::string>& channel_names() const { return channel_names_; }
    const std::string& target_channel() const { return target_channel_; }
    std::size_t target_index() const { return target_index_; }
    std::size_t channel_count() const { return channel_names_.size(); }

    const std::vector<TimeTextRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const TimeTextRecord& operator[](std::size_t i) const { return records_[i]; }

    /// Days between first and last record, inclusive.
    std::int64_t span_days() const;
    std::int64_t absent_days() const;
    double missing_day_fraction() const;
    bool has_gaps() const { return absent_days() > 0; }

    std::vector<double> target_series() const;

private:
    std::string schema_id_;
    std::vector<std::string> channel_names_;
    std::string target_channel_;
    std::size_t target_index_ = 0;
    std::vector<TimeTextRecord> records_;
};

/// JSONL: one object per line with `date`, the schema text key and one
/// numeric key per channel. `null` marks a missing value or missing text.
AlignedCorpus parse_corpus(std::istream& in, std::string_view schema_id);
AlignedCorpus load_corpus(const std::filesystem::path& path, std::string_view schema_id);
void write_corpus(std::ostream& out, const AlignedCorpus& corpus);
void save_corpus(const AlignedCorpus& corpus, const std::filesystem::path& path);

struct MissingDataRejection {
    double missing_fraction = 0.0;
    double threshold = 0.0;
};

using FilterResult = std::variant<AlignedCorpus, MissingDataRejection>;

/// Rejects corpora whose absent-day fraction exceeds the threshold
/// (boundary inclusive); otherwise inserts absent days, forward-fills numeric
/// gaps and flags every filled value.
FilterResult filter_missing(const AlignedCorpus& corpus, double max_missing_fraction = 0.05);

struct WindowPair {
    std::vector<TimeTextRecord> input_records;
    std::vector<TimeTextRecord> target_records;
    std::size_t origin_index = 0;

    std::size_t k() const { return input_records.size(); }
};

/// Stride-1 sliding windows with lag == horizon == k. Requires a gapless
/// corpus of at least 2k records.
std::vector<WindowPair> make_windows(const AlignedCorpus& corpus, std::size_t k);

struct SplitSpec {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;

    void validate() const;
};

struct SplitSizes {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

/// Floor each of val/test, remainder to train.
SplitSizes split_sizes(std::size_t n, const SplitSpec& spec);

struct Split {
    std::vector<WindowPair> train;
    std::vector<WindowPair> val;
    std::vector<WindowPair> test;
};

/// Chronological partition train | val | test. Leading test windows whose
/// inputs overlap a train target are moved to val, so no train target ever
/// reaches into a test input.
Split chronological_split(std::vector<WindowPair> windows, const SplitSpec& spec);

enum class LeakMode { none, direction, value };

LeakMode parse_leak_mode(std::string_view s);
std::string_view to_string(LeakMode mode);

struct SynthConfig {
    std::size_t length = 400;
    std::size_t channels = 1;
    double noise = 2.0;               ///< AR innovation standard deviation
    LeakMode leak = LeakMode::none;
    std::string schema = "weather";
    Date start = Date::from_ymd(2014, 1, 1);
    double ar_coefficient = 0.7;
    double seasonal_amplitude = 10.0;
    double seasonal_period = 365.25;
    double level = 0.0;               ///< 0 selects the schema default
    double missing_day_rate = 0.0;    ///< drops interior days at random
};

/// AR(1) + seasonal numeric channels with one templated sentence per day.
/// In `direction` mode day t's text says "up" iff x[t+1] > x[t]; in `value`
/// mode it states x[t+1]. Deterministic in (config, seed).
AlignedCorpus generate_synthetic(const SynthConfig& config, std::uint64_t seed);

}  // namespace ttc
