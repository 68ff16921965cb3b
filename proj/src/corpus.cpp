#include "ttc/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ttc/util.hpp"

namespace ttc {

using ordered_json = nlohmann::ordered_json;

const Schema& schema_by_id(std::string_view id) {
    static const Schema kWeather{
        "weather", "weather_forecast", "temp", 1, "weather", "Weather description", "Input",
        {"temperature", "humidity", "precipitation", "wind speed"}};
    static const Schema kMedical{
        "medical", "medical_notes", "Heart_Rate", 3, "medical", "Medical description", "Input:",
        {"heart rate", "respiratory rate", "SaO2", "FiO2"}};
    if (id == kWeather.id) return kWeather;
    if (id == kMedical.id) return kMedical;
    throw std::invalid_argument("unknown schema id '" + std::string(id) + "' (expected weather or medical)");
}

bool TimeTextRecord::operator==(const TimeTextRecord& other) const {
    if (date != other.date || text != other.text || text_missing != other.text_missing ||
        missing_flags != other.missing_flags || values.size() != other.values.size()) {
        return false;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        const bool both_nan = std::isnan(values[i]) && std::isnan(other.values[i]);
        if (!both_nan && values[i] != other.values[i]) return false;
    }
    return true;
}

AlignedCorpus::AlignedCorpus(std::string schema_id, std::vector<std::string> channel_names,
                             std::string target_channel, std::vector<TimeTextRecord> records)
    : schema_id_(std::move(schema_id)),
      channel_names_(std::move(channel_names)),
      target_channel_(std::move(target_channel)),
      records_(std::move(records)) {
    const auto it = std::find(channel_names_.begin(), channel_names_.end(), target_channel_);
    if (it == channel_names_.end()) {
        throw CorpusError("target channel '" + target_channel_ + "' is not among the corpus channels");
    }
    target_index_ = static_cast<std::size_t>(it - channel_names_.begin());
    const std::size_t c = channel_names_.size();
    for (std::size_t i = 0; i < records_.size(); ++i) {
        auto& r = records_[i];
        if (r.values.size() != c) {
            throw CorpusError("record " + r.date.iso() + " has " + std::to_string(r.values.size()) +
                              " values, corpus has " + std::to_string(c) + " channels");
        }
        if (r.missing_flags.empty()) r.missing_flags.assign(c, false);
        if (r.missing_flags.size() != c) throw CorpusError("record " + r.date.iso() + ": missing_flags length mismatch");
        if (r.text.empty() && !r.text_missing) {
            throw CorpusError("record " + r.date.iso() + " has empty text without the missing-text flag");
        }
        if (i > 0 && !(records_[i - 1].date < r.date)) {
            throw CorpusError("record dates not strictly increasing at " + r.date.iso());
        }
    }
}

std::int64_t AlignedCorpus::span_days() const {
    if (records_.empty()) return 0;
    return (records_.back().date - records_.front().date) + 1;
}

std::int64_t AlignedCorpus::absent_days() const {
    return span_days() - static_cast<std::int64_t>(records_.size());
}

double AlignedCorpus::missing_day_fraction() const {
    const auto span = span_days();
    return span == 0 ? 0.0 : static_cast<double>(absent_days()) / static_cast<double>(span);
}

std::vector<double> AlignedCorpus::target_series() const {
    std::vector<double> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.values[target_index_]);
    return out;
}

AlignedCorpus parse_corpus(std::istream& in, std::string_view schema_id) {
    const Schema& schema = schema_by_id(schema_id);
    std::vector<std::string> channels;
    std::vector<TimeTextRecord> records;
    std::set<Date> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto where = [&] { return "line " + std::to_string(line_no) + ": "; };
        ordered_json obj;
        try {
            obj = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusError(where() + "invalid JSON (" + e.what() + ")");
        }
        if (!obj.is_object()) throw CorpusError(where() + "expected a JSON object");
        if (!obj.contains("date") || !obj["date"].is_string()) throw CorpusError(where() + "missing string key 'date'");
        if (!obj.contains(schema.text_key)) throw CorpusError(where() + "missing text key '" + schema.text_key + "'");

        if (channels.empty()) {
            for (const auto& [key, _] : obj.items()) {
                if (key != "date" && key != schema.text_key) channels.push_back(key);
            }
            if (channels.empty()) throw CorpusError(where() + "no numeric channels");
        }

        TimeTextRecord rec;
        try {
            rec.date = Date::parse(obj["date"].get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw CorpusError(where() + e.what());
        }
        if (!seen.insert(rec.date).second) throw CorpusError("duplicate date " + rec.date.iso() + " (" + where() + ")");

        const auto& text = obj[schema.text_key];
        if (text.is_null()) {
            rec.text_missing = true;
        } else if (text.is_string()) {
            rec.text = text.get<std::string>();
            rec.text_missing = rec.text.empty();
        } else {
            throw CorpusError(where() + "text key '" + schema.text_key + "' is not a string");
        }

        if (obj.size() != channels.size() + 2) throw CorpusError(where() + "channel set differs from first record");
        for (const auto& name : channels) {
            if (!obj.contains(name)) throw CorpusError(where() + "missing channel '" + name + "'");
            const auto& v = obj[name];
            if (v.is_null()) {
                rec.values.push_back(std::nan(""));
                rec.missing_flags.push_back(true);
            } else if (v.is_number()) {
                rec.values.push_back(v.get<double>());
                rec.missing_flags.push_back(false);
            } else {
                throw CorpusError(where() + "non-numeric value for channel '" + name + "'");
            }
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw CorpusError("empty corpus: no records");
    std::stable_sort(records.begin(), records.end(),
                     [](const TimeTextRecord& a, const TimeTextRecord& b) { return a.date < b.date; });
    if (std::find(channels.begin(), channels.end(), schema.target_key) == channels.end()) {
        throw CorpusError("target key '" + schema.target_key + "' not present in corpus");
    }
    return AlignedCorpus(schema.id, channels, schema.target_key, std::move(records));
}

AlignedCorpus load_corpus(const std::filesystem::path& path, std::string_view schema_id) {
    schema_by_id(schema_id);
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open corpus file " + path.string());
    return parse_corpus(in, schema_id);
}

void write_corpus(std::ostream& out, const AlignedCorpus& corpus) {
    const Schema& schema = schema_by_id(corpus.schema_id());
    for (const auto& r : corpus.records()) {
        ordered_json obj;
        obj["date"] = r.date.iso();
        obj[schema.text_key] = r.text_missing ? ordered_json(nullptr) : ordered_json(r.text);
        for (std::size_t c = 0; c < corpus.channel_count(); ++c) {
            const bool missing = r.missing_flags[c] || !std::isfinite(r.values[c]);
            obj[corpus.channel_names()[c]] = missing ? ordered_json(nullptr) : ordered_json(r.values[c]);
        }
        out << obj.dump() << '\n';
    }
}

void save_corpus(const AlignedCorpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write corpus file " + path.string());
    write_corpus(out, corpus);
}

FilterResult filter_missing(const AlignedCorpus& corpus, double max_missing_fraction) {
    if (!(max_missing_fraction >= 0.0 && max_missing_fraction <= 1.0)) {
        throw std::invalid_argument("max_missing_fraction must lie in [0, 1]");
    }
    const double fraction = corpus.missing_day_fraction();
    if (fraction > max_missing_fraction) return MissingDataRejection{fraction, max_missing_fraction};
    if (corpus.empty()) return corpus;

    const std::size_t c = corpus.channel_count();
    std::vector<TimeTextRecord> filled;
    filled.reserve(static_cast<std::size_t>(corpus.span_days()));
    for (const auto& r : corpus.records()) {
        while (!filled.empty() && filled.back().date + 1 < r.date) {
            TimeTextRecord gap;
            gap.date = filled.back().date + 1;
            gap.values.assign(c, std::nan(""));
            gap.missing_flags.assign(c, true);
            gap.text_missing = true;
            filled.push_back(std::move(gap));
        }
        filled.push_back(r);
    }

    // Forward fill; leading missing values take the first observed value.
    for (std::size_t ch = 0; ch < c; ++ch) {
        std::optional<double> last;
        for (auto& r : filled) {
            if (r.missing_flags[ch] || !std::isfinite(r.values[ch])) {
                r.missing_flags[ch] = true;
                if (last) r.values[ch] = *last;
            } else {
                last = r.values[ch];
            }
        }
        std::optional<double> first;
        for (const auto& r : filled) {
            if (!r.missing_flags[ch]) {
                first = r.values[ch];
                break;
            }
        }
        for (auto& r : filled) {
            if (!std::isfinite(r.values[ch])) {
                if (!first) throw CorpusError("channel '" + corpus.channel_names()[ch] + "' has no observed values");
                r.values[ch] = *first;
            }
        }
    }
    return AlignedCorpus(corpus.schema_id(), corpus.channel_names(), corpus.target_channel(), std::move(filled));
}

std::vector<WindowPair> make_windows(const AlignedCorpus& corpus, std::size_t k) {
    if (k == 0) throw std::invalid_argument("window size k must be positive");
    if (corpus.size() < 2 * k) {
        throw std::invalid_argument("corpus of " + std::to_string(corpus.size()) + " records is too short for k=" +
                                    std::to_string(k) + " (needs at least " + std::to_string(2 * k) + ")");
    }
    if (corpus.has_gaps()) {
        throw std::invalid_argument("corpus has absent days; run filter_missing before windowing");
    }
    const auto& recs = corpus.records();
    std::vector<WindowPair> out;
    out.reserve(corpus.size() - 2 * k + 1);
    for (std::size_t origin = 0; origin + 2 * k <= corpus.size(); ++origin) {
        WindowPair w;
        w.origin_index = origin;
        w.input_records.assign(recs.begin() + origin, recs.begin() + origin + k);
        w.target_records.assign(recs.begin() + origin + k, recs.begin() + origin + 2 * k);
        out.push_back(std::move(w));
    }
    return out;
}

void SplitSpec::validate() const {
    if (train < 0 || val < 0 || test < 0) throw std::invalid_argument("split fractions must be nonnegative");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
}

SplitSizes split_sizes(std::size_t n, const SplitSpec& spec) {
    spec.validate();
    // A tiny epsilon keeps products like 10 * 0.1 from flooring to 0.
    auto part = [n](double f) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)); };
    SplitSizes s;
    s.val = std::min(part(spec.val), n);
    s.test = std::min(part(spec.test), n - s.val);
    s.train = n - s.val - s.test;
    return s;
}

Split chronological_split(std::vector<WindowPair> windows, const SplitSpec& spec) {
    std::stable_sort(windows.begin(), windows.end(), [](const WindowPair& a, const WindowPair& b) {
        return a.input_records.front().date < b.input_records.front().date;
    });
    const SplitSizes sizes = split_sizes(windows.size(), spec);
    Split out;
    auto it = std::make_move_iterator(windows.begin());
    out.train.assign(it, it + sizes.train);
    out.val.assign(it + sizes.train, it + sizes.train + sizes.val);
    out.test.assign(it + sizes.train + sizes.val, std::make_move_iterator(windows.end()));

    if (!out.train.empty()) {
        const Date last_train_target = out.train.back().target_records.back().date;
        std::size_t moved = 0;
        while (moved < out.test.size() && !(last_train_target < out.test[moved].input_records.front().date)) ++moved;
        std::move(out.test.begin(), out.test.begin() + moved, std::back_inserter(out.val));
        out.test.erase(out.test.begin(), out.test.begin() + moved);
    }
    return out;
}

LeakMode parse_leak_mode(std::string_view s) {
    if (s == "none") return LeakMode::none;
    if (s == "direction") return LeakMode::direction;
    if (s == "value") return LeakMode::value;
    throw std::invalid_argument("unknown leak mode '" + std::string(s) + "' (expected none, direction or value)");
}

std::string_view to_string(LeakMode mode) {
    switch (mode) {
        case LeakMode::none: return "none";
        case LeakMode::direction: return "direction";
        case LeakMode::value: return "value";
    }
    return "none";
}

namespace {

struct ChannelProfile {
    std::string name;
    double level;
    double coupling;  // loading on the target's deviation
    double spread;
};

std::vector<ChannelProfile> channel_profiles(const Schema& schema, double level) {
    if (schema.id == "weather") {
        return {{"temp", level != 0 ? level : 58.0, 1.0, 0.0},
                {"humidity", 65.0, -0.4, 4.0},
                {"windspeed", 9.0, -0.1, 2.0},
                {"dew", 42.0, 0.8, 2.5},
                {"precip", 0.1, 0.0, 0.05},
                {"tempmax", 66.0, 1.0, 2.0},
                {"tempmin", 50.0, 1.0, 2.0}};
    }
    return {{"Heart_Rate", level != 0 ? level : 88.0, 1.0, 0.0},
            {"Respiratory_Rate", 19.0, 0.15, 1.5},
            {"SaO2", 96.0, -0.05, 0.8},
            {"FiO2", 40.0, 0.2, 3.0}};
}

std::string sentence(const Schema& schema, double today, Rng& rng) {
    static const char* kSky[] = {"clear", "cloudy", "hazy", "overcast"};
    static const char* kWind[] = {"calm", "breezy", "windy"};
    static const char* kState[] = {"resting", "stable", "alert", "sedated"};
    static const char* kCare[] = {"no distress", "on monitor", "meds given"};
    const long rounded = std::lround(today);
    if (schema.id == "weather") {
        return "temp " + std::to_string(rounded) + " " + kSky[rng.index(4)] + " " + kWind[rng.index(3)];
    }
    return "hr " + std::to_string(rounded) + " " + kState[rng.index(4)] + " " + kCare[rng.index(3)];
}

double round_to(double v, int decimals) {
    const double scale = std::pow(10.0, decimals);
    return std::round(v * scale) / scale;
}

}  // namespace

AlignedCorpus generate_synthetic(const SynthConfig& config, std::uint64_t seed) {
    if (config.length < 4) throw std::invalid_argument("synthetic corpus length must be at least 4");
    const Schema& schema = schema_by_id(config.schema);
    auto profiles = channel_profiles(schema, config.level);
    if (config.channels < 1 || config.channels > profiles.size()) {
        throw std::invalid_argument("synthetic channel count must be in [1, " + std::to_string(profiles.size()) + "]");
    }
    profiles.resize(config.channels);
    if (!(config.missing_day_rate >= 0.0 && config.missing_day_rate < 1.0)) {
        throw std::invalid_argument("missing_day_rate must lie in [0, 1)");
    }

    Rng rng(seed);
    const std::size_t n = config.length + 1;  // one extra day for the final day's outlook
    std::vector<double> target(n);
    double ar = 0.0;
    const double amplitude = schema.id == "weather" ? config.seasonal_amplitude : config.seasonal_amplitude * 0.3;
    for (std::size_t t = 0; t < n; ++t) {
        ar = config.ar_coefficient * ar + config.noise * rng.normal();
        const double season = amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / config.seasonal_period);
        target[t] = round_to(profiles[0].level + season + ar, schema.decimals);
    }

    std::vector<TimeTextRecord> records;
    records.reserve(config.length);
    for (std::size_t t = 0; t < config.length; ++t) {
        TimeTextRecord r;
        r.date = config.start + static_cast<std::int64_t>(t);
        const double deviation = target[t] - profiles[0].level;
        for (std::size_t c = 0; c < profiles.size(); ++c) {
            const double v = c == 0 ? target[t]
                                    : profiles[c].level + profiles[c].coupling * deviation + profiles[c].spread * rng.normal();
            r.values.push_back(round_to(v, schema.decimals));
        }
        r.missing_flags.assign(profiles.size(), false);
        r.text = sentence(schema, target[t], rng);
        switch (config.leak) {
            case LeakMode::none: break;
            case LeakMode::direction: r.text += target[t + 1] > target[t] ? ", trend up" : ", trend down"; break;
            case LeakMode::value: r.text += ", next " + format_decimal(target[t + 1], schema.decimals); break;
        }
        records.push_back(std::move(r));
    }

    if (config.missing_day_rate > 0.0) {
        std::vector<TimeTextRecord> kept;
        kept.reserve(records.size());
        for (std::size_t t = 0; t < records.size(); ++t) {
            const bool interior = t > 0 && t + 1 < records.size();
            if (interior && rng.uniform() < config.missing_day_rate) continue;
            kept.push_back(std::move(records[t]));
        }
        records = std::move(kept);
    }

    std::vector<std::string> names;
    for (const auto& p : profiles) names.push_back(p.name);
    return AlignedCorpus(schema.id, names, schema.target_key, std::move(records));
}

}  // namespace ttc
