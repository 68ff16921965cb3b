#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ttc {

// --- UTF-8 ------------------------------------------------------------------

/// Byte offsets of every Unicode scalar value in `s`, plus s.size() at the end.
/// Malformed sequences count one scalar per offending byte.
std::vector<std::size_t> utf8_boundaries(std::string_view s);
std::size_t utf8_length(std::string_view s);
/// First `n` scalar values of `s`.
std::string utf8_prefix(std::string_view s, std::size_t n);

// --- hashing ----------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t mix64(std::uint64_t x);

/// Small deterministic generator with platform-independent distributions
/// (std::*_distribution output differs between standard libraries).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal();
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// --- numbers & text ---------------------------------------------------------

/// Fixed `decimals` rendering with trailing zeros stripped, keeping at least
/// one fractional digit ("37.10" -> "37.1", "37.00" -> "37.0").
std::string format_decimal(double value, int decimals);
/// Shortest representation that parses back to the same double.
std::string format_roundtrip(double value);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::string replace_all(std::string s, std::string_view from, std::string_view to);
std::string join(std::span<const std::string> parts, std::string_view sep);

}  // namespace ttc
