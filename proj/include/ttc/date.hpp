#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace ttc {

/// A calendar day, stored as days since 1970-01-01 (proleptic Gregorian).
class Date {
public:
    constexpr Date() = default;
    constexpr explicit Date(std::int64_t days_since_epoch) : days_(days_since_epoch) {}

    static Date from_ymd(int year, unsigned month, unsigned day);
    /// Parses strict "YYYY-MM-DD"; throws std::invalid_argument otherwise.
    static Date parse(std::string_view iso);

    std::string iso() const;
    std::int64_t days() const { return days_; }

    int year() const;
    unsigned month() const;
    unsigned day() const;

    Date operator+(std::int64_t n) const { return Date(days_ + n); }
    Date operator-(std::int64_t n) const { return Date(days_ - n); }
    std::int64_t operator-(Date other) const { return days_ - other.days_; }

    auto operator<=>(const Date&) const = default;

private:
    std::int64_t days_ = 0;
};

}  // namespace ttc
