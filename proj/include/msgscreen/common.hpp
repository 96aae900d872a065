#pragma once

// Shared building blocks: error type, calendar dates, hashing and small
// numeric helpers used across all pipeline stages.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace msgscreen {

/// Data, configuration or contract violation. The CLI maps it to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// =============================================================================
// Dates
// =============================================================================

using Date = std::chrono::sys_days;

inline int day_number(Date d) { return static_cast<int>(d.time_since_epoch().count()); }
inline Date from_day_number(int n) { return Date{std::chrono::days{n}}; }

/// Signed number of days from `a` to `b`.
inline int days_between(Date a, Date b) { return day_number(b) - day_number(a); }

namespace detail {

inline bool parse_uint(std::string_view s, std::size_t pos, std::size_t len, int& out) {
    if (pos + len > s.size()) return false;
    int v = 0;
    for (std::size_t i = pos; i < pos + len; ++i) {
        char c = s[i];
        if (c < '0' || c > '9') return false;
        v = v * 10 + (c - '0');
    }
    out = v;
    return true;
}

} // namespace detail

/// Parses an RFC 3339 full-date ("2024-08-01") or date-time
/// ("2024-08-01T13:05:00Z", "...+02:00", fractional seconds allowed).
/// Date-times are converted to UTC and truncated to the day.
inline std::optional<Date> parse_date(std::string_view s) {
    using namespace std::chrono;
    int y, m, d;
    if (s.size() < 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    if (!detail::parse_uint(s, 0, 4, y) || !detail::parse_uint(s, 5, 2, m) ||
        !detail::parse_uint(s, 8, 2, d))
        return std::nullopt;
    year_month_day ymd{year{y}, month{static_cast<unsigned>(m)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return std::nullopt;
    Date date{ymd};
    if (s.size() == 10) return date;

    if (s[10] != 'T' && s[10] != 't' && s[10] != ' ') return std::nullopt;
    int hh, mm, ss;
    if (!detail::parse_uint(s, 11, 2, hh) || s.size() < 19 || s[13] != ':' ||
        !detail::parse_uint(s, 14, 2, mm) || s[16] != ':' || !detail::parse_uint(s, 17, 2, ss))
        return std::nullopt;
    if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;
    std::size_t pos = 19;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        std::size_t digits = 0;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
            ++pos;
            ++digits;
        }
        if (digits == 0) return std::nullopt;
    }
    if (pos >= s.size()) return std::nullopt;
    long offset_minutes = 0;
    if (s[pos] == 'Z' || s[pos] == 'z') {
        ++pos;
    } else if (s[pos] == '+' || s[pos] == '-') {
        int oh, om;
        if (!detail::parse_uint(s, pos + 1, 2, oh) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
            !detail::parse_uint(s, pos + 4, 2, om))
            return std::nullopt;
        if (oh > 23 || om > 59) return std::nullopt;
        offset_minutes = (oh * 60L + om) * (s[pos] == '-' ? -1 : 1);
        pos += 6;
    } else {
        return std::nullopt;
    }
    if (pos != s.size()) return std::nullopt;

    long seconds = day_number(date) * 86400L + hh * 3600L + mm * 60L + ss - offset_minutes * 60L;
    long days = seconds >= 0 ? seconds / 86400 : -((-seconds + 86399) / 86400);
    return from_day_number(static_cast<int>(days));
}

inline std::string format_date(Date d) {
    std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

/// Parses or throws an Error mentioning `what`.
inline Date require_date(std::string_view s, std::string_view what) {
    auto d = parse_date(s);
    if (!d) throw Error(std::string(what) + ": invalid date '" + std::string(s) + "'");
    return *d;
}

// =============================================================================
// Hashing
// =============================================================================

/// 64-bit FNV-1a. Stable across platforms; used for request keys, seeds
/// derived from names and config provenance hashes.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Mixes a base seed with a stream identifier (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// =============================================================================
// Numerics
// =============================================================================

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) {
    return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

/// Binary cross-entropy of a logit against a 0/1 label.
inline double bce_with_logit(double logit, bool label) {
    return label ? softplus(-logit) : softplus(logit);
}

inline double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Population standard deviation (divides by n).
inline double stddev(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    double m = mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

/// Min-max scaling to [0,1]; a constant vector maps to all zeros.
inline std::vector<double> minmax_normalize(std::span<const double> v) {
    std::vector<double> out(v.size(), 0.0);
    if (v.empty()) return out;
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
    return out;
}

/// Linear-interpolation quantile of unsorted data (the common "type 7").
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw Error("quantile of empty vector");
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

/// Locale-free formatting with 10 significant digits, for CSV output.
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string fmt_optional(const std::optional<double>& v) {
    return v ? fmt_double(*v) : std::string{};
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

// =============================================================================
// CSV
// =============================================================================

/// Quotes a field when it contains a comma, quote or newline.
inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

/// Splits one CSV record (no embedded newlines).
inline std::vector<std::string> csv_split(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

} // namespace msgscreen
