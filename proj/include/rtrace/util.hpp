#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "rtrace/error.hpp"

namespace rtrace {

// Depths and lengths are measured in whitespace-delimited words.
using Words = std::int64_t;

// Median with the midpoint convention for even-sized inputs.
inline double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of empty set");
  const auto mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

inline double mean(std::span<const double> values) {
  if (values.empty()) throw DomainError("mean of empty set");
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

// Locale-independent fixed-precision rendering for report artifacts.
inline std::string format_fixed(double value, int precision) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  // Avoid "-0.000" for tiny negatives.
  const double scale = std::pow(10.0, precision);
  if (std::abs(value) * scale < 0.5) value = 0.0;
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::fixed, precision);
  if (ec != std::errc{}) throw DomainError("cannot format value");
  return std::string(buf, end);
}

// Shortest round-trip representation.
inline std::string format_general(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) throw DomainError("cannot format value");
  return std::string(buf, end);
}

inline std::string format_percent(double fraction) { return format_fixed(100.0 * fraction, 1); }

inline std::string format_optional(const std::optional<double>& value, int precision) {
  return value ? format_fixed(*value, precision) : std::string{};
}

// Comma-separated list parsing for CLI values such as "250,500,1000".
template <typename T>
std::vector<T> parse_list(std::string_view text) {
  std::vector<T> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    auto item = text.substr(0, comma);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (item.empty()) throw DomainError("empty list element");
    if constexpr (std::is_same_v<T, std::string>) {
      out.emplace_back(item);
    } else {
      T value{};
      auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
      if (ec != std::errc{} || ptr != item.data() + item.size()) {
        throw DomainError("invalid list element '" + std::string(item) + "'");
      }
      out.push_back(value);
    }
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

inline std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// Joins fields into one CSV record terminated by '\n'.
inline std::string csv_row(std::initializer_list<std::string> fields) {
  std::string line;
  bool first = true;
  for (const auto& f : fields) {
    if (!first) line += ',';
    line += csv_escape(f);
    first = false;
  }
  line += '\n';
  return line;
}

}  // namespace rtrace
