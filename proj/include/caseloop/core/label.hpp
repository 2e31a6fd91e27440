#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string_view>

namespace caseloop {

// Four-level relevance taxonomy: 0 Irrelevant .. 3 Strongly Relevant.
class RelevanceLabel {
 public:
  static constexpr int kLevels = 4;

  constexpr RelevanceLabel() = default;

  // Throws Error(kInvalidArgument) outside {0,1,2,3}.
  static RelevanceLabel of(int value);

  static constexpr RelevanceLabel irrelevant() { return RelevanceLabel(0); }
  static constexpr RelevanceLabel weak() { return RelevanceLabel(1); }
  static constexpr RelevanceLabel relevant() { return RelevanceLabel(2); }
  static constexpr RelevanceLabel strong() { return RelevanceLabel(3); }

  constexpr int value() const { return value_; }
  std::string_view name() const;

  friend constexpr auto operator<=>(RelevanceLabel, RelevanceLabel) = default;

 private:
  explicit constexpr RelevanceLabel(int v) : value_(static_cast<std::uint8_t>(v)) {}
  std::uint8_t value_ = 0;
};

using LabelScores = std::array<double, RelevanceLabel::kLevels>;

}  // namespace caseloop
