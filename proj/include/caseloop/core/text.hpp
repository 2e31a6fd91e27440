#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace caseloop {

// Lowercase, drop apostrophes, split on anything that is not [a-z0-9].
std::vector<std::string> tokenize(std::string_view text);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Tokens joined with single spaces.
std::string normalize_text(std::string_view text);

std::string zero_pad(long long value, int width);

}  // namespace caseloop
