#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ensemble_forge::utf8 {

// Decodes UTF-8 into code points. Invalid bytes decode to U+FFFD.
std::u32string decode(std::string_view text);

std::string encode(char32_t cp);
std::string encode(std::u32string_view cps);

// Unicode White_Space property.
bool is_space(char32_t cp);

// Splits on runs of Unicode whitespace; no empty pieces.
std::vector<std::string> split_whitespace(std::string_view text);

// Removes every whitespace code point.
std::u32string strip_whitespace(std::u32string_view cps);

}  // namespace ensemble_forge::utf8
