#pragma once

#include <string>
#include <string_view>

namespace ocrsn {

// Decodes UTF-8 into codepoints; throws std::runtime_error on malformed input.
std::u32string utf8_decode(std::string_view s);

std::string utf8_encode(std::u32string_view cps);
std::string utf8_encode(char32_t cp);

}  // namespace ocrsn
