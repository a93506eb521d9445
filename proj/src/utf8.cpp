#include "ocrsn/utf8.hpp"

#include <stdexcept>

namespace ocrsn {

namespace {

[[noreturn]] void bad(std::size_t at) {
    throw std::runtime_error("invalid UTF-8 at byte offset " + std::to_string(at));
}

}  // namespace

std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        unsigned char c0 = static_cast<unsigned char>(s[i]);
        char32_t cp = 0;
        std::size_t len = 0;
        if (c0 < 0x80) {
            cp = c0;
            len = 1;
        } else if ((c0 & 0xE0) == 0xC0) {
            cp = c0 & 0x1F;
            len = 2;
        } else if ((c0 & 0xF0) == 0xE0) {
            cp = c0 & 0x0F;
            len = 3;
        } else if ((c0 & 0xF8) == 0xF0) {
            cp = c0 & 0x07;
            len = 4;
        } else {
            bad(i);
        }
        if (i + len > s.size()) bad(i);
        for (std::size_t k = 1; k < len; ++k) {
            unsigned char ck = static_cast<unsigned char>(s[i + k]);
            if ((ck & 0xC0) != 0x80) bad(i + k);
            cp = (cp << 6) | (ck & 0x3F);
        }
        if (len == 2 && cp < 0x80) bad(i);
        if (len == 3 && cp < 0x800) bad(i);
        if (len == 4 && cp < 0x10000) bad(i);
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) bad(i);
        out.push_back(cp);
        i += len;
    }
    return out;
}

std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(char(cp));
    } else if (cp < 0x800) {
        out.push_back(char(0xC0 | (cp >> 6)));
        out.push_back(char(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(char(0xE0 | (cp >> 12)));
        out.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(char(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(char(0xF0 | (cp >> 18)));
        out.push_back(char(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(char(0x80 | (cp & 0x3F)));
    }
    return out;
}

std::string utf8_encode(std::u32string_view cps) {
    std::string out;
    out.reserve(cps.size());
    for (char32_t cp : cps) out += utf8_encode(cp);
    return out;
}

}  // namespace ocrsn
