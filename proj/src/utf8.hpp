// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dreamcatcher::utf8 {

/// One decoded code point and the bytes it came from. Invalid sequences decode
/// byte-by-byte to U+FFFD so that every input byte belongs to some unit.
struct Unit {
    char32_t cp;
    std::string_view bytes;
};

inline std::vector<Unit> decode(std::string_view s) {
    std::vector<Unit> out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        char32_t cp = 0xFFFD;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 >> 5) == 0x6) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 >> 4) == 0xE) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 >> 3) == 0x1E) {
            len = 4;
            cp = b0 & 0x07;
        } else {
            out.push_back({0xFFFD, s.substr(i, 1)});
            ++i;
            continue;
        }
        bool ok = i + len <= s.size();
        for (std::size_t j = 1; ok && j < len; ++j) {
            const auto b = static_cast<unsigned char>(s[i + j]);
            if ((b >> 6) != 0x2) ok = false;
            else cp = (cp << 6) | (b & 0x3F);
        }
        if (!ok) {
            out.push_back({0xFFFD, s.substr(i, 1)});
            ++i;
            continue;
        }
        out.push_back({cp, s.substr(i, len)});
        i += len;
    }
    return out;
}

inline bool is_space(char32_t c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f' ||
           c == 0x00A0 || c == 0x3000 || (c >= 0x2000 && c <= 0x200B) || c == 0x202F ||
           c == 0x205F || c == 0xFEFF;
}

inline bool is_punct(char32_t c) {
    if (c < 0x80)
        return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
               (c >= 0x7B && c <= 0x7E);
    return (c >= 0x00A1 && c <= 0x00BF && c != 0x00AA && c != 0x00B5 && c != 0x00BA) ||
           c == 0x00D7 || c == 0x00F7 ||
           (c >= 0x2010 && c <= 0x205E) ||   // general punctuation
           (c >= 0x3001 && c <= 0x303F) ||   // CJK symbols and punctuation
           (c >= 0xFE30 && c <= 0xFE4F) ||   // CJK compatibility forms
           (c >= 0xFF01 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) ||
           (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65);
}

/// ASCII-only case folding; keeps the result locale independent.
inline char32_t fold(char32_t c) { return (c >= 'A' && c <= 'Z') ? c + 32 : c; }

inline void append(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

}  // namespace dreamcatcher::utf8
