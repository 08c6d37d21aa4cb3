// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "dreamcatcher/error.hpp"

namespace dreamcatcher::jsonl {

/// Calls fn(object, line_number) for every non-blank line. Lines that are not
/// JSON objects raise ParseError carrying the 1-based line number.
template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string(), lineno, std::string("malformed JSON: ") + e.what());
        }
        if (!obj.is_object()) throw ParseError(path.string(), lineno, "expected a JSON object");
        fn(obj, lineno);
    }
}

template <typename T>
T required(const nlohmann::json& obj, const char* key, const std::filesystem::path& path,
           std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(path.string(), line, std::string("missing \"") + key + "\"");
    try {
        return it->template get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError(path.string(), line, std::string("wrong type for \"") + key + "\"");
    }
}

template <typename T>
std::optional<T> optional(const nlohmann::json& obj, const char* key,
                          const std::filesystem::path& path, std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    try {
        return it->template get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError(path.string(), line, std::string("wrong type for \"") + key + "\"");
    }
}

class Writer {
public:
    explicit Writer(const std::filesystem::path& path)
        : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot write " + path.string());
    }
    void write(const nlohmann::json& obj) { out_ << obj.dump() << '\n'; }
    ~Writer() = default;

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

}  // namespace dreamcatcher::jsonl
