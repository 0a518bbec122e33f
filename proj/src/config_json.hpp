#pragma once

// Helpers for reading config sections strictly.

#include <algorithm>
#include <initializer_list>
#include <string>

#include "json.hpp"
#include "tmcir/errors.hpp"

namespace tmcir::detail {

template <typename T>
void read_key(const nlohmann::ordered_json& j, const char* key, T& out, const char* section) {
    auto it = j.find(key);
    if (it == j.end()) {
        return;
    }
    try {
        out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + section + "." + key + ": " + e.what());
    }
}

inline void reject_unknown(const nlohmann::ordered_json& j, std::initializer_list<const char*> known,
                           const char* section) {
    if (!j.is_object()) {
        throw ConfigError(std::string("config: section '") + section + "' must be an object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw ConfigError(std::string("config: unknown key '") + section + "." + key + "'");
        }
    }
}

} // namespace tmcir::detail
