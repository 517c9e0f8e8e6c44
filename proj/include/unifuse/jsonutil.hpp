#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <type_traits>

#include <json.hpp>

#include "unifuse/error.hpp"

namespace unifuse::jsonutil {

/// Rejects non-object values and keys outside `allowed`, naming the section.
inline void check_object(const nlohmann::json& j, std::string_view section,
                         std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) throw ConfigError(std::string(section) + ": expected a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (std::string_view a : allowed) known = known || item.key() == a;
        if (!known) throw ConfigError(std::string(section) + "." + item.key() + ": unknown key");
    }
}

/// Overwrites `out` when `key` is present; type errors name the field.
template <typename T>
void read(const nlohmann::json& j, std::string_view section, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    const std::string field = std::string(section) + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError(field + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError(field + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
            if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) {
                throw ConfigError(field + ": must be non-negative");
            }
        }
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(field + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError(field + ": expected a string");
    }
    try {
        out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(field + ": " + e.what());
    }
}

}  // namespace unifuse::jsonutil
