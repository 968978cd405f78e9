#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace icwm::schema {

/// The schema document shipped in schemas/config.schema.json, embedded at
/// build time.
const nlohmann::json& shipped();

/// Checks `doc` against `root["definitions"][definition]`. Understands the
/// draft-07 keywords the shipped schema uses: type, enum, required,
/// properties, additionalProperties, items, minItems, maxItems, minLength,
/// minimum, maximum, exclusiveMinimum and local $ref. Returns one message per
/// violation, each prefixed with a JSON pointer.
std::vector<std::string> check(const nlohmann::json& doc, const nlohmann::json& root, const std::string& definition);

/// Throws ConfigError listing every violation.
void require_valid(const nlohmann::json& doc, const std::string& definition,
                   const nlohmann::json& root = shipped());

}  // namespace icwm::schema
