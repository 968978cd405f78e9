#include "icwm/config_schema.hpp"

#include <icwm/schema_data.hpp>

#include <cmath>

#include "icwm/common.hpp"

namespace icwm::schema {

using nlohmann::json;

namespace {

bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (t == "number") return v.is_number();
  throw ConfigError("schema: unknown type " + t);
}

const json& resolve(const json& root, const json& node) {
  if (!node.contains("$ref")) return node;
  const auto ref = node.at("$ref").get<std::string>();
  if (ref.rfind("#/", 0) != 0) throw ConfigError("schema: only local references are supported: " + ref);
  return resolve(root, root.at(json::json_pointer(ref.substr(1))));
}

void walk(const json& v, const json& root, const json& node_in, const std::string& at, std::vector<std::string>& out) {
  const json& node = resolve(root, node_in);
  auto fail = [&](const std::string& msg) { out.push_back((at.empty() ? "/" : at) + ": " + msg); };

  if (node.contains("type")) {
    const auto& t = node.at("type");
    bool ok = false;
    if (t.is_array()) {
      for (const auto& x : t) ok = ok || has_type(v, x.get<std::string>());
    } else {
      ok = has_type(v, t.get<std::string>());
    }
    if (!ok) return fail("expected type " + t.dump());
  }
  if (node.contains("enum")) {
    bool ok = false;
    for (const auto& e : node.at("enum")) ok = ok || e == v;
    if (!ok) return fail("value " + v.dump() + " not in " + node.at("enum").dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (node.contains("minimum") && x < node.at("minimum").get<double>())
      fail("below minimum " + node.at("minimum").dump());
    if (node.contains("maximum") && x > node.at("maximum").get<double>())
      fail("above maximum " + node.at("maximum").dump());
    if (node.contains("exclusiveMinimum") && x <= node.at("exclusiveMinimum").get<double>())
      fail("must exceed " + node.at("exclusiveMinimum").dump());
  }
  if (v.is_string() && node.contains("minLength") && v.get<std::string>().size() < node.at("minLength").get<std::size_t>())
    fail("string too short");
  if (v.is_array()) {
    if (node.contains("minItems") && v.size() < node.at("minItems").get<std::size_t>()) fail("too few items");
    if (node.contains("maxItems") && v.size() > node.at("maxItems").get<std::size_t>()) fail("too many items");
    if (node.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) walk(v[i], root, node.at("items"), at + "/" + std::to_string(i), out);
  }
  if (v.is_object()) {
    if (node.contains("required"))
      for (const auto& r : node.at("required"))
        if (!v.contains(r.get<std::string>())) fail("missing required member '" + r.get<std::string>() + "'");
    const json empty = json::object();
    const json& props = node.contains("properties") ? node.at("properties") : empty;
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key)) {
        walk(val, root, props.at(key), at + "/" + key, out);
      } else if (node.contains("additionalProperties")) {
        const auto& ap = node.at("additionalProperties");
        if (ap.is_boolean()) {
          if (!ap.get<bool>()) fail("unknown member '" + key + "'");
        } else {
          walk(val, root, ap, at + "/" + key, out);
        }
      }
    }
  }
}

}  // namespace

const json& shipped() {
  static const json doc = json::parse(kShippedSchemaText);
  return doc;
}

std::vector<std::string> check(const json& doc, const json& root, const std::string& definition) {
  const auto& defs = root.at("definitions");
  if (!defs.contains(definition)) throw ConfigError("schema: no definition named " + definition);
  std::vector<std::string> out;
  walk(doc, root, defs.at(definition), "", out);
  return out;
}

void require_valid(const json& doc, const std::string& definition, const json& root) {
  const auto errors = check(doc, root, definition);
  if (errors.empty()) return;
  std::string msg = "config does not match schema '" + definition + "':";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

}  // namespace icwm::schema
