#pragma once

// JSON form of PruneSpec:
//   {"kind": "...", "indices": [...], "sparsity": s, "n": n, "m": m,
//    "scorer": "magnitude|wanda", "bits": b, "granularity": "per_row|per_matrix"}
// plus an optional "targets" array when not every block matrix is targeted.

#include <algorithm>
#include <string>

#include "json.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/pruning.hpp"

namespace prunescope {

namespace detail {

template <typename E, std::size_t N>
E parse_enum(const std::string& text, const E (&options)[N], const char* field) {
  for (E e : options)
    if (to_string(e) == text) return e;
  throw ParseError(std::string("PruneSpec: unknown ") + field + " '" + text + "'");
}

inline constexpr PruneKind kAllKinds[] = {PruneKind::drop_attn,    PruneKind::drop_mlp,
                                          PruneKind::drop_block,   PruneKind::unstructured,
                                          PruneKind::semi_structured, PruneKind::quantize};
inline constexpr Scorer kAllScorers[] = {Scorer::magnitude, Scorer::wanda};
inline constexpr Granularity kAllGranularities[] = {Granularity::per_row,
                                                    Granularity::per_matrix};

}  // namespace detail

inline nlohmann::ordered_json to_json(const PruneSpec& spec) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(to_string(spec.kind));
  j["indices"] = spec.indices;
  j["sparsity"] = spec.sparsity;
  j["n"] = spec.n;
  j["m"] = spec.m;
  j["scorer"] = std::string(to_string(spec.scorer));
  j["bits"] = spec.bits;
  j["granularity"] = std::string(to_string(spec.granularity));
  const PruneSpec defaults;
  if (spec.targets != defaults.targets) {
    auto& t = j["targets"] = nlohmann::ordered_json::array();
    for (Target x : spec.targets) t.push_back(std::string(to_string(x)));
  }
  return j;
}

inline PruneSpec prune_spec_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ParseError("PruneSpec: expected a JSON object");
  if (!j.contains("kind")) throw ParseError("PruneSpec: missing 'kind'");
  PruneSpec spec;
  try {
    spec.kind = detail::parse_enum(j.at("kind").get<std::string>(), detail::kAllKinds, "kind");
    if (j.contains("indices")) spec.indices = j.at("indices").get<std::vector<std::size_t>>();
    if (j.contains("sparsity")) spec.sparsity = j.at("sparsity").get<double>();
    if (j.contains("n")) spec.n = j.at("n").get<std::size_t>();
    if (j.contains("m")) spec.m = j.at("m").get<std::size_t>();
    if (j.contains("scorer"))
      spec.scorer = detail::parse_enum(j.at("scorer").get<std::string>(), detail::kAllScorers,
                                       "scorer");
    if (j.contains("bits")) spec.bits = j.at("bits").get<int>();
    if (j.contains("granularity"))
      spec.granularity = detail::parse_enum(j.at("granularity").get<std::string>(),
                                            detail::kAllGranularities, "granularity");
    if (j.contains("targets")) {
      spec.targets.clear();
      for (const auto& t : j.at("targets"))
        spec.targets.push_back(detail::parse_enum(t.get<std::string>(), kAllTargets, "target"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("PruneSpec: ") + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace prunescope
