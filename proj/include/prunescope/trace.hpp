#pragma once

// External trace files: a JSON manifest
//   {"dims": {"embedding": d, "logit": V}, "temperature_default": T, "records": "path"}
// and a JSON-Lines record file with one object per line:
//   {"step": 0, "layer": "final" | 3, "space": "embedding" | "logit",
//    "variant": "baseline" | "pruned", "values": [...]}
// The records path is resolved relative to the manifest's directory.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/vecmath.hpp"

namespace prunescope {

enum class TraceSpace { embedding, logit };
enum class Variant { baseline, pruned };

inline std::string_view to_string(TraceSpace s) { return s == TraceSpace::logit ? "logit" : "embedding"; }
inline std::string_view to_string(Variant v) { return v == Variant::pruned ? "pruned" : "baseline"; }

/// A layer index, or nullopt for the model's final output.
using LayerId = std::optional<std::size_t>;

inline std::string layer_label(const LayerId& layer) {
  return layer ? std::to_string(*layer) : std::string("final");
}

struct TraceRecord {
  std::size_t step = 0;
  LayerId layer;
  TraceSpace space = TraceSpace::embedding;
  Variant variant = Variant::baseline;
  RealVector values{0.0};
};

struct TraceManifest {
  std::size_t embedding_dim = 0;
  std::size_t logit_dim = 0;
  double temperature_default = 1.0;
  std::string records = "records.jsonl";

  std::size_t dim(TraceSpace s) const { return s == TraceSpace::logit ? logit_dim : embedding_dim; }
};

/// Both variants of one (step, layer, space).
struct TraceGroup {
  std::size_t step = 0;
  LayerId layer;
  TraceSpace space = TraceSpace::embedding;
  RealVector baseline{0.0};
  RealVector pruned{0.0};
};

struct TraceBundle {
  TraceManifest manifest;
  std::vector<TraceGroup> groups;  // ordered by (step, layer with final last, space)
  std::vector<std::string> warnings;
};

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "' for reading");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path.string() + "': " + e.what());
  }
}

inline TraceRecord parse_record(const std::string& line, std::size_t line_no,
                                const TraceManifest& manifest) {
  const std::string where = "trace record line " + std::to_string(line_no);
  TraceRecord rec;
  try {
    const auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw ParseError(where + ": expected a JSON object");
    const auto step = j.at("step").get<long long>();
    if (step < 0) throw ParseError(where + ": step must be >= 0");
    rec.step = static_cast<std::size_t>(step);
    const auto& layer = j.at("layer");
    if (layer.is_string()) {
      if (layer.get<std::string>() != "final") throw ParseError(where + ": layer must be an integer or \"final\"");
    } else {
      const auto l = layer.get<long long>();
      if (l < 0) throw ParseError(where + ": layer must be >= 0");
      rec.layer = static_cast<std::size_t>(l);
    }
    const auto space = j.at("space").get<std::string>();
    if (space == "embedding")
      rec.space = TraceSpace::embedding;
    else if (space == "logit")
      rec.space = TraceSpace::logit;
    else
      throw ParseError(where + ": unknown space '" + space + "'");
    const auto variant = j.at("variant").get<std::string>();
    if (variant == "baseline")
      rec.variant = Variant::baseline;
    else if (variant == "pruned")
      rec.variant = Variant::pruned;
    else
      throw ParseError(where + ": unknown variant '" + variant + "'");
    auto values = j.at("values").get<std::vector<double>>();
    if (values.size() != manifest.dim(rec.space))
      throw SchemaError(where + ": " + std::string(to_string(rec.space)) + " values have length " +
                        std::to_string(values.size()) + ", manifest declares " +
                        std::to_string(manifest.dim(rec.space)));
    rec.values = RealVector(std::move(values));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + ": " + e.what());
  } catch (const SchemaError&) {
    throw;
  } catch (const ParseError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ParseError(where + ": " + e.what());
  }
  return rec;
}

/// Layer ordering with the final output after every numbered layer.
inline std::size_t layer_key(const LayerId& layer) {
  return layer ? *layer : std::numeric_limits<std::size_t>::max();
}

}  // namespace detail

inline TraceManifest read_manifest(const std::filesystem::path& path) {
  const auto j = detail::read_json_file(path);
  TraceManifest m;
  try {
    m.embedding_dim = j.at("dims").at("embedding").get<std::size_t>();
    m.logit_dim = j.at("dims").at("logit").get<std::size_t>();
    if (j.contains("temperature_default")) m.temperature_default = j.at("temperature_default").get<double>();
    m.records = j.at("records").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest '" + path.string() + "': " + e.what());
  }
  if (m.embedding_dim == 0 || m.logit_dim == 0)
    throw SchemaError("manifest '" + path.string() + "': dims must be positive");
  if (!(m.temperature_default > 0.0))
    throw SchemaError("manifest '" + path.string() + "': temperature_default must be positive");
  return m;
}

/// Reads the manifest and its records, pairing baseline and pruned variants.
/// Groups with a missing variant are skipped with a warning.
inline TraceBundle ingest_trace(const std::filesystem::path& manifest_path) {
  TraceBundle bundle;
  bundle.manifest = read_manifest(manifest_path);
  const auto records_path = manifest_path.parent_path() / bundle.manifest.records;
  std::ifstream is(records_path);
  if (!is) throw IoError("cannot open '" + records_path.string() + "' for reading");

  using Key = std::tuple<std::size_t, std::size_t, int>;
  struct Pending {
    LayerId layer;
    std::optional<RealVector> variants[2];
  };
  std::map<Key, Pending> pending;
  std::string line;
  std::size_t line_no = 0, count = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    TraceRecord rec = detail::parse_record(line, line_no, bundle.manifest);
    ++count;
    Pending& slot = pending[{rec.step, detail::layer_key(rec.layer), static_cast<int>(rec.space)}];
    slot.layer = rec.layer;
    auto& v = slot.variants[static_cast<int>(rec.variant)];
    if (v)
      throw SchemaError("trace record line " + std::to_string(line_no) + ": duplicate " +
                        std::string(to_string(rec.variant)) + " record for step " +
                        std::to_string(rec.step) + " layer " + layer_label(rec.layer));
    v = std::move(rec.values);
  }
  if (count == 0) bundle.warnings.push_back("trace '" + records_path.string() + "' holds no records");

  for (auto& [key, slot] : pending) {
    const auto& [step, layer_k, space] = key;
    if (!slot.variants[0] || !slot.variants[1]) {
      bundle.warnings.push_back("step " + std::to_string(step) + " layer " + layer_label(slot.layer) +
                                " space " + std::string(to_string(static_cast<TraceSpace>(space))) +
                                ": missing " + (slot.variants[0] ? "pruned" : "baseline") +
                                " variant, skipped");
      continue;
    }
    bundle.groups.push_back({step, slot.layer, static_cast<TraceSpace>(space),
                             std::move(*slot.variants[0]), std::move(*slot.variants[1])});
  }
  return bundle;
}

/// Writes a manifest and its records file (placed next to the manifest).
inline void write_trace(const std::filesystem::path& manifest_path, const TraceManifest& manifest,
                        const std::vector<TraceRecord>& records) {
  nlohmann::ordered_json m;
  m["dims"] = {{"embedding", manifest.embedding_dim}, {"logit", manifest.logit_dim}};
  m["temperature_default"] = manifest.temperature_default;
  m["records"] = manifest.records;
  {
    std::ofstream os(manifest_path);
    if (!os) throw IoError("cannot open '" + manifest_path.string() + "' for writing");
    os << m.dump(2) << '\n';
  }
  const auto records_path = manifest_path.parent_path() / manifest.records;
  std::ofstream os(records_path);
  if (!os) throw IoError("cannot open '" + records_path.string() + "' for writing");
  for (const TraceRecord& r : records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    if (r.layer)
      j["layer"] = *r.layer;
    else
      j["layer"] = "final";
    j["space"] = std::string(to_string(r.space));
    j["variant"] = std::string(to_string(r.variant));
    j["values"] = r.values.vec();
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("failed writing '" + records_path.string() + "'");
}

}  // namespace prunescope
