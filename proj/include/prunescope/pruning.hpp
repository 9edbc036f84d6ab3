#pragma once

// Compression operators over a ToyModel: branch/block drop, unstructured and
// N:M masks scored by magnitude or Wanda, and symmetric uniform quantization.
// Every operator returns a new model; embeddings, LM head, norms and
// positions are never touched.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prunescope/errors.hpp"
#include "prunescope/toylm.hpp"

namespace prunescope {

enum class PruneKind { drop_attn, drop_mlp, drop_block, unstructured, semi_structured, quantize };
enum class Scorer { magnitude, wanda };
enum class Granularity { per_row, per_matrix };

inline std::string_view to_string(PruneKind k) {
  switch (k) {
    case PruneKind::drop_attn: return "drop_attn";
    case PruneKind::drop_mlp: return "drop_mlp";
    case PruneKind::drop_block: return "drop_block";
    case PruneKind::unstructured: return "unstructured";
    case PruneKind::semi_structured: return "semi_structured";
    case PruneKind::quantize: return "quantize";
  }
  return "?";
}

inline std::string_view to_string(Scorer s) { return s == Scorer::wanda ? "wanda" : "magnitude"; }
inline std::string_view to_string(Granularity g) {
  return g == Granularity::per_matrix ? "per_matrix" : "per_row";
}

/// Declarative compression request.
///
/// For drop kinds `indices` lists the blocks to drop. For the matrix kinds
/// (unstructured, semi_structured, quantize) it restricts the layers that are
/// compressed; empty means every layer.
struct PruneSpec {
  PruneKind kind = PruneKind::drop_attn;
  std::vector<std::size_t> indices;
  double sparsity = 0.0;
  std::size_t n = 0;
  std::size_t m = 4;
  Scorer scorer = Scorer::magnitude;
  int bits = 8;
  Granularity granularity = Granularity::per_row;
  std::vector<Target> targets{std::begin(kAllTargets), std::end(kAllTargets)};

  bool is_drop() const {
    return kind == PruneKind::drop_attn || kind == PruneKind::drop_mlp ||
           kind == PruneKind::drop_block;
  }

  void validate() const {
    std::set<std::size_t> seen(indices.begin(), indices.end());
    if (seen.size() != indices.size()) throw ValidationError("PruneSpec: duplicate indices");
    if (!(sparsity >= 0.0 && sparsity <= 1.0))
      throw ValidationError("PruneSpec: sparsity must lie in [0, 1]");
    if (kind == PruneKind::semi_structured && (m == 0 || n > m))
      throw ValidationError("PruneSpec: N:M requires 0 <= n <= m and m >= 1");
    if (kind == PruneKind::quantize && (bits < 2 || bits > 16))
      throw ValidationError("PruneSpec: bits must lie in [2, 16]");
    if (targets.empty()) throw ValidationError("PruneSpec: targets must be nonempty");
  }

  void validate_for(const ToyModel& model) const {
    validate();
    for (std::size_t i : indices) {
      if (i >= model.config.num_layers)
        throw IndexError("PruneSpec: layer index " + std::to_string(i) + " >= num_layers " +
                         std::to_string(model.config.num_layers));
    }
  }

  friend bool operator==(const PruneSpec&, const PruneSpec&) = default;
};

/// Binary keep (1) / prune (0) pattern with the shape of its matrix.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  std::size_t zeros() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

inline void apply_mask(Matrix& w, const Mask& mask) {
  if (w.rows() != mask.rows || w.cols() != mask.cols)
    throw ShapeError("apply_mask: mask shape does not match matrix");
  auto flat = w.flat();
  for (std::size_t i = 0; i < flat.size(); ++i)
    if (!mask.keep[i]) flat[i] = 0.0;
}

/// Per-input-feature L2 norms of each target matrix's inputs.
struct CalibrationStats {
  std::map<std::pair<std::size_t, Target>, std::vector<double>> norms;
  std::size_t sample_count = 0;

  const std::vector<double>& at(std::size_t layer, Target t) const {
    auto it = norms.find({layer, t});
    if (it == norms.end())
      throw MissingCalibrationError("no calibration norms for layer " + std::to_string(layer) +
                                    " target " + std::string(to_string(t)));
    return it->second;
  }
};

inline CalibrationStats calibrate(const ToyModel& model,
                                  const std::vector<std::vector<Token>>& prompts) {
  if (prompts.empty()) throw ValidationError("calibrate: prompt set is empty");
  std::map<std::pair<std::size_t, Target>, std::vector<double>> sq;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    for (Target t : kAllTargets)
      sq[{l, t}].assign(target_matrix(model.blocks[l], t).cols(), 0.0);
  }
  CalibrationStats stats;
  for (const auto& prompt : prompts) {
    forward(model, prompt, Capture::final, 1.0,
            [&](std::size_t layer, Target t, std::span<const double> x) {
              auto& acc = sq.at({layer, t});
              for (std::size_t j = 0; j < x.size(); ++j) acc[j] += x[j] * x[j];
            });
    stats.sample_count += prompt.size();
  }
  for (auto& [key, acc] : sq) {
    for (double& v : acc) v = std::sqrt(v);
    stats.norms.emplace(key, std::move(acc));
  }
  return stats;
}

/// score[i][j] = |W[i][j]| * norm[j].
inline Matrix wanda_scores(const Matrix& w, std::span<const double> norms) {
  if (norms.size() != w.cols())
    throw ShapeError("wanda_scores: " + std::to_string(norms.size()) + " norms for " +
                     std::to_string(w.cols()) + " input features");
  Matrix s(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) s(r, c) = std::abs(w(r, c)) * norms[c];
  return s;
}

inline Matrix magnitude_scores(const Matrix& w) {
  Matrix s(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) s.flat()[i] = std::abs(w.flat()[i]);
  return s;
}

namespace detail {

inline std::size_t round_count(double fraction, std::size_t k) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(k)));
}

/// Zeroes the `count` lowest-scored entries of `group` (flat indices into
/// scores), lower index first among ties.
inline void prune_lowest(std::span<const double> scores, std::vector<std::size_t> group,
                         std::size_t count, std::vector<std::uint8_t>& keep) {
  std::stable_sort(group.begin(), group.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  for (std::size_t i = 0; i < count && i < group.size(); ++i) keep[group[i]] = 0;
}

}  // namespace detail

/// Prunes round(s * k) lowest-scored entries per group (a row, or the whole
/// matrix). Ties prune the lower flat index first, so masks are nested in s.
inline Mask unstructured_mask(const Matrix& scores, double sparsity,
                              Granularity granularity = Granularity::per_row) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0))
    throw ValidationError("unstructured_mask: sparsity must lie in [0, 1]");
  Mask mask{scores.rows(), scores.cols(), std::vector<std::uint8_t>(scores.size(), 1)};
  const auto flat = scores.flat();
  if (granularity == Granularity::per_matrix) {
    std::vector<std::size_t> all(scores.size());
    std::iota(all.begin(), all.end(), 0);
    detail::prune_lowest(flat, std::move(all), detail::round_count(sparsity, scores.size()),
                         mask.keep);
  } else {
    const std::size_t per_row = detail::round_count(sparsity, scores.cols());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      std::vector<std::size_t> row(scores.cols());
      std::iota(row.begin(), row.end(), r * scores.cols());
      detail::prune_lowest(flat, std::move(row), per_row, mask.keep);
    }
  }
  return mask;
}

/// Keeps the n highest-scored entries of every aligned group of m consecutive
/// inputs; ties keep the lower index.
inline Mask nm_mask(const Matrix& scores, std::size_t n, std::size_t m) {
  if (m == 0 || n > m) throw ValidationError("nm_mask: requires 0 <= n <= m and m >= 1");
  if (scores.cols() % m != 0)
    throw ShapeError("nm_mask: input dimension " + std::to_string(scores.cols()) +
                     " is not divisible by m = " + std::to_string(m));
  Mask mask{scores.rows(), scores.cols(), std::vector<std::uint8_t>(scores.size(), 0)};
  const auto flat = scores.flat();
  std::vector<std::size_t> group(m);
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    for (std::size_t start = 0; start < scores.cols(); start += m) {
      std::iota(group.begin(), group.end(), r * scores.cols() + start);
      std::stable_sort(group.begin(), group.end(), [&](std::size_t a, std::size_t b) {
        return flat[a] > flat[b];
      });
      for (std::size_t i = 0; i < n; ++i) mask.keep[group[i]] = 1;
    }
  }
  return mask;
}

/// Symmetric per-matrix round-to-nearest with step max|w| / (2^(b-1) - 1).
/// Returns the step (0 for an all-zero matrix, which is left unchanged).
inline double quantize_values(std::span<double> w, int bits) {
  if (bits < 2 || bits > 16) throw ValidationError("quantize: bits must lie in [2, 16]");
  double top = 0.0;
  for (double x : w) top = std::max(top, std::abs(x));
  if (top == 0.0) return 0.0;
  const double step = top / static_cast<double>((1 << (bits - 1)) - 1);
  for (double& x : w) x = std::round(x / step) * step;
  return step;
}

inline ToyModel apply_prune(const ToyModel& model, const PruneSpec& spec,
                            const CalibrationStats* stats = nullptr) {
  spec.validate_for(model);
  ToyModel out = model;

  if (spec.is_drop()) {
    for (std::size_t l : spec.indices) {
      Block& b = out.blocks[l];
      if (spec.kind != PruneKind::drop_mlp)
        std::fill(b.attn.output.flat().begin(), b.attn.output.flat().end(), 0.0);
      if (spec.kind != PruneKind::drop_attn)
        std::fill(b.mlp.down.flat().begin(), b.mlp.down.flat().end(), 0.0);
    }
    return out;
  }

  if (spec.kind != PruneKind::quantize && spec.scorer == Scorer::wanda && stats == nullptr)
    throw MissingCalibrationError("apply_prune: wanda scoring requires calibration stats");

  std::vector<std::size_t> layers = spec.indices;
  if (layers.empty()) {
    layers.resize(out.blocks.size());
    std::iota(layers.begin(), layers.end(), 0);
  }
  for (std::size_t l : layers) {
    for (Target t : spec.targets) {
      Matrix& w = target_matrix(out.blocks[l], t);
      if (spec.kind == PruneKind::quantize) {
        quantize_values(w.flat(), spec.bits);
        continue;
      }
      const Matrix scores =
          spec.scorer == Scorer::wanda ? wanda_scores(w, stats->at(l, t)) : magnitude_scores(w);
      const Mask mask = spec.kind == PruneKind::unstructured
                            ? unstructured_mask(scores, spec.sparsity, spec.granularity)
                            : nm_mask(scores, spec.n, spec.m);
      apply_mask(w, mask);
    }
  }
  return out;
}

}  // namespace prunescope
