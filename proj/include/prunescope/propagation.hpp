#pragma once

// Measurement procedures: single-layer intervention across the three
// representation spaces, step-wise divergence between a baseline and a
// compressed decoder, and the exact three-path split of an attention output
// perturbation.

#include <algorithm>
#include <array>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "prunescope/distributions.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/estimators.hpp"
#include "prunescope/numeric.hpp"
#include "prunescope/pruning.hpp"
#include "prunescope/toylm.hpp"
#include "prunescope/vecmath.hpp"

namespace prunescope {

/// The four measured quantities: angular deviation in three spaces, plus KL.
enum class Channel { embedding, logit, probability, kl };

inline constexpr std::array<Channel, 4> kAllChannels = {Channel::embedding, Channel::logit,
                                                        Channel::probability, Channel::kl};

inline std::string_view to_string(Channel c) {
  switch (c) {
    case Channel::embedding: return "embedding";
    case Channel::logit: return "logit";
    case Channel::probability: return "probability";
    case Channel::kl: return "kl";
  }
  return "?";
}

/// Exact and estimated deviation of one channel, with the driving quantity
/// (relative orthogonal magnitude for linear spaces, weighted variance of the
/// logit shift for probability and KL).
struct ChannelMeasure {
  double exact = 0.0;
  double estimated = 0.0;
  double rel_orth_magnitude = 0.0;
  double variance = 0.0;

  double abs_error() const { return estimated - exact; }
};

/// Angular deviation of a linear representation and its orthogonal estimate.
inline ChannelMeasure measure_linear(std::span<const double> base, std::span<const double> moved) {
  detail::require_same_dim(base, moved, "measure_linear");
  std::vector<double> delta(base.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = moved[i] - base[i];
  ChannelMeasure out;
  out.rel_orth_magnitude = relative_orthogonal_magnitude(base, delta);
  out.estimated = 0.5 * out.rel_orth_magnitude;
  out.exact = angular_deviation(base, moved);
  return out;
}

struct LogitComparison {
  ChannelMeasure probability;
  ChannelMeasure kl;
};

/// Probability-space angular deviation and KL(p || q) between softmax_t of two
/// logit vectors, each with its second-order estimate.
inline LogitComparison measure_logits(std::span<const double> base, std::span<const double> moved,
                                      double temperature) {
  detail::require_same_dim(base, moved, "measure_logits");
  const ProbDist p = softmax_t(Logits(RealVector(base), temperature));
  const ProbDist q = softmax_t(Logits(RealVector(moved), temperature));
  std::vector<double> dz(base.size());
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = moved[i] - base[i];
  const double two_t2 = 2.0 * temperature * temperature;

  LogitComparison out;
  out.probability.variance = weighted_moments(dz, squared_weight_dist(p).values()).variance;
  out.probability.estimated = out.probability.variance / two_t2;
  out.probability.exact = angular_deviation(p.values(), q.values());
  out.kl.variance = weighted_moments(dz, p.values()).variance;
  out.kl.estimated = out.kl.variance / two_t2;
  out.kl.exact = exact_kl(p, q);
  return out;
}

struct OutputComparison {
  std::array<ChannelMeasure, 4> channels;  // indexed by Channel

  const ChannelMeasure& operator[](Channel c) const {
    return channels[static_cast<std::size_t>(c)];
  }
};

/// Compares final-position outputs (post-norm hidden and logits) of two models.
inline OutputComparison compare_outputs(std::span<const double> hidden_base,
                                        std::span<const double> logits_base,
                                        std::span<const double> hidden_moved,
                                        std::span<const double> logits_moved,
                                        double temperature) {
  OutputComparison out;
  out.channels[0] = measure_linear(hidden_base, hidden_moved);
  out.channels[1] = measure_linear(logits_base, logits_moved);
  const LogitComparison lc = measure_logits(logits_base, logits_moved, temperature);
  out.channels[2] = lc.probability;
  out.channels[3] = lc.kl;
  return out;
}

inline OutputComparison compare_snapshots(const SpaceSnapshot& base, const SpaceSnapshot& moved,
                                          double temperature) {
  return compare_outputs(base.hidden.values(), base.logits.scores().values(),
                         moved.hidden.values(), moved.logits.scores().values(), temperature);
}

// ---------------------------------------------------------------------------
// Layer-wise intervention

enum class Branch { attention, mlp, block };

inline std::string_view to_string(Branch b) {
  switch (b) {
    case Branch::attention: return "attention";
    case Branch::mlp: return "mlp";
    case Branch::block: return "block";
  }
  return "?";
}

/// Which branch a prune template perturbs.
inline Branch branch_of(const PruneSpec& spec) {
  switch (spec.kind) {
    case PruneKind::drop_attn: return Branch::attention;
    case PruneKind::drop_mlp: return Branch::mlp;
    case PruneKind::drop_block: return Branch::block;
    default: break;
  }
  const auto is_attn = [](Target t) { return t != Target::up && t != Target::down; };
  if (std::all_of(spec.targets.begin(), spec.targets.end(), is_attn)) return Branch::attention;
  if (std::none_of(spec.targets.begin(), spec.targets.end(), is_attn)) return Branch::mlp;
  return Branch::block;
}

/// The template restricted to a single layer.
inline PruneSpec instantiate_for_layer(PruneSpec spec, std::size_t layer) {
  spec.indices = {layer};
  return spec;
}

struct ChannelStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double estimated_mean = 0.0;
  double rel_orth_mean = 0.0;
  double variance_mean = 0.0;
};

struct InterventionResult {
  std::size_t layer = 0;
  Branch branch = Branch::block;
  std::size_t samples = 0;  // (prompt, position) pairs aggregated
  std::array<ChannelStats, 4> channels;

  const ChannelStats& operator[](Channel c) const {
    return channels[static_cast<std::size_t>(c)];
  }
};

struct SweepOptions {
  double temperature = 1.0;
  unsigned threads = 1;
};

namespace detail {

inline void accumulate(std::array<ChannelStats, 4>& acc, const OutputComparison& cmp,
                       bool first) {
  for (std::size_t c = 0; c < 4; ++c) {
    const ChannelMeasure& m = cmp.channels[c];
    ChannelStats& s = acc[c];
    s.mean += m.exact;
    s.min = first ? m.exact : std::min(s.min, m.exact);
    s.max = first ? m.exact : std::max(s.max, m.exact);
    s.estimated_mean += m.estimated;
    s.rel_orth_mean += m.rel_orth_magnitude;
    s.variance_mean += m.variance;
  }
}

inline void finalize(std::array<ChannelStats, 4>& acc, std::size_t samples) {
  const double inv = 1.0 / static_cast<double>(samples);
  for (ChannelStats& s : acc) {
    s.mean *= inv;
    s.estimated_mean *= inv;
    s.rel_orth_mean *= inv;
    s.variance_mean *= inv;
  }
}

}  // namespace detail

/// For each layer, replaces only that layer with its compressed counterpart
/// and compares final outputs against the baseline at every (prompt,
/// position), aggregating mean/min/max per channel.
inline std::vector<InterventionResult> layer_intervention_sweep(
    const ToyModel& baseline, const PruneSpec& spec_template,
    const std::vector<std::vector<Token>>& prompts, const SweepOptions& options = {}) {
  if (prompts.empty()) throw ValidationError("layer_intervention_sweep: no prompts");
  spec_template.validate();
  detail::require_positive_temperature(options.temperature, "layer_intervention_sweep");

  std::optional<CalibrationStats> stats;
  if (!spec_template.is_drop() && spec_template.kind != PruneKind::quantize &&
      spec_template.scorer == Scorer::wanda)
    stats = calibrate(baseline, prompts);

  std::vector<std::vector<SpaceSnapshot>> base_out;
  base_out.reserve(prompts.size());
  for (const auto& prompt : prompts)
    base_out.push_back(forward(baseline, prompt, Capture::final, options.temperature));

  const std::size_t layers = baseline.blocks.size();
  const Branch branch = branch_of(spec_template);
  std::vector<InterventionResult> results(layers);
  parallel_for(layers, options.threads, [&](std::size_t l) {
    const ToyModel hybrid = apply_prune(baseline, instantiate_for_layer(spec_template, l),
                                        stats ? &*stats : nullptr);
    InterventionResult r;
    r.layer = l;
    r.branch = branch;
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
      const auto moved = forward(hybrid, prompts[pi], Capture::final, options.temperature);
      for (std::size_t pos = 0; pos < moved.size(); ++pos) {
        detail::accumulate(r.channels,
                           compare_snapshots(base_out[pi][pos], moved[pos], options.temperature),
                           r.samples == 0);
        ++r.samples;
      }
    }
    detail::finalize(r.channels, r.samples);
    results[l] = r;
  });
  return results;
}

// ---------------------------------------------------------------------------
// Step-wise divergence

struct StepDeviation {
  std::size_t step = 0;
  bool same_context = true;
  Token baseline_token = 0;
  Token pruned_token = 0;
  OutputComparison deviations;
};

struct StepwiseRun {
  std::vector<StepDeviation> steps;
  Generation baseline;
  Generation pruned;
};

/// Decodes both models independently from the same prompt (sampling draws
/// from identically seeded streams) and compares their final-position outputs
/// at every step.
inline StepwiseRun stepwise_divergence(const ToyModel& baseline, const ToyModel& pruned,
                                       std::span<const Token> prompt, std::size_t steps,
                                       const DecodeSpec& decode = {}) {
  if (baseline.config.vocab_size != pruned.config.vocab_size ||
      baseline.config.model_dim != pruned.config.model_dim)
    throw ShapeError("stepwise_divergence: models differ in vocabulary or width");
  StepwiseRun run;
  run.baseline = generate(baseline, prompt, steps, decode);
  run.pruned = generate(pruned, prompt, steps, decode);
  const std::size_t p = prompt.size();
  bool same = true;
  for (std::size_t t = 0; t < steps; ++t) {
    StepDeviation s;
    s.step = t;
    s.same_context = same;
    s.baseline_token = run.baseline.state.tokens[p + t];
    s.pruned_token = run.pruned.state.tokens[p + t];
    s.deviations = compare_snapshots(run.baseline.trace[t], run.pruned.trace[t],
                                     decode.temperature);
    run.steps.push_back(s);
    if (s.baseline_token != s.pruned_token) same = false;
  }
  return run;
}

enum class ContextRegime { weight_only, history_prompt_fixed, history_generated };

inline std::string_view to_string(ContextRegime r) {
  switch (r) {
    case ContextRegime::weight_only: return "weight_only";
    case ContextRegime::history_prompt_fixed: return "history_prompt_fixed";
    case ContextRegime::history_generated: return "history_generated";
  }
  return "?";
}

struct StepAttribution {
  std::size_t step = 0;
  ContextRegime regime = ContextRegime::weight_only;
  std::size_t prompt_tokens = 0;     // context positions filled at prefill
  std::size_t generated_tokens = 0;  // context positions produced by decoding
};

/// Tags each step by the source of its deviation: step 0 sees only the weight
/// perturbation; later steps with identical emitted prefixes carry history
/// from the prompt alone; after the first token mismatch the generated context
/// itself differs.
inline std::vector<StepAttribution> context_split_deviation(
    std::span<const StepDeviation> trace, std::size_t prompt_len) {
  std::vector<StepAttribution> out;
  out.reserve(trace.size());
  bool diverged = false;
  for (const StepDeviation& s : trace) {
    diverged = diverged || !s.same_context;
    StepAttribution a;
    a.step = s.step;
    a.prompt_tokens = prompt_len;
    a.generated_tokens = s.step;
    a.regime = s.step == 0  ? ContextRegime::weight_only
               : diverged   ? ContextRegime::history_generated
                            : ContextRegime::history_prompt_fixed;
    out.push_back(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention output error

struct AttnErrorBreakdown {
  RealVector value_path;   // sum alpha_i dv_i
  RealVector weight_path;  // sum dalpha_i v_i
  RealVector cross_term;   // sum dalpha_i dv_i
  RealVector exact_delta;  // sum (alpha+dalpha)(v+dv) - sum alpha v
};

inline AttnErrorBreakdown attention_error_decomposition(std::span<const double> alpha,
                                                        std::span<const RealVector> v,
                                                        std::span<const double> delta_alpha,
                                                        std::span<const RealVector> delta_v,
                                                        double sum_tolerance = kProbSumTolerance) {
  const std::size_t n = alpha.size();
  if (n == 0 || v.size() != n || delta_alpha.size() != n || delta_v.size() != n)
    throw ShapeError("attention_error_decomposition: sequences must be nonempty and equal length");
  const std::size_t d = v[0].dim();
  for (std::size_t i = 0; i < n; ++i) {
    if (v[i].dim() != d || delta_v[i].dim() != d)
      throw ShapeError("attention_error_decomposition: value vectors differ in dimension");
  }
  const double s0 = sum(alpha);
  const double s1 = sum_of(n, [&](std::size_t i) { return alpha[i] + delta_alpha[i]; });
  if (std::abs(s0 - 1.0) > sum_tolerance || std::abs(s1 - 1.0) > sum_tolerance)
    throw ValidationError("attention_error_decomposition: attention weights must sum to 1");

  std::vector<double> value_path(d), weight_path(d), cross(d), exact(d);
  for (std::size_t c = 0; c < d; ++c) {
    value_path[c] = sum_of(n, [&](std::size_t i) { return alpha[i] * delta_v[i][c]; });
    weight_path[c] = sum_of(n, [&](std::size_t i) { return delta_alpha[i] * v[i][c]; });
    cross[c] = sum_of(n, [&](std::size_t i) { return delta_alpha[i] * delta_v[i][c]; });
    const double after = sum_of(n, [&](std::size_t i) {
      return (alpha[i] + delta_alpha[i]) * (v[i][c] + delta_v[i][c]);
    });
    const double before = sum_of(n, [&](std::size_t i) { return alpha[i] * v[i][c]; });
    exact[c] = after - before;
  }
  return {RealVector(std::move(value_path)), RealVector(std::move(weight_path)),
          RealVector(std::move(cross)), RealVector(std::move(exact))};
}

}  // namespace prunescope
