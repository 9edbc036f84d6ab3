#pragma once

// Experiment driver: resolves an ExperimentSpec, dispatches to the
// measurement procedures and assembles a deterministic Report.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/estimators.hpp"
#include "prunescope/propagation.hpp"
#include "prunescope/prune_spec_json.hpp"
#include "prunescope/pruning.hpp"
#include "prunescope/report.hpp"
#include "prunescope/toylm.hpp"
#include "prunescope/trace.hpp"

namespace prunescope {

inline constexpr std::uint64_t kDefaultModelSeed = 42;
inline constexpr std::uint64_t kDefaultPromptSeed = 7;
inline constexpr std::size_t kDefaultPromptCount = 4;
inline constexpr std::size_t kDefaultPromptLength = 16;

enum class Mode { intervene, stepwise, estimate, analyze_trace };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::intervene: return "intervene";
    case Mode::stepwise: return "stepwise";
    case Mode::estimate: return "estimate";
    case Mode::analyze_trace: return "analyze-trace";
  }
  return "?";
}

struct ExperimentSpec {
  Mode mode = Mode::intervene;
  std::vector<double> temperatures{1.0};
  unsigned threads = 1;  // execution detail, not part of the resolved spec

  // toy model (intervene, stepwise)
  ToyConfig model = default_config(kDefaultModelSeed);
  PruneSpec prune;

  // intervene
  std::vector<std::vector<Token>> prompts;  // empty: drawn from prompt_seed
  std::uint64_t prompt_seed = kDefaultPromptSeed;
  std::size_t prompt_count = kDefaultPromptCount;
  std::size_t prompt_length = kDefaultPromptLength;

  // stepwise
  std::vector<Token> prompt{3, 17, 5};
  std::size_t steps = 16;
  DecodeSpec::Mode decode = DecodeSpec::Mode::greedy;
  std::uint64_t decode_seed = 0;

  // estimate
  std::uint64_t seed = 0;
  std::size_t vocab = 64;
  std::size_t trials = 100;
  std::vector<double> epsilons{0.1, 0.05, 0.025};

  // analyze-trace
  std::string manifest;

  void validate() const {
    if (temperatures.empty()) throw ValidationError("experiment: at least one temperature required");
    for (double t : temperatures)
      if (!(t > 0.0) || !std::isfinite(t)) throw ValidationError("experiment: temperatures must be positive");
    if ((mode == Mode::estimate || mode == Mode::stepwise) && temperatures.size() != 1)
      throw ValidationError("experiment: " + std::string(to_string(mode)) + " takes a single temperature");
    if (mode == Mode::analyze_trace && manifest.empty())
      throw ValidationError("experiment: analyze-trace requires a manifest path");
  }
};

/// Deterministic prompt suite drawn from a seed.
inline std::vector<std::vector<Token>> draw_prompts(std::uint64_t seed, std::size_t count,
                                                    std::size_t length, std::size_t vocab) {
  Rng rng(seed);
  std::vector<std::vector<Token>> prompts(count, std::vector<Token>(length));
  for (auto& p : prompts)
    for (Token& t : p) t = static_cast<Token>(rng.below(vocab));
  return prompts;
}

inline nlohmann::ordered_json to_json(const ToyConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim}, {"num_layers", c.num_layers},
          {"ffn_dim", c.ffn_dim},       {"seed", c.seed},           {"max_context", c.max_context}};
}

inline ToyConfig toy_config_from_json(const nlohmann::json& j) {
  ToyConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.ffn_dim = j.value("ffn_dim", 4 * c.model_dim);
    c.seed = j.value("seed", kDefaultModelSeed);
    c.max_context = j.value("max_context", c.max_context);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("ToyConfig: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

inline nlohmann::ordered_json base_metadata(const ExperimentSpec& spec) {
  nlohmann::ordered_json md;
  md["tool_version"] = std::string(kToolVersion);
  md["mode"] = std::string(to_string(spec.mode));
  md["temperatures"] = spec.temperatures;
  return md;
}

inline void push_channel_row(Report& report, std::int64_t index, const std::string& branch,
                             Channel c, double temperature, const ChannelMeasure& m,
                             std::vector<double> extra = {}) {
  ReportRow row{index, branch, std::string(to_string(c)),
                {temperature, m.exact, m.estimated, m.abs_error(), m.rel_orth_magnitude, m.variance}};
  row.values.insert(row.values.end(), extra.begin(), extra.end());
  report.rows.push_back(std::move(row));
}

inline const std::vector<std::string>& deviation_columns() {
  static const std::vector<std::string> cols{"temperature", "exact", "estimated", "abs_error",
                                             "rel_orth_magnitude", "variance"};
  return cols;
}

inline Report run_estimate(const ExperimentSpec& spec) {
  Report report;
  report.index_column = "epsilon_index";
  report.value_columns = {"temperature", "epsilon", "mean_abs_error", "mean_exact", "mean_estimated", "trials"};
  auto md = base_metadata(spec);
  md["seed"] = spec.seed;
  md["vocab"] = spec.vocab;
  md["trials"] = spec.trials;
  md["epsilons"] = spec.epsilons;
  md["logit_distribution"] = "gaussian(0, 2^2); direction gaussian normalized, scaled to epsilon*|z|";
  auto& orders = md["fitted_order"] = nlohmann::ordered_json::object();
  ProbeOptions opts;
  opts.vocab = spec.vocab;
  opts.temperature = spec.temperatures.front();
  opts.threads = spec.threads;
  for (ProbeSpace s : {ProbeSpace::linear, ProbeSpace::probability, ProbeSpace::kl}) {
    const ProbeResult r = convergence_probe(spec.seed, s, spec.epsilons, spec.trials, opts);
    if (r.order)
      orders[std::string(to_string(s))] = *r.order;
    else
      orders[std::string(to_string(s))] = "exact";
    for (std::size_t k = 0; k < r.points.size(); ++k) {
      const ProbePoint& pt = r.points[k];
      report.rows.push_back({static_cast<std::int64_t>(k), "probe", std::string(to_string(s)),
                             {opts.temperature, pt.epsilon, pt.mean_abs_error, pt.mean_exact,
                              pt.mean_estimated, static_cast<double>(spec.trials)}});
    }
  }
  report.metadata = std::move(md);
  return report;
}

inline Report run_intervene(const ExperimentSpec& spec) {
  const ToyModel model = init_model(spec.model);
  spec.prune.validate_for(model);
  const auto prompts = spec.prompts.empty()
                           ? draw_prompts(spec.prompt_seed, spec.prompt_count, spec.prompt_length,
                                          spec.model.vocab_size)
                           : spec.prompts;
  Report report;
  report.index_column = "layer";
  report.value_columns = {"temperature", "exact_mean", "exact_min", "exact_max", "estimated",
                          "abs_error", "rel_orth_magnitude", "variance", "samples"};
  auto md = base_metadata(spec);
  md["model"] = to_json(spec.model);
  md["prune"] = to_json(spec.prune);
  md["prompt_seed"] = spec.prompt_seed;
  md["prompts"] = prompts;
  md["aggregation"] = "all (prompt, position) pairs at the final output";
  report.metadata = std::move(md);

  for (double t : spec.temperatures) {
    SweepOptions opts{t, spec.threads};
    for (const InterventionResult& r : layer_intervention_sweep(model, spec.prune, prompts, opts)) {
      for (Channel c : kAllChannels) {
        const ChannelStats& s = r[c];
        report.rows.push_back({static_cast<std::int64_t>(r.layer), std::string(to_string(r.branch)),
                               std::string(to_string(c)),
                               {t, s.mean, s.min, s.max, s.estimated_mean, s.estimated_mean - s.mean,
                                s.rel_orth_mean, s.variance_mean, static_cast<double>(r.samples)}});
      }
    }
  }
  return report;
}

struct StepwiseOutcome {
  Report report;
  StepwiseRun run;
};

inline StepwiseOutcome run_stepwise_full(const ExperimentSpec& spec) {
  const ToyModel baseline = init_model(spec.model);
  std::optional<CalibrationStats> stats;
  if (!spec.prune.is_drop() && spec.prune.kind != PruneKind::quantize &&
      spec.prune.scorer == Scorer::wanda)
    stats = calibrate(baseline, draw_prompts(spec.prompt_seed, spec.prompt_count,
                                             spec.prompt_length, spec.model.vocab_size));
  const ToyModel pruned = apply_prune(baseline, spec.prune, stats ? &*stats : nullptr);
  const double t = spec.temperatures.front();
  const DecodeSpec decode{spec.decode, t, spec.decode_seed};
  StepwiseOutcome out;
  out.run = stepwise_divergence(baseline, pruned, spec.prompt, spec.steps, decode);
  const auto tags = context_split_deviation(out.run.steps, spec.prompt.size());

  Report& report = out.report;
  report.index_column = "step";
  report.value_columns = deviation_columns();
  for (const char* c : {"baseline_token", "pruned_token", "same_context"}) report.value_columns.push_back(c);
  auto md = base_metadata(spec);
  md["model"] = to_json(spec.model);
  md["prune"] = to_json(spec.prune);
  md["prompt"] = spec.prompt;
  md["steps"] = spec.steps;
  md["decode"] = spec.decode == DecodeSpec::Mode::greedy ? "greedy" : "sample";
  md["decode_seed"] = spec.decode_seed;
  if (stats) md["calibration_prompt_seed"] = spec.prompt_seed;
  report.metadata = std::move(md);

  for (std::size_t i = 0; i < out.run.steps.size(); ++i) {
    const StepDeviation& s = out.run.steps[i];
    for (Channel c : kAllChannels) {
      push_channel_row(report, static_cast<std::int64_t>(s.step), std::string(to_string(tags[i].regime)), c,
                       t, s.deviations[c],
                       {static_cast<double>(s.baseline_token), static_cast<double>(s.pruned_token),
                        s.same_context ? 1.0 : 0.0});
    }
  }
  return out;
}

inline Report run_analyze_trace(const ExperimentSpec& spec) {
  const TraceBundle bundle = ingest_trace(spec.manifest);
  Report report;
  report.index_column = "step";
  report.value_columns = deviation_columns();
  auto md = base_metadata(spec);
  md["manifest"] = spec.manifest;
  md["dims"] = {{"embedding", bundle.manifest.embedding_dim}, {"logit", bundle.manifest.logit_dim}};
  md["groups"] = bundle.groups.size();
  md["warnings"] = bundle.warnings;
  report.metadata = std::move(md);

  for (const TraceGroup& g : bundle.groups) {
    const auto step = static_cast<std::int64_t>(g.step);
    const std::string label = layer_label(g.layer);
    try {
      const ChannelMeasure linear = measure_linear(g.baseline.values(), g.pruned.values());
      for (double t : spec.temperatures) {
        if (g.space == TraceSpace::embedding) {
          push_channel_row(report, step, label, Channel::embedding, t, linear);
        } else {
          push_channel_row(report, step, label, Channel::logit, t, linear);
          const LogitComparison lc = measure_logits(g.baseline.values(), g.pruned.values(), t);
          push_channel_row(report, step, label, Channel::probability, t, lc.probability);
          push_channel_row(report, step, label, Channel::kl, t, lc.kl);
        }
      }
    } catch (const ValidationError& e) {
      throw ValidationError("analyze-trace step " + std::to_string(g.step) + " layer " + label + ": " + e.what());
    }
  }
  return report;
}

}  // namespace detail

/// Runs one experiment. Reports are sorted and depend only on the spec (not on
/// `threads`).
inline Report run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  Report report;
  try {
    switch (spec.mode) {
      case Mode::estimate: report = detail::run_estimate(spec); break;
      case Mode::intervene: report = detail::run_intervene(spec); break;
      case Mode::stepwise: report = detail::run_stepwise_full(spec).report; break;
      case Mode::analyze_trace: report = detail::run_analyze_trace(spec); break;
    }
  } catch (const IoError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(to_string(spec.mode)) + ": " + e.what());
  }
  report.sort_rows();
  report.validate();
  return report;
}

/// Writes the final-output snapshots of a stepwise run as a trace that
/// analyze-trace can consume.
inline void export_stepwise_trace(const StepwiseRun& run, const ToyConfig& config, double temperature,
                                  const std::filesystem::path& manifest_path,
                                  const std::string& records_name = "records.jsonl") {
  TraceManifest m;
  m.embedding_dim = config.model_dim;
  m.logit_dim = config.vocab_size;
  m.temperature_default = temperature;
  m.records = records_name;
  std::vector<TraceRecord> records;
  for (std::size_t t = 0; t < run.steps.size(); ++t) {
    for (Variant v : {Variant::baseline, Variant::pruned}) {
      const SpaceSnapshot& s = v == Variant::baseline ? run.baseline.trace[t] : run.pruned.trace[t];
      records.push_back({t, std::nullopt, TraceSpace::embedding, v, s.hidden});
      records.push_back({t, std::nullopt, TraceSpace::logit, v, s.logits.scores()});
    }
  }
  write_trace(manifest_path, m, records);
}

}  // namespace prunescope
