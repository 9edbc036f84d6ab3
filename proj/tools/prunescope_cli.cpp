// prunescope command-line interface.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal error.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "prunescope/experiment.hpp"

namespace ps = prunescope;

namespace {

enum ExitCode { kOk = 0, kValidation = 1, kIo = 2, kInternal = 3 };

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ps::IoError("cannot open '" + path + "' for reading");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ps::ParseError("'" + path + "': " + e.what());
  }
}

ps::PruneSpec load_prune_spec(const std::string& path) {
  return ps::prune_spec_from_json(nlohmann::ordered_json(read_json(path)));
}

ps::ToyConfig resolve_config(const std::string& config_path, std::optional<std::uint64_t> seed) {
  ps::ToyConfig c = config_path.empty() ? ps::default_config(ps::kDefaultModelSeed)
                                        : ps::toy_config_from_json(read_json(config_path));
  if (seed) c.seed = *seed;
  return c;
}

std::vector<std::vector<ps::Token>> load_prompts(const std::string& path) {
  try {
    return read_json(path).get<std::vector<std::vector<ps::Token>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ps::ParseError("prompts '" + path + "': expected an array of token arrays (" + e.what() + ")");
  }
}

ps::ReportFormat parse_format(const std::string& f) {
  return f == "json" ? ps::ReportFormat::json : ps::ReportFormat::csv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representation-space deviation analysis of pruned language models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ps::kToolVersion));

  std::string out = "-";
  std::string format = "csv";
  unsigned threads = 1;
  auto add_output = [&](CLI::App* sub) {
    sub->add_option("--out", out, "Output path ('-' for stdout)");
    sub->add_option("--format", format, "Report format")->check(CLI::IsMember({"csv", "json"}));
    sub->add_option("--threads", threads, "Worker threads (results do not depend on this)")
        ->check(CLI::Range(1U, 256U));
  };

  ps::ExperimentSpec spec;
  std::string config_path, prune_path, prompts_path, decode = "greedy", trace_out;
  std::optional<std::uint64_t> model_seed;

  // estimate
  auto* estimate = app.add_subcommand("estimate", "Convergence probe of the second-order estimators");
  estimate->add_option("--vocab", spec.vocab, "Vocabulary size")->check(CLI::PositiveNumber);
  estimate->add_option("--trials", spec.trials, "Random draws per epsilon")->check(CLI::PositiveNumber);
  estimate->add_option("--seed", spec.seed, "Root seed");
  estimate->add_option("--epsilons", spec.epsilons, "Relative perturbation sizes")->delimiter(',');
  estimate->add_option("--temperature", spec.temperatures, "Softmax temperature")->delimiter(',');
  add_output(estimate);

  // intervene
  auto* intervene = app.add_subcommand("intervene", "Per-layer single-branch intervention sweep");
  auto* cfg_opt = intervene->add_option("--config", config_path, "ToyConfig JSON file");
  intervene->add_option("--seed", model_seed, "Model seed (default config)")->excludes(cfg_opt);
  intervene->add_option("--prune", prune_path, "PruneSpec JSON template")->required();
  auto* prompts_opt = intervene->add_option("--prompts", prompts_path, "JSON array of token arrays");
  intervene->add_option("--prompt-seed", spec.prompt_seed, "Seed for the generated prompt suite")
      ->excludes(prompts_opt);
  intervene->add_option("--temperature", spec.temperatures, "Temperature(s), comma separated")->delimiter(',');
  add_output(intervene);

  // stepwise
  auto* stepwise = app.add_subcommand("stepwise", "Step-wise divergence of baseline vs pruned decoding");
  auto* scfg_opt = stepwise->add_option("--config", config_path, "ToyConfig JSON file");
  stepwise->add_option("--seed", model_seed, "Model seed (default config)")->excludes(scfg_opt);
  stepwise->add_option("--prune", prune_path, "PruneSpec JSON")->required();
  stepwise->add_option("--prompt", spec.prompt, "Prompt tokens, comma separated")->delimiter(',');
  stepwise->add_option("--steps", spec.steps, "Tokens to generate")->check(CLI::PositiveNumber);
  stepwise->add_option("--decode", decode, "Decoding rule")->check(CLI::IsMember({"greedy", "sample"}));
  stepwise->add_option("--decode-seed", spec.decode_seed, "Sampling seed (shared by both models)");
  stepwise->add_option("--temperature", spec.temperatures, "Sampling and measurement temperature");
  stepwise->add_option("--trace-out", trace_out, "Also write the run as a trace manifest");
  add_output(stepwise);

  // analyze-trace
  auto* analyze = app.add_subcommand("analyze-trace", "Analyze baseline/pruned dumps from any model");
  analyze->add_option("--manifest", spec.manifest, "Trace manifest JSON")->required();
  auto* temp_opt = analyze->add_option("--temperature", spec.temperatures, "Temperature(s), comma separated")
                       ->delimiter(',');
  add_output(analyze);

  // model save|load
  auto* model = app.add_subcommand("model", "TOYLM1 model files");
  model->require_subcommand(1);
  std::string model_path;
  auto* save = model->add_subcommand("save", "Initialize a model and write it");
  auto* mcfg_opt = save->add_option("--config", config_path, "ToyConfig JSON file");
  save->add_option("--seed", model_seed, "Model seed (default config)")->excludes(mcfg_opt);
  save->add_option("--path", model_path, "Destination")->required();
  auto* load = model->add_subcommand("load", "Read a model and print its configuration");
  load->add_option("--path", model_path, "Source")->required();
  load->add_option("--config", config_path, "Verify against this ToyConfig JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*model) {
      if (*save) {
        const ps::ToyModel m = ps::init_model(resolve_config(config_path, model_seed));
        ps::save_model(model_path, m);
        std::cout << ps::to_json(m.config).dump() << '\n';
      } else {
        const ps::ToyModel m = ps::load_model(model_path);
        if (!config_path.empty()) {
          const ps::ToyModel expected = ps::init_model(resolve_config(config_path, std::nullopt));
          if (!(expected == m)) {
            std::cerr << "error: model at '" << model_path << "' differs from a fresh init of the config\n";
            return kValidation;
          }
        }
        std::cout << ps::to_json(m.config).dump() << '\n';
      }
      return kOk;
    }

    spec.threads = threads;
    if (*estimate) {
      spec.mode = ps::Mode::estimate;
    } else if (*intervene) {
      spec.mode = ps::Mode::intervene;
      spec.model = resolve_config(config_path, model_seed);
      spec.prune = load_prune_spec(prune_path);
      if (!prompts_path.empty()) spec.prompts = load_prompts(prompts_path);
    } else if (*stepwise) {
      spec.mode = ps::Mode::stepwise;
      spec.model = resolve_config(config_path, model_seed);
      spec.prune = load_prune_spec(prune_path);
      spec.decode = decode == "sample" ? ps::DecodeSpec::Mode::sample : ps::DecodeSpec::Mode::greedy;
      if (!trace_out.empty()) {
        spec.validate();
        const auto outcome = ps::detail::run_stepwise_full(spec);
        ps::export_stepwise_trace(outcome.run, spec.model, spec.temperatures.front(), trace_out);
      }
    } else if (*analyze) {
      spec.mode = ps::Mode::analyze_trace;
      if (temp_opt->count() == 0) spec.temperatures = {ps::read_manifest(spec.manifest).temperature_default};
    }

    const ps::Report report = ps::run_experiment(spec);
    if (spec.mode == ps::Mode::analyze_trace) {
      for (const auto& w : report.metadata["warnings"]) std::cerr << "warning: " << w.get<std::string>() << '\n';
    }
    ps::emit_report(report, parse_format(format), out);
    return kOk;
  } catch (const ps::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const ps::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}
