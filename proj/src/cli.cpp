#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "bilopt/harness.hpp"

namespace bilopt::harness {

namespace fs = std::filesystem;

namespace {

struct Invocation {
  std::string command;
  RunConfig config;
  fs::path root;
};

void write_config(const Invocation& inv) {
  const fs::path dir = inv.root / inv.command;
  fs::create_directories(dir);
  std::ofstream(dir / "config.cfg") << dump_config(inv.config);
}

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

void require_arm(bool ok, const Invocation& inv, const std::string& what) {
  if (!ok) throw ConfigError(inv.command + " needs " + what + "; instruction.arm is " + arm_name(inv.config.arm));
}

void gen_suite(const Invocation& inv) {
  for (std::uint64_t seed : inv.config.seeds) {
    tasks::SuiteConfig sc = inv.config.suite;
    sc.seed = seed;
    const fs::path path = inv.root / inv.command / seed_dir(seed) / "suite.txt";
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    tasks::write_suite(out, tasks::generate_task_suite(sc));
    std::cout << path.string() << "\n";
  }
}

void train(const Invocation& inv, bool bilevel_arm) {
  const RunConfig& c = inv.config;
  require_arm(is_bilevel(c.arm) == bilevel_arm, inv, bilevel_arm ? "a bilevel arm" : "a baseline arm");
  const std::string arm = arm_name(c.arm);
  for (std::uint64_t seed : c.seeds) {
    const RunContext context(c, seed);
    const fs::path dir = inv.root / inv.command / arm / seed_dir(seed);
    fs::create_directories(dir);
    ArmOutputs outputs;
    if (bilevel_arm) outputs.trace = dir / "trace.jsonl";
    const ArmRun run = train_arm(c, context, c.arm, outputs);
    const Evaluation eval = evaluate_arm(c, context, c.arm, run.theta);
    write_metrics(dir / "metrics.jsonl",
                  metrics_records(inv.command + "/" + arm + "/" + seed_dir(seed), seed, "test", eval));
    model::NamedTensors entries = model::named(run.theta);
    if (run.phi) {
      const auto ts = instructions::tensors(*run.phi);
      for (std::size_t i = 0; i < ts.size(); ++i) entries.emplace_back("phi/" + std::to_string(i), ts[i]);
    }
    model::save_checkpoint(dir / "checkpoint.bin", entries);
    std::cout << arm << " seed " << seed << " test " << testing_mode_name(arm_testing_mode(c.arm, c)) << " ROUGE-L "
              << eval.aggregate << "\n";
    if (run.warnings > 0) std::cout << "  contraction warnings: " << run.warnings << "\n";
  }
}

void eval(const Invocation& inv) {
  const RunConfig& c = inv.config;
  if (c.eval_checkpoint.empty()) throw ConfigError("eval needs eval.checkpoint");
  const model::ModelParams theta = model::model_from_checkpoint(model::load_checkpoint(c.eval_checkpoint));
  for (std::uint64_t seed : c.seeds) {
    const RunContext context(c, seed);
    const Evaluation e = evaluate_arm(c, context, c.arm, theta);
    write_metrics(inv.root / inv.command / seed_dir(seed) / "metrics.jsonl",
                  metrics_records(inv.command + "/" + seed_dir(seed), seed, "test", e));
    for (const auto& t : e.per_type) std::cout << t.task_type << " " << t.rouge_l << "\n";
    std::cout << "average " << e.aggregate << "\n";
  }
}

void export_emb(const Invocation& inv) {
  const RunConfig& c = inv.config;
  require_arm(is_embedder(c.arm), inv, "an embedder arm");
  for (std::uint64_t seed : c.seeds) {
    const RunContext context(c, seed);
    const ArmRun run = train_arm(c, context, c.arm);
    const fs::path dir = inv.root / inv.command / seed_dir(seed);
    const auto& tasks = context.splits().meta_train;
    write_embeddings(dir / "definition.tsv",
                     export_embeddings(context.bank(), tasks, run.theta, nullptr, EmbeddingMode::Definition));
    write_embeddings(dir / "learned_definition.tsv",
                     export_embeddings(context.bank(), tasks, run.theta, &*run.phi, EmbeddingMode::LearnedDefinition));
    std::cout << dir.string() << "\n";
  }
}

void dispatch(const Invocation& inv) {
  write_config(inv);
  const fs::path dir = inv.root / inv.command;
  if (inv.command == "gen-suite") gen_suite(inv);
  else if (inv.command == "train-baseline") train(inv, false);
  else if (inv.command == "train-bilevel") train(inv, true);
  else if (inv.command == "poc") std::cout << format_poc_summary(run_proof_of_concept(inv.config, dir));
  else if (inv.command == "compare") std::cout << format_comparison(run_main_comparison(inv.config, dir));
  else if (inv.command == "sweep")
    std::cout << format_sweep(run_sweeps(inv.config, dir / sweep_axis_name(inv.config.sweep_axis)));
  else if (inv.command == "eval") eval(inv);
  else if (inv.command == "export-emb") export_emb(inv);
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Bilevel instruction optimization on a synthetic task suite.", "bilopt"};
  app.require_subcommand(1, 1);
  std::string config_path, out;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-suite", "Generate the task suite and write it as a fixture file"},
      {"train-baseline", "Instruction-tune a model with a fixed instruction source"},
      {"train-bilevel", "Train a model and learnable instructions by bilevel optimization"},
      {"poc", "Exemplar-vs-blank selection experiment with both extractors and baselines"},
      {"compare", "Train and evaluate every configured arm over the seed list"},
      {"sweep", "Run one configuration per sweep point"},
      {"eval", "Evaluate a saved model checkpoint on the test split"},
      {"export-emb", "Export per-task instruction embeddings with a 2-D projection"},
  };
  std::vector<CLI::Option*> seed_options;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Config file (section.key = value lines)");
    seed_options.push_back(sub->add_option("--seed", seed, "Run this seed only"));
    sub->add_option("--out", out, "Output root (default: run.out, then $BILOPT_OUT)");
    sub->add_option("--override", overrides, "KEY=VALUE, repeatable")->take_all();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  try {
    ConfigMap map;
    if (!config_path.empty()) map = load_config_file(config_path);
    for (const auto& o : overrides) apply_override(map, o);
    inv.config = run_config_from_map(map);
    bool seed_given = false;
    for (auto* opt : seed_options) seed_given = seed_given || opt->count() > 0;
    if (seed_given) inv.config.seeds = {seed};
    if (!out.empty()) inv.root = out;
    else if (!inv.config.out.empty()) inv.root = inv.config.out;
    else if (const char* env = std::getenv("BILOPT_OUT"); env != nullptr && *env != '\0') inv.root = env;
    else throw ConfigError("no output root: pass --out, set run.out, or set BILOPT_OUT");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    dispatch(inv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace bilopt::harness
