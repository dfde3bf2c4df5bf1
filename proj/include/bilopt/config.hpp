#pragma once

// Run configuration: a flat `section.key = value` text format with `#`
// comments, command-line overrides, and the typed RunConfig it fills.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilopt/bilevel.hpp"
#include "bilopt/tasks.hpp"
#include "bilopt/training.hpp"

namespace bilopt::harness {

/// Any problem with configuration text, keys or values. The CLI maps it to
/// exit status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ConfigMap = std::map<std::string, std::string>;

/// `origin` names the source in error messages (a path or "<override>").
ConfigMap parse_config_text(const std::string& text, const std::string& origin);
ConfigMap load_config_file(const std::filesystem::path& path);
/// Applies one `KEY=VALUE` override.
void apply_override(ConfigMap& map, const std::string& assignment);

/// Training arms. Baseline arms train θ alone on meta-train ∪ meta-test
/// with a fixed instruction; the rest are bilevel.
enum class Arm {
  Definition,
  DefinitionDistractors,
  ExemplarPerTask,
  ExemplarPerInstance,
  Blank,
  EmbedderDP,
  EmbedderIC,
  DefinitionEmbedderDP,
  DefinitionEmbedderIC,
  ExtractorDP,
  ExtractorIC,
};
std::string arm_name(Arm a);
Arm arm_from_name(const std::string& name);
bool is_bilevel(Arm a);
bool is_embedder(Arm a);
bool is_extractor(Arm a);
/// Fixed instruction source of a baseline arm.
training::Source baseline_source(Arm a);

enum class CandidateDesign { ExemplarBlank, Sampled };
enum class SweepAxis { Length, MetaTestCount, SplitMethod };
std::string sweep_axis_name(SweepAxis a);

struct RunConfig {
  tasks::SuiteConfig suite;  // suite.seed is replaced by the run seed
  tasks::SplitSpec split{{"copy", "substitution", "select_kth", "length_parity"}, {"reverse", "majority"},
                         {"rotate", "presence"}, 8};
  std::size_t distractors = 4;

  std::size_t d = 16;
  std::size_t d_latent = 8;
  std::size_t instruction_length = 64;
  std::size_t candidates = 32;
  std::size_t max_decode = 8;

  Arm arm = Arm::Definition;
  CandidateDesign design = CandidateDesign::Sampled;

  bilevel::HypergradConfig hypergrad;
  std::size_t outer_steps = 100;
  std::size_t batch_size = 8;
  std::size_t outer_batch_size = 8;
  std::size_t patience = 0;
  bool timing = false;

  std::size_t baseline_epochs = 20;
  std::size_t baseline_batch_size = 8;
  double baseline_lr = 0.5;
  bilevel::OptimizerKind baseline_optimizer = bilevel::OptimizerKind::Sgd;

  /// Empty: the arm's own mode (zero-shot for definition and embedder arms,
  /// one-shot otherwise).
  std::string eval_mode;
  std::filesystem::path eval_checkpoint;

  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path out;

  std::vector<Arm> compare_arms;
  std::size_t poc_curve_every = 10;

  SweepAxis sweep_axis = SweepAxis::Length;
  std::vector<std::size_t> sweep_lengths{1, 2, 4, 8};
  std::vector<std::size_t> sweep_meta_test_counts;
  std::size_t sweep_kmeans_k = 3;
};

/// Fills a RunConfig from defaults plus the map; unknown keys, malformed
/// values and broken invariants raise ConfigError.
RunConfig run_config_from_map(const ConfigMap& map);
/// Every key with its current value, one `key = value` per line, sorted.
std::string dump_config(const RunConfig& config);
/// All recognised keys.
std::vector<std::string> config_keys();

}  // namespace bilopt::harness
