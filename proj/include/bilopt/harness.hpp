#pragma once

// Experiment runner: builds the suite and splits for a seed, trains any arm,
// writes metrics and traces, and runs the proof-of-concept, the arm
// comparison, the sweeps and the embedding export.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bilopt/bilevel.hpp"
#include "bilopt/config.hpp"
#include "bilopt/evaluation.hpp"
#include "bilopt/instructions.hpp"
#include "bilopt/model.hpp"
#include "bilopt/tasks.hpp"
#include "bilopt/training.hpp"

namespace bilopt::harness {

/// Suite, splits and instruction bank for one (config, seed). Not movable:
/// the bank refers to the suite.
class RunContext {
 public:
  RunContext(const RunConfig& config, std::uint64_t seed);
  RunContext(const RunContext&) = delete;
  RunContext& operator=(const RunContext&) = delete;

  std::uint64_t seed() const { return seed_; }
  const tasks::Suite& suite() const { return *suite_; }
  const tasks::Splits& splits() const { return splits_; }
  const training::InstructionBank& bank() const { return *bank_; }
  /// Meta-train followed by meta-test task indices.
  std::vector<std::size_t> training_tasks() const;

 private:
  std::uint64_t seed_;
  std::unique_ptr<tasks::Suite> suite_;
  tasks::Splits splits_;
  std::unique_ptr<training::InstructionBank> bank_;
};

struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string split;
  std::string task_type;  // "average" for the aggregate line
  double rouge_l = 0.0;
  std::size_t n_instances = 0;
};

/// One record per task type followed by the aggregate.
std::vector<MetricsRecord> metrics_records(const std::string& run_id, std::uint64_t seed, const std::string& split,
                                           const Evaluation& evaluation);
std::string metrics_line(const MetricsRecord& record);
void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);

/// Zero-shot for definition-bearing and embedder arms, one-shot for exemplar,
/// blank and extractor arms, unless the config names a mode.
TestingMode arm_testing_mode(Arm arm, const RunConfig& config);

struct ArmRun {
  model::ModelParams theta;
  std::optional<instructions::InstructionParams> phi;
  std::vector<bilevel::TraceRecord> trace;
  std::size_t warnings = 0;
  /// (outer step, one-shot test ROUGE-L), when requested.
  std::vector<std::pair<std::size_t, double>> curve;
  std::optional<double> final_selection_pct;
};

struct ArmOutputs {
  std::filesystem::path trace;  // empty: not written
  std::size_t curve_every = 0;  // 0: no curve
};

/// Initializes θ (and φ) from the seed and trains the arm.
ArmRun train_arm(const RunConfig& config, const RunContext& context, Arm arm, const ArmOutputs& outputs = {});

/// Scores θ on the test split in the arm's testing mode.
Evaluation evaluate_arm(const RunConfig& config, const RunContext& context, Arm arm, const model::ModelParams& theta);

struct PocSeed {
  std::uint64_t seed = 0;
  double exemplar_one_shot = 0.0;  // always-exemplar baseline
  double blank_one_shot = 0.0;     // always-blank baseline
  double dp_selection = 0.0;       // end-of-run exemplar selection, percent
  double ic_selection = 0.0;
  double dp_one_shot = 0.0;
  double ic_one_shot = 0.0;
};

struct PocSummary {
  std::vector<PocSeed> seeds;
};

/// Baselines and both extractors on the {exemplar, blank} design, per seed.
/// Writes traces, curves and metrics under `out`.
PocSummary run_proof_of_concept(const RunConfig& config, const std::filesystem::path& out);
std::string format_poc_summary(const PocSummary& summary);

struct ArmScores {
  Arm arm = Arm::Definition;
  TestingMode mode = TestingMode::ZeroShot;
  std::vector<Evaluation> per_seed;  // parallel to Comparison::seeds
};

struct Comparison {
  std::vector<std::uint64_t> seeds;
  std::vector<ArmScores> arms;
};

/// Every arm in config.compare_arms over every seed.
Comparison run_main_comparison(const RunConfig& config, const std::filesystem::path& out);
/// Rows: each test type, then Average; columns: arms; cells: mean ± t
/// half-width over seeds, ROUGE-L in percent.
std::string format_comparison(const Comparison& comparison);

struct SweepPoint {
  std::string label;
  std::vector<double> per_seed;  // aggregate test ROUGE-L
  double mean = 0.0;
  double half_width = 0.0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::Length;
  std::vector<SweepPoint> points;
};

/// One full run of config.arm per point and seed.
SweepResult run_sweeps(const RunConfig& config, const std::filesystem::path& out);
std::string format_sweep(const SweepResult& result);

/// Meta-test types for the split-method comparison: `count` types nearest the
/// centroid of the largest k-means cluster of per-type mean definition
/// embeddings ("kmeans"), or `count` types drawn at random ("random").
tasks::SplitSpec meta_test_by_method(const RunConfig& config, const RunContext& context, const std::string& method,
                                     std::size_t count);
/// Meta-train/meta-test reassignment of the non-test types with `count` in
/// meta-test, drawn from the seed.
tasks::SplitSpec meta_test_by_count(const RunConfig& config, std::uint64_t seed, std::size_t count);

struct Projection {
  std::vector<std::array<double, 2>> points;
  std::array<double, 2> variance{0.0, 0.0};  // along each component
};

/// Principal-component projection of the rows onto the top two components.
/// Component signs are fixed so each axis's largest-magnitude loading is
/// positive.
Projection pca_2d(const std::vector<std::vector<double>>& rows);

enum class EmbeddingMode { Definition, LearnedDefinition };

struct EmbeddingRow {
  int task_id = 0;
  std::string task_type;
  std::vector<double> embedding;  // mean over instruction rows
  std::array<double, 2> projection{0.0, 0.0};
};

/// Mean-pooled instruction embedding per task plus its 2-D projection. The
/// learned mode needs an embedder φ; IC uses the task's first training
/// instance.
std::vector<EmbeddingRow> export_embeddings(const training::InstructionBank& bank,
                                            const std::vector<std::size_t>& task_indices,
                                            const model::ModelParams& theta,
                                            const instructions::InstructionParams* phi, EmbeddingMode mode);
void write_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows);

/// Command-line entry: 0 on success, 2 on usage or config errors, 1 on
/// runtime failure.
int cli_main(int argc, const char* const* argv);

}  // namespace bilopt::harness
