#pragma once

// Instruction-aware training on a task suite: manual instruction sources,
// batch sampling, the bilevel problem for each learnable parameterization,
// and the single-level instruction-tuning baseline.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bilopt/bilevel.hpp"
#include "bilopt/instructions.hpp"
#include "bilopt/model.hpp"
#include "bilopt/tasks.hpp"

namespace bilopt::training {

using autodiff::Tensor;

/// Fixed (non-learned) training instruction sources.
enum class Source {
  Definition,
  DefinitionDistractors,  // definition, SEP, then distractor content tokens
  ExemplarPerTask,        // one exemplar reused for every instance of a task
  ExemplarPerInstance,    // a different exemplar drawn once per instance
  Blank,                  // a single blank token
};
std::string source_name(Source s);
Source source_from_name(const std::string& name);

/// Everything derived once from a suite: training and validation instances,
/// and the manual instructions of every task.
class InstructionBank {
 public:
  InstructionBank(const tasks::Suite& suite, std::size_t validation_per_task, std::size_t distractors,
                  std::uint64_t seed);

  const tasks::Suite& suite() const { return *suite_; }
  const tasks::Task& task(std::size_t index) const { return suite_->tasks[index]; }
  std::size_t size() const { return suite_->tasks.size(); }
  std::size_t vocab() const { return suite_->vocab.size(); }
  std::size_t validation_per_task() const { return validation_per_task_; }

  const std::vector<tasks::TaskInstance>& train(std::size_t task) const { return train_[task]; }
  const std::vector<tasks::TaskInstance>& validation(std::size_t task) const { return validation_[task]; }

  /// Instruction tokens for training instance `instance` of `task`.
  const std::vector<int>& instruction(Source s, std::size_t task, std::size_t instance) const;
  const std::vector<int>& definition(std::size_t index) const { return suite_->tasks[index].definition; }
  /// Formatted exemplar shared by all instances of the task.
  const std::vector<int>& exemplar(std::size_t task) const { return exemplar_[task]; }
  /// Testing-time exemplar: the first validation instance, formatted.
  const std::vector<int>& one_shot_exemplar(std::size_t task) const { return one_shot_[task]; }

 private:
  const tasks::Suite* suite_;
  std::size_t validation_per_task_;
  std::vector<std::vector<tasks::TaskInstance>> train_, validation_;
  std::vector<std::vector<int>> distractor_def_, exemplar_, one_shot_;
  std::vector<std::vector<std::vector<int>>> per_instance_;
  std::vector<int> blank_;
};

/// Training target: y followed by end-of-sequence.
std::vector<int> target_tokens(const tasks::TaskInstance& inst);
model::Example make_example(const model::EmbeddedSequence& instruction, const tasks::TaskInstance& inst,
                            const model::ModelParams& theta);

struct Slot {
  std::size_t task = 0;      // suite index
  std::size_t instance = 0;  // index into bank.train(task)
};

/// `size` slots: a task uniformly from `task_pool`, then one of its training
/// instances uniformly. Deterministic in (seed, stream, a, b).
std::vector<Slot> sample_batch(const InstructionBank& bank, const std::vector<std::size_t>& task_pool, std::size_t size,
                               std::uint64_t seed, std::uint64_t stream, std::size_t a, std::size_t b);

/// Candidate pools for the extractors, one per meta-train task.
struct ExtractorPools {
  std::vector<std::vector<std::vector<int>>> padded;  // parallel to the meta-train list
  /// Position of the true exemplar in each pool, when the pools were built
  /// for the {exemplar, blank} design; empty otherwise.
  std::vector<std::size_t> marked;
  /// Reverse the pool order on odd instances (instance-conditioned extractor
  /// only), so a tied start selects each order equally often.
  bool flip_per_instance = false;

  /// Pool seen by `instance` of meta-train slot `slot`, and the marked index
  /// in that order when present.
  std::vector<std::vector<int>> for_instance(std::size_t slot, std::size_t instance) const;
  std::optional<std::size_t> marked_for_instance(std::size_t slot, std::size_t instance) const;
};

/// N sampled training instances per task, padded with blanks to the longest.
ExtractorPools sample_pools(const InstructionBank& bank, const std::vector<std::size_t>& meta_train, std::size_t n,
                            std::uint64_t seed);
/// {exemplar, blank} per task, the blank candidate padded to the exemplar's
/// length. The order alternates across tasks.
ExtractorPools exemplar_blank_pools(const InstructionBank& bank, const std::vector<std::size_t>& meta_train,
                                    bool flip_per_instance);

struct BilevelSetup {
  const InstructionBank* bank = nullptr;
  std::vector<std::size_t> meta_train, meta_test;  // suite indices
  std::size_t batch_size = 8;
  std::size_t outer_batch_size = 8;
  /// Manual instruction of the outer loss: Definition or ExemplarPerTask.
  Source outer_instruction = Source::Definition;
  /// Embedders: learned rows followed by the definition.
  bool with_definition = false;
  ExtractorPools pools;  // extractors only
  std::uint64_t seed = 1;
};

/// Learned instruction rows for one inner-loss slot.
model::EmbeddedSequence learned_instruction(const BilevelSetup& setup, const instructions::InstructionParams& phi,
                                            const model::ModelParams& theta, const Slot& slot);

/// θ is the model tensor list (ModelParams::tensors order); φ is
/// instructions::tensors of `phi_template`.
bilevel::BilevelProblem make_problem(const BilevelSetup& setup, const instructions::InstructionParams& phi_template);

/// Outer loss on an explicit set of slots, manual instructions only.
Tensor outer_loss(const BilevelSetup& setup, const model::ModelParams& theta, const std::vector<Slot>& slots);

/// Percentage of meta-train training instances whose argmax candidate is the
/// marked exemplar; nullopt for embedders or unmarked pools.
std::optional<double> selection_pct(const BilevelSetup& setup, const instructions::InstructionParams& phi);

/// Fixed instruction source for the baseline, optionally with frozen learned
/// rows (an embedder φ) placed before the definition.
struct TuningSource {
  Source source = Source::Definition;
  std::optional<instructions::InstructionParams> frozen;
};

struct TuningConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 0.1;
  bilevel::OptimizerKind optimizer = bilevel::OptimizerKind::Sgd;
  std::uint64_t seed = 1;
};

/// Single-level training over every training instance of `task_indices`,
/// reshuffled each epoch. Returns the per-step losses; zero epochs leaves θ
/// untouched.
std::vector<double> instruction_tuning_train(model::ModelParams& theta, const InstructionBank& bank,
                                             const std::vector<std::size_t>& task_indices, const TuningSource& source,
                                             const TuningConfig& config);

}  // namespace bilopt::training
