#pragma once

// Synthetic task suite: eight rule families over a small content alphabet,
// each task carrying a structured definition, a generator seed, and
// (input, output) instances. Also splits, candidate pools and clustering.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "bilopt/model.hpp"

namespace bilopt::tasks {

enum class Family { Copy, Reverse, Rotate, Substitution, SelectKth, Majority, Presence, Parity };

const std::vector<Family>& all_families();
std::string family_name(Family f);
/// Inverse of family_name; throws std::invalid_argument on unknown names.
Family family_from_name(const std::string& name);
/// Families whose output is a single label token rather than a sequence.
bool is_label_family(Family f);

/// Token layout: 0 blank, 1 end-of-sequence, then markers, family tokens,
/// parameter numerals and finally the content alphabet.
struct Vocabulary {
  std::size_t alphabet = 8;
  std::size_t numerals = 4;

  static constexpr int kIn = 2;
  static constexpr int kOut = 3;
  static constexpr int kTrue = 4;
  static constexpr int kFalse = 5;
  static constexpr int kSep = 6;
  static constexpr int kKindSeq = 7;
  static constexpr int kKindLabel = 8;
  static constexpr int kFirstFamily = 9;

  int family(Family f) const { return kFirstFamily + static_cast<int>(f); }
  int numeral(std::size_t k) const;
  int content(std::size_t i) const;
  bool is_content(int token) const;
  std::size_t content_index(int token) const;
  /// Total token count, i.e. the model vocabulary size.
  std::size_t size() const;
};

struct TaskInstance {
  std::vector<int> x;
  std::vector<int> y;
  bool operator==(const TaskInstance&) const = default;
};

struct Task {
  int id = 0;
  Family family = Family::Copy;
  std::uint64_t gen_seed = 0;
  /// Family-specific rule parameters: rotation amount, select index, queried
  /// content index, or the substitution permutation.
  std::vector<int> params;
  std::vector<int> definition;
  std::vector<TaskInstance> instances;

  std::string type() const { return family_name(family); }
};

struct SuiteConfig {
  std::uint64_t seed = 1;
  std::vector<Family> families = all_families();
  std::size_t tasks_per_family = 2;
  std::size_t instances_per_task = 64;
  std::size_t alphabet = 8;
  std::size_t min_len = 2;
  std::size_t max_len = 5;
};

struct Suite {
  Vocabulary vocab;
  std::vector<Task> tasks;
};

Suite generate_task_suite(const SuiteConfig& config);

/// Applies the family rule of `task` to an input.
std::vector<int> apply_rule(const Task& task, const Vocabulary& vocab, const std::vector<int>& x);
/// Definition tokens derived from family and parameters.
std::vector<int> make_definition(Family f, const std::vector<int>& params, const Vocabulary& vocab);
/// Definition followed by a separator and a block of `count` content tokens
/// drawn from the task's generator seed; stands in for extra instruction text.
std::vector<int> definition_with_distractors(const Task& task, const Vocabulary& vocab, std::size_t count);

/// [IN] x [OUT] y
std::vector<int> format_instance(const TaskInstance& inst);
/// Inverse of format_instance; throws std::invalid_argument on malformed input.
TaskInstance parse_instance(const std::vector<int>& z);

// ---- splits ----------------------------------------------------------------

struct SplitSpec {
  std::vector<std::string> meta_train;
  std::vector<std::string> meta_test;
  std::vector<std::string> test;
  /// Leading instances of every task held out for validation.
  std::size_t validation_per_task = 8;
};

struct Splits {
  SplitSpec spec;
  std::vector<std::size_t> meta_train;  // task indices into the suite
  std::vector<std::size_t> meta_test;
  std::vector<std::size_t> test;
};

/// Checks disjointness and presence of every named type, then assigns tasks.
Splits make_splits(const std::vector<Task>& tasks, const SplitSpec& spec);

/// Random assignment of the suite's task types to the three roles with the
/// given counts.
SplitSpec random_split(const std::vector<Task>& tasks, std::size_t meta_train, std::size_t meta_test, std::size_t test,
                       std::size_t validation_per_task, std::uint64_t seed);

/// Draws `count` random splits that share the test types of `base` and
/// returns the index of the one with the highest score (lowest index on ties)
/// together with the candidates.
struct SplitSearch {
  std::vector<SplitSpec> candidates;
  std::vector<double> scores;
  std::size_t best = 0;
};
SplitSearch select_best_split(const std::vector<Task>& tasks, const SplitSpec& base, std::size_t count,
                              std::uint64_t seed, const std::function<double(const SplitSpec&)>& score);

std::vector<TaskInstance> training_instances(const Task& task, std::size_t validation_per_task);
std::vector<TaskInstance> validation_instances(const Task& task, std::size_t validation_per_task);

// ---- candidate pools -------------------------------------------------------

struct CandidatePool {
  int task_id = 0;
  std::vector<std::vector<int>> candidates;  // formatted instances
  std::size_t size() const { return candidates.size(); }
};

/// N formatted training instances; without replacement when the task has at
/// least N of them, with replacement otherwise.
CandidatePool sample_candidates(const Task& task, std::size_t n, std::size_t validation_per_task, std::uint64_t seed);

// ---- clustering ------------------------------------------------------------

/// Mean definition-token embedding of each task under the model's table.
std::vector<std::vector<double>> definition_embeddings(const std::vector<Task>& tasks,
                                                       const model::ModelParams& params);

/// Lloyd's k-means with k-means++ seeding; stops when assignments repeat or
/// after 100 rounds. Returns cluster members as indices into `points`.
std::vector<std::vector<std::size_t>> split_kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                                                   std::uint64_t seed);

// ---- suite text format -----------------------------------------------------
//
//   suite v1 <alphabet> <numerals>
//   task <id> <type> <gen_seed> params <n> <p...> def <n> <tokens...>
//   inst <x tokens...> -> <y tokens...>
//   ...
//   end

void write_suite(std::ostream& out, const Suite& suite);
Suite read_suite(std::istream& in);

}  // namespace bilopt::tasks
