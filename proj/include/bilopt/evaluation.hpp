#pragma once

// Token-level ROUGE-L, greedy-decode evaluation of test tasks, and
// across-seed summaries.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bilopt/model.hpp"
#include "bilopt/training.hpp"

namespace bilopt::harness {

/// LCS F-measure; P = 0 for an empty candidate, F = 0 when P + R = 0.
/// Throws on an empty reference.
double rouge_l(std::span<const int> reference, std::span<const int> candidate);

enum class TestingMode { ZeroShot, OneShot };  // definition / one exemplar
std::string testing_mode_name(TestingMode m);
TestingMode testing_mode_from_name(const std::string& name);

struct TypeScore {
  std::string task_type;
  double rouge_l = 0.0;  // mean over the type's instances
  std::size_t n_instances = 0;
};

struct Evaluation {
  std::vector<TypeScore> per_type;  // sorted by type name
  double aggregate = 0.0;           // unweighted mean of per-type scores
};

double aggregate(const std::vector<TypeScore>& per_type);

/// Decodes every training instance of the given tasks with the mode's
/// instruction prepended and scores it against y.
Evaluation evaluate(const model::ModelParams& theta, const training::InstructionBank& bank,
                    const std::vector<std::size_t>& task_indices, TestingMode mode, std::size_t max_len);

/// Same, with the instruction source and instance set chosen explicitly
/// (validation instances when `validation` is set).
Evaluation evaluate_with(const model::ModelParams& theta, const training::InstructionBank& bank,
                         const std::vector<std::size_t>& task_indices, training::Source source, bool validation,
                         std::size_t max_len);

/// Two-sided 95% Student-t half-width of the mean; 0 for fewer than two values.
double t_half_width(std::span<const double> values);
double mean(std::span<const double> values);

}  // namespace bilopt::harness
