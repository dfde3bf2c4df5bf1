#pragma once

// Learnable instruction parameterizations. Embedders emit instruction rows
// directly (one matrix per task, or converted from an instance latent);
// extractors score a candidate pool of formatted exemplars and select one
// with a straight-through argmax.

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bilopt/autodiff.hpp"
#include "bilopt/model.hpp"
#include "bilopt/tasks.hpp"

namespace bilopt::instructions {

using autodiff::Tensor;
using model::EmbeddedSequence;

struct EmbedderDP {
  std::vector<int> task_ids;
  std::vector<Tensor> matrices;  // l x d, parallel to task_ids
};

struct EmbedderIC {
  Tensor vocab_embedding;  // v x d'
  Tensor conversion;       // l x d x d'
};

struct ExtractorDP {
  std::vector<int> task_ids;
  std::vector<Tensor> logits;  // length N_t, parallel to task_ids
};

struct ExtractorIC {
  Tensor vocab_embedding;  // v x d'
  Tensor bilinear;         // d' x d'
};

using InstructionParams = std::variant<EmbedderDP, EmbedderIC, ExtractorDP, ExtractorIC>;

std::string kind_name(const InstructionParams& phi);
bool is_extractor(const InstructionParams& phi);

/// All tensors of φ in a fixed order.
std::vector<Tensor> tensors(const InstructionParams& phi);
/// Same variant and bookkeeping with the tensors replaced (in `tensors` order).
InstructionParams with_tensors(const InstructionParams& phi, std::span<const Tensor> ts);
/// Fresh requires-grad leaves holding copies of every value.
InstructionParams clone_leaves(const InstructionParams& phi);

EmbedderDP init_embedder_dp(std::span<const int> task_ids, std::size_t l, std::size_t d, std::mt19937_64& rng);
EmbedderIC init_embedder_ic(std::size_t vocab, std::size_t l, std::size_t d, std::size_t d_latent,
                            std::mt19937_64& rng);
/// Zero logits, so every pool starts uniform.
ExtractorDP init_extractor_dp(std::span<const int> task_ids, std::span<const std::size_t> pool_sizes);
/// Uniform(-0.1, 0.1) embedding table, zero bilinear form.
ExtractorIC init_extractor_ic(std::size_t vocab, std::size_t d_latent, std::mt19937_64& rng);

/// Mean of the φ-side embedding rows of z, as a 1 x d' row.
Tensor embed_instance_latent(std::span<const int> z, const Tensor& vocab_embedding);

EmbeddedSequence embedder_dp_instruction(int task_id, const EmbedderDP& p);
EmbeddedSequence embedder_ic_instruction(std::span<const int> z, const EmbedderIC& p);

/// softmax(v_t) as a 1 x N_t row.
Tensor extractor_dp_probs(int task_id, const ExtractorDP& p);
/// softmax_j(h_j^T W h_query) as a 1 x N row.
Tensor extractor_ic_probs(std::span<const int> query, const std::vector<std::vector<int>>& pool, const ExtractorIC& p);

/// Right-pads every candidate with the blank token (or truncates) to `length`;
/// length 0 means the longest candidate in the pool.
std::vector<std::vector<int>> pad_candidates(const std::vector<std::vector<int>>& pool, std::size_t length = 0);

/// Forward: V_θ rows of the argmax candidate. Backward: as the probability
/// mixture of all candidates' V_θ rows. Candidates must share one length.
EmbeddedSequence extract_instruction(const Tensor& probs, const std::vector<std::vector<int>>& padded,
                                     const model::ModelParams& theta);
/// The probability-weighted mixture itself; offered only for evaluation-time
/// comparison.
EmbeddedSequence expected_instruction(const Tensor& probs, const std::vector<std::vector<int>>& padded,
                                      const model::ModelParams& theta);

/// Learned rows first, then the manual rows when present.
EmbeddedSequence compose_instruction(const EmbeddedSequence& learned, const std::optional<EmbeddedSequence>& manual);

/// Index of `task_id` in a per-task parameter list; throws on unknown tasks.
std::size_t task_slot(std::span<const int> task_ids, int task_id);

}  // namespace bilopt::instructions
