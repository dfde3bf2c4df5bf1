#pragma once

// Toy conditional sequence model. The context is the tanh of the mean of the
// prompt rows times W_enc; each decoding step mixes the context with the
// previous target embedding through W_dec and scores tokens against the tied
// embedding table.

#include <cstddef>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bilopt/autodiff.hpp"

namespace bilopt::model {

using autodiff::Tensor;

inline constexpr int kBlank = 0;
inline constexpr int kEos = 1;

/// An embedded token sequence: a (length x d) tensor with length >= 1.
using EmbeddedSequence = Tensor;

struct ModelParams {
  Tensor embedding;  // v x d, also the output projection
  Tensor enc;        // d x d
  Tensor dec;        // 2d x d, rows [0, d) act on the context
  Tensor dec_bias;   // 1 x d

  std::size_t vocab() const { return embedding.rows(); }
  std::size_t width() const { return embedding.cols(); }

  std::vector<Tensor> tensors() const { return {embedding, enc, dec, dec_bias}; }
  static ModelParams from_tensors(std::span<const Tensor> ts);
  static const std::vector<std::string>& names();
  /// Fresh requires-grad leaves holding copies of every value.
  ModelParams clone_leaves() const;
};

/// Uniform(-scale, scale) on the embedding table, Glorot-style uniform on the
/// dense weights, zero bias.
ModelParams init_model(std::size_t vocab, std::size_t d, std::mt19937_64& rng, double embedding_scale = 0.5);
ModelParams zero_model(std::size_t vocab, std::size_t d);

EmbeddedSequence embed_tokens(std::span<const int> tokens, const ModelParams& params);
EmbeddedSequence concat_instruction(const EmbeddedSequence& instruction, const EmbeddedSequence& input);

/// Sum over t of log p(target_t | seq, target_<t).
Tensor sequence_logprob(const EmbeddedSequence& seq, std::span<const int> target, const ModelParams& params);

struct Example {
  EmbeddedSequence seq;
  std::vector<int> target;
};

/// Mean negative log-probability over the batch.
Tensor nll_loss(std::span<const Example> batch, const ModelParams& params);

/// Per-step next-token distributions under teacher forcing (T x v).
Tensor step_distributions(const EmbeddedSequence& seq, std::span<const int> target, const ModelParams& params);

/// Argmax decoding fed with its own outputs; stops after emitting kEos (not
/// included in the result) or after max_len tokens.
std::vector<int> greedy_decode(const EmbeddedSequence& seq, const ModelParams& params, std::size_t max_len);

// ---- checkpoints -----------------------------------------------------------
//
// Layout, all integers little-endian:
//   "BILOPTCK" | u32 version (1) | u64 entry count
//   per entry: u32 name length | name bytes | u32 rank | u64 dims[rank] |
//              f64 values[prod(dims)] (IEEE-754, little-endian, row-major)

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::filesystem::path& path);

NamedTensors named(const ModelParams& params, const std::string& prefix = "theta/");
/// Picks the entries under `prefix` back into a ModelParams.
ModelParams model_from_checkpoint(const NamedTensors& entries, const std::string& prefix = "theta/");

}  // namespace bilopt::model
