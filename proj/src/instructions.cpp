#include "bilopt/instructions.hpp"

#include <algorithm>
#include <stdexcept>

namespace bilopt::instructions {

namespace ad = autodiff;

namespace {

Tensor uniform_leaf(ad::Shape shape, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::leaf(std::move(shape), std::move(v));
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

// Candidate V_θ blocks flattened to N x (len * d).
Tensor candidate_blocks(const std::vector<std::vector<int>>& padded, const model::ModelParams& theta) {
  if (padded.empty()) throw std::invalid_argument("extract_instruction: empty candidate set");
  const std::size_t len = padded.front().size();
  std::vector<int> all;
  for (const auto& c : padded) {
    if (c.size() != len) throw std::invalid_argument("extract_instruction: candidates differ in length; pad first");
    all.insert(all.end(), c.begin(), c.end());
  }
  return ad::reshape(model::embed_tokens(all, theta), {padded.size(), len * theta.width()});
}

}  // namespace

std::string kind_name(const InstructionParams& phi) {
  return std::visit(overloaded{[](const EmbedderDP&) { return std::string("embedder_dp"); },
                               [](const EmbedderIC&) { return std::string("embedder_ic"); },
                               [](const ExtractorDP&) { return std::string("extractor_dp"); },
                               [](const ExtractorIC&) { return std::string("extractor_ic"); }},
                    phi);
}

bool is_extractor(const InstructionParams& phi) {
  return std::holds_alternative<ExtractorDP>(phi) || std::holds_alternative<ExtractorIC>(phi);
}

std::vector<Tensor> tensors(const InstructionParams& phi) {
  return std::visit(overloaded{[](const EmbedderDP& p) { return p.matrices; },
                               [](const EmbedderIC& p) { return std::vector<Tensor>{p.vocab_embedding, p.conversion}; },
                               [](const ExtractorDP& p) { return p.logits; },
                               [](const ExtractorIC& p) { return std::vector<Tensor>{p.vocab_embedding, p.bilinear}; }},
                    phi);
}

InstructionParams with_tensors(const InstructionParams& phi, std::span<const Tensor> ts) {
  const auto current = tensors(phi);
  if (ts.size() != current.size()) {
    throw std::invalid_argument("with_tensors: expected " + std::to_string(current.size()) + " tensors, got " +
                                std::to_string(ts.size()));
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i].shape() != current[i].shape()) {
      throw std::invalid_argument("with_tensors: shape mismatch " + ad::to_string(ts[i].shape()) + " vs " +
                                  ad::to_string(current[i].shape()));
    }
  }
  return std::visit(overloaded{[&](const EmbedderDP& p) -> InstructionParams {
                                 return EmbedderDP{p.task_ids, {ts.begin(), ts.end()}};
                               },
                               [&](const EmbedderIC&) -> InstructionParams { return EmbedderIC{ts[0], ts[1]}; },
                               [&](const ExtractorDP& p) -> InstructionParams {
                                 return ExtractorDP{p.task_ids, {ts.begin(), ts.end()}};
                               },
                               [&](const ExtractorIC&) -> InstructionParams { return ExtractorIC{ts[0], ts[1]}; }},
                    phi);
}

InstructionParams clone_leaves(const InstructionParams& phi) {
  std::vector<Tensor> ts;
  for (const Tensor& t : tensors(phi)) ts.push_back(t.clone_leaf());
  return with_tensors(phi, ts);
}

EmbedderDP init_embedder_dp(std::span<const int> task_ids, std::size_t l, std::size_t d, std::mt19937_64& rng) {
  EmbedderDP p;
  for (int id : task_ids) {
    p.task_ids.push_back(id);
    p.matrices.push_back(uniform_leaf({l, d}, 0.1, rng));
  }
  return p;
}

EmbedderIC init_embedder_ic(std::size_t vocab, std::size_t l, std::size_t d, std::size_t d_latent,
                            std::mt19937_64& rng) {
  EmbedderIC p;
  p.vocab_embedding = uniform_leaf({vocab, d_latent}, 0.1, rng);
  p.conversion = uniform_leaf({l, d, d_latent}, 0.1, rng);
  return p;
}

ExtractorDP init_extractor_dp(std::span<const int> task_ids, std::span<const std::size_t> pool_sizes) {
  if (task_ids.size() != pool_sizes.size()) throw std::invalid_argument("init_extractor_dp: size mismatch");
  ExtractorDP p;
  for (std::size_t i = 0; i < task_ids.size(); ++i) {
    if (pool_sizes[i] == 0) throw std::invalid_argument("init_extractor_dp: empty pool");
    p.task_ids.push_back(task_ids[i]);
    p.logits.push_back(Tensor::leaf({pool_sizes[i]}, std::vector<double>(pool_sizes[i], 0.0)));
  }
  return p;
}

ExtractorIC init_extractor_ic(std::size_t vocab, std::size_t d_latent, std::mt19937_64& rng) {
  ExtractorIC p;
  p.vocab_embedding = uniform_leaf({vocab, d_latent}, 0.1, rng);
  p.bilinear = Tensor::leaf({d_latent, d_latent}, std::vector<double>(d_latent * d_latent, 0.0));
  return p;
}

std::size_t task_slot(std::span<const int> task_ids, int task_id) {
  const auto it = std::find(task_ids.begin(), task_ids.end(), task_id);
  if (it == task_ids.end()) throw std::invalid_argument("no instruction parameters for task " + std::to_string(task_id));
  return static_cast<std::size_t>(it - task_ids.begin());
}

Tensor embed_instance_latent(std::span<const int> z, const Tensor& vocab_embedding) {
  if (z.empty()) throw std::invalid_argument("embed_instance_latent: empty sequence");
  return ad::mean_rows(ad::gather_rows(vocab_embedding, z));
}

EmbeddedSequence embedder_dp_instruction(int task_id, const EmbedderDP& p) {
  return p.matrices[task_slot(p.task_ids, task_id)];
}

EmbeddedSequence embedder_ic_instruction(std::span<const int> z, const EmbedderIC& p) {
  const Tensor h = embed_instance_latent(z, p.vocab_embedding);
  return ad::contract_last(p.conversion, h);
}

Tensor extractor_dp_probs(int task_id, const ExtractorDP& p) {
  const Tensor& v = p.logits[task_slot(p.task_ids, task_id)];
  return ad::softmax(ad::reshape(v, {1, v.size()}));
}

Tensor extractor_ic_probs(std::span<const int> query, const std::vector<std::vector<int>>& pool, const ExtractorIC& p) {
  if (pool.empty()) throw std::invalid_argument("extractor_ic_probs: empty pool");
  std::vector<Tensor> latents;
  for (const auto& z : pool) latents.push_back(embed_instance_latent(z, p.vocab_embedding));
  const Tensor h_pool = ad::concat_rows(latents);                             // N x d'
  const Tensor h_query = embed_instance_latent(query, p.vocab_embedding);     // 1 x d'
  const Tensor scores = ad::matmul(ad::matmul(h_pool, p.bilinear), ad::transpose(h_query));  // N x 1
  return ad::softmax(ad::transpose(scores));
}

std::vector<std::vector<int>> pad_candidates(const std::vector<std::vector<int>>& pool, std::size_t length) {
  if (length == 0)
    for (const auto& c : pool) length = std::max(length, c.size());
  std::vector<std::vector<int>> out;
  for (const auto& c : pool) {
    std::vector<int> p(c.begin(), c.begin() + std::min(c.size(), length));
    p.resize(length, model::kBlank);
    out.push_back(std::move(p));
  }
  return out;
}

EmbeddedSequence extract_instruction(const Tensor& probs, const std::vector<std::vector<int>>& padded,
                                     const model::ModelParams& theta) {
  const Tensor blocks = candidate_blocks(padded, theta);
  return ad::reshape(ad::straight_through_select(probs, blocks), {padded.front().size(), theta.width()});
}

EmbeddedSequence expected_instruction(const Tensor& probs, const std::vector<std::vector<int>>& padded,
                                      const model::ModelParams& theta) {
  const Tensor blocks = candidate_blocks(padded, theta);
  const Tensor row = ad::reshape(probs, {1, probs.size()});
  return ad::reshape(ad::matmul(row, blocks), {padded.front().size(), theta.width()});
}

EmbeddedSequence compose_instruction(const EmbeddedSequence& learned, const std::optional<EmbeddedSequence>& manual) {
  if (!manual) return learned;
  if (learned.rank() != 2 || manual->rank() != 2 || learned.cols() != manual->cols()) {
    throw std::invalid_argument("compose_instruction: width mismatch " + ad::to_string(learned.shape()) + " vs " +
                                ad::to_string(manual->shape()));
  }
  return ad::concat_rows(std::vector<Tensor>{learned, *manual});
}

}  // namespace bilopt::instructions
