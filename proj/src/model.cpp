#include "bilopt/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace bilopt::model {

namespace ad = autodiff;

namespace {

Tensor uniform_leaf(ad::Shape shape, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::leaf(std::move(shape), std::move(v));
}

void check_target(const char* op, std::span<const int> target, std::size_t vocab) {
  if (target.empty()) throw std::invalid_argument(std::string(op) + ": empty target");
  for (int t : target) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::invalid_argument(std::string(op) + ": target token " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(vocab));
    }
  }
}

void check_sequence(const char* op, const EmbeddedSequence& seq, const ModelParams& params) {
  if (seq.rank() != 2 || seq.rows() == 0 || seq.cols() != params.width()) {
    throw std::invalid_argument(std::string(op) + ": expected a (n x " + std::to_string(params.width()) +
                                ") sequence with n >= 1, got " + ad::to_string(seq.shape()));
  }
}

Tensor context(const EmbeddedSequence& seq, const ModelParams& params) {
  return ad::tanh(ad::matmul(ad::mean_rows(seq), params.enc));
}

// Hidden states for each step given the previous-token rows (T x d).
Tensor hidden(const Tensor& ctx, const Tensor& prev, const ModelParams& params) {
  const std::size_t d = params.width();
  const Tensor from_ctx = ad::matmul(ctx, ad::slice_rows(params.dec, 0, d));
  const Tensor from_prev = ad::matmul(prev, ad::slice_rows(params.dec, d, d));
  return ad::tanh(ad::add(from_prev, ad::broadcast_rows(ad::add(from_ctx, params.dec_bias), prev.rows())));
}

Tensor shifted_targets(std::span<const int> target, const ModelParams& params) {
  const Tensor bos = Tensor::zeros({1, params.width()});
  if (target.size() == 1) return bos;
  const Tensor rest = ad::gather_rows(params.embedding, target.first(target.size() - 1));
  return ad::concat_rows(std::vector<Tensor>{bos, rest});
}

Tensor step_logits(const EmbeddedSequence& seq, std::span<const int> target, const ModelParams& params) {
  const Tensor h = hidden(context(seq, params), shifted_targets(target, params), params);
  return ad::matmul(h, ad::transpose(params.embedding));
}

// ---- little-endian stream helpers ----

template <class T>
void put(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("checkpoint " + path.string() + ": truncated");
    bits |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

constexpr char kMagic[8] = {'B', 'I', 'L', 'O', 'P', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

ModelParams ModelParams::from_tensors(std::span<const Tensor> ts) {
  if (ts.size() != 4) throw std::invalid_argument("ModelParams: expected 4 tensors, got " + std::to_string(ts.size()));
  ModelParams p{ts[0], ts[1], ts[2], ts[3]};
  const std::size_t d = p.width();
  if (p.enc.shape() != ad::Shape{d, d} || p.dec.shape() != ad::Shape{2 * d, d} ||
      p.dec_bias.shape() != ad::Shape{1, d}) {
    throw std::invalid_argument("ModelParams: inconsistent shapes " + ad::to_string(p.embedding.shape()) + " " +
                                ad::to_string(p.enc.shape()) + " " + ad::to_string(p.dec.shape()) + " " +
                                ad::to_string(p.dec_bias.shape()));
  }
  return p;
}

const std::vector<std::string>& ModelParams::names() {
  static const std::vector<std::string> n{"embedding", "enc", "dec", "dec_bias"};
  return n;
}

ModelParams ModelParams::clone_leaves() const {
  return {embedding.clone_leaf(), enc.clone_leaf(), dec.clone_leaf(), dec_bias.clone_leaf()};
}

ModelParams init_model(std::size_t vocab, std::size_t d, std::mt19937_64& rng, double embedding_scale) {
  if (vocab < 2 || d == 0) throw std::invalid_argument("init_model: need vocab >= 2 and d >= 1");
  ModelParams p;
  p.embedding = uniform_leaf({vocab, d}, embedding_scale, rng);
  p.enc = uniform_leaf({d, d}, std::sqrt(6.0 / (2.0 * d)), rng);
  p.dec = uniform_leaf({2 * d, d}, std::sqrt(6.0 / (3.0 * d)), rng);
  p.dec_bias = Tensor::leaf({1, d}, std::vector<double>(d, 0.0));
  return p;
}

ModelParams zero_model(std::size_t vocab, std::size_t d) {
  return {Tensor::leaf({vocab, d}, std::vector<double>(vocab * d, 0.0)),
          Tensor::leaf({d, d}, std::vector<double>(d * d, 0.0)),
          Tensor::leaf({2 * d, d}, std::vector<double>(2 * d * d, 0.0)),
          Tensor::leaf({1, d}, std::vector<double>(d, 0.0))};
}

EmbeddedSequence embed_tokens(std::span<const int> tokens, const ModelParams& params) {
  if (tokens.empty()) throw std::invalid_argument("embed_tokens: empty token sequence");
  return ad::gather_rows(params.embedding, tokens);
}

EmbeddedSequence concat_instruction(const EmbeddedSequence& instruction, const EmbeddedSequence& input) {
  if (instruction.rank() != 2 || input.rank() != 2 || instruction.cols() != input.cols()) {
    throw std::invalid_argument("concat_instruction: width mismatch " + ad::to_string(instruction.shape()) + " vs " +
                                ad::to_string(input.shape()));
  }
  return ad::concat_rows(std::vector<Tensor>{instruction, input});
}

Tensor sequence_logprob(const EmbeddedSequence& seq, std::span<const int> target, const ModelParams& params) {
  check_sequence("sequence_logprob", seq, params);
  check_target("sequence_logprob", target, params.vocab());
  return ad::sum(ad::pick(ad::log_softmax(step_logits(seq, target, params)), target));
}

Tensor step_distributions(const EmbeddedSequence& seq, std::span<const int> target, const ModelParams& params) {
  check_sequence("step_distributions", seq, params);
  check_target("step_distributions", target, params.vocab());
  return ad::softmax(step_logits(seq, target, params));
}

Tensor nll_loss(std::span<const Example> batch, const ModelParams& params) {
  if (batch.empty()) throw std::invalid_argument("nll_loss: empty batch");
  Tensor total;
  for (const Example& ex : batch) {
    const Tensor lp = sequence_logprob(ex.seq, ex.target, params);
    total = total.defined() ? ad::add(total, lp) : lp;
  }
  return ad::scale(total, -1.0 / static_cast<double>(batch.size()));
}

std::vector<int> greedy_decode(const EmbeddedSequence& seq, const ModelParams& params, std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  check_sequence("greedy_decode", seq, params);
  ad::NoGradGuard guard;
  const Tensor ctx = context(seq, params);
  const Tensor emb_t = ad::transpose(params.embedding);
  std::vector<int> out;
  Tensor prev = Tensor::zeros({1, params.width()});
  while (out.size() < max_len) {
    const Tensor logits = ad::matmul(hidden(ctx, prev, params), emb_t);
    const int next = static_cast<int>(ad::argmax(logits.values()));
    if (next == kEos) break;
    out.push_back(next);
    prev = ad::gather_rows(params.embedding, std::span<const int>(&out.back(), 1));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, entries.size());
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put<std::uint64_t>(out, dim);
    for (double v : t.values()) put<double>(out, v);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kMagic)) throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw std::runtime_error("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  const auto count = get<std::uint64_t>(in, path);
  NamedTensors entries;
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string name(get<std::uint32_t>(in, path), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    ad::Shape shape(get<std::uint32_t>(in, path));
    for (auto& dim : shape) dim = get<std::uint64_t>(in, path);
    std::vector<double> values(ad::numel(shape));
    for (double& v : values) v = get<double>(in, path);
    entries.emplace_back(std::move(name), Tensor::leaf(std::move(shape), std::move(values)));
  }
  return entries;
}

NamedTensors named(const ModelParams& params, const std::string& prefix) {
  NamedTensors out;
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) out.emplace_back(prefix + ModelParams::names()[i], ts[i]);
  return out;
}

ModelParams model_from_checkpoint(const NamedTensors& entries, const std::string& prefix) {
  std::vector<Tensor> ts;
  for (const auto& n : ModelParams::names()) {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.first == prefix + n; });
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing entry " + prefix + n);
    ts.push_back(it->second);
  }
  return ModelParams::from_tensors(ts);
}

}  // namespace bilopt::model
