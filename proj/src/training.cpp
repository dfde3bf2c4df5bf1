#include "bilopt/training.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

namespace bilopt::training {

namespace ad = autodiff;
namespace in = instructions;
using tasks::TaskInstance;

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return mix(mix(a) ^ (b + 0x632BE59BD9B4E019ull)); }

constexpr std::uint64_t kInnerStream = 1;
constexpr std::uint64_t kOuterStream = 2;

std::size_t meta_train_slot(const BilevelSetup& setup, std::size_t task) {
  const auto it = std::find(setup.meta_train.begin(), setup.meta_train.end(), task);
  if (it == setup.meta_train.end()) throw std::invalid_argument("task " + std::to_string(task) + " is not meta-train");
  return static_cast<std::size_t>(it - setup.meta_train.begin());
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

std::string source_name(Source s) {
  switch (s) {
    case Source::Definition: return "definition";
    case Source::DefinitionDistractors: return "definition_distractors";
    case Source::ExemplarPerTask: return "exemplar_per_task";
    case Source::ExemplarPerInstance: return "exemplar_per_instance";
    case Source::Blank: return "blank";
  }
  return "?";
}

Source source_from_name(const std::string& name) {
  for (Source s : {Source::Definition, Source::DefinitionDistractors, Source::ExemplarPerTask,
                   Source::ExemplarPerInstance, Source::Blank}) {
    if (source_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown instruction source '" + name + "'");
}

InstructionBank::InstructionBank(const tasks::Suite& suite, std::size_t validation_per_task, std::size_t distractors,
                                 std::uint64_t seed)
    : suite_(&suite), validation_per_task_(validation_per_task), blank_{model::kBlank} {
  for (const tasks::Task& t : suite.tasks) {
    train_.push_back(tasks::training_instances(t, validation_per_task));
    validation_.push_back(tasks::validation_instances(t, validation_per_task));
    const auto& tr = train_.back();
    if (tr.empty()) throw std::invalid_argument("task " + std::to_string(t.id) + " has no training instances");
    distractor_def_.push_back(tasks::definition_with_distractors(t, suite.vocab, distractors));
    std::mt19937_64 rng(mix(seed, t.gen_seed));
    exemplar_.push_back(tasks::format_instance(tr[std::uniform_int_distribution<std::size_t>(0, tr.size() - 1)(rng)]));
    std::vector<std::vector<int>> per;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      std::size_t j = i;
      if (tr.size() > 1) {
        j = std::uniform_int_distribution<std::size_t>(0, tr.size() - 2)(rng);
        if (j >= i) ++j;
      }
      per.push_back(tasks::format_instance(tr[j]));
    }
    per_instance_.push_back(std::move(per));
    const auto& val = validation_.back();
    one_shot_.push_back(tasks::format_instance(val.empty() ? tr.front() : val.front()));
  }
}

const std::vector<int>& InstructionBank::instruction(Source s, std::size_t task, std::size_t instance) const {
  switch (s) {
    case Source::Definition: return definition(task);
    case Source::DefinitionDistractors: return distractor_def_[task];
    case Source::ExemplarPerTask: return exemplar_[task];
    case Source::ExemplarPerInstance: return per_instance_[task].at(instance);
    case Source::Blank: return blank_;
  }
  throw std::logic_error("unhandled instruction source");
}

std::vector<int> target_tokens(const TaskInstance& inst) {
  std::vector<int> y = inst.y;
  y.push_back(model::kEos);
  return y;
}

model::Example make_example(const model::EmbeddedSequence& instruction, const TaskInstance& inst,
                            const model::ModelParams& theta) {
  return {model::concat_instruction(instruction, model::embed_tokens(inst.x, theta)), target_tokens(inst)};
}

std::vector<Slot> sample_batch(const InstructionBank& bank, const std::vector<std::size_t>& task_pool, std::size_t size,
                               std::uint64_t seed, std::uint64_t stream, std::size_t a, std::size_t b) {
  if (task_pool.empty()) throw std::invalid_argument("sample_batch: empty task pool");
  std::mt19937_64 rng(mix(mix(seed, stream), mix(a, b)));
  std::vector<Slot> out;
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t task = task_pool[std::uniform_int_distribution<std::size_t>(0, task_pool.size() - 1)(rng)];
    const std::size_t n = bank.train(task).size();
    out.push_back({task, std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)});
  }
  return out;
}

std::vector<std::vector<int>> ExtractorPools::for_instance(std::size_t slot, std::size_t instance) const {
  auto pool = padded.at(slot);
  if (flip_per_instance && instance % 2 == 1) std::reverse(pool.begin(), pool.end());
  return pool;
}

std::optional<std::size_t> ExtractorPools::marked_for_instance(std::size_t slot, std::size_t instance) const {
  if (marked.empty()) return std::nullopt;
  const std::size_t m = marked.at(slot);
  if (flip_per_instance && instance % 2 == 1) return padded.at(slot).size() - 1 - m;
  return m;
}

ExtractorPools sample_pools(const InstructionBank& bank, const std::vector<std::size_t>& meta_train, std::size_t n,
                            std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("sample_pools: N must be >= 1");
  ExtractorPools out;
  for (std::size_t t : meta_train) {
    const auto pool = tasks::sample_candidates(bank.task(t), n, bank.validation_per_task(), seed);
    out.padded.push_back(in::pad_candidates(pool.candidates));
  }
  return out;
}

ExtractorPools exemplar_blank_pools(const InstructionBank& bank, const std::vector<std::size_t>& meta_train,
                                    bool flip_per_instance) {
  ExtractorPools out;
  out.flip_per_instance = flip_per_instance;
  for (std::size_t s = 0; s < meta_train.size(); ++s) {
    const std::vector<int>& ex = bank.exemplar(meta_train[s]);
    const std::vector<int> blank{model::kBlank};
    if (s % 2 == 0) {
      out.padded.push_back(in::pad_candidates({ex, blank}));
      out.marked.push_back(0);
    } else {
      out.padded.push_back(in::pad_candidates({blank, ex}));
      out.marked.push_back(1);
    }
  }
  return out;
}

model::EmbeddedSequence learned_instruction(const BilevelSetup& setup, const in::InstructionParams& phi,
                                            const model::ModelParams& theta, const Slot& slot) {
  const InstructionBank& bank = *setup.bank;
  const TaskInstance& inst = bank.train(slot.task).at(slot.instance);
  const int task_id = bank.task(slot.task).id;
  model::EmbeddedSequence learned = std::visit(
      overloaded{
          [&](const in::EmbedderDP& p) { return in::embedder_dp_instruction(task_id, p); },
          [&](const in::EmbedderIC& p) { return in::embedder_ic_instruction(tasks::format_instance(inst), p); },
          [&](const in::ExtractorDP& p) {
            const std::size_t s = meta_train_slot(setup, slot.task);
            return in::extract_instruction(in::extractor_dp_probs(task_id, p), setup.pools.for_instance(s, slot.instance),
                                           theta);
          },
          [&](const in::ExtractorIC& p) {
            const std::size_t s = meta_train_slot(setup, slot.task);
            const auto pool = setup.pools.for_instance(s, slot.instance);
            return in::extract_instruction(in::extractor_ic_probs(tasks::format_instance(inst), pool, p), pool, theta);
          }},
      phi);
  if (setup.with_definition && !in::is_extractor(phi)) {
    return in::compose_instruction(learned, model::embed_tokens(bank.definition(slot.task), theta));
  }
  return learned;
}

Tensor outer_loss(const BilevelSetup& setup, const model::ModelParams& theta, const std::vector<Slot>& slots) {
  if (slots.empty()) throw std::invalid_argument("outer_loss: empty meta-test batch");
  std::vector<model::Example> batch;
  for (const Slot& s : slots) {
    const auto& tokens = setup.bank->instruction(setup.outer_instruction, s.task, s.instance);
    batch.push_back(make_example(model::embed_tokens(tokens, theta), setup.bank->train(s.task).at(s.instance), theta));
  }
  return model::nll_loss(batch, theta);
}

bilevel::BilevelProblem make_problem(const BilevelSetup& setup, const in::InstructionParams& phi_template) {
  if (setup.bank == nullptr) throw std::invalid_argument("make_problem: no instruction bank");
  if (setup.meta_train.empty() || setup.meta_test.empty()) {
    throw std::invalid_argument("make_problem: meta-train and meta-test must be nonempty");
  }
  if (in::is_extractor(phi_template) && setup.pools.padded.size() != setup.meta_train.size()) {
    throw std::invalid_argument("make_problem: extractor needs one candidate pool per meta-train task");
  }
  bilevel::BilevelProblem p;
  p.inner_loss = [setup, phi_template](const bilevel::TensorList& th, const bilevel::TensorList& ph,
                                       bilevel::BatchIndex idx) {
    const model::ModelParams theta = model::ModelParams::from_tensors(th);
    const in::InstructionParams phi = in::with_tensors(phi_template, ph);
    const auto slots =
        sample_batch(*setup.bank, setup.meta_train, setup.batch_size, setup.seed, kInnerStream, idx.outer, idx.inner);
    std::vector<model::Example> batch;
    for (const Slot& s : slots) {
      batch.push_back(make_example(learned_instruction(setup, phi, theta, s), setup.bank->train(s.task)[s.instance], theta));
    }
    return model::nll_loss(batch, theta);
  };
  p.outer_loss = [setup](const bilevel::TensorList& th, std::size_t outer) {
    const auto slots =
        sample_batch(*setup.bank, setup.meta_test, setup.outer_batch_size, setup.seed, kOuterStream, outer, 0);
    return outer_loss(setup, model::ModelParams::from_tensors(th), slots);
  };
  return p;
}

std::optional<double> selection_pct(const BilevelSetup& setup, const in::InstructionParams& phi) {
  if (!in::is_extractor(phi) || setup.pools.marked.empty()) return std::nullopt;
  ad::NoGradGuard guard;
  std::size_t hits = 0, total = 0;
  for (std::size_t s = 0; s < setup.meta_train.size(); ++s) {
    const std::size_t task = setup.meta_train[s];
    const auto& train = setup.bank->train(task);
    std::optional<std::size_t> dp_choice;
    if (const auto* p = std::get_if<in::ExtractorDP>(&phi)) {
      const Tensor probs = in::extractor_dp_probs(setup.bank->task(task).id, *p);
      dp_choice = ad::argmax(probs.values());
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
      std::size_t choice = 0;
      if (dp_choice) {
        choice = *dp_choice;
      } else {
        const auto& p = std::get<in::ExtractorIC>(phi);
        const Tensor probs = in::extractor_ic_probs(tasks::format_instance(train[i]), setup.pools.for_instance(s, i), p);
        choice = ad::argmax(probs.values());
      }
      hits += choice == *setup.pools.marked_for_instance(s, i) ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

std::vector<double> instruction_tuning_train(model::ModelParams& theta, const InstructionBank& bank,
                                             const std::vector<std::size_t>& task_indices, const TuningSource& source,
                                             const TuningConfig& config) {
  if (config.batch_size == 0) throw std::invalid_argument("instruction_tuning_train: batch size must be >= 1");
  if (source.frozen && in::is_extractor(*source.frozen)) {
    throw std::invalid_argument("instruction_tuning_train: frozen learned rows must come from an embedder");
  }
  std::vector<Slot> all;
  for (std::size_t t : task_indices)
    for (std::size_t i = 0; i < bank.train(t).size(); ++i) all.push_back({t, i});
  if (all.empty() && config.epochs > 0) throw std::invalid_argument("instruction_tuning_train: no training instances");

  BilevelSetup frozen_setup;
  frozen_setup.bank = &bank;
  bilevel::Optimizer opt(config.optimizer, config.lr);
  std::vector<Tensor> params = theta.tensors();
  std::vector<double> losses;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::mt19937_64 rng(mix(config.seed, e));
    std::shuffle(all.begin(), all.end(), rng);
    for (std::size_t start = 0; start < all.size(); start += config.batch_size) {
      ad::Tape tape;
      std::vector<model::Example> batch;
      for (std::size_t k = start; k < std::min(all.size(), start + config.batch_size); ++k) {
        const Slot& s = all[k];
        model::EmbeddedSequence instr = model::embed_tokens(bank.instruction(source.source, s.task, s.instance), theta);
        if (source.frozen) {
          instr = in::compose_instruction(learned_instruction(frozen_setup, *source.frozen, theta, s), instr);
        }
        batch.push_back(make_example(instr, bank.train(s.task)[s.instance], theta));
      }
      const Tensor loss = model::nll_loss(batch, theta);
      losses.push_back(loss.item());
      if (!std::isfinite(losses.back())) {
        throw bilevel::DivergenceError("baseline loss non-finite at epoch " + std::to_string(e) + ", step " +
                                       std::to_string(losses.size() - 1));
      }
      opt.step(params, ad::grad(loss, params));
    }
  }
  return losses;
}

}  // namespace bilopt::training
