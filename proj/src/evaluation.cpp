#include "bilopt/evaluation.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <stdexcept>

namespace bilopt::harness {

double rouge_l(std::span<const int> reference, std::span<const int> candidate) {
  if (reference.empty()) throw std::invalid_argument("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  std::vector<std::size_t> prev(candidate.size() + 1, 0), cur(candidate.size() + 1, 0);
  for (int r : reference) {
    for (std::size_t j = 1; j <= candidate.size(); ++j) {
      cur[j] = r == candidate[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev.back());
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

std::string testing_mode_name(TestingMode m) { return m == TestingMode::ZeroShot ? "zero_shot" : "one_shot"; }

TestingMode testing_mode_from_name(const std::string& name) {
  if (name == "zero_shot") return TestingMode::ZeroShot;
  if (name == "one_shot") return TestingMode::OneShot;
  throw std::invalid_argument("unknown testing mode '" + name + "' (expected zero_shot or one_shot)");
}

double aggregate(const std::vector<TypeScore>& per_type) {
  if (per_type.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : per_type) s += t.rouge_l;
  return s / static_cast<double>(per_type.size());
}

namespace {

Evaluation score(const model::ModelParams& theta, const training::InstructionBank& bank,
                 const std::vector<std::size_t>& task_indices, std::size_t max_len, bool validation,
                 const std::function<const std::vector<int>&(std::size_t)>& instruction) {
  autodiff::NoGradGuard guard;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t t : task_indices) {
    const model::EmbeddedSequence instr = model::embed_tokens(instruction(t), theta);
    const auto& insts = validation ? bank.validation(t) : bank.train(t);
    auto& slot = acc[bank.task(t).type()];
    for (const auto& inst : insts) {
      const auto seq = model::concat_instruction(instr, model::embed_tokens(inst.x, theta));
      slot.first += rouge_l(inst.y, model::greedy_decode(seq, theta, max_len));
      ++slot.second;
    }
  }
  Evaluation out;
  for (const auto& [type, v] : acc) {
    out.per_type.push_back({type, v.second == 0 ? 0.0 : v.first / static_cast<double>(v.second), v.second});
  }
  out.aggregate = aggregate(out.per_type);
  return out;
}

}  // namespace

Evaluation evaluate(const model::ModelParams& theta, const training::InstructionBank& bank,
                    const std::vector<std::size_t>& task_indices, TestingMode mode, std::size_t max_len) {
  return score(theta, bank, task_indices, max_len, false, [&](std::size_t t) -> const std::vector<int>& {
    return mode == TestingMode::ZeroShot ? bank.definition(t) : bank.one_shot_exemplar(t);
  });
}

Evaluation evaluate_with(const model::ModelParams& theta, const training::InstructionBank& bank,
                         const std::vector<std::size_t>& task_indices, training::Source source, bool validation,
                         std::size_t max_len) {
  return score(theta, bank, task_indices, max_len, validation, [&](std::size_t t) -> const std::vector<int>& {
    return bank.instruction(source, t, 0);
  });
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double t_half_width(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  const double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) return 0.0;
  const boost::math::students_t dist(static_cast<double>(n - 1));
  return boost::math::quantile(boost::math::complement(dist, 0.025)) * sd / std::sqrt(static_cast<double>(n));
}

}  // namespace bilopt::harness
