#include <gtest/gtest.h>

#include <map>
#include <random>

#include "bilopt/evaluation.hpp"
#include "support/oracles.hpp"

namespace hs = bilopt::harness;
namespace tk = bilopt::tasks;
namespace tr = bilopt::training;
namespace md = bilopt::model;
using bilopt::testing::brute_force_lcs;
using bilopt::testing::brute_force_rouge_l;

namespace {

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t lo, std::size_t hi, int alphabet) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  std::vector<int> out(n);
  for (int& t : out) t = std::uniform_int_distribution<int>(0, alphabet - 1)(rng);
  return out;
}

}  // namespace

TEST(RougeL, WorkedExample) {
  const std::vector<int> ref{1, 2, 3, 4}, cand{1, 3, 4};
  EXPECT_EQ(brute_force_lcs(ref, cand), 3u);
  EXPECT_NEAR(hs::rouge_l(ref, cand), 6.0 / 7.0, 1e-15);
  EXPECT_NEAR(hs::rouge_l(ref, cand), 0.8571, 5e-5);
}

TEST(RougeL, IdenticalAndDisjoint) {
  const std::vector<int> a{5, 6, 7, 5};
  EXPECT_EQ(hs::rouge_l(a, a), 1.0);
  EXPECT_EQ(hs::rouge_l(a, std::vector<int>{8, 9}), 0.0);
}

TEST(RougeL, EmptyCandidateScoresZeroAndEmptyReferenceIsRejected) {
  EXPECT_EQ(hs::rouge_l(std::vector<int>{1, 2}, std::vector<int>{}), 0.0);
  EXPECT_THROW(hs::rouge_l(std::vector<int>{}, std::vector<int>{1}), std::invalid_argument);
}

TEST(RougeL, MatchesExhaustiveOracleOnRandomPairs) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto ref = random_tokens(rng, 1, 10, 4);
    const auto cand = random_tokens(rng, 0, 10, 4);
    const double f = hs::rouge_l(ref, cand);
    ASSERT_EQ(f, brute_force_rouge_l(ref, cand)) << "pair " << i;
    ASSERT_GE(f, 0.0);
    ASSERT_LE(f, 1.0);
    ASSERT_EQ(f == 1.0, ref == cand) << "pair " << i;
  }
}

TEST(Aggregate, IsUnweightedMeanOfTypes) {
  const std::vector<hs::TypeScore> same{{"a", 0.4, 10}, {"b", 0.4, 90}};
  EXPECT_DOUBLE_EQ(hs::aggregate(same), 0.4);
  // Per-type-then-average: instance counts do not weight the mean.
  const std::vector<hs::TypeScore> mixed{{"a", 0.2, 10}, {"b", 0.6, 90}};
  EXPECT_DOUBLE_EQ(hs::aggregate(mixed), 0.4);
  EXPECT_EQ(hs::aggregate({}), 0.0);
}

TEST(HalfWidth, ZeroForConstantOrSingleValues) {
  const std::vector<double> same{0.3, 0.3, 0.3, 0.3};
  EXPECT_EQ(hs::t_half_width(same), 0.0);
  const std::vector<double> one{0.7};
  EXPECT_EQ(hs::t_half_width(one), 0.0);
  const std::vector<double> two_equal{0.5, 0.5};
  EXPECT_EQ(hs::t_half_width(two_equal), 0.0);
}

TEST(HalfWidth, MatchesTabulatedQuantile) {
  // Reference values from an independent statistics package.
  const std::vector<double> a{1.0, 2.0, 3.0};
  EXPECT_NEAR(hs::t_half_width(a), 2.4841377117195456, 1e-9);
  const std::vector<double> b{0.31, 0.27, 0.35, 0.30};
  EXPECT_NEAR(hs::t_half_width(b), 0.052574616571519205, 1e-9);
}

TEST(HalfWidth, ScalesWithStandardDeviation) {
  const std::vector<double> a{0.1, 0.4, 0.2, 0.7}, b{0.2, 0.8, 0.4, 1.4};
  EXPECT_NEAR(hs::t_half_width(b), 2.0 * hs::t_half_width(a), 1e-12);
  EXPECT_DOUBLE_EQ(hs::mean(a), 0.35);
}

TEST(TestingMode, NamesRoundTrip) {
  for (auto m : {hs::TestingMode::ZeroShot, hs::TestingMode::OneShot})
    EXPECT_EQ(hs::testing_mode_from_name(hs::testing_mode_name(m)), m);
  EXPECT_THROW(hs::testing_mode_from_name("two_shot"), std::invalid_argument);
}

TEST(Evaluate, ZeroModelScoresItsDegenerateDecode) {
  tk::SuiteConfig sc;
  sc.seed = 4;
  sc.instances_per_task = 12;
  const auto suite = tk::generate_task_suite(sc);
  const tr::InstructionBank bank(suite, 4, 2, 4);
  const auto theta = md::zero_model(bank.vocab(), 6);
  const std::vector<std::size_t> tasks{0, 5, 9, 14};
  const std::size_t max_len = 6;

  // All logits tie, so greedy decoding emits the lowest token id until the
  // length limit.
  const std::vector<int> degenerate(max_len, 0);
  std::map<std::string, std::pair<double, std::size_t>> expect;
  for (auto t : tasks)
    for (const auto& inst : bank.train(t)) {
      auto& e = expect[bank.task(t).type()];
      e.first += brute_force_rouge_l(inst.y, degenerate);
      ++e.second;
    }

  for (auto mode : {hs::TestingMode::ZeroShot, hs::TestingMode::OneShot}) {
    const auto eval = hs::evaluate(theta, bank, tasks, mode, max_len);
    ASSERT_EQ(eval.per_type.size(), expect.size());
    for (const auto& t : eval.per_type) {
      EXPECT_EQ(t.n_instances, expect[t.task_type].second);
      EXPECT_DOUBLE_EQ(t.rouge_l, expect[t.task_type].first / static_cast<double>(t.n_instances));
    }
    EXPECT_DOUBLE_EQ(eval.aggregate, hs::aggregate(eval.per_type));
  }
}

TEST(Evaluate, PerTypeRowsAreSortedAndCountInstances) {
  tk::SuiteConfig sc;
  sc.seed = 4;
  sc.instances_per_task = 12;
  const auto suite = tk::generate_task_suite(sc);
  const tr::InstructionBank bank(suite, 4, 2, 4);
  std::mt19937_64 rng(3);
  const auto theta = md::init_model(bank.vocab(), 6, rng);
  const auto eval = hs::evaluate_with(theta, bank, {15, 0, 1}, tr::Source::Definition, true, 5);
  ASSERT_EQ(eval.per_type.size(), 2u);
  EXPECT_LT(eval.per_type[0].task_type, eval.per_type[1].task_type);
  std::size_t total = 0;
  for (const auto& t : eval.per_type) total += t.n_instances;
  EXPECT_EQ(total, 3u * 4u);
}
