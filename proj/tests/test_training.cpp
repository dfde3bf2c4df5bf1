#include <gtest/gtest.h>

#include <random>

#include "bilopt/training.hpp"
#include "support/oracles.hpp"

namespace ad = bilopt::autodiff;
namespace tk = bilopt::tasks;
namespace tr = bilopt::training;
namespace in = bilopt::instructions;
namespace md = bilopt::model;
using bilopt::testing::finite_difference_gradient;
using bilopt::testing::relative_error;

namespace {

tk::Suite small_suite(std::uint64_t seed = 3) {
  tk::SuiteConfig c;
  c.seed = seed;
  c.instances_per_task = 16;
  return tk::generate_task_suite(c);
}

tk::Splits default_splits(const tk::Suite& suite) {
  tk::SplitSpec spec{{"copy", "substitution", "select_kth", "length_parity"}, {"reverse", "majority"},
                     {"rotate", "presence"}, 4};
  return tk::make_splits(suite.tasks, spec);
}

tr::BilevelSetup setup_for(const tr::InstructionBank& bank, const tk::Splits& splits) {
  tr::BilevelSetup s;
  s.bank = &bank;
  s.meta_train = splits.meta_train;
  s.meta_test = splits.meta_test;
  s.batch_size = 4;
  s.outer_batch_size = 4;
  s.seed = 5;
  return s;
}

std::vector<int> meta_train_ids(const tr::InstructionBank& bank, const tk::Splits& splits) {
  std::vector<int> ids;
  for (auto t : splits.meta_train) ids.push_back(bank.task(t).id);
  return ids;
}

}  // namespace

TEST(InstructionBank, SameSeedSameInstructions) {
  const auto suite = small_suite();
  const tr::InstructionBank a(suite, 4, 3, 9), b(suite, 4, 3, 9);
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    EXPECT_EQ(a.exemplar(t), b.exemplar(t));
    EXPECT_EQ(a.one_shot_exemplar(t), b.one_shot_exemplar(t));
    for (std::size_t i = 0; i < a.train(t).size(); ++i) {
      EXPECT_EQ(a.instruction(tr::Source::ExemplarPerInstance, t, i), b.instruction(tr::Source::ExemplarPerInstance, t, i));
    }
  }
}

TEST(InstructionBank, PerInstanceExemplarIsAnotherInstance) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  for (std::size_t t = 0; t < bank.size(); ++t) {
    const auto& train = bank.train(t);
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto& ex = bank.instruction(tr::Source::ExemplarPerInstance, t, i);
      bool from_other = false;
      for (std::size_t j = 0; j < train.size(); ++j) from_other = from_other || (j != i && tk::format_instance(train[j]) == ex);
      EXPECT_TRUE(from_other) << "task " << t << " instance " << i;
    }
  }
}

TEST(InstructionBank, OneShotExemplarIsFirstValidationInstance) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  EXPECT_EQ(bank.one_shot_exemplar(2), tk::format_instance(bank.validation(2).front()));
  EXPECT_EQ(bank.train(2).size() + bank.validation(2).size(), suite.tasks[2].instances.size());
}

TEST(InstructionBank, BlankIsSingleBlankToken) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  EXPECT_EQ(bank.instruction(tr::Source::Blank, 0, 0), std::vector<int>{md::kBlank});
}

TEST(InstructionBank, SourceNamesRoundTrip) {
  for (auto s : {tr::Source::Definition, tr::Source::DefinitionDistractors, tr::Source::ExemplarPerTask,
                 tr::Source::ExemplarPerInstance, tr::Source::Blank}) {
    EXPECT_EQ(tr::source_from_name(tr::source_name(s)), s);
  }
  EXPECT_THROW(tr::source_from_name("nope"), std::invalid_argument);
}

TEST(Training, TargetEndsWithEos) {
  const tk::TaskInstance inst{{20, 21}, {22}};
  EXPECT_EQ(tr::target_tokens(inst), (std::vector<int>{22, md::kEos}));
}

TEST(Training, SampleBatchIsDeterministicAndInPool) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  const std::vector<std::size_t> pool{1, 4, 7};
  const auto a = tr::sample_batch(bank, pool, 32, 11, 1, 3, 4);
  const auto b = tr::sample_batch(bank, pool, 32, 11, 1, 3, 4);
  const auto c = tr::sample_batch(bank, pool, 32, 11, 1, 3, 5);
  ASSERT_EQ(a.size(), 32u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].task, b[i].task);
    EXPECT_EQ(a[i].instance, b[i].instance);
    EXPECT_NE(std::find(pool.begin(), pool.end(), a[i].task), pool.end());
    EXPECT_LT(a[i].instance, bank.train(a[i].task).size());
    differs = differs || a[i].task != c[i].task || a[i].instance != c[i].instance;
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(tr::sample_batch(bank, {}, 4, 1, 1, 0, 0), std::invalid_argument);
}

TEST(Training, ExemplarBlankPoolsStartAtHalfSelection) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  auto setup = setup_for(bank, splits);

  setup.pools = tr::exemplar_blank_pools(bank, splits.meta_train, false);
  const std::vector<std::size_t> sizes(splits.meta_train.size(), 2);
  const auto ids = meta_train_ids(bank, splits);
  EXPECT_DOUBLE_EQ(*tr::selection_pct(setup, in::init_extractor_dp(ids, sizes)), 50.0);

  setup.pools = tr::exemplar_blank_pools(bank, splits.meta_train, true);
  std::mt19937_64 rng(1);
  EXPECT_DOUBLE_EQ(*tr::selection_pct(setup, in::init_extractor_ic(bank.vocab(), 4, rng)), 50.0);
}

TEST(Training, ExemplarBlankPoolsMarkTheExemplar) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  const auto pools = tr::exemplar_blank_pools(bank, splits.meta_train, true);
  for (std::size_t s = 0; s < splits.meta_train.size(); ++s) {
    const auto& ex = bank.exemplar(splits.meta_train[s]);
    for (std::size_t i : {0u, 1u}) {
      const auto pool = pools.for_instance(s, i);
      const auto m = *pools.marked_for_instance(s, i);
      EXPECT_TRUE(std::equal(ex.begin(), ex.end(), pool[m].begin()));
      EXPECT_EQ(pool[1 - m].front(), md::kBlank);
      EXPECT_EQ(pool[0].size(), pool[1].size());
    }
  }
}

TEST(Training, SelectionIsAbsentForEmbeddersAndUnmarkedPools) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  auto setup = setup_for(bank, splits);
  std::mt19937_64 rng(1);
  const auto ids = meta_train_ids(bank, splits);
  EXPECT_FALSE(tr::selection_pct(setup, in::init_embedder_dp(ids, 2, 8, rng)));
  setup.pools = tr::sample_pools(bank, splits.meta_train, 4, 3);
  const std::vector<std::size_t> sizes(ids.size(), 4);
  EXPECT_FALSE(tr::selection_pct(setup, in::init_extractor_dp(ids, sizes)));
}

TEST(Training, LearnedInstructionWithDefinitionAppendsDefinitionRows) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  auto setup = setup_for(bank, splits);
  std::mt19937_64 rng(2);
  const auto theta = md::init_model(bank.vocab(), 8, rng);
  const auto phi = in::init_embedder_dp(meta_train_ids(bank, splits), 3, 8, rng);
  const tr::Slot slot{splits.meta_train[0], 0};
  EXPECT_EQ(tr::learned_instruction(setup, phi, theta, slot).rows(), 3u);
  setup.with_definition = true;
  EXPECT_EQ(tr::learned_instruction(setup, phi, theta, slot).rows(), 3u + bank.definition(slot.task).size());
}

TEST(Training, OuterLossUsesManualInstructions) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  const auto setup = setup_for(bank, splits);
  std::mt19937_64 rng(2);
  const auto theta = md::init_model(bank.vocab(), 8, rng);
  const std::vector<tr::Slot> slots{{splits.meta_test[0], 1}, {splits.meta_test[1], 2}};
  ad::NoGradGuard guard;
  std::vector<md::Example> batch;
  for (const auto& s : slots)
    batch.push_back(tr::make_example(md::embed_tokens(bank.definition(s.task), theta), bank.train(s.task)[s.instance], theta));
  EXPECT_EQ(tr::outer_loss(setup, theta, slots).item(), md::nll_loss(batch, theta).item());
}

TEST(Training, MakeProblemRejectsIncompleteSetups) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  auto setup = setup_for(bank, splits);
  const auto ids = meta_train_ids(bank, splits);
  const std::vector<std::size_t> sizes(ids.size(), 2);
  EXPECT_THROW(tr::make_problem(setup, in::init_extractor_dp(ids, sizes)), std::invalid_argument);
  setup.meta_test.clear();
  std::mt19937_64 rng(1);
  EXPECT_THROW(tr::make_problem(setup, in::init_embedder_dp(ids, 2, 8, rng)), std::invalid_argument);
}

// The bilevel solver needs ∂L_in/∂φ and the mixed partial; both are checked
// against central differences of the inner loss.
TEST(Training, EmbedderInnerGradientMatchesFiniteDifferences) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  auto setup = setup_for(bank, splits);
  setup.with_definition = true;
  std::mt19937_64 rng(4);
  const auto theta = md::init_model(bank.vocab(), 4, rng);
  const auto phi = in::init_embedder_ic(bank.vocab(), 2, 4, 3, rng);
  const auto problem = tr::make_problem(setup, phi);
  bilopt::bilevel::TensorList th = theta.clone_leaves().tensors();
  bilopt::bilevel::TensorList ph = in::tensors(in::clone_leaves(phi));

  std::vector<double> analytic;
  {
    ad::Tape tape;
    analytic = ad::flatten(ad::grad(problem.inner_loss(th, ph, {0, 0}), ph));
  }
  const auto numeric = finite_difference_gradient(
      [&] {
        ad::NoGradGuard guard;
        return problem.inner_loss(th, ph, {0, 0}).item();
      },
      ph, 1e-5);
  EXPECT_LT(relative_error(analytic, numeric), 1e-4);
}

TEST(Training, EmbedderMixedPartialMatchesFiniteDifferences) {
  const auto suite = small_suite();
  const auto splits = default_splits(suite);
  const tr::InstructionBank bank(suite, 4, 3, 9);
  auto setup = setup_for(bank, splits);
  setup.with_definition = true;
  std::mt19937_64 rng(4);
  const auto theta = md::init_model(bank.vocab(), 4, rng);
  const auto phi = in::init_embedder_dp(meta_train_ids(bank, splits), 2, 4, rng);
  const auto problem = tr::make_problem(setup, phi);
  bilopt::bilevel::TensorList th = theta.clone_leaves().tensors();
  bilopt::bilevel::TensorList ph = in::tensors(in::clone_leaves(phi));

  // v is a fixed random direction in θ space; check d/dφ ⟨∇θ L_in, v⟩.
  const std::vector<double> v = bilopt::testing::uniform_values(rng, ad::total_size(th), -1.0, 1.0);
  auto directional = [&] {
    ad::Tape tape;
    const auto g = ad::flatten(ad::grad(problem.inner_loss(th, ph, {0, 0}), th));
    double s = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) s += g[k] * v[k];
    return s;
  };
  std::vector<double> analytic;
  {
    ad::Tape tape(true);
    ad::SecondOrder so(problem.inner_loss(th, ph, {0, 0}), th);
    analytic = so.mixed(ph, v);
  }
  const auto numeric = finite_difference_gradient(directional, ph, 1e-5);
  EXPECT_LT(relative_error(analytic, numeric), 1e-4);
}

TEST(InstructionTuning, ZeroEpochsLeavesThetaUntouched) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  std::mt19937_64 rng(2);
  auto theta = md::init_model(bank.vocab(), 8, rng);
  const auto before = ad::flatten(theta.tensors());
  tr::TuningConfig c;
  c.epochs = 0;
  EXPECT_TRUE(tr::instruction_tuning_train(theta, bank, {0, 1}, {tr::Source::Definition, {}}, c).empty());
  EXPECT_EQ(ad::flatten(theta.tensors()), before);
}

TEST(InstructionTuning, LossDecreasesAndRunsAreReproducible) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  tr::TuningConfig c;
  c.epochs = 4;
  c.lr = 0.5;
  std::vector<double> first;
  std::vector<double> params;
  for (int rep = 0; rep < 2; ++rep) {
    std::mt19937_64 rng(2);
    auto theta = md::init_model(bank.vocab(), 8, rng);
    const auto losses = tr::instruction_tuning_train(theta, bank, {0, 1, 2, 3}, {tr::Source::ExemplarPerTask, {}}, c);
    if (rep == 0) {
      first = losses;
      params = ad::flatten(theta.tensors());
      const std::size_t per_epoch = losses.size() / 4;
      double head = 0.0, tail = 0.0;
      for (std::size_t i = 0; i < per_epoch; ++i) {
        head += losses[i];
        tail += losses[losses.size() - 1 - i];
      }
      EXPECT_LT(tail, head);
    } else {
      EXPECT_EQ(losses, first);
      EXPECT_EQ(ad::flatten(theta.tensors()), params);
    }
  }
}

TEST(InstructionTuning, FrozenRowsMustComeFromAnEmbedder) {
  const auto suite = small_suite();
  const tr::InstructionBank bank(suite, 4, 3, 9);
  std::mt19937_64 rng(2);
  auto theta = md::init_model(bank.vocab(), 8, rng);
  const std::vector<int> ids{suite.tasks[0].id};
  const std::vector<std::size_t> sizes{2};
  tr::TuningSource src{tr::Source::Definition, in::InstructionParams(in::init_extractor_dp(ids, sizes))};
  EXPECT_THROW(tr::instruction_tuning_train(theta, bank, {0}, src, {}), std::invalid_argument);
}
