#include "bilopt/harness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace bilopt::harness {

namespace fs = std::filesystem;

namespace {

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

training::BilevelSetup make_setup(const RunConfig& config, const RunContext& context, Arm arm) {
  training::BilevelSetup setup;
  setup.bank = &context.bank();
  setup.meta_train = context.splits().meta_train;
  setup.meta_test = context.splits().meta_test;
  if (setup.meta_test.empty()) throw ConfigError(arm_name(arm) + " needs a nonempty split.meta_test");
  setup.batch_size = config.batch_size;
  setup.outer_batch_size = config.outer_batch_size;
  // The outer loss uses the manual instruction the arm is tested with.
  setup.outer_instruction =
      is_extractor(arm) ? training::Source::ExemplarPerTask : training::Source::Definition;
  setup.with_definition = arm == Arm::DefinitionEmbedderDP || arm == Arm::DefinitionEmbedderIC;
  setup.seed = context.seed();
  if (is_extractor(arm)) {
    if (config.design == CandidateDesign::ExemplarBlank) {
      setup.pools = training::exemplar_blank_pools(context.bank(), setup.meta_train, arm == Arm::ExtractorIC);
    } else {
      setup.pools = training::sample_pools(context.bank(), setup.meta_train, config.candidates, context.seed());
    }
  }
  return setup;
}

instructions::InstructionParams init_phi(const RunConfig& config, const RunContext& context, Arm arm,
                                         const training::BilevelSetup& setup, std::mt19937_64& rng) {
  const auto& bank = context.bank();
  std::vector<int> ids;
  for (std::size_t t : setup.meta_train) ids.push_back(bank.task(t).id);
  switch (arm) {
    case Arm::EmbedderDP:
    case Arm::DefinitionEmbedderDP:
      return instructions::init_embedder_dp(ids, config.instruction_length, config.d, rng);
    case Arm::EmbedderIC:
    case Arm::DefinitionEmbedderIC:
      return instructions::init_embedder_ic(bank.vocab(), config.instruction_length, config.d, config.d_latent, rng);
    case Arm::ExtractorDP: {
      std::vector<std::size_t> sizes;
      for (const auto& pool : setup.pools.padded) sizes.push_back(pool.size());
      return instructions::init_extractor_dp(ids, sizes);
    }
    case Arm::ExtractorIC:
      return instructions::init_extractor_ic(bank.vocab(), config.d_latent, rng);
    default:
      throw std::invalid_argument("init_phi: " + arm_name(arm) + " has no learned instruction");
  }
}

Evaluation one_shot_test(const RunConfig& config, const RunContext& context, const model::ModelParams& theta) {
  return evaluate(theta, context.bank(), context.splits().test, TestingMode::OneShot, config.max_decode);
}

void write_curve(const fs::path& path, const std::vector<std::pair<std::size_t, double>>& curve) {
  auto out = open_output(path);
  for (const auto& [step, value] : curve) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["one_shot_rouge_l"] = value;
    out << j.dump() << "\n";
  }
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

std::string cell(const std::vector<double>& values) {
  return fixed(100.0 * mean(values), 2) + " ± " + fixed(100.0 * t_half_width(values), 2);
}

std::string pad(const std::string& s, std::size_t width) {
  // "±" is two bytes but one column.
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
  return s + std::string(width > cols ? width - cols : 1, ' ');
}

// Trains the arm for one seed, writes its metrics (and trace when bilevel),
// and returns the test evaluation.
Evaluation run_one(const RunConfig& config, const RunContext& context, Arm arm, const fs::path& dir,
                   const std::string& run_id) {
  ArmOutputs outputs;
  if (is_bilevel(arm)) outputs.trace = dir / "trace.jsonl";
  const ArmRun run = train_arm(config, context, arm, outputs);
  const Evaluation eval = evaluate_arm(config, context, arm, run.theta);
  write_metrics(dir / "metrics.jsonl", metrics_records(run_id, context.seed(), "test", eval));
  return eval;
}

std::vector<std::string> non_test_types(const RunConfig& config) {
  std::vector<std::string> out = config.split.meta_train;
  out.insert(out.end(), config.split.meta_test.begin(), config.split.meta_test.end());
  return out;
}

}  // namespace

RunContext::RunContext(const RunConfig& config, std::uint64_t seed) : seed_(seed) {
  tasks::SuiteConfig sc = config.suite;
  sc.seed = seed;
  suite_ = std::make_unique<tasks::Suite>(tasks::generate_task_suite(sc));
  splits_ = tasks::make_splits(suite_->tasks, config.split);
  bank_ = std::make_unique<training::InstructionBank>(*suite_, config.split.validation_per_task, config.distractors,
                                                      seed);
}

std::vector<std::size_t> RunContext::training_tasks() const {
  std::vector<std::size_t> out = splits_.meta_train;
  out.insert(out.end(), splits_.meta_test.begin(), splits_.meta_test.end());
  return out;
}

std::vector<MetricsRecord> metrics_records(const std::string& run_id, std::uint64_t seed, const std::string& split,
                                           const Evaluation& evaluation) {
  std::vector<MetricsRecord> out;
  std::size_t total = 0;
  for (const auto& t : evaluation.per_type) {
    out.push_back({run_id, seed, split, t.task_type, t.rouge_l, t.n_instances});
    total += t.n_instances;
  }
  out.push_back({run_id, seed, split, "average", evaluation.aggregate, total});
  return out;
}

std::string metrics_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["seed"] = r.seed;
  j["split"] = r.split;
  j["task_type"] = r.task_type;
  j["rouge_l"] = r.rouge_l;
  j["n_instances"] = r.n_instances;
  return j.dump();
}

void write_metrics(const fs::path& path, const std::vector<MetricsRecord>& records) {
  auto out = open_output(path);
  for (const auto& r : records) out << metrics_line(r) << "\n";
}

TestingMode arm_testing_mode(Arm arm, const RunConfig& config) {
  if (!config.eval_mode.empty()) return testing_mode_from_name(config.eval_mode);
  switch (arm) {
    case Arm::ExemplarPerTask:
    case Arm::ExemplarPerInstance:
    case Arm::Blank:
    case Arm::ExtractorDP:
    case Arm::ExtractorIC:
      return TestingMode::OneShot;
    default:
      return TestingMode::ZeroShot;
  }
}

ArmRun train_arm(const RunConfig& config, const RunContext& context, Arm arm, const ArmOutputs& outputs) {
  const auto& bank = context.bank();
  std::mt19937_64 rng(context.seed());
  ArmRun run;
  run.theta = model::init_model(bank.vocab(), config.d, rng);

  if (!is_bilevel(arm)) {
    training::TuningConfig tc;
    tc.epochs = config.baseline_epochs;
    tc.batch_size = config.baseline_batch_size;
    tc.lr = config.baseline_lr;
    tc.optimizer = config.baseline_optimizer;
    tc.seed = context.seed();
    training::instruction_tuning_train(run.theta, bank, context.training_tasks(), {baseline_source(arm), {}}, tc);
    return run;
  }

  const training::BilevelSetup setup = make_setup(config, context, arm);
  const instructions::InstructionParams phi0 = init_phi(config, context, arm, setup, rng);
  const bilevel::BilevelProblem problem = training::make_problem(setup, phi0);
  bilevel::HypergradConfig hc = config.hypergrad;
  hc.seed = context.seed();

  bilevel::TrainOptions opts;
  opts.outer_steps = config.outer_steps;
  opts.patience = config.patience;
  opts.timing = config.timing;
  std::size_t step = 0;
  opts.selection = [&](const bilevel::TensorList& th, const bilevel::TensorList& ph) {
    if (outputs.curve_every > 0 && step % outputs.curve_every == 0) {
      run.curve.emplace_back(step, one_shot_test(config, context, model::ModelParams::from_tensors(th)).aggregate);
    }
    ++step;
    return training::selection_pct(setup, instructions::with_tensors(phi0, ph));
  };
  std::ofstream trace_out;
  if (!outputs.trace.empty()) {
    trace_out = open_output(outputs.trace);
    opts.on_record = [&](const bilevel::TraceRecord& r) { bilevel::write_trace_line(trace_out, r); };
  }

  bilevel::TensorList th = run.theta.tensors(), ph = instructions::tensors(phi0);
  bilevel::TrainResult result = bilevel::bilevel_train(th, ph, problem, hc, opts);
  run.theta = model::ModelParams::from_tensors(th);
  run.phi = instructions::with_tensors(phi0, ph);
  run.trace = std::move(result.trace);
  run.warnings = result.warnings;
  run.final_selection_pct = training::selection_pct(setup, *run.phi);
  if (outputs.curve_every > 0) run.curve.emplace_back(run.trace.size(), one_shot_test(config, context, run.theta).aggregate);
  return run;
}

Evaluation evaluate_arm(const RunConfig& config, const RunContext& context, Arm arm, const model::ModelParams& theta) {
  return evaluate(theta, context.bank(), context.splits().test, arm_testing_mode(arm, config), config.max_decode);
}

// ---- proof of concept --------------------------------------------------------

PocSummary run_proof_of_concept(const RunConfig& config, const fs::path& out) {
  if (config.design != CandidateDesign::ExemplarBlank)
    throw ConfigError("poc needs instruction.design = exemplar_blank");
  PocSummary summary;
  for (std::uint64_t seed : config.seeds) {
    const RunContext context(config, seed);
    const fs::path dir = out / seed_dir(seed);
    PocSeed row;
    row.seed = seed;
    for (Arm arm : {Arm::ExemplarPerTask, Arm::Blank}) {
      const ArmRun run = train_arm(config, context, arm);
      const Evaluation eval = one_shot_test(config, context, run.theta);
      write_metrics(dir / arm_name(arm) / "metrics.jsonl",
                    metrics_records("poc/" + seed_dir(seed) + "/" + arm_name(arm), seed, "test", eval));
      (arm == Arm::Blank ? row.blank_one_shot : row.exemplar_one_shot) = eval.aggregate;
    }
    for (Arm arm : {Arm::ExtractorDP, Arm::ExtractorIC}) {
      const fs::path arm_dir = dir / arm_name(arm);
      ArmOutputs outputs{arm_dir / "trace.jsonl", config.poc_curve_every};
      const ArmRun run = train_arm(config, context, arm, outputs);
      write_curve(arm_dir / "curve.jsonl", run.curve);
      const Evaluation eval = one_shot_test(config, context, run.theta);
      write_metrics(arm_dir / "metrics.jsonl",
                    metrics_records("poc/" + seed_dir(seed) + "/" + arm_name(arm), seed, "test", eval));
      const double pct = run.final_selection_pct.value_or(0.0);
      if (arm == Arm::ExtractorDP) {
        row.dp_selection = pct;
        row.dp_one_shot = eval.aggregate;
      } else {
        row.ic_selection = pct;
        row.ic_one_shot = eval.aggregate;
      }
    }
    summary.seeds.push_back(row);
  }
  write_text(out / "summary.txt", format_poc_summary(summary));
  return summary;
}

std::string format_poc_summary(const PocSummary& summary) {
  std::ostringstream ss;
  ss << pad("seed", 8) << pad("exemplar", 12) << pad("blank", 12) << pad("dp_sel%", 10) << pad("ic_sel%", 10)
     << pad("dp_1shot", 12) << "ic_1shot\n";
  for (const auto& r : summary.seeds) {
    ss << pad(std::to_string(r.seed), 8) << pad(fixed(100 * r.exemplar_one_shot, 2), 12)
       << pad(fixed(100 * r.blank_one_shot, 2), 12) << pad(fixed(r.dp_selection, 1), 10)
       << pad(fixed(r.ic_selection, 1), 10) << pad(fixed(100 * r.dp_one_shot, 2), 12) << fixed(100 * r.ic_one_shot, 2)
       << "\n";
  }
  return ss.str();
}

// ---- main comparison -------------------------------------------------------

Comparison run_main_comparison(const RunConfig& config, const fs::path& out) {
  if (config.compare_arms.empty()) throw ConfigError("compare.arms must list at least one arm");
  Comparison cmp;
  cmp.seeds = config.seeds;
  for (Arm arm : config.compare_arms) cmp.arms.push_back({arm, arm_testing_mode(arm, config), {}});
  for (std::uint64_t seed : config.seeds) {
    const RunContext context(config, seed);
    for (auto& scores : cmp.arms) {
      const std::string name = arm_name(scores.arm);
      scores.per_seed.push_back(run_one(config, context, scores.arm, out / name / seed_dir(seed),
                                        "compare/" + name + "/" + seed_dir(seed)));
    }
  }
  write_text(out / "table.txt", format_comparison(cmp));
  return cmp;
}

std::string format_comparison(const Comparison& cmp) {
  std::vector<std::string> types;
  for (const auto& a : cmp.arms)
    for (const auto& e : a.per_seed)
      for (const auto& t : e.per_type)
        if (std::find(types.begin(), types.end(), t.task_type) == types.end()) types.push_back(t.task_type);
  std::sort(types.begin(), types.end());

  std::size_t width = 18;
  for (const auto& a : cmp.arms) width = std::max(width, arm_name(a.arm).size() + 2);
  std::ostringstream ss;
  ss << pad("type", 16);
  for (const auto& a : cmp.arms) ss << pad(arm_name(a.arm), width);
  ss << "\n" << pad("", 16);
  for (const auto& a : cmp.arms) ss << pad(testing_mode_name(a.mode), width);
  ss << "\n";
  for (const auto& type : types) {
    ss << pad(type, 16);
    for (const auto& a : cmp.arms) {
      std::vector<double> v;
      for (const auto& e : a.per_seed)
        for (const auto& t : e.per_type)
          if (t.task_type == type) v.push_back(t.rouge_l);
      ss << pad(cell(v), width);
    }
    ss << "\n";
  }
  ss << pad("Average", 16);
  for (const auto& a : cmp.arms) {
    std::vector<double> v;
    for (const auto& e : a.per_seed) v.push_back(e.aggregate);
    ss << pad(cell(v), width);
  }
  ss << "\n(ROUGE-L x 100, mean ± 95% t half-width over " << cmp.seeds.size() << " seeds)\n";
  return ss.str();
}

// ---- sweeps ----------------------------------------------------------------

tasks::SplitSpec meta_test_by_count(const RunConfig& config, std::uint64_t seed, std::size_t count) {
  std::vector<std::string> types = non_test_types(config);
  if (count == 0 || count >= types.size())
    throw ConfigError("meta-test count " + std::to_string(count) + " must be in [1, " +
                      std::to_string(types.size() - 1) + "]");
  std::mt19937_64 rng(seed ^ 0x5107ULL);
  std::shuffle(types.begin(), types.end(), rng);
  tasks::SplitSpec spec = config.split;
  spec.meta_test.assign(types.begin(), types.begin() + static_cast<std::ptrdiff_t>(count));
  spec.meta_train.assign(types.begin() + static_cast<std::ptrdiff_t>(count), types.end());
  std::sort(spec.meta_test.begin(), spec.meta_test.end());
  std::sort(spec.meta_train.begin(), spec.meta_train.end());
  return spec;
}

tasks::SplitSpec meta_test_by_method(const RunConfig& config, const RunContext& context, const std::string& method,
                                     std::size_t count) {
  if (method == "random") return meta_test_by_count(config, context.seed(), count);
  if (method != "kmeans") throw ConfigError("unknown split method '" + method + "'");
  const std::vector<std::string> types = non_test_types(config);
  if (count == 0 || count >= types.size()) throw ConfigError("meta-test count out of range");
  if (config.sweep_kmeans_k > types.size()) throw ConfigError("sweep.kmeans_k exceeds the number of non-test types");

  std::mt19937_64 rng(context.seed());
  const model::ModelParams theta = model::init_model(context.bank().vocab(), config.d, rng);
  const auto per_task = tasks::definition_embeddings(context.suite().tasks, theta);
  std::vector<std::vector<double>> points;
  for (const auto& type : types) {
    std::vector<double> acc(config.d, 0.0);
    std::size_t n = 0;
    for (std::size_t t = 0; t < context.suite().tasks.size(); ++t) {
      if (context.suite().tasks[t].type() != type) continue;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += per_task[t][k];
      ++n;
    }
    for (double& v : acc) v /= static_cast<double>(std::max<std::size_t>(n, 1));
    points.push_back(acc);
  }
  const auto groups = tasks::split_kmeans(points, config.sweep_kmeans_k, context.seed());
  std::size_t largest = 0;
  for (std::size_t g = 1; g < groups.size(); ++g)
    if (groups[g].size() > groups[largest].size()) largest = g;
  std::vector<double> centroid(config.d, 0.0);
  for (std::size_t i : groups[largest])
    for (std::size_t k = 0; k < centroid.size(); ++k) centroid[k] += points[i][k] / static_cast<double>(groups[largest].size());
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < centroid.size(); ++k) d2 += (points[i][k] - centroid[k]) * (points[i][k] - centroid[k]);
    dist.emplace_back(d2, i);
  }
  std::sort(dist.begin(), dist.end());
  tasks::SplitSpec spec = config.split;
  spec.meta_test.clear();
  spec.meta_train.clear();
  for (std::size_t r = 0; r < dist.size(); ++r) (r < count ? spec.meta_test : spec.meta_train).push_back(types[dist[r].second]);
  std::sort(spec.meta_test.begin(), spec.meta_test.end());
  std::sort(spec.meta_train.begin(), spec.meta_train.end());
  return spec;
}

SweepResult run_sweeps(const RunConfig& config, const fs::path& out) {
  SweepResult result;
  result.axis = config.sweep_axis;
  const std::string axis = sweep_axis_name(config.sweep_axis);

  // (label, config for a given seed)
  std::vector<std::pair<std::string, std::function<RunConfig(std::uint64_t)>>> points;
  switch (config.sweep_axis) {
    case SweepAxis::Length:
      for (std::size_t l : config.sweep_lengths) {
        points.emplace_back("l" + std::to_string(l), [&config, l](std::uint64_t) {
          RunConfig c = config;
          c.instruction_length = l;
          return c;
        });
      }
      break;
    case SweepAxis::MetaTestCount: {
      std::vector<std::size_t> counts = config.sweep_meta_test_counts;
      if (counts.empty())
        for (std::size_t c = 1; c < non_test_types(config).size(); ++c) counts.push_back(c);
      for (std::size_t count : counts) {
        points.emplace_back("meta_test" + std::to_string(count), [&config, count](std::uint64_t seed) {
          RunConfig c = config;
          c.split = meta_test_by_count(config, seed, count);
          return c;
        });
      }
      break;
    }
    case SweepAxis::SplitMethod:
      for (const std::string method : {"random", "kmeans"}) {
        points.emplace_back(method, [&config, method](std::uint64_t seed) {
          const RunContext base(config, seed);
          RunConfig c = config;
          c.split = meta_test_by_method(config, base, method, config.split.meta_test.size());
          return c;
        });
      }
      break;
  }

  std::ofstream curve = open_output(out / "curve.jsonl");
  for (const auto& [label, make] : points) {
    SweepPoint point;
    point.label = label;
    for (std::uint64_t seed : config.seeds) {
      const RunConfig c = make(seed);
      const RunContext context(c, seed);
      const std::string run_id = "sweep/" + axis + "/" + label + "/" + seed_dir(seed);
      const Evaluation eval = run_one(c, context, c.arm, out / label / seed_dir(seed), run_id);
      point.per_seed.push_back(eval.aggregate);
      nlohmann::ordered_json j;
      j["axis"] = axis;
      j["point"] = label;
      j["seed"] = seed;
      j["meta_train"] = c.split.meta_train;
      j["meta_test"] = c.split.meta_test;
      j["rouge_l"] = eval.aggregate;
      curve << j.dump() << "\n";
    }
    point.mean = mean(point.per_seed);
    point.half_width = t_half_width(point.per_seed);
    result.points.push_back(point);
  }
  write_text(out / "summary.txt", format_sweep(result));
  return result;
}

std::string format_sweep(const SweepResult& result) {
  std::ostringstream ss;
  ss << pad(sweep_axis_name(result.axis), 16) << "ROUGE-L x 100 (mean ± 95% t half-width)\n";
  for (const auto& p : result.points) ss << pad(p.label, 16) << cell(p.per_seed) << "\n";
  return ss.str();
}

// ---- embeddings ------------------------------------------------------------

Projection pca_2d(const std::vector<std::vector<double>>& rows) {
  Projection out;
  out.points.assign(rows.size(), {0.0, 0.0});
  if (rows.size() < 2) return out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != d)
      throw std::invalid_argument("pca_2d: ragged rows");
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues ascend; take the last two.
  for (int c = 0; c < 2 && c < d; ++c) {
    const Eigen::Index col = d - 1 - c;
    Eigen::VectorXd axis = eig.eigenvectors().col(col);
    Eigen::Index at = 0;
    axis.cwiseAbs().maxCoeff(&at);
    if (axis(at) < 0) axis = -axis;
    const Eigen::VectorXd proj = x * axis;
    for (Eigen::Index i = 0; i < n; ++i) out.points[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = proj(i);
    out.variance[static_cast<std::size_t>(c)] = std::max(0.0, eig.eigenvalues()(col));
  }
  return out;
}

std::vector<EmbeddingRow> export_embeddings(const training::InstructionBank& bank,
                                            const std::vector<std::size_t>& task_indices,
                                            const model::ModelParams& theta,
                                            const instructions::InstructionParams* phi, EmbeddingMode mode) {
  autodiff::NoGradGuard guard;
  if (mode == EmbeddingMode::LearnedDefinition) {
    if (phi == nullptr || instructions::is_extractor(*phi))
      throw std::invalid_argument("export_embeddings: the learned mode needs an embedder");
  }
  std::vector<EmbeddingRow> rows;
  for (std::size_t t : task_indices) {
    const auto& task = bank.task(t);
    model::EmbeddedSequence seq = model::embed_tokens(bank.definition(t), theta);
    if (mode == EmbeddingMode::LearnedDefinition) {
      model::EmbeddedSequence learned;
      if (const auto* dp = std::get_if<instructions::EmbedderDP>(phi)) {
        learned = instructions::embedder_dp_instruction(task.id, *dp);
      } else {
        const auto& ic = std::get<instructions::EmbedderIC>(*phi);
        learned = instructions::embedder_ic_instruction(tasks::format_instance(bank.train(t).front()), ic);
      }
      seq = instructions::compose_instruction(learned, seq);
    }
    EmbeddingRow row;
    row.task_id = task.id;
    row.task_type = task.type();
    row.embedding.assign(seq.cols(), 0.0);
    const auto& v = seq.values();
    for (std::size_t r = 0; r < seq.rows(); ++r)
      for (std::size_t k = 0; k < seq.cols(); ++k) row.embedding[k] += v[r * seq.cols() + k] / static_cast<double>(seq.rows());
    rows.push_back(std::move(row));
  }
  std::vector<std::vector<double>> points;
  for (const auto& r : rows) points.push_back(r.embedding);
  const Projection proj = pca_2d(points);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].projection = proj.points[i];
  return rows;
}

void write_embeddings(const fs::path& path, const std::vector<EmbeddingRow>& rows) {
  auto out = open_output(path);
  out << std::setprecision(17);
  out << "task_id\ttask_type\tpc1\tpc2";
  if (!rows.empty())
    for (std::size_t k = 0; k < rows.front().embedding.size(); ++k) out << "\te" << k;
  out << "\n";
  for (const auto& r : rows) {
    out << r.task_id << "\t" << r.task_type << "\t" << r.projection[0] << "\t" << r.projection[1];
    for (double v : r.embedding) out << "\t" << v;
    out << "\n";
  }
}

}  // namespace bilopt::harness
