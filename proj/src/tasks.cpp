#include "bilopt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace bilopt::tasks {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

const std::vector<std::string>& names() {
  static const std::vector<std::string> n{"copy",         "reverse",  "rotate",   "substitution",
                                          "select_kth",   "majority", "presence", "length_parity"};
  return n;
}

// Number of distinct inputs of length in [lo, hi] over an alphabet of size a.
double input_space(std::size_t a, std::size_t lo, std::size_t hi) {
  double total = 0.0;
  for (std::size_t len = lo; len <= hi; ++len) total += std::pow(static_cast<double>(a), static_cast<double>(len));
  return total;
}

std::vector<int> draw_params(Family f, const SuiteConfig& cfg, const Vocabulary& vocab, std::mt19937_64& rng) {
  switch (f) {
    case Family::Rotate:
      return {static_cast<int>(1 + uniform_index(rng, std::min<std::size_t>(3, vocab.numerals - 1)))};
    case Family::SelectKth:
      return {static_cast<int>(uniform_index(rng, std::min(cfg.min_len, vocab.numerals)))};
    case Family::Presence:
      return {static_cast<int>(uniform_index(rng, vocab.alphabet))};
    case Family::Substitution: {
      std::vector<int> perm(vocab.alphabet);
      std::iota(perm.begin(), perm.end(), 0);
      // Redraw identities so the rule differs from copy.
      do std::shuffle(perm.begin(), perm.end(), rng);
      while (std::is_sorted(perm.begin(), perm.end()));
      return perm;
    }
    default:
      return {};
  }
}

void check_vocabulary(const SuiteConfig& cfg, const Vocabulary& vocab) {
  if (cfg.min_len < 1 || cfg.min_len > cfg.max_len) {
    throw std::invalid_argument("generate_task_suite: bad length range [" + std::to_string(cfg.min_len) + ", " +
                                std::to_string(cfg.max_len) + "]");
  }
  for (Family f : cfg.families) {
    const std::string name = family_name(f);
    const bool needs_two = f == Family::Substitution || f == Family::Presence || f == Family::Majority;
    if (vocab.alphabet < (needs_two ? 2u : 1u)) {
      throw std::invalid_argument("generate_task_suite: alphabet of " + std::to_string(vocab.alphabet) +
                                  " too small for family " + name);
    }
    if ((f == Family::Rotate || f == Family::SelectKth) && vocab.numerals < 2) {
      throw std::invalid_argument("generate_task_suite: need at least 2 numerals for family " + name);
    }
    // Presence draws half of its inputs from the alphabet minus the queried token.
    const double space = input_space(f == Family::Presence ? vocab.alphabet - 1 : vocab.alphabet, cfg.min_len,
                                      cfg.max_len);
    const double needed = f == Family::Presence ? std::ceil(cfg.instances_per_task / 2.0) : cfg.instances_per_task;
    if (space < needed) {
      throw std::invalid_argument("generate_task_suite: alphabet of " + std::to_string(vocab.alphabet) +
                                  " cannot supply " + std::to_string(cfg.instances_per_task) +
                                  " distinct inputs for family " + name);
    }
  }
}

std::vector<int> draw_input(const SuiteConfig& cfg, const Vocabulary& vocab, std::mt19937_64& rng) {
  const std::size_t len = cfg.min_len + uniform_index(rng, cfg.max_len - cfg.min_len + 1);
  std::vector<int> x(len);
  for (int& t : x) t = vocab.content(uniform_index(rng, vocab.alphabet));
  return x;
}

std::vector<TaskInstance> draw_instances(const Task& task, const SuiteConfig& cfg, const Vocabulary& vocab,
                                         std::mt19937_64& rng) {
  std::set<std::vector<int>> seen;
  std::vector<TaskInstance> out;
  std::size_t attempts = 0;
  const std::size_t budget = 1000 * cfg.instances_per_task + 10000;
  while (out.size() < cfg.instances_per_task) {
    if (++attempts > budget) {
      throw std::invalid_argument("generate_task_suite: could not draw enough distinct inputs for task " +
                                  std::to_string(task.id));
    }
    std::vector<int> x = draw_input(cfg, vocab, rng);
    if (task.family == Family::Presence) {
      const bool want_true = out.size() % 2 == 0;
      const bool has = std::count(x.begin(), x.end(), vocab.content(task.params[0])) > 0;
      if (has != want_true) continue;
    }
    if (!seen.insert(x).second) continue;
    std::vector<int> y = apply_rule(task, vocab, x);
    out.push_back({std::move(x), std::move(y)});
  }
  return out;
}

std::vector<std::string> suite_types(const std::vector<Task>& tasks) {
  std::vector<std::string> types;
  for (const Task& t : tasks)
    if (std::find(types.begin(), types.end(), t.type()) == types.end()) types.push_back(t.type());
  return types;
}

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

const std::vector<Family>& all_families() {
  static const std::vector<Family> f{Family::Copy,      Family::Reverse,  Family::Rotate,   Family::Substitution,
                                     Family::SelectKth, Family::Majority, Family::Presence, Family::Parity};
  return f;
}

std::string family_name(Family f) { return names()[static_cast<std::size_t>(f)]; }

Family family_from_name(const std::string& name) {
  const auto& n = names();
  const auto it = std::find(n.begin(), n.end(), name);
  if (it == n.end()) throw std::invalid_argument("unknown task family '" + name + "'");
  return static_cast<Family>(it - n.begin());
}

bool is_label_family(Family f) {
  return f == Family::SelectKth || f == Family::Majority || f == Family::Presence || f == Family::Parity;
}

int Vocabulary::numeral(std::size_t k) const {
  if (k >= numerals) throw std::out_of_range("numeral " + std::to_string(k) + " not in vocabulary");
  return kFirstFamily + static_cast<int>(all_families().size() + k);
}

int Vocabulary::content(std::size_t i) const {
  if (i >= alphabet) throw std::out_of_range("content token " + std::to_string(i) + " not in alphabet");
  return kFirstFamily + static_cast<int>(all_families().size() + numerals + i);
}

bool Vocabulary::is_content(int token) const {
  const int first = kFirstFamily + static_cast<int>(all_families().size() + numerals);
  return token >= first && token < first + static_cast<int>(alphabet);
}

std::size_t Vocabulary::content_index(int token) const {
  if (!is_content(token)) throw std::invalid_argument("token " + std::to_string(token) + " is not a content token");
  return static_cast<std::size_t>(token - content(0));
}

std::size_t Vocabulary::size() const { return kFirstFamily + all_families().size() + numerals + alphabet; }

std::vector<int> make_definition(Family f, const std::vector<int>& params, const Vocabulary& vocab) {
  std::vector<int> def{vocab.family(f), is_label_family(f) ? Vocabulary::kKindLabel : Vocabulary::kKindSeq};
  switch (f) {
    case Family::Rotate:
    case Family::SelectKth:
      def.push_back(vocab.numeral(params.at(0)));
      break;
    case Family::Presence:
      def.push_back(vocab.content(params.at(0)));
      break;
    case Family::Substitution:
      for (int p : params) def.push_back(vocab.content(p));
      break;
    default:
      break;
  }
  return def;
}

std::vector<int> apply_rule(const Task& task, const Vocabulary& vocab, const std::vector<int>& x) {
  switch (task.family) {
    case Family::Copy:
      return x;
    case Family::Reverse:
      return {x.rbegin(), x.rend()};
    case Family::Rotate: {
      std::vector<int> y = x;
      std::rotate(y.begin(), y.begin() + task.params.at(0) % static_cast<int>(y.size()), y.end());
      return y;
    }
    case Family::Substitution: {
      std::vector<int> y;
      for (int t : x) y.push_back(vocab.content(task.params.at(vocab.content_index(t))));
      return y;
    }
    case Family::SelectKth:
      return {x.at(task.params.at(0))};
    case Family::Majority: {
      std::map<int, int> counts;
      for (int t : x) ++counts[t];
      int best = counts.begin()->first, best_count = 0;
      for (const auto& [tok, c] : counts)
        if (c > best_count) best = tok, best_count = c;
      return {best};
    }
    case Family::Presence:
      return {std::count(x.begin(), x.end(), vocab.content(task.params.at(0))) > 0 ? Vocabulary::kTrue
                                                                                   : Vocabulary::kFalse};
    case Family::Parity:
      return {x.size() % 2 == 0 ? Vocabulary::kTrue : Vocabulary::kFalse};
  }
  throw std::logic_error("apply_rule: unhandled family");
}

Suite generate_task_suite(const SuiteConfig& config) {
  Suite suite;
  suite.vocab.alphabet = config.alphabet;
  suite.vocab.numerals = std::max<std::size_t>(4, config.min_len);
  if (config.families.empty() || config.tasks_per_family == 0 || config.instances_per_task == 0) {
    throw std::invalid_argument("generate_task_suite: need at least one family, task and instance");
  }
  check_vocabulary(config, suite.vocab);
  int next_id = 0;
  for (Family f : config.families) {
    for (std::size_t k = 0; k < config.tasks_per_family; ++k) {
      Task t;
      t.id = next_id++;
      t.family = f;
      t.gen_seed = splitmix64(config.seed * 0x100000001B3ull + static_cast<std::uint64_t>(t.id));
      std::mt19937_64 rng(t.gen_seed);
      t.params = draw_params(f, config, suite.vocab, rng);
      t.definition = make_definition(f, t.params, suite.vocab);
      t.instances = draw_instances(t, config, suite.vocab, rng);
      suite.tasks.push_back(std::move(t));
    }
  }
  return suite;
}

std::vector<int> definition_with_distractors(const Task& task, const Vocabulary& vocab, std::size_t count) {
  std::vector<int> def = task.definition;
  def.push_back(Vocabulary::kSep);
  std::mt19937_64 rng(splitmix64(task.gen_seed ^ 0xD15EA5Eull));
  for (std::size_t i = 0; i < count; ++i) def.push_back(vocab.content(uniform_index(rng, vocab.alphabet)));
  return def;
}

std::vector<int> format_instance(const TaskInstance& inst) {
  std::vector<int> z{Vocabulary::kIn};
  z.insert(z.end(), inst.x.begin(), inst.x.end());
  z.push_back(Vocabulary::kOut);
  z.insert(z.end(), inst.y.begin(), inst.y.end());
  return z;
}

TaskInstance parse_instance(const std::vector<int>& z) {
  if (z.empty() || z.front() != Vocabulary::kIn) throw std::invalid_argument("parse_instance: missing input marker");
  const auto out = std::find(z.begin() + 1, z.end(), Vocabulary::kOut);
  if (out == z.end()) throw std::invalid_argument("parse_instance: missing output marker");
  if (std::count(z.begin(), z.end(), Vocabulary::kIn) != 1 || std::count(z.begin(), z.end(), Vocabulary::kOut) != 1) {
    throw std::invalid_argument("parse_instance: repeated marker");
  }
  return {{z.begin() + 1, out}, {out + 1, z.end()}};
}

Splits make_splits(const std::vector<Task>& tasks, const SplitSpec& spec) {
  if (spec.meta_test.empty()) throw std::invalid_argument("make_splits: meta-test needs at least one task type");
  if (spec.meta_train.empty()) throw std::invalid_argument("make_splits: meta-train needs at least one task type");
  const auto types = suite_types(tasks);
  std::set<std::string> used;
  for (const auto* list : {&spec.meta_train, &spec.meta_test, &spec.test}) {
    for (const auto& t : *list) {
      if (std::find(types.begin(), types.end(), t) == types.end()) {
        throw std::invalid_argument("make_splits: task type '" + t + "' not in suite");
      }
      if (!used.insert(t).second) throw std::invalid_argument("make_splits: task type '" + t + "' requested twice");
    }
  }
  Splits s;
  s.spec = spec;
  auto contains = [](const std::vector<std::string>& v, const std::string& t) {
    return std::find(v.begin(), v.end(), t) != v.end();
  };
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string t = tasks[i].type();
    if (contains(spec.meta_train, t)) s.meta_train.push_back(i);
    if (contains(spec.meta_test, t)) s.meta_test.push_back(i);
    if (contains(spec.test, t)) s.test.push_back(i);
  }
  for (std::size_t i : s.meta_train) {
    if (tasks[i].instances.size() <= spec.validation_per_task) {
      throw std::invalid_argument("make_splits: task " + std::to_string(tasks[i].id) +
                                  " has no instances left after validation hold-out");
    }
  }
  return s;
}

SplitSpec random_split(const std::vector<Task>& tasks, std::size_t meta_train, std::size_t meta_test, std::size_t test,
                       std::size_t validation_per_task, std::uint64_t seed) {
  auto types = suite_types(tasks);
  if (meta_train + meta_test + test > types.size()) {
    throw std::invalid_argument("random_split: requested " + std::to_string(meta_train + meta_test + test) +
                                " task types but the suite has " + std::to_string(types.size()));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(types.begin(), types.end(), rng);
  SplitSpec s;
  s.validation_per_task = validation_per_task;
  s.meta_train.assign(types.begin(), types.begin() + meta_train);
  s.meta_test.assign(types.begin() + meta_train, types.begin() + meta_train + meta_test);
  s.test.assign(types.begin() + meta_train + meta_test, types.begin() + meta_train + meta_test + test);
  return s;
}

SplitSearch select_best_split(const std::vector<Task>& tasks, const SplitSpec& base, std::size_t count,
                              std::uint64_t seed, const std::function<double(const SplitSpec&)>& score) {
  if (count == 0) throw std::invalid_argument("select_best_split: need at least one candidate");
  std::vector<std::string> pool;
  for (const auto& t : suite_types(tasks))
    if (std::find(base.test.begin(), base.test.end(), t) == base.test.end()) pool.push_back(t);
  const std::size_t n_train = base.meta_train.size(), n_test = base.meta_test.size();
  if (n_train + n_test > pool.size()) throw std::invalid_argument("select_best_split: not enough non-test task types");
  SplitSearch out;
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < count; ++c) {
    std::shuffle(pool.begin(), pool.end(), rng);
    SplitSpec s = base;
    s.meta_train.assign(pool.begin(), pool.begin() + n_train);
    s.meta_test.assign(pool.begin() + n_train, pool.begin() + n_train + n_test);
    out.scores.push_back(score(s));
    if (out.scores.back() > out.scores[out.best]) out.best = c;
    out.candidates.push_back(std::move(s));
  }
  return out;
}

std::vector<TaskInstance> training_instances(const Task& task, std::size_t validation_per_task) {
  const std::size_t skip = std::min(validation_per_task, task.instances.size());
  return {task.instances.begin() + skip, task.instances.end()};
}

std::vector<TaskInstance> validation_instances(const Task& task, std::size_t validation_per_task) {
  const std::size_t take = std::min(validation_per_task, task.instances.size());
  return {task.instances.begin(), task.instances.begin() + take};
}

CandidatePool sample_candidates(const Task& task, std::size_t n, std::size_t validation_per_task, std::uint64_t seed) {
  const auto train = training_instances(task, validation_per_task);
  if (train.empty()) throw std::invalid_argument("sample_candidates: task " + std::to_string(task.id) + " has no training instances");
  if (n == 0) throw std::invalid_argument("sample_candidates: N must be >= 1");
  std::mt19937_64 rng(splitmix64(seed ^ task.gen_seed));
  CandidatePool pool;
  pool.task_id = task.id;
  if (train.size() >= n) {
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < n; ++i) pool.candidates.push_back(format_instance(train[idx[i]]));
  } else {
    for (std::size_t i = 0; i < n; ++i) pool.candidates.push_back(format_instance(train[uniform_index(rng, train.size())]));
  }
  return pool;
}

std::vector<std::vector<double>> definition_embeddings(const std::vector<Task>& tasks,
                                                       const model::ModelParams& params) {
  autodiff::NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (const Task& t : tasks) {
    const auto mean = autodiff::mean_rows(model::embed_tokens(t.definition, params));
    out.emplace_back(mean.values().begin(), mean.values().end());
  }
  return out;
}

std::vector<std::vector<std::size_t>> split_kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                                                   std::uint64_t seed) {
  const std::size_t n = points.size();
  if (k < 2) throw std::invalid_argument("split_kmeans: k must be >= 2");
  if (k > n) throw std::invalid_argument("split_kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> centers{points[uniform_index(rng, n)]};
  std::vector<double> d2(n);
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) d2[i] = std::min(d2[i], squared_distance(points[i], c));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      // All remaining points coincide with a center; take the first unused one.
      while (std::find(centers.begin(), centers.end(), points[pick]) != centers.end() && pick + 1 < n) ++pick;
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n && r >= d2[pick]; ++pick) r -= d2[pick];
    }
    centers.push_back(points[pick]);
  }

  std::vector<std::size_t> assign(n, k);
  for (int round = 0; round < 100; ++round) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = squared_distance(points[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = squared_distance(points[i], centers[c]);
        if (d < best_d) best = c, best_d = d;
      }
      if (assign[i] != best) assign[i] = best, changed = true;
    }
    if (!changed) break;
    std::vector<std::size_t> counts(k, 0);
    for (auto& c : centers) std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < points[i].size(); ++j) centers[assign[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Empty cluster: reseed at the point farthest from its current center.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = squared_distance(points[i], centers[assign[i]]);
          if (counts[assign[i]] > 1 && d > far_d) far = i, far_d = d;
        }
        --counts[assign[far]];
        assign[far] = c;
        counts[c] = 1;
        centers[c] = points[far];
        continue;
      }
      for (double& v : centers[c]) v /= static_cast<double>(counts[c]);
    }
  }
  std::vector<std::vector<std::size_t>> groups(k);
  for (std::size_t i = 0; i < n; ++i) groups[assign[i]].push_back(i);
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  std::sort(groups.begin(), groups.end());
  return groups;
}

void write_suite(std::ostream& out, const Suite& suite) {
  auto write_tokens = [&](const std::vector<int>& ts) {
    for (int t : ts) out << ' ' << t;
  };
  out << "suite v1 " << suite.vocab.alphabet << ' ' << suite.vocab.numerals << '\n';
  for (const Task& t : suite.tasks) {
    out << "task " << t.id << ' ' << t.type() << ' ' << t.gen_seed << " params " << t.params.size();
    write_tokens(t.params);
    out << " def " << t.definition.size();
    write_tokens(t.definition);
    out << '\n';
    for (const auto& inst : t.instances) {
      out << "inst";
      write_tokens(inst.x);
      out << " ->";
      write_tokens(inst.y);
      out << '\n';
    }
    out << "end\n";
  }
}

Suite read_suite(std::istream& in) {
  auto fail = [](std::size_t line, const std::string& what) {
    throw std::invalid_argument("suite line " + std::to_string(line) + ": " + what);
  };
  Suite suite;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) fail(1, "empty input");
  ++lineno;
  {
    std::istringstream hs(line);
    std::string word, version;
    if (!(hs >> word >> version >> suite.vocab.alphabet >> suite.vocab.numerals) || word != "suite" || version != "v1") {
      fail(lineno, "expected 'suite v1 <alphabet> <numerals>'");
    }
  }
  auto read_list = [&](std::istringstream& ls, const char* tag) {
    std::string word;
    std::size_t n = 0;
    if (!(ls >> word >> n) || word != tag) fail(lineno, std::string("expected '") + tag + " <n> ...'");
    std::vector<int> v(n);
    for (int& x : v)
      if (!(ls >> x)) fail(lineno, std::string("short ") + tag + " list");
    return v;
  };
  Task* current = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "task") {
      if (current) fail(lineno, "task started before 'end'");
      Task t;
      std::string type;
      if (!(ls >> t.id >> type >> t.gen_seed)) fail(lineno, "expected 'task <id> <type> <seed>'");
      t.family = family_from_name(type);
      t.params = read_list(ls, "params");
      t.definition = read_list(ls, "def");
      suite.tasks.push_back(std::move(t));
      current = &suite.tasks.back();
    } else if (head == "inst") {
      if (!current) fail(lineno, "instance outside a task");
      TaskInstance inst;
      std::string tok;
      bool output = false;
      while (ls >> tok) {
        if (tok == "->") {
          output = true;
          continue;
        }
        (output ? inst.y : inst.x).push_back(std::stoi(tok));
      }
      if (!output || inst.x.empty() || inst.y.empty()) fail(lineno, "expected 'inst <x...> -> <y...>'");
      current->instances.push_back(std::move(inst));
    } else if (head == "end") {
      if (!current) fail(lineno, "'end' without task");
      current = nullptr;
    } else {
      fail(lineno, "unknown record '" + head + "'");
    }
  }
  if (current) fail(lineno, "missing final 'end'");
  return suite;
}

}  // namespace bilopt::tasks
