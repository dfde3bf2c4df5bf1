#include "bilopt/config.hpp"

#include "bilopt/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace bilopt::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  return std::all_of(key.begin(), key.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; });
}

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T, class F>
std::vector<T> map_list(const std::string& v, F f) {
  std::vector<T> out;
  for (const auto& s : to_list(v)) out.push_back(f(s));
  return out;
}

std::string str(std::size_t v) { return std::to_string(v); }
std::string str(bool v) { return v ? "true" : "false"; }
std::string str(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}
std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
  return out;
}
template <class T, class F>
std::string join_with(const std::vector<T>& xs, F f) {
  std::vector<std::string> s;
  for (const auto& x : xs) s.push_back(f(x));
  return join(s);
}

// Library name lookups throw std::invalid_argument; surface them as config
// errors.
template <class F>
auto named(F f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

struct Key {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_KEY(field) \
  Key { [](RunConfig& c, const std::string& v) { c.field = to_size(v); }, [](const RunConfig& c) { return str(c.field); } }
#define DOUBLE_KEY(field)                                                     \
  Key {                                                                       \
    [](RunConfig& c, const std::string& v) { c.field = to_double(v); },       \
        [](const RunConfig& c) { return str(static_cast<double>(c.field)); } \
  }
#define BOOL_KEY(field) \
  Key { [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }, [](const RunConfig& c) { return str(c.field); } }
#define OPT_KEY(field)                                                                                  \
  Key {                                                                                                 \
    [](RunConfig& c, const std::string& v) { c.field = named([&] { return bilevel::optimizer_from_name(v); }); }, \
        [](const RunConfig& c) { return bilevel::optimizer_name(c.field); }                            \
  }
#define LIST_KEY(field)                                                       \
  Key {                                                                       \
    [](RunConfig& c, const std::string& v) { c.field = to_list(v); }, [](const RunConfig& c) { return join(c.field); } \
  }
#define SIZES_KEY(field)                                                                                   \
  Key {                                                                                                    \
    [](RunConfig& c, const std::string& v) { c.field = map_list<std::size_t>(v, to_size); },               \
        [](const RunConfig& c) { return join_with(c.field, [](std::size_t x) { return str(x); }); }       \
  }

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table{
      {"suite.tasks_per_family", SIZE_KEY(suite.tasks_per_family)},
      {"suite.instances_per_task", SIZE_KEY(suite.instances_per_task)},
      {"suite.alphabet", SIZE_KEY(suite.alphabet)},
      {"suite.min_len", SIZE_KEY(suite.min_len)},
      {"suite.max_len", SIZE_KEY(suite.max_len)},
      {"suite.families",
       {[](RunConfig& c, const std::string& v) {
          c.suite.families = map_list<tasks::Family>(v, [](const std::string& s) {
            return named([&] { return tasks::family_from_name(s); });
          });
        },
        [](const RunConfig& c) { return join_with(c.suite.families, tasks::family_name); }}},
      {"split.meta_train", LIST_KEY(split.meta_train)},
      {"split.meta_test", LIST_KEY(split.meta_test)},
      {"split.test", LIST_KEY(split.test)},
      {"split.validation_per_task", SIZE_KEY(split.validation_per_task)},
      {"instruction.arm",
       {[](RunConfig& c, const std::string& v) { c.arm = arm_from_name(v); },
        [](const RunConfig& c) { return arm_name(c.arm); }}},
      {"instruction.length", SIZE_KEY(instruction_length)},
      {"instruction.candidates", SIZE_KEY(candidates)},
      {"instruction.distractors", SIZE_KEY(distractors)},
      {"instruction.design",
       {[](RunConfig& c, const std::string& v) {
          if (v == "exemplar_blank") c.design = CandidateDesign::ExemplarBlank;
          else if (v == "sampled") c.design = CandidateDesign::Sampled;
          else throw ConfigError("unknown candidate design '" + v + "' (expected exemplar_blank or sampled)");
        },
        [](const RunConfig& c) {
          return std::string(c.design == CandidateDesign::ExemplarBlank ? "exemplar_blank" : "sampled");
        }}},
      {"model.d", SIZE_KEY(d)},
      {"model.d_latent", SIZE_KEY(d_latent)},
      {"model.max_decode", SIZE_KEY(max_decode)},
      {"bilevel.K", SIZE_KEY(hypergrad.K)},
      {"bilevel.M", SIZE_KEY(hypergrad.M)},
      {"bilevel.gamma", DOUBLE_KEY(hypergrad.gamma)},
      {"bilevel.eta_in", DOUBLE_KEY(hypergrad.eta_in)},
      {"bilevel.eta_out", DOUBLE_KEY(hypergrad.eta_out)},
      {"bilevel.inner_optimizer", OPT_KEY(hypergrad.inner_optimizer)},
      {"bilevel.outer_optimizer", OPT_KEY(hypergrad.outer_optimizer)},
      {"bilevel.outer_decay", BOOL_KEY(hypergrad.outer_linear_decay)},
      {"bilevel.check_contraction", BOOL_KEY(hypergrad.check_contraction)},
      {"bilevel.power_iterations", SIZE_KEY(hypergrad.power_iterations)},
      {"bilevel.carry_inner_state", BOOL_KEY(hypergrad.carry_inner_state)},
      {"bilevel.outer_steps", SIZE_KEY(outer_steps)},
      {"bilevel.batch_size", SIZE_KEY(batch_size)},
      {"bilevel.outer_batch_size", SIZE_KEY(outer_batch_size)},
      {"bilevel.patience", SIZE_KEY(patience)},
      {"bilevel.timing", BOOL_KEY(timing)},
      {"baseline.epochs", SIZE_KEY(baseline_epochs)},
      {"baseline.batch_size", SIZE_KEY(baseline_batch_size)},
      {"baseline.lr", DOUBLE_KEY(baseline_lr)},
      {"baseline.optimizer", OPT_KEY(baseline_optimizer)},
      {"eval.mode",
       {[](RunConfig& c, const std::string& v) {
          if (v != "arm") named([&] { return testing_mode_from_name(v); });
          c.eval_mode = v == "arm" ? "" : v;
        },
        [](const RunConfig& c) { return c.eval_mode.empty() ? std::string("arm") : c.eval_mode; }}},
      {"eval.checkpoint",
       {[](RunConfig& c, const std::string& v) { c.eval_checkpoint = v; },
        [](const RunConfig& c) { return c.eval_checkpoint.string(); }}},
      {"run.seeds",
       {[](RunConfig& c, const std::string& v) { c.seeds = map_list<std::uint64_t>(v, to_u64); },
        [](const RunConfig& c) { return join_with(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); }}},
      {"run.out",
       {[](RunConfig& c, const std::string& v) { c.out = v; }, [](const RunConfig& c) { return c.out.string(); }}},
      {"compare.arms",
       {[](RunConfig& c, const std::string& v) { c.compare_arms = map_list<Arm>(v, arm_from_name); },
        [](const RunConfig& c) { return join_with(c.compare_arms, arm_name); }}},
      {"poc.curve_every", SIZE_KEY(poc_curve_every)},
      {"sweep.axis",
       {[](RunConfig& c, const std::string& v) {
          if (v == "length") c.sweep_axis = SweepAxis::Length;
          else if (v == "meta_test_count") c.sweep_axis = SweepAxis::MetaTestCount;
          else if (v == "split_method") c.sweep_axis = SweepAxis::SplitMethod;
          else throw ConfigError("unknown sweep axis '" + v + "' (expected length, meta_test_count or split_method)");
        },
        [](const RunConfig& c) { return sweep_axis_name(c.sweep_axis); }}},
      {"sweep.lengths", SIZES_KEY(sweep_lengths)},
      {"sweep.meta_test_counts", SIZES_KEY(sweep_meta_test_counts)},
      {"sweep.kmeans_k", SIZE_KEY(sweep_kmeans_k)},
  };
  return table;
}

#undef SIZE_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY
#undef OPT_KEY
#undef LIST_KEY
#undef SIZES_KEY

const std::vector<std::pair<Arm, std::string>>& arm_names() {
  static const std::vector<std::pair<Arm, std::string>> names{
      {Arm::Definition, "definition"},
      {Arm::DefinitionDistractors, "definition_distractors"},
      {Arm::ExemplarPerTask, "exemplar_per_task"},
      {Arm::ExemplarPerInstance, "exemplar_per_instance"},
      {Arm::Blank, "blank"},
      {Arm::EmbedderDP, "embedder_dp"},
      {Arm::EmbedderIC, "embedder_ic"},
      {Arm::DefinitionEmbedderDP, "definition_embedder_dp"},
      {Arm::DefinitionEmbedderIC, "definition_embedder_ic"},
      {Arm::ExtractorDP, "extractor_dp"},
      {Arm::ExtractorIC, "extractor_ic"},
  };
  return names;
}

void check_split(const RunConfig& c) {
  std::set<std::string> known;
  for (auto f : c.suite.families) known.insert(tasks::family_name(f));
  std::set<std::string> seen;
  for (const auto* list : {&c.split.meta_train, &c.split.meta_test, &c.split.test}) {
    for (const auto& t : *list) {
      if (!known.count(t)) throw ConfigError("split names task type '" + t + "' which is not in suite.families");
      if (!seen.insert(t).second) throw ConfigError("task type '" + t + "' appears in two splits");
    }
  }
  if (c.split.meta_train.empty() || c.split.test.empty()) throw ConfigError("split.meta_train and split.test must be nonempty");
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::stringstream ss(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(ss, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'section.key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(where + ": malformed key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

ConfigMap load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

void apply_override(ConfigMap& map, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
  const std::string key = trim(assignment.substr(0, eq));
  if (!keys().count(key)) throw ConfigError("override names unknown key '" + key + "'");
  map[key] = trim(assignment.substr(eq + 1));
}

std::string arm_name(Arm a) {
  for (const auto& [arm, name] : arm_names())
    if (arm == a) return name;
  throw std::invalid_argument("arm_name: bad arm");
}

Arm arm_from_name(const std::string& name) {
  for (const auto& [arm, n] : arm_names())
    if (n == name) return arm;
  std::string all;
  for (const auto& [arm, n] : arm_names()) all += (all.empty() ? "" : ", ") + n;
  throw ConfigError("unknown arm '" + name + "' (expected one of " + all + ")");
}

bool is_bilevel(Arm a) { return is_embedder(a) || is_extractor(a); }

bool is_embedder(Arm a) {
  return a == Arm::EmbedderDP || a == Arm::EmbedderIC || a == Arm::DefinitionEmbedderDP ||
         a == Arm::DefinitionEmbedderIC;
}

bool is_extractor(Arm a) { return a == Arm::ExtractorDP || a == Arm::ExtractorIC; }

training::Source baseline_source(Arm a) {
  switch (a) {
    case Arm::Definition: return training::Source::Definition;
    case Arm::DefinitionDistractors: return training::Source::DefinitionDistractors;
    case Arm::ExemplarPerTask: return training::Source::ExemplarPerTask;
    case Arm::ExemplarPerInstance: return training::Source::ExemplarPerInstance;
    case Arm::Blank: return training::Source::Blank;
    default: throw std::invalid_argument("baseline_source: " + arm_name(a) + " is a bilevel arm");
  }
}

std::string sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::Length: return "length";
    case SweepAxis::MetaTestCount: return "meta_test_count";
    case SweepAxis::SplitMethod: return "split_method";
  }
  return "";
}

RunConfig run_config_from_map(const ConfigMap& map) {
  RunConfig c;
  for (const auto& [key, value] : map) {
    const auto it = keys().find(key);
    if (it == keys().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second.set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  if (c.seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  try {
    bilevel::validate(c.hypergrad);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  check_split(c);
  if (c.d == 0 || c.d_latent == 0) throw ConfigError("model.d and model.d_latent must be positive");
  if (c.instruction_length == 0) throw ConfigError("instruction.length must be positive");
  if (c.candidates < 2) throw ConfigError("instruction.candidates must be at least 2");
  if (c.outer_batch_size == 0 || c.batch_size == 0 || c.baseline_batch_size == 0)
    throw ConfigError("batch sizes must be positive");
  if (c.max_decode == 0) throw ConfigError("model.max_decode must be positive");
  if (c.sweep_kmeans_k < 2) throw ConfigError("sweep.kmeans_k must be at least 2");
  if (c.sweep_lengths.empty()) throw ConfigError("sweep.lengths must be nonempty");
  return c;
}

std::string dump_config(const RunConfig& config) {
  std::string out;
  for (const auto& [key, k] : keys()) out += key + " = " + k.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [key, k] : keys()) out.push_back(key);
  return out;
}

}  // namespace bilopt::harness
