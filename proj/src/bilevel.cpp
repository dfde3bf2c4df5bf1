#include "bilopt/bilevel.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>

namespace bilopt::bilevel {

namespace ad = autodiff;

namespace {

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string where(std::size_t outer, std::size_t inner) {
  return "outer step " + std::to_string(outer) + ", inner step " + std::to_string(inner);
}

TensorList clone_all(const TensorList& ts) {
  TensorList out;
  for (const Tensor& t : ts) out.push_back(t.clone_leaf());
  return out;
}

}  // namespace

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void validate(const HypergradConfig& c) {
  if (c.K < 1) throw std::invalid_argument("bilevel.K must be >= 1");
  if (!(c.gamma > 0.0)) throw std::invalid_argument("bilevel.gamma must be > 0");
  if (!(c.eta_in > 0.0)) throw std::invalid_argument("bilevel.eta_in must be > 0");
  if (!(c.eta_out >= 0.0)) throw std::invalid_argument("bilevel.eta_out must be >= 0");
}

void Optimizer::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

void Optimizer::step(TensorList& params, const TensorList& grads) { step_flat(params, ad::flatten(grads)); }

void Optimizer::step_flat(TensorList& params, std::span<const double> grad) {
  if (grad.size() != ad::total_size(params)) throw std::invalid_argument("Optimizer::step: gradient size mismatch");
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (kind_ == OptimizerKind::Adam && m_.size() != grad.size()) {
    m_.assign(grad.size(), 0.0);
    v_.assign(grad.size(), 0.0);
    t_ = 0;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  std::size_t k = 0;
  for (Tensor& p : params) {
    for (double& x : p.mutable_values()) {
      if (kind_ == OptimizerKind::Sgd) {
        x -= lr_ * grad[k];
      } else {
        m_[k] = b1 * m_[k] + (1.0 - b1) * grad[k];
        v_[k] = b2 * v_[k] + (1.0 - b2) * grad[k] * grad[k];
        x -= lr_ * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + eps);
      }
      ++k;
    }
  }
}

InnerResult inner_loop(TensorList& theta, const TensorList& phi, const BilevelProblem& problem,
                       const HypergradConfig& config, std::size_t outer, Optimizer& optimizer) {
  if (config.K < 1) throw std::invalid_argument("inner_loop: K must be >= 1");
  InnerResult out;
  for (std::size_t k = 0; k < config.K; ++k) {
    TensorList grads;
    double value = 0.0;
    try {
      ad::Tape tape;
      const Tensor loss = problem.inner_loss(theta, phi, {outer, k});
      value = loss.item();
      grads = ad::grad(loss, theta);
    } catch (const ad::NonFiniteError& e) {
      throw DivergenceError("inner loss non-finite at " + where(outer, k) + ": " + e.what());
    }
    if (!std::isfinite(value)) throw DivergenceError("inner loss " + std::to_string(value) + " at " + where(outer, k));
    out.losses.push_back(value);
    optimizer.step(theta, grads);
  }
  return out;
}

std::vector<double> neumann_inverse_hvp(std::span<const double> v,
                                        const std::function<std::vector<double>(std::span<const double>)>& hvp,
                                        std::size_t M, double gamma) {
  std::vector<double> u(v.begin(), v.end()), p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = gamma * u[i];
  for (std::size_t m = 1; m <= M; ++m) {
    const std::vector<double> hu = hvp(u);
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] -= gamma * hu[i];
      p[i] += gamma * u[i];
    }
    if (!all_finite(p)) throw DivergenceError("neumann_inverse_hvp: non-finite value at term " + std::to_string(m));
  }
  return p;
}

double power_iteration(const std::function<std::vector<double>(std::span<const double>)>& op, std::size_t dim,
                       std::size_t iterations, std::uint64_t seed) {
  if (dim == 0) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(dim);
  for (double& x : v) x = normal(rng);
  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double a : x) n += a * a;
    n = std::sqrt(n);
    if (n > 0.0)
      for (double& a : x) a /= n;
    return n;
  };
  normalize(v);
  double lambda = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<double> w = op(v);
    lambda = 0.0;
    for (std::size_t i = 0; i < dim; ++i) lambda += v[i] * w[i];
    if (normalize(w) == 0.0) return 0.0;
    v = std::move(w);
  }
  return lambda;
}

Hypergradient hypergrad_ift_neumann(const TensorList& theta, const TensorList& phi, const BilevelProblem& problem,
                                    const HypergradConfig& config, std::size_t outer, bool estimate_lambda) {
  Hypergradient out;
  std::vector<double> g_out;
  {
    ad::Tape tape;
    const Tensor loss = problem.outer_loss(theta, outer);
    out.outer_loss = loss.item();
    g_out = ad::flatten(ad::grad(loss, theta));
  }
  ad::Tape tape(true);
  const Tensor inner = problem.inner_loss(theta, phi, {outer, config.K - 1});
  const ad::SecondOrder so(inner, theta);
  const auto hvp = [&so](std::span<const double> v) { return so.hessian_vector(v); };
  if (estimate_lambda) {
    out.lambda_max = power_iteration(hvp, g_out.size(), config.power_iterations, config.seed ^ 0x5EEDull);
    out.contraction_warning = config.gamma * std::abs(*out.lambda_max) >= 2.0;
  }
  const std::vector<double> p = neumann_inverse_hvp(g_out, hvp, config.M, config.gamma);
  out.grad = so.mixed(phi, p);
  for (double& g : out.grad) g = -g;
  return out;
}

Hypergradient hypergrad_unrolled(const TensorList& theta0, const TensorList& phi, const BilevelProblem& problem,
                                 const HypergradConfig& config, std::size_t outer) {
  if (config.K > 50) throw std::invalid_argument("hypergrad_unrolled: K=" + std::to_string(config.K) + " exceeds 50");
  if (config.inner_optimizer != OptimizerKind::Sgd) {
    throw std::invalid_argument("hypergrad_unrolled: only plain gradient inner steps are differentiated");
  }
  ad::Tape tape(true);
  TensorList theta = clone_all(theta0);
  for (std::size_t k = 0; k < config.K; ++k) {
    const Tensor loss = problem.inner_loss(theta, phi, {outer, k});
    const TensorList g = ad::grad(loss, theta, true);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = ad::sub(theta[i], ad::scale(g[i], config.eta_in));
  }
  const Tensor loss = problem.outer_loss(theta, outer);
  Hypergradient out;
  out.outer_loss = loss.item();
  out.grad = ad::flatten(ad::grad(loss, phi));
  return out;
}

Hypergradient hypergrad_finite_difference(const TensorList& theta0, const TensorList& phi,
                                          const BilevelProblem& problem, const HypergradConfig& config,
                                          std::size_t outer, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("hypergrad_finite_difference: step must be > 0");
  const std::size_t dim = ad::total_size(phi);
  if (dim > 64) throw std::invalid_argument("hypergrad_finite_difference: φ has " + std::to_string(dim) + " > 64 values");
  auto pipeline = [&](const TensorList& phi_eval) {
    TensorList theta = clone_all(theta0);
    Optimizer opt(config.inner_optimizer, config.eta_in);
    inner_loop(theta, phi_eval, problem, config, outer, opt);
    ad::NoGradGuard guard;
    return problem.outer_loss(theta, outer).item();
  };
  Hypergradient out;
  out.outer_loss = pipeline(phi);
  for (std::size_t i = 0; i < phi.size(); ++i) {
    for (std::size_t j = 0; j < phi[i].size(); ++j) {
      TensorList up = clone_all(phi), down = clone_all(phi);
      up[i].mutable_values()[j] += step;
      down[i].mutable_values()[j] -= step;
      out.grad.push_back((pipeline(up) - pipeline(down)) / (2.0 * step));
    }
  }
  return out;
}

void write_trace_line(std::ostream& out, const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["inner_loss"] = r.inner_loss;
  j["outer_loss"] = r.outer_loss;
  j["selection_pct"] = r.selection_pct ? nlohmann::ordered_json(*r.selection_pct) : nlohmann::ordered_json(nullptr);
  j["wall_ms"] = r.wall_ms;
  out << j.dump() << '\n';
}

TrainResult bilevel_train(TensorList& theta, TensorList& phi, const BilevelProblem& problem,
                          const HypergradConfig& config, const TrainOptions& options) {
  validate(config);
  Optimizer inner_opt(config.inner_optimizer, config.eta_in);
  Optimizer outer_opt(config.outer_optimizer, config.eta_out);
  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t s = 0; s < options.outer_steps; ++s) {
    const auto start = std::chrono::steady_clock::now();
    TraceRecord rec;
    rec.step = s;
    if (options.selection) rec.selection_pct = options.selection(theta, phi);
    if (!config.carry_inner_state) inner_opt.reset();
    InnerResult inner;
    try {
      inner = inner_loop(theta, phi, problem, config, s, inner_opt);
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.what(), result.trace);
    }
    rec.inner_loss = inner.losses.back();
    Hypergradient hg;
    try {
      if (config.eta_out > 0.0) {
        hg = hypergrad_ift_neumann(theta, phi, problem, config, s, config.check_contraction && s == 0);
      } else {
        ad::NoGradGuard guard;
        hg.outer_loss = problem.outer_loss(theta, s).item();
      }
    } catch (const ad::NonFiniteError& e) {
      throw DivergenceError("hypergradient non-finite at outer step " + std::to_string(s) + ": " + e.what(), result.trace);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " (outer step " + std::to_string(s) + ")", result.trace);
    }
    rec.outer_loss = hg.outer_loss;
    if (!std::isfinite(rec.outer_loss)) {
      throw DivergenceError("outer loss non-finite at outer step " + std::to_string(s), result.trace);
    }
    if (hg.contraction_warning) {
      ++result.warnings;
      std::cerr << "warning: gamma * lambda_max = " << config.gamma * std::abs(*hg.lambda_max)
                << " >= 2; the Neumann series may not converge\n";
    }
    if (config.eta_out > 0.0) {
      if (!all_finite(hg.grad)) {
        throw DivergenceError("hypergradient non-finite at outer step " + std::to_string(s), result.trace);
      }
      if (config.outer_linear_decay) {
        outer_opt.set_lr(config.eta_out * (1.0 - static_cast<double>(s) / static_cast<double>(options.outer_steps)));
      }
      outer_opt.step_flat(phi, hg.grad);
    }
    if (options.timing) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    result.trace.push_back(rec);
    if (options.on_record) options.on_record(rec);
    if (rec.outer_loss < best) {
      best = rec.outer_loss;
      since_best = 0;
    } else if (options.patience > 0 && ++since_best >= options.patience) {
      break;
    }
  }
  return result;
}

std::vector<double> single_level_train(TensorList& theta, const TensorList& phi, const BilevelProblem& problem,
                                       const HypergradConfig& config, std::size_t outer_steps) {
  Optimizer opt(config.inner_optimizer, config.eta_in);
  std::vector<double> losses;
  for (std::size_t s = 0; s < outer_steps; ++s) {
    if (!config.carry_inner_state) opt.reset();
    const auto r = inner_loop(theta, phi, problem, config, s, opt);
    losses.insert(losses.end(), r.losses.begin(), r.losses.end());
  }
  return losses;
}

}  // namespace bilopt::bilevel
