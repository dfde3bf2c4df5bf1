#pragma once

// Bilevel optimization over flat tensor lists: an inner loop on θ for fixed
// φ, and an outer step on φ driven by a hypergradient. Three hypergradient
// routes are provided: implicit differentiation with a truncated Neumann
// series (the training path), differentiation through the unrolled inner
// loop, and central finite differences of the whole pipeline.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilopt/autodiff.hpp"

namespace bilopt::bilevel {

using autodiff::Tensor;
using TensorList = std::vector<Tensor>;

enum class OptimizerKind { Sgd, Adam };
std::string optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& name);

struct HypergradConfig {
  std::size_t K = 20;
  std::size_t M = 1;
  double gamma = 1e-5;
  double eta_in = 0.1;
  double eta_out = 0.1;
  OptimizerKind inner_optimizer = OptimizerKind::Sgd;
  OptimizerKind outer_optimizer = OptimizerKind::Sgd;
  std::uint64_t seed = 1;
  /// Power-iteration estimate of the largest Hessian eigenvalue on the first
  /// outer step; warns when gamma * lambda_max >= 2.
  bool check_contraction = true;
  std::size_t power_iterations = 20;
  /// Keep inner optimizer moments across outer steps instead of resetting.
  bool carry_inner_state = false;
  /// Decay the outer rate linearly to zero over the run instead of holding it.
  bool outer_linear_decay = false;
};

/// Throws std::invalid_argument naming the first violated constraint. A zero
/// outer rate is allowed (it freezes φ).
void validate(const HypergradConfig& config);

/// Identifies a mini-batch: outer iteration and inner step. Problems must
/// return the same batch for the same index, which keeps every hypergradient
/// route on identical data.
struct BatchIndex {
  std::size_t outer = 0;
  std::size_t inner = 0;
};

struct BilevelProblem {
  std::function<Tensor(const TensorList& theta, const TensorList& phi, BatchIndex batch)> inner_loss;
  std::function<Tensor(const TensorList& theta, std::size_t outer)> outer_loss;
};

/// First-order optimizer acting in place on leaf tensors.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}
  void step(TensorList& params, const TensorList& grads);
  void step_flat(TensorList& params, std::span<const double> grad);
  void reset();
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

struct InnerResult {
  std::vector<double> losses;  // one per inner step, before the update
};

/// K steps on θ (leaves, updated in place) with φ fixed.
InnerResult inner_loop(TensorList& theta, const TensorList& phi, const BilevelProblem& problem,
                       const HypergradConfig& config, std::size_t outer, Optimizer& optimizer);

/// γ Σ_{m=0}^{M} (I − γH)^m v with one Hessian-vector product per term.
std::vector<double> neumann_inverse_hvp(std::span<const double> v,
                                        const std::function<std::vector<double>(std::span<const double>)>& hvp, std::size_t M,
                                        double gamma);

/// Largest-magnitude eigenvalue estimate of the operator by power iteration
/// from a deterministic start vector.
double power_iteration(const std::function<std::vector<double>(std::span<const double>)>& op, std::size_t dim,
                       std::size_t iterations, std::uint64_t seed);

struct Hypergradient {
  std::vector<double> grad;  // flat over φ
  double outer_loss = 0.0;
  std::optional<double> lambda_max;
  bool contraction_warning = false;
};

/// IFT route at (θ, φ): g = ∂L_out/∂θ, p = Neumann(H⁻¹) g, result −pᵀ ∂²L_in/∂θ∂φ.
/// L_in is evaluated on the batch of the last inner step of `outer`.
Hypergradient hypergrad_ift_neumann(const TensorList& theta, const TensorList& phi, const BilevelProblem& problem,
                                    const HypergradConfig& config, std::size_t outer, bool estimate_lambda = false);

/// Exact derivative of L_out(θ^(K)(φ)) through K plain gradient steps from
/// theta0. K is capped at 50.
Hypergradient hypergrad_unrolled(const TensorList& theta0, const TensorList& phi, const BilevelProblem& problem,
                                 const HypergradConfig& config, std::size_t outer);

/// Central differences of L_out(θ^(K)(φ)) over each φ coordinate, rerunning
/// the configured inner loop from theta0. φ dimension is capped at 64.
Hypergradient hypergrad_finite_difference(const TensorList& theta0, const TensorList& phi,
                                          const BilevelProblem& problem, const HypergradConfig& config,
                                          std::size_t outer, double step);

struct TraceRecord {
  std::size_t step = 0;
  double inner_loss = 0.0;
  double outer_loss = 0.0;
  std::optional<double> selection_pct;
  double wall_ms = 0.0;
};

void write_trace_line(std::ostream& out, const TraceRecord& r);

/// Raised when a loss or intermediate becomes non-finite. The message names
/// the step; `trace` holds the records completed before the failure.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what, std::vector<TraceRecord> trace = {})
      : std::runtime_error(what), trace(std::move(trace)) {}
  std::vector<TraceRecord> trace;
};

struct TrainOptions {
  std::size_t outer_steps = 10;
  /// Stop when the outer loss has not improved for this many steps (0: off).
  std::size_t patience = 0;
  /// Measure wall time per step; off keeps traces reproducible byte for byte.
  bool timing = false;
  /// Called before each outer update with the current θ and φ.
  std::function<std::optional<double>(const TensorList& theta, const TensorList& phi)> selection;
  /// Called after each record is complete.
  std::function<void(const TraceRecord&)> on_record;
};

struct TrainResult {
  std::vector<TraceRecord> trace;
  std::size_t warnings = 0;
};

/// Alternates inner_loop (warm-started θ) and one outer step on φ.
TrainResult bilevel_train(TensorList& theta, TensorList& phi, const BilevelProblem& problem,
                          const HypergradConfig& config, const TrainOptions& options);

/// Single-level reference: the same inner schedule with φ frozen and no outer
/// steps. Returns the per-step inner losses.
std::vector<double> single_level_train(TensorList& theta, const TensorList& phi, const BilevelProblem& problem,
                                       const HypergradConfig& config, std::size_t outer_steps);

}  // namespace bilopt::bilevel
