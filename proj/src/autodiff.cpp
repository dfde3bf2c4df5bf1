#include "bilopt/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace bilopt::autodiff {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_recording = true;
std::atomic<std::uint64_t> g_next_tape_id{1};

class RecordingScope {
 public:
  explicit RecordingScope(bool on) : previous_(g_recording) { g_recording = on; }
  ~RecordingScope() { g_recording = previous_; }
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

 private:
  bool previous_;
};

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor, got " + to_string(t.shape()));
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

void check_finite(const char* op, std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream msg;
      msg << op << ": non-finite " << what << " at element " << i << " (" << v[i] << ")";
      throw NonFiniteError(msg.str());
    }
  }
}

std::vector<double> copy_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + to_string(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  check_finite("constant", values, "value");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("rows: tensor is not 2-D " + to_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("cols: tensor is not 2-D " + to_string(shape()));
  return shape()[1];
}

std::size_t Tensor::size() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return !node_->backward; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw std::logic_error("mutable_values: tensor has recorded history");
  return node_->value;
}

Tensor Tensor::detach() const { return constant(shape(), copy_values(*this)); }

Tensor Tensor::clone_leaf(bool requires_grad) const { return leaf(shape(), copy_values(*this), requires_grad); }

// ---- Tape -------------------------------------------------------------------

Tape::Tape(bool retain_for_higher_order)
    : id_(g_next_tape_id.fetch_add(1)), retain_(retain_for_higher_order), previous_(g_active_tape) {
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

bool recording_enabled() { return g_recording && g_active_tape != nullptr; }

Tensor make_result(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  bool needs_grad = false;
  for (const Tensor& in : inputs) {
    if (in.is_leaf()) check_finite(op, in.values(), "input");
    needs_grad = needs_grad || in.requires_grad();
  }
  check_finite(op, values, "output");
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(values);
  if (needs_grad && recording_enabled()) {
    Tape* tape = g_active_tape;
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->tape_id = tape->id_;
    node->tape_index = tape->nodes_.size();
    tape->nodes_.push_back(node);
  }
  return Tensor(std::move(node));
}

// ---- primitives -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{g, g};
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{g, neg(g)};
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
                       return std::vector<Tensor>{mul(g, in[1]), mul(g, in[0])};
                     });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  return make_result("scale", a.shape(), std::move(out), {a},
                     [s](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{scale(g, s)};
                     });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_error("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
                       return std::vector<Tensor>{matmul(g, transpose(in[1])), matmul(transpose(in[0]), g)};
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {a},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{transpose(g)};
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  return make_result("reshape", std::move(shape), copy_values(a), {a},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
                       return std::vector<Tensor>{reshape(g, in[0].shape())};
                     });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_result("sum", {}, {s}, {a}, [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
    return std::vector<Tensor>{expand(g, in[0].shape())};
  });
}

Tensor expand(const Tensor& s, Shape shape) {
  if (s.size() != 1) throw std::invalid_argument("expand: expected a single-element tensor, got " + to_string(s.shape()));
  std::vector<double> out(numel(shape), s.values()[0]);
  return make_result("expand", std::move(shape), std::move(out), {s},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
                       return std::vector<Tensor>{reshape(sum(g), in[0].shape())};
                     });
}

Tensor sum_rows(const Tensor& a) {
  require_rank2("sum_rows", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.values()[i * n + j];
  return make_result("sum_rows", {1, n}, std::move(out), {a},
                     [m](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{broadcast_rows(g, m)};
                     });
}

Tensor broadcast_rows(const Tensor& row, std::size_t m) {
  require_rank2("broadcast_rows", row);
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: expected 1 x n, got " + to_string(row.shape()));
  const std::size_t n = row.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(row.values().begin(), row.values().end(), out.begin() + i * n);
  return make_result("broadcast_rows", {m, n}, std::move(out), {row},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{sum_rows(g)};
                     });
}

Tensor sum_cols(const Tensor& a) {
  require_rank2("sum_cols", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.values()[i * n + j];
  return make_result("sum_cols", {m, 1}, std::move(out), {a},
                     [n](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{broadcast_cols(g, n)};
                     });
}

Tensor broadcast_cols(const Tensor& col, std::size_t n) {
  require_rank2("broadcast_cols", col);
  if (col.cols() != 1) throw std::invalid_argument("broadcast_cols: expected m x 1, got " + to_string(col.shape()));
  const std::size_t m = col.rows();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::fill_n(out.begin() + i * n, n, col.values()[i]);
  return make_result("broadcast_cols", {m, n}, std::move(out), {col},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{sum_cols(g)};
                     });
}

Tensor mean_rows(const Tensor& a) {
  require_rank2("mean_rows", a);
  if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty tensor");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows()));
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  return make_result("tanh", a.shape(), std::move(out), {a},
                     [](const Tensor& g, const Tensor& y, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{sub(g, mul(g, mul(y, y)))};
                     });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  return make_result("exp", a.shape(), std::move(out), {a},
                     [](const Tensor& g, const Tensor& y, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{mul(g, y)};
                     });
}

Tensor softmax(const Tensor& a) {
  require_rank2("softmax", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.values().data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result("softmax", a.shape(), std::move(out), {a},
                     [n](const Tensor& g, const Tensor& y, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{mul(y, sub(g, broadcast_cols(sum_cols(mul(g, y)), n)))};
                     });
}

Tensor log_softmax(const Tensor& a) {
  require_rank2("log_softmax", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.values().data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lse;
  }
  return make_result("log_softmax", a.shape(), std::move(out), {a},
                     [n](const Tensor& g, const Tensor& y, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{sub(g, mul(exp(y), broadcast_cols(sum_cols(g), n)))};
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank2("gather_rows", table);
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::invalid_argument("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                  std::to_string(v) + " rows");
    }
    std::copy_n(table.values().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result("gather_rows", {ids.size(), d}, std::move(out), {table},
                     [saved = std::move(saved), v](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{scatter_rows(g, saved, v)};
                     });
}

Tensor scatter_rows(const Tensor& rows, std::span<const int> ids, std::size_t table_rows) {
  require_rank2("scatter_rows", rows);
  if (rows.rows() != ids.size()) {
    throw std::invalid_argument("scatter_rows: " + std::to_string(ids.size()) + " ids for rows " + to_string(rows.shape()));
  }
  const std::size_t d = rows.cols();
  std::vector<double> out(table_rows * d, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table_rows) {
      throw std::invalid_argument("scatter_rows: id " + std::to_string(ids[i]) + " out of range");
    }
    for (std::size_t j = 0; j < d; ++j) out[ids[i] * d + j] += rows.values()[i * d + j];
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result("scatter_rows", {table_rows, d}, std::move(out), {rows},
                     [saved = std::move(saved)](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{gather_rows(g, saved)};
                     });
}

Tensor pick(const Tensor& a, std::span<const int> cols) {
  require_rank2("pick", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (cols.size() != m) throw std::invalid_argument("pick: " + std::to_string(cols.size()) + " indices for " + to_string(a.shape()));
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= n) {
      throw std::invalid_argument("pick: column " + std::to_string(cols[i]) + " out of range for " + to_string(a.shape()));
    }
    out[i] = a.values()[i * n + cols[i]];
  }
  std::vector<int> saved(cols.begin(), cols.end());
  return make_result("pick", {m, 1}, std::move(out), {a},
                     [saved = std::move(saved), n](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{place(g, saved, n)};
                     });
}

Tensor place(const Tensor& col, std::span<const int> cols, std::size_t n) {
  require_rank2("place", col);
  const std::size_t m = col.rows();
  if (col.cols() != 1 || cols.size() != m) throw std::invalid_argument("place: bad shape " + to_string(col.shape()));
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) out[i * n + cols[i]] = col.values()[i];
  std::vector<int> saved(cols.begin(), cols.end());
  return make_result("place", {m, n}, std::move(out), {col},
                     [saved = std::move(saved)](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{pick(g, saved)};
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    require_rank2("concat_rows", p);
    if (p.cols() != n) shape_error("concat_rows", parts[0].shape(), p.shape());
    offsets.push_back(m);
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result("concat_rows", {m, n}, std::move(out), {parts.begin(), parts.end()},
                     [offsets = std::move(offsets)](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
                       std::vector<Tensor> gs;
                       gs.reserve(in.size());
                       for (std::size_t i = 0; i < in.size(); ++i) gs.push_back(slice_rows(g, offsets[i], in[i].rows()));
                       return gs;
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_rank2("slice_rows", a);
  const std::size_t n = a.cols();
  if (start + count > a.rows()) {
    throw std::invalid_argument("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                ") outside " + to_string(a.shape()));
  }
  std::vector<double> out(a.values().begin() + start * n, a.values().begin() + (start + count) * n);
  const std::size_t total = a.rows();
  return make_result("slice_rows", {count, n}, std::move(out), {a},
                     [start, total](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{pad_rows(g, start, total)};
                     });
}

Tensor pad_rows(const Tensor& a, std::size_t start, std::size_t total) {
  require_rank2("pad_rows", a);
  const std::size_t n = a.cols(), count = a.rows();
  if (start + count > total) throw std::invalid_argument("pad_rows: block does not fit");
  std::vector<double> out(total * n, 0.0);
  std::copy(a.values().begin(), a.values().end(), out.begin() + start * n);
  return make_result("pad_rows", {total, n}, std::move(out), {a},
                     [start, count](const Tensor& g, const Tensor&, const std::vector<Tensor>&) {
                       return std::vector<Tensor>{slice_rows(g, start, count)};
                     });
}

Tensor contract_last(const Tensor& t, const Tensor& v) {
  if (t.rank() == 0) throw std::invalid_argument("contract_last: scalar tensor");
  const std::size_t k = t.shape().back();
  if (v.size() != k) shape_error("contract_last", t.shape(), v.shape());
  Shape out_shape(t.shape().begin(), t.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  const Tensor flat = matmul(reshape(t, {t.size() / k, k}), reshape(v, {k, 1}));
  return reshape(flat, std::move(out_shape));
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Tensor straight_through_select(const Tensor& probs, const Tensor& candidates) {
  require_rank2("straight_through_select", candidates);
  const std::size_t count = candidates.rows(), width = candidates.cols();
  if (count == 0) throw std::invalid_argument("straight_through_select: empty candidate set");
  if (probs.size() != count) shape_error("straight_through_select", probs.shape(), candidates.shape());
  double total = 0.0;
  for (double p : probs.values()) {
    if (p < 0.0) throw std::invalid_argument("straight_through_select: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("straight_through_select: probabilities sum to " + std::to_string(total));
  }
  const std::size_t chosen = argmax(probs.values());
  std::vector<double> out(candidates.values().begin() + chosen * width,
                          candidates.values().begin() + (chosen + 1) * width);
  const Tensor p = reshape(probs, {1, count});
  return make_result("straight_through_select", {1, width}, std::move(out), {p, candidates},
                     [](const Tensor& g, const Tensor&, const std::vector<Tensor>& in) {
                       return std::vector<Tensor>{matmul(g, transpose(in[1])), matmul(transpose(in[0]), g)};
                     });
}

// ---- differentiation --------------------------------------------------------

namespace {

// Propagates d loss / d node from `loss` back through the active tape. With
// `targets` set, only nodes on a path from a target are visited and only the
// targets' gradients are returned; otherwise every requires-grad leaf is
// returned.
std::unordered_map<const Node*, Tensor> propagate(const Tensor& loss, const std::unordered_set<const Node*>* targets,
                                                  bool create_graph) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + to_string(loss.shape()));
  std::unordered_map<const Node*, Tensor> grads;
  if (!loss.requires_grad()) return grads;
  Tape* tape = Tape::active();
  if (tape == nullptr || loss.node()->tape_id != tape->id()) {
    throw std::logic_error("backward: loss is not recorded on the active tape");
  }
  if (create_graph && !tape->retains_higher_order()) {
    throw std::logic_error("backward: create_graph requires a tape retained for higher order");
  }
  const std::uint64_t tape_id = tape->id();
  const std::size_t end = loss.node()->tape_index;
  auto on_tape = [&](const Node* n) { return n->tape_id == tape_id && n->tape_index <= end; };

  std::vector<char> relevant(end + 1, targets == nullptr ? 1 : 0);
  auto is_relevant = [&](const Tensor& t) {
    const Node* n = t.node();
    if (targets == nullptr) return true;
    if (targets->count(n)) return true;
    return on_tape(n) && relevant[n->tape_index] != 0;
  };
  if (targets != nullptr) {
    for (std::size_t i = 0; i <= end; ++i) {
      const Node* n = tape->node_at(i).get();
      if (targets->count(n)) {
        relevant[i] = 1;
        continue;
      }
      for (const Tensor& in : n->inputs) {
        if (is_relevant(in)) {
          relevant[i] = 1;
          break;
        }
      }
    }
  }

  RecordingScope recording(create_graph);
  grads.emplace(loss.node(), Tensor::constant(loss.shape(), std::vector<double>(loss.size(), 1.0)));
  for (std::size_t i = end + 1; i-- > 0;) {
    if (!relevant[i]) continue;
    const std::shared_ptr<Node> node = tape->node_at(i);
    auto it = grads.find(node.get());
    if (it == grads.end()) continue;
    const Tensor g = it->second;
    if (targets == nullptr || !targets->count(node.get())) grads.erase(it);
    std::vector<Tensor> in_grads = node->backward(g, Tensor(node), node->inputs);
    for (std::size_t j = 0; j < node->inputs.size(); ++j) {
      const Tensor& in = node->inputs[j];
      if (!in.requires_grad() || !is_relevant(in)) continue;
      auto [slot, inserted] = grads.try_emplace(in.node(), in_grads[j]);
      if (!inserted) slot->second = add(slot->second, in_grads[j]);
    }
  }
  if (targets != nullptr) {
    std::erase_if(grads, [&](const auto& kv) { return !targets->count(kv.first); });
  } else {
    std::erase_if(grads, [](const auto& kv) { return !kv.first->requires_grad || kv.first->backward; });
  }
  return grads;
}

}  // namespace

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph) {
  std::unordered_set<const Node*> targets;
  for (const Tensor& t : wrt) targets.insert(t.node());
  auto grads = propagate(loss, &targets, create_graph);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    auto it = grads.find(t.node());
    out.push_back(it != grads.end() ? it->second : Tensor::zeros(t.shape()));
  }
  return out;
}

Tensor GradientMap::get(const Tensor& t) const {
  auto it = grads_.find(t.node());
  return it != grads_.end() ? it->second : Tensor::zeros(t.shape());
}

GradientMap backward(const Tensor& loss) {
  GradientMap map;
  map.grads_ = propagate(loss, nullptr, false);
  return map;
}

// ---- second order -------------------------------------------------------------

SecondOrder::SecondOrder(const Tensor& loss, std::vector<Tensor> first) : first_(std::move(first)) {
  Tape* tape = Tape::active();
  if (tape == nullptr || !tape->retains_higher_order()) {
    throw std::logic_error("second-order products require a tape retained for higher order");
  }
  gradient_ = grad(loss, first_, true);
}

std::vector<double> SecondOrder::gradient_flat() const { return flatten(gradient_); }

Tensor SecondOrder::contract(std::span<const double> v) const {
  if (v.size() != total_size(first_)) {
    throw std::invalid_argument("second-order product: vector of size " + std::to_string(v.size()) +
                                " does not match " + std::to_string(total_size(first_)) + " parameters");
  }
  const std::vector<Tensor> parts = unflatten(v, first_);
  Tensor acc = dot(gradient_[0], parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, dot(gradient_[i], parts[i]));
  return acc;
}

std::vector<double> SecondOrder::hessian_vector(std::span<const double> v) const {
  return flatten(grad(contract(v), first_, false));
}

std::vector<double> SecondOrder::mixed(std::span<const Tensor> second, std::span<const double> v) const {
  return flatten(grad(contract(v), second, false));
}

std::vector<double> hvp(const Tensor& loss, std::span<const Tensor> wrt, std::span<const double> v) {
  return SecondOrder(loss, {wrt.begin(), wrt.end()}).hessian_vector(v);
}

std::vector<double> mixed_second_derivative(const Tensor& loss, std::span<const Tensor> first,
                                            std::span<const Tensor> second, std::span<const double> v) {
  return SecondOrder(loss, {first.begin(), first.end()}).mixed(second, v);
}

// ---- flat vectors -------------------------------------------------------------

std::size_t total_size(std::span<const Tensor> ts) {
  std::size_t n = 0;
  for (const Tensor& t : ts) n += t.size();
  return n;
}

std::vector<double> flatten(std::span<const Tensor> ts) {
  std::vector<double> out;
  out.reserve(total_size(ts));
  for (const Tensor& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

std::vector<Tensor> unflatten(std::span<const double> flat, std::span<const Tensor> like) {
  if (flat.size() != total_size(like)) throw std::invalid_argument("unflatten: size mismatch");
  std::vector<Tensor> out;
  out.reserve(like.size());
  std::size_t offset = 0;
  for (const Tensor& t : like) {
    out.push_back(Tensor::constant(t.shape(), {flat.begin() + offset, flat.begin() + offset + t.size()}));
    offset += t.size();
  }
  return out;
}

}  // namespace bilopt::autodiff
