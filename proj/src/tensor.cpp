#include "hsod/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "hsod/errors.hpp"

namespace hsod {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---- Rng -----------------------------------------------------------------------------------

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw ConfigError("Rng::index on empty range");
  return static_cast<std::size_t>(engine_() % n);
}

// ---- parameters ----------------------------------------------------------------------------

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

Parameter& ParameterSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_.emplace(name, params_.size());
  return params_.emplace_back(std::move(name), std::move(value));
}

Parameter& ParameterSet::add_uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return add(std::move(name), std::move(t));
}

Parameter& ParameterSet::add_constant(std::string name, Shape shape, double value) {
  return add(std::move(name), Tensor(std::move(shape), value));
}

Parameter* ParameterSet::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParameterSet::get(const std::string& name) {
  if (auto* p = find(name)) return *p;
  throw ConfigError("unknown parameter '" + name + "'");
}

const Parameter& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return params_[it->second];
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---- tape ----------------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& BackwardContext::in(std::size_t k) const {
  return tape_.nodes_[tape_.ops_[op_].inputs[k]].value;
}
const Tensor& BackwardContext::out() const { return tape_.nodes_[tape_.ops_[op_].output].value; }
const Tensor& BackwardContext::grad_out() const { return tape_.nodes_[tape_.ops_[op_].output].grad; }
Tensor* BackwardContext::grad_in(std::size_t k) {
  const auto id = tape_.ops_[op_].inputs[k];
  if (!tape_.nodes_[id].requires_grad) return nullptr;
  return &tape_.grad_slot(id);
}

Var Tape::constant(Tensor value, std::string name) {
  nodes_.push_back(Node{std::move(name), std::move(value), {}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (p.frozen) return constant(p.value, p.name);
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.name, p.value, {}, true, &p});
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs = false;
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (&v.tape() != this) throw Error("op '" + op + "' mixes values from different tapes");
    needs = needs || nodes_[v.id()].requires_grad;
    ids.push_back(v.id());
  }
  nodes_.push_back(Node{op, std::move(value), {}, needs, nullptr});
  const auto out = nodes_.size() - 1;
  if (needs) ops_.push_back(Op{out, std::move(ids), std::move(backward)});
  return Var(this, out);
}

Tensor& Tape::grad_slot(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor* Tape::grad(Var v) const {
  const auto& n = nodes_[v.id()];
  return n.grad.empty() && !n.value.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  visit_order_.clear();
  visit_order_.reserve(ops_.size());
  if (!nodes_[loss.id()].requires_grad) return;
  grad_slot(loss.id()).fill(1.0);
  for (std::size_t k = ops_.size(); k-- > 0;) {
    visit_order_.push_back(k);
    const auto& out = nodes_[ops_[k].output];
    if (out.grad.empty()) continue;
    BackwardContext ctx(*this, k);
    ops_[k].backward(ctx);
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto& g = n.param->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.all_finite()) {
      return "node #" + std::to_string(i) + " '" + nodes_[i].name + "' " + shape_str(nodes_[i].value.shape());
    }
  }
  return std::nullopt;
}

// ---- helpers -------------------------------------------------------------------------------

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error("values from different tapes");
  return a.tape();
}

const Shape& require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.shape().size() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
  return x.shape();
}

// Gather: out[k] = in[index[k]]; gradient scatters back and accumulates repeats.
Var gather(const char* name, Var x, Shape out_shape, std::vector<std::size_t> index) {
  const auto& in = x.value();
  Tensor out(std::move(out_shape));
  for (std::size_t k = 0; k < index.size(); ++k) out[k] = in[index[k]];
  return x.tape().record(name, std::move(out), {x}, [index = std::move(index)](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const auto& go = c.grad_out();
    for (std::size_t k = 0; k < index.size(); ++k) (*g)[index[k]] += go[k];
  });
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index, b_index;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const std::size_t rank = a.size();
  Broadcast r;
  r.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    r.out[i] = std::max(a[i], b[i]);
  }
  const std::size_t n = shape_size(r.out);
  r.a_index.resize(n);
  r.b_index.resize(n);
  if (a == b) {
    for (std::size_t k = 0; k < n; ++k) r.a_index[k] = r.b_index[k] = k;
    return r;
  }
  std::vector<std::size_t> sa(rank), sb(rank), idx(rank, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = a[i] == 1 ? 0 : acc_a;
    sb[i] = b[i] == 1 ? 0 : acc_b;
    acc_a *= a[i];
    acc_b *= b[i];
  }
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k < n; ++k) {
    r.a_index[k] = ia;
    r.b_index[k] = ib;
    for (std::size_t i = rank; i-- > 0;) {
      ++idx[i];
      ia += sa[i];
      ib += sb[i];
      if (idx[i] < r.out[i]) break;
      ia -= sa[i] * idx[i];
      ib -= sb[i] * idx[i];
      idx[i] = 0;
    }
  }
  return r;
}

enum class BinOp { Add, Sub, Mul, Div };

Var binary(BinOp kind, Var a, Var b, const char* name) {
  Tape& tape = same_tape(a, b);
  auto bc = broadcast(a.shape(), b.shape(), name);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor out(bc.out);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double x = av[bc.a_index[k]], y = bv[bc.b_index[k]];
    switch (kind) {
      case BinOp::Add: out[k] = x + y; break;
      case BinOp::Sub: out[k] = x - y; break;
      case BinOp::Mul: out[k] = x * y; break;
      case BinOp::Div: out[k] = x / y; break;
    }
  }
  return tape.record(name, std::move(out), {a, b}, [kind, bc = std::move(bc)](BackwardContext& c) {
    const auto& go = c.grad_out();
    const auto& av = c.in(0);
    const auto& bv = c.in(1);
    Tensor* ga = c.grad_in(0);
    Tensor* gb = c.grad_in(1);
    for (std::size_t k = 0; k < go.size(); ++k) {
      const std::size_t ia = bc.a_index[k], ib = bc.b_index[k];
      const double g = go[k];
      switch (kind) {
        case BinOp::Add:
          if (ga) (*ga)[ia] += g;
          if (gb) (*gb)[ib] += g;
          break;
        case BinOp::Sub:
          if (ga) (*ga)[ia] += g;
          if (gb) (*gb)[ib] -= g;
          break;
        case BinOp::Mul:
          if (ga) (*ga)[ia] += g * bv[ib];
          if (gb) (*gb)[ib] += g * av[ia];
          break;
        case BinOp::Div:
          if (ga) (*ga)[ia] += g / bv[ib];
          if (gb) (*gb)[ib] -= g * av[ia] / (bv[ib] * bv[ib]);
          break;
      }
    }
  });
}

template <typename F, typename D>
Var unary(const char* name, Var x, F f, D df) {
  const auto& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(xv[k]);
  return x.tape().record(name, std::move(out), {x}, [df](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const auto& go = c.grad_out();
    const auto& xv = c.in(0);
    const auto& yv = c.out();
    for (std::size_t k = 0; k < go.size(); ++k) (*g)[k] += go[k] * df(xv[k], yv[k]);
  });
}

// Splits shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---- elementwise ---------------------------------------------------------------------------

Var add(Var a, Var b) { return binary(BinOp::Add, a, b, "add"); }
Var sub(Var a, Var b) { return binary(BinOp::Sub, a, b, "sub"); }
Var mul(Var a, Var b) { return binary(BinOp::Mul, a, b, "mul"); }
Var div(Var a, Var b) { return binary(BinOp::Div, a, b, "div"); }

Var mul_scalar(Var x, Var s) {
  Tape& tape = same_tape(x, s);
  if (s.value().size() != 1) throw DimensionError("mul_scalar: scale has shape " + shape_str(s.shape()));
  const double f = s.value()[0];
  const auto& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = xv[k] * f;
  return tape.record("mul_scalar", std::move(out), {x, s}, [](BackwardContext& c) {
    const auto& go = c.grad_out();
    const auto& xv = c.in(0);
    const double f = c.in(1)[0];
    if (Tensor* gx = c.grad_in(0)) {
      for (std::size_t k = 0; k < go.size(); ++k) (*gx)[k] += go[k] * f;
    }
    if (Tensor* gs = c.grad_in(1)) {
      double acc = 0.0;
      for (std::size_t k = 0; k < go.size(); ++k) acc += go[k] * xv[k];
      (*gs)[0] += acc;
    }
  });
}

Var scale(Var x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
  return unary("add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary("gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
               [](double v, double) {
                 return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
               });
}

Var sigmoid(Var x) {
  return unary("sigmoid", x,
               [](double v) {
                 // Clamped so the result stays strictly inside (0, 1) in floating point.
                 constexpr double lo = 0x1p-60, hi = 1.0 - 0x1p-53;
                 const double y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                 return std::clamp(y, lo, hi);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Var abs(Var x) {
  return unary("abs", x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---- linear algebra and layout -------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  return tape.record("matmul", std::move(out), {a, b}, [m, k, n](BackwardContext& c) {
    const auto& go = c.grad_out();
    const auto& av = c.in(0);
    const auto& bv = c.in(1);
    if (Tensor* ga = c.grad_in(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bv[p * n + j];
          (*ga)[i * k + p] += acc;
        }
    }
    if (Tensor* gb = c.grad_in(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += x * go[i * n + j];
        }
    }
  });
}

Var transpose(Var a) {
  const auto& s = require_rank(a, 2, "transpose");
  const std::size_t r = s[0], c = s[1];
  std::vector<std::size_t> index(r * c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < r; ++j) index[i * r + j] = j * c + i;
  return gather("transpose", a, {c, r}, std::move(index));
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const auto& go = c.grad_out();
    for (std::size_t k = 0; k < go.size(); ++k) (*g)[k] += go[k];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tape& tape = parts[0].tape();
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat axis out of range for " + shape_str(out_shape));
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    const auto& s = p.shape();
    bool ok = s.size() == out_shape.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == parts[0].shape()[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(parts[0].shape()));
    }
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto sp = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto& pv = parts[q].value();
    const std::size_t block = lens[q] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(&pv[o * block], block, &out[o * sp.len * sp.inner + offset * sp.inner]);
    offset += lens[q];
  }
  return tape.record("concat", std::move(out), parts, [sp, lens](BackwardContext& c) {
    const auto& go = c.grad_out();
    std::size_t offset = 0;
    for (std::size_t q = 0; q < lens.size(); ++q) {
      const std::size_t block = lens[q] * sp.inner;
      if (Tensor* g = c.grad_in(q)) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t t = 0; t < block; ++t) (*g)[o * block + t] += go[o * sp.len * sp.inner + offset * sp.inner + t];
      }
      offset += lens[q];
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(s));
  }
  const auto sp = split_axis(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  std::vector<std::size_t> index;
  index.reserve(shape_size(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t a = begin; a < end; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) index.push_back((o * sp.len + a) * sp.inner + i);
  return gather("slice", x, std::move(out_shape), std::move(index));
}

Var softmax(Var x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  if (s[axis] == 0) throw DimensionError("softmax over empty axis of " + shape_str(s));
  const auto sp = split_axis(s, axis);
  const auto& xv = x.value();
  Tensor out(s);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = xv[base];
      for (std::size_t a = 1; a < sp.len; ++a) mx = std::max(mx, xv[base + a * sp.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < sp.len; ++a) {
        const double e = std::exp(xv[base + a * sp.inner] - mx);
        out[base + a * sp.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < sp.len; ++a) out[base + a * sp.inner] /= z;
    }
  return x.tape().record("softmax", std::move(out), {x}, [sp](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const auto& go = c.grad_out();
    const auto& y = c.out();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double dot = 0.0;
        for (std::size_t a = 0; a < sp.len; ++a) dot += go[base + a * sp.inner] * y[base + a * sp.inner];
        for (std::size_t a = 0; a < sp.len; ++a) {
          const std::size_t k = base + a * sp.inner;
          (*g)[k] += y[k] * (go[k] - dot);
        }
      }
  });
}

// ---- convolution ---------------------------------------------------------------------------

namespace {
struct ConvGeom {
  std::size_t cin, h, w, cout, cin_per_group, kh, kw, stride, ph, pw, oh, ow;
  bool depthwise;
};

ConvGeom conv_geometry(const Shape& x, const Shape& k, const Conv2dOptions& opts) {
  if (x.size() != 3 || k.size() != 4) {
    throw DimensionError("conv2d expects input [C,H,W] and kernel [Cout,Cin,kh,kw], got " + shape_str(x) +
                         " and " + shape_str(k));
  }
  ConvGeom g{};
  g.cin = x[0];
  g.h = x[1];
  g.w = x[2];
  g.cout = k[0];
  g.cin_per_group = k[1];
  g.kh = k[2];
  g.kw = k[3];
  g.depthwise = opts.depthwise;
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv2d kernel size must be odd, got " + shape_str(k));
  if (opts.stride == 0) throw DimensionError("conv2d stride must be >= 1");
  if (opts.depthwise) {
    if (g.cout != g.cin || g.cin_per_group != 1) {
      throw DimensionError("depthwise conv2d needs kernel [C,1,kh,kw] with C == input channels; input " +
                           shape_str(x) + ", kernel " + shape_str(k));
    }
  } else if (g.cin_per_group != g.cin) {
    throw DimensionError("conv2d input channels " + std::to_string(g.cin) + " do not match kernel " + shape_str(k));
  }
  g.stride = opts.stride;
  g.ph = opts.padding ? *opts.padding : (g.kh - 1) / 2;
  g.pw = opts.padding ? *opts.padding : (g.kw - 1) / 2;
  if (g.h + 2 * g.ph < g.kh || g.w + 2 * g.pw < g.kw) {
    throw DimensionError("conv2d kernel " + shape_str(k) + " larger than padded input " + shape_str(x));
  }
  g.oh = (g.h + 2 * g.ph - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pw - g.kw) / g.stride + 1;
  return g;
}

// Calls f(co, ci, kernel_index, input_channel) for each connected (output, input) channel pair.
template <typename F>
void for_each_tap(const ConvGeom& g, F f) {
  for (std::size_t co = 0; co < g.cout; ++co) {
    for (std::size_t q = 0; q < g.cin_per_group; ++q) {
      const std::size_t ci = g.depthwise ? co : q;
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const std::size_t widx = ((co * g.cin_per_group + q) * g.kh + ky) * g.kw + kx;
          f(co, ci, ky, kx, widx);
        }
    }
  }
}
}  // namespace

Shape conv2d_output_shape(const Shape& x, const Shape& kernel, const Conv2dOptions& opts) {
  const auto g = conv_geometry(x, kernel, opts);
  return {g.cout, g.oh, g.ow};
}

Var conv2d(Var x, Var kernel, Conv2dOptions opts) {
  Tape& tape = same_tape(x, kernel);
  const auto g = conv_geometry(x.shape(), kernel.shape(), opts);
  const auto& xv = x.value();
  const auto& wv = kernel.value();
  Tensor out({g.cout, g.oh, g.ow});
  // (ky + oy*stride) must be in [ph, ph + h).
  auto valid_range = [](std::size_t k, std::size_t pad, std::size_t n, std::size_t stride, std::size_t on,
                        std::size_t& lo, std::size_t& hi) {
    lo = 0;
    while (lo < on && lo * stride + k < pad) ++lo;
    hi = lo;
    while (hi < on && hi * stride + k < pad + n) ++hi;
  };
  for_each_tap(g, [&](std::size_t co, std::size_t ci, std::size_t ky, std::size_t kx, std::size_t widx) {
    const double wk = wv[widx];
    if (wk == 0.0) return;
    std::size_t y0, y1, x0, x1;
    valid_range(ky, g.ph, g.h, g.stride, g.oh, y0, y1);
    valid_range(kx, g.pw, g.w, g.stride, g.ow, x0, x1);
    for (std::size_t oy = y0; oy < y1; ++oy) {
      const std::size_t iy = oy * g.stride + ky - g.ph;
      const double* in_row = &xv[(ci * g.h + iy) * g.w];
      double* out_row = &out[(co * g.oh + oy) * g.ow];
      for (std::size_t ox = x0; ox < x1; ++ox) out_row[ox] += wk * in_row[ox * g.stride + kx - g.pw];
    }
  });
  return tape.record("conv2d", std::move(out), {x, kernel}, [g, valid_range](BackwardContext& c) {
    const auto& go = c.grad_out();
    const auto& xv = c.in(0);
    const auto& wv = c.in(1);
    Tensor* gx = c.grad_in(0);
    Tensor* gw = c.grad_in(1);
    for_each_tap(g, [&](std::size_t co, std::size_t ci, std::size_t ky, std::size_t kx, std::size_t widx) {
      std::size_t y0, y1, x0, x1;
      valid_range(ky, g.ph, g.h, g.stride, g.oh, y0, y1);
      valid_range(kx, g.pw, g.w, g.stride, g.ow, x0, x1);
      const double wk = wv[widx];
      double acc = 0.0;
      for (std::size_t oy = y0; oy < y1; ++oy) {
        const std::size_t iy = oy * g.stride + ky - g.ph;
        const std::size_t in_base = (ci * g.h + iy) * g.w;
        const double* go_row = &go[(co * g.oh + oy) * g.ow];
        for (std::size_t ox = x0; ox < x1; ++ox) {
          const std::size_t ix = in_base + ox * g.stride + kx - g.pw;
          acc += go_row[ox] * xv[ix];
          if (gx) (*gx)[ix] += go_row[ox] * wk;
        }
      }
      if (gw) (*gw)[widx] += acc;
    });
  });
}

// ---- pooling and resampling ----------------------------------------------------------------

Var pool_global(Var x, PoolMode mode) {
  const auto& s = require_rank(x, 3, "pool_global");
  const std::size_t c = s[0], n = s[1] * s[2];
  if (n == 0) throw DimensionError("pool_global on empty spatial extent " + shape_str(s));
  const auto& xv = x.value();
  Tensor out({c, 1, 1});
  std::vector<std::size_t> argmax(c, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = &xv[ch * n];
    if (mode == PoolMode::Avg) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += p[k];
      out[ch] = acc / static_cast<double>(n);
    } else {
      std::size_t best = 0;
      for (std::size_t k = 1; k < n; ++k)
        if (p[k] > p[best]) best = k;
      argmax[ch] = ch * n + best;
      out[ch] = p[best];
    }
  }
  return x.tape().record(mode == PoolMode::Avg ? "pool_avg" : "pool_max", std::move(out), {x},
                         [mode, c, n, argmax = std::move(argmax)](BackwardContext& ctx) {
                           Tensor* g = ctx.grad_in(0);
                           if (!g) return;
                           const auto& go = ctx.grad_out();
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             if (mode == PoolMode::Avg) {
                               const double v = go[ch] / static_cast<double>(n);
                               for (std::size_t k = 0; k < n; ++k) (*g)[ch * n + k] += v;
                             } else {
                               (*g)[argmax[ch]] += go[ch];
                             }
                           }
                         });
}

Var pixel_shuffle(Var x, std::size_t r) {
  const auto& s = require_rank(x, 3, "pixel_shuffle");
  if (r == 0 || s[0] % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels of " + shape_str(s) + " not divisible by r^2 = " +
                         std::to_string(r * r));
  }
  const std::size_t c = s[0] / (r * r), h = s[1], w = s[2];
  std::vector<std::size_t> index(c * h * r * w * r);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < h * r; ++oy)
      for (std::size_t ox = 0; ox < w * r; ++ox) {
        const std::size_t src_c = ch * r * r + (oy % r) * r + (ox % r);
        index[(ch * h * r + oy) * w * r + ox] = (src_c * h + oy / r) * w + ox / r;
      }
  return gather("pixel_shuffle", x, {c, h * r, w * r}, std::move(index));
}

Var pixel_unshuffle(Var x, std::size_t r) {
  const auto& s = require_rank(x, 3, "pixel_unshuffle");
  if (r == 0 || s[1] % r != 0 || s[2] % r != 0) {
    throw DimensionError("pixel_unshuffle: spatial size of " + shape_str(s) + " not divisible by r = " +
                         std::to_string(r));
  }
  const std::size_t c = s[0], h = s[1] / r, w = s[2] / r;
  std::vector<std::size_t> index(c * r * r * h * w);
  for (std::size_t oc = 0; oc < c * r * r; ++oc)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t ch = oc / (r * r), i = (oc % (r * r)) / r, j = oc % r;
        index[(oc * h + y) * w + xx] = (ch * s[1] + y * r + i) * s[2] + xx * r + j;
      }
  return gather("pixel_unshuffle", x, {c * r * r, h, w}, std::move(index));
}

Var upsample_nearest(Var x, std::size_t factor) {
  const auto& s = require_rank(x, 3, "upsample_nearest");
  if (factor == 0) throw DimensionError("upsample factor must be >= 1");
  const std::size_t c = s[0], h = s[1], w = s[2], oh = h * factor, ow = w * factor;
  std::vector<std::size_t> index(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        index[(ch * oh + y) * ow + xx] = (ch * h + y / factor) * w + xx / factor;
  return gather("upsample_nearest", x, {c, oh, ow}, std::move(index));
}

Var downsample_avg(Var x, std::size_t factor) {
  const auto& s = require_rank(x, 3, "downsample_avg");
  if (factor == 0 || s[1] % factor != 0 || s[2] % factor != 0) {
    throw DimensionError("downsample_avg: " + shape_str(s) + " not divisible by factor " + std::to_string(factor));
  }
  const std::size_t c = s[0], h = s[1], w = s[2], oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  const auto& xv = x.value();
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(ch * oh + y / factor) * ow + xx / factor] += xv[(ch * h + y) * w + xx];
  for (auto& v : out.data()) v *= inv;
  return x.tape().record("downsample_avg", std::move(out), {x}, [c, h, w, oh, ow, factor, inv](BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const auto& go = ctx.grad_out();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          (*g)[(ch * h + y) * w + xx] += go[(ch * oh + y / factor) * ow + xx / factor] * inv;
  });
}

// ---- normalization and reductions ----------------------------------------------------------

Var channel_norm(Var x, Var gain, Var bias) {
  const auto& s = require_rank(x, 3, "channel_norm");
  const std::size_t c = s[0], n = s[1] * s[2];
  if (gain.value().size() != c || bias.value().size() != c) {
    throw DimensionError("channel_norm: input " + shape_str(s) + " with gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor out(s);
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = &xv[ch * n];
    double mu = 0.0;
    for (std::size_t k = 0; k < n; ++k) mu += p[k];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) var += (p[k] - mu) * (p[k] - mu);
    var /= static_cast<double>(n);
    inv_std[ch] = 1.0 / std::sqrt(var + kChannelNormEps);
    for (std::size_t k = 0; k < n; ++k) out[ch * n + k] = gv[ch] * (p[k] - mu) * inv_std[ch] + bv[ch];
  }
  return x.tape().record("channel_norm", std::move(out), {x, gain, bias},
                         [c, n, inv_std = std::move(inv_std)](BackwardContext& ctx) {
                           const auto& go = ctx.grad_out();
                           const auto& xv = ctx.in(0);
                           const auto& gv = ctx.in(1);
                           Tensor* gx = ctx.grad_in(0);
                           Tensor* gg = ctx.grad_in(1);
                           Tensor* gb = ctx.grad_in(2);
                           const double nn = static_cast<double>(n);
                           std::vector<double> xhat(n);
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             const double* p = &xv[ch * n];
                             const double* dy = &go[ch * n];
                             double mu = 0.0;
                             for (std::size_t k = 0; k < n; ++k) mu += p[k];
                             mu /= nn;
                             double sum_dy = 0.0, sum_dy_xhat = 0.0;
                             for (std::size_t k = 0; k < n; ++k) {
                               xhat[k] = (p[k] - mu) * inv_std[ch];
                               sum_dy += dy[k];
                               sum_dy_xhat += dy[k] * xhat[k];
                             }
                             if (gg) (*gg)[ch] += sum_dy_xhat;
                             if (gb) (*gb)[ch] += sum_dy;
                             if (gx) {
                               const double f = gv[ch] * inv_std[ch] / nn;
                               for (std::size_t k = 0; k < n; ++k)
                                 (*gx)[ch * n + k] += f * (nn * dy[k] - sum_dy - xhat[k] * sum_dy_xhat);
                             }
                           }
                         });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.tape().record("sum", Tensor::scalar(acc), {x}, [](BackwardContext& c) {
    Tensor* g = c.grad_in(0);
    if (!g) return;
    const double go = c.grad_out()[0];
    for (auto& v : g->data()) v += go;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var binary_cross_entropy(Var p, const Tensor& target, double eps) {
  const auto& pv = p.value();
  if (pv.shape() != target.shape()) {
    throw DimensionError("binary_cross_entropy: prediction " + shape_str(pv.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  if (pv.size() == 0) throw DimensionError("binary_cross_entropy of empty tensor");
  const double n = static_cast<double>(pv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double q = std::clamp(pv[i], eps, 1.0 - eps);
    acc -= target[i] * std::log(q) + (1.0 - target[i]) * std::log(1.0 - q);
  }
  return p.tape().record("binary_cross_entropy", Tensor::scalar(acc / n), {p}, [target, eps, n](BackwardContext& ctx) {
    Tensor* gp = ctx.grad_in(0);
    if (!gp) return;
    const auto& pv = ctx.in(0);
    const double go = ctx.grad_out()[0] / n;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double v = pv[i];
      if (v < eps || v > 1.0 - eps) continue;  // clamped: locally constant
      (*gp)[i] += go * (-target[i] / v + (1.0 - target[i]) / (1.0 - v));
    }
  });
}

}  // namespace hsod
