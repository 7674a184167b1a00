#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace hsod {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles. Rank-3 tensors use channel-first (C x H x W) layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  // Element of a rank-3 tensor.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  double item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  void fill(double v);

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Seeded generator. The mt19937_64 stream is fixed by the standard; doubles are derived by
// hand so draws do not depend on the library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal();
  std::size_t index(std::size_t n);  // [0, n)

 private:
  std::mt19937_64 engine_;
};

struct Parameter {
  Parameter(std::string n, Tensor v);

  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  void zero_grad() { grad.fill(0.0); }
};

// Owns parameters with stable addresses, in registration order.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value);
  // Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
  Parameter& add_uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng);
  Parameter& add_constant(std::string name, Shape shape, double value);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  Parameter* find(const std::string& name);

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// View handed to a backward rule: input/output values, the output gradient, and
// input gradient slots (null for inputs that do not require a gradient).
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::size_t op) : tape_(tape), op_(op) {}
  const Tensor& in(std::size_t k) const;
  const Tensor& out() const;
  const Tensor& grad_out() const;
  Tensor* grad_in(std::size_t k);

 private:
  Tape& tape_;
  std::size_t op_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

// Define-by-run gradient tape. One tape per forward pass, single owner.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value, std::string name = "constant");
  // Leaf bound to a parameter; frozen parameters enter as constants.
  Var param(Parameter& p);

  // Record the result of a primitive. The op is stored only if some input requires grad.
  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  // Reverse sweep from a scalar loss; accumulates into Parameter::grad.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor* grad(Var v) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t op_count() const { return ops_.size(); }
  // Op indices in the order the last backward sweep visited them.
  const std::vector<std::size_t>& last_backward_order() const { return visit_order_; }

  // Name and index of the first recorded node holding a non-finite value.
  std::optional<std::string> first_non_finite() const;

 private:
  friend class BackwardContext;
  struct Node {
    std::string name;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };
  struct Op {
    std::size_t output;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  Tensor& grad_slot(std::size_t id);

  std::deque<Node> nodes_;  // stable addresses for Var::value() references
  std::vector<Op> ops_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::vector<std::size_t> visit_order_;
};

// ---- primitives ---------------------------------------------------------------------------

// Elementwise with broadcasting: equal rank, each dim equal or 1 on either side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
// x scaled by a size-1 tensor s.
Var mul_scalar(Var x, Var s);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var x, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);

Var softmax(Var x, std::size_t axis);

struct Conv2dOptions {
  std::size_t stride = 1;
  // Zero padding applied to both axes; unset means "same" padding (k-1)/2 per axis.
  std::optional<std::size_t> padding;
  bool depthwise = false;
};
// Cross-correlation of x [Cin,H,W] with kernel [Cout, Cin (or 1 if depthwise), kh, kw].
Var conv2d(Var x, Var kernel, Conv2dOptions opts = {});
Shape conv2d_output_shape(const Shape& x, const Shape& kernel, const Conv2dOptions& opts);

enum class PoolMode { Avg, Max };
Var pool_global(Var x, PoolMode mode);

Var pixel_shuffle(Var x, std::size_t r);
Var pixel_unshuffle(Var x, std::size_t r);

Var relu(Var x);
Var gelu(Var x);
Var sigmoid(Var x);
Var abs(Var x);

inline constexpr double kChannelNormEps = 1e-5;
Var channel_norm(Var x, Var gain, Var bias);

Var upsample_nearest(Var x, std::size_t factor);
Var downsample_avg(Var x, std::size_t factor);

Var sum(Var x);
Var mean(Var x);

// Mean binary cross-entropy of probabilities p against a fixed target, with p clamped to
// [eps, 1 - eps].
Var binary_cross_entropy(Var p, const Tensor& target, double eps = 1e-7);

}  // namespace hsod
