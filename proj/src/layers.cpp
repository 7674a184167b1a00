#include "hsod/layers.hpp"

#include "hsod/errors.hpp"

namespace hsod {

Conv Conv::make(ParameterSet& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kh,
                std::size_t kw, Rng& rng, bool with_bias, Conv2dOptions opts) {
  Conv c;
  c.opts = opts;
  const std::size_t fan_in = (opts.depthwise ? 1 : cin) * kh * kw;
  c.kernel = &ps.add_uniform(name + ".w", {cout, opts.depthwise ? 1 : cin, kh, kw}, fan_in, rng);
  if (with_bias) c.bias = &ps.add_uniform(name + ".b", {cout, 1, 1}, fan_in, rng);
  return c;
}

Conv Conv::depthwise(ParameterSet& ps, const std::string& name, std::size_t channels, std::size_t k, Rng& rng,
                     bool with_bias) {
  Conv2dOptions o;
  o.depthwise = true;
  return make(ps, name, channels, channels, k, k, rng, with_bias, o);
}

Var Conv::operator()(Tape& tape, Var x) const {
  Var y = conv2d(x, tape.param(*kernel), opts);
  return bias ? add(y, tape.param(*bias)) : y;
}

Norm Norm::make(ParameterSet& ps, const std::string& name, std::size_t channels) {
  Norm n;
  n.gain = &ps.add_constant(name + ".gain", {channels}, 1.0);
  n.bias = &ps.add_constant(name + ".bias", {channels}, 0.0);
  return n;
}

Var Norm::operator()(Tape& tape, Var x) const {
  if (x.shape().size() == 3 && x.shape()[1] * x.shape()[2] == 1) {
    const std::size_t c = x.shape()[0];
    return add(mul(x, reshape(tape.param(*gain), {c, 1, 1})), reshape(tape.param(*bias), {c, 1, 1}));
  }
  return channel_norm(x, tape.param(*gain), tape.param(*bias));
}

Linear Linear::make(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                    bool with_bias) {
  Linear l;
  l.weight = &ps.add_uniform(name + ".w", {in, out}, in, rng);
  if (with_bias) l.bias = &ps.add_uniform(name + ".b", {1, out}, in, rng);
  return l;
}

Var Linear::operator()(Tape& tape, Var x) const {
  Var y = matmul(x, tape.param(*weight));
  return bias ? add(y, tape.param(*bias)) : y;
}

}  // namespace hsod
