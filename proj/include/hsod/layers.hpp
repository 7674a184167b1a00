#pragma once

// Parameterized building blocks shared by the network modules. Layers hold pointers into a
// ParameterSet, which keeps parameter addresses stable.

#include <string>

#include "hsod/tensor.hpp"

namespace hsod {

struct Conv {
  Parameter* kernel = nullptr;
  Parameter* bias = nullptr;  // [Cout, 1, 1] or null
  Conv2dOptions opts;

  static Conv make(ParameterSet& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kh,
                   std::size_t kw, Rng& rng, bool with_bias, Conv2dOptions opts = {});
  static Conv depthwise(ParameterSet& ps, const std::string& name, std::size_t channels, std::size_t k, Rng& rng,
                        bool with_bias);
  Var operator()(Tape& tape, Var x) const;
};

// Per-channel normalization over space with learnable gain and bias. A 1x1 map has no
// spatial statistics, so there the layer reduces to the affine part.
struct Norm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static Norm make(ParameterSet& ps, const std::string& name, std::size_t channels);
  Var operator()(Tape& tape, Var x) const;
};

// Dense layer on row vectors: x [n, in] -> [n, out].
struct Linear {
  Parameter* weight = nullptr;  // [in, out]
  Parameter* bias = nullptr;    // [1, out] or null

  static Linear make(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                     bool with_bias);
  Var operator()(Tape& tape, Var x) const;
};

}  // namespace hsod
