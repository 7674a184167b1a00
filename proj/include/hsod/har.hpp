#pragma once

// Spectral reconstruction front end: embedding, cascaded hybrid spectral attention blocks and
// the full-band restoration head.

#include <string>
#include <vector>

#include "hsod/layers.hpp"
#include "hsod/tensor.hpp"

namespace hsod::har {

struct HarConfig {
  std::size_t bands = 32;  // C; the network runs on C / 4 reduced bands
  std::size_t num_blocks = 2;
  std::size_t num_heads = 2;
  double eca_gamma = 2.0;
  double eca_b = 1.0;

  std::size_t reduced_bands() const { return bands / 4; }
  void validate() const;  // ConfigError
};

// Odd 1-D kernel size for the channel gate: nearest odd integer to |log2(c)/gamma + b/gamma|,
// ties rounding up, at least 1.
std::size_t eca_kernel_size(std::size_t channels, double gamma, double b);

// One spectral attention head on channel-major slices q, k, v of shape [d, HW]:
// A = softmax over the key axis of sigma * K^T Q (d x d), returns (V A)^T as [d, HW].
Var ssa_head(Var q, Var k, Var v, Var sigma, Var* attention = nullptr);

struct MssaParams {
  Parameter* wq = nullptr;  // [C', C']
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
  Parameter* wo = nullptr;
  std::vector<Parameter*> sigma;  // one scalar per head
  Conv pos1, pos2;                // depthwise 3x3
};

struct AsamParams {
  Parameter* alpha = nullptr;
  Parameter* beta = nullptr;
  Parameter* gate = nullptr;  // [1, 1, 1, k]
};

struct BlockParams {
  MssaParams mssa;
  AsamParams asam;
  Conv ffn1, ffn2;  // 1x1, C' -> 2C' -> C'
};

struct MssaResult {
  Var out;                     // [C', H, W]
  std::vector<Var> attention;  // per head, [d, d]
};

struct HarOutput {
  Var features;  // [C', H, W]
  Var restored;  // [C, H, W]
};

class Har {
 public:
  Har(const HarConfig& cfg, ParameterSet& params, Rng& rng, const std::string& prefix = "har");

  const HarConfig& config() const { return cfg_; }
  std::size_t kernel_size() const { return k_; }
  const BlockParams& block(std::size_t i) const { return blocks_.at(i); }

  MssaResult mssa(Tape& tape, std::size_t block, Var x) const;
  // Pooled channel descriptor fed to the gate, [C', 1, 1].
  Var asam_descriptor(Tape& tape, std::size_t block, Var x) const;
  Var asam(Tape& tape, std::size_t block, Var x) const;
  Var hpsab(Tape& tape, std::size_t block, Var x) const;
  HarOutput forward(Tape& tape, Var reduced) const;

 private:
  HarConfig cfg_;
  std::size_t k_ = 1;
  Conv embed_, restore_;
  std::vector<BlockParams> blocks_;
};

}  // namespace hsod::har
