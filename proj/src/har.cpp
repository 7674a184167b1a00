#include "hsod/har.hpp"

#include <cmath>

#include "hsod/errors.hpp"

namespace hsod::har {

void HarConfig::validate() const {
  if (bands == 0 || bands % 4 != 0) throw ConfigError("har: bands must be a positive multiple of 4, got " + std::to_string(bands));
  if (reduced_bands() < 2) throw ConfigError("har: need at least 8 bands, got " + std::to_string(bands));
  if (num_blocks == 0) throw ConfigError("har: num_blocks must be >= 1");
  if (num_heads == 0 || reduced_bands() % num_heads != 0) {
    throw ConfigError("har: num_heads " + std::to_string(num_heads) + " must divide reduced bands " +
                      std::to_string(reduced_bands()));
  }
  if (!(eca_gamma > 0.0)) throw ConfigError("har: eca_gamma must be positive");
}

std::size_t eca_kernel_size(std::size_t channels, double gamma, double b) {
  if (channels < 2) throw ConfigError("eca_kernel_size: need at least 2 channels");
  const double t = std::fabs(std::log2(static_cast<double>(channels)) / gamma + b / gamma);
  auto k = static_cast<std::size_t>(std::floor(t));
  if (k % 2 == 0) ++k;
  return k;
}

Var ssa_head(Var q, Var k, Var v, Var sigma, Var* attention) {
  Var logits = mul_scalar(matmul(k, transpose(q)), sigma);
  Var a = softmax(logits, 0);
  if (attention) *attention = a;
  return matmul(transpose(a), v);
}

Har::Har(const HarConfig& cfg, ParameterSet& ps, Rng& rng, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg_.reduced_bands();
  k_ = eca_kernel_size(c, cfg_.eca_gamma, cfg_.eca_b);
  embed_ = Conv::make(ps, prefix + ".embed", c, c, 3, 3, rng, true);
  for (std::size_t i = 0; i < cfg_.num_blocks; ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    BlockParams b;
    b.mssa.wq = &ps.add_uniform(p + ".mssa.wq", {c, c}, c, rng);
    b.mssa.wk = &ps.add_uniform(p + ".mssa.wk", {c, c}, c, rng);
    b.mssa.wv = &ps.add_uniform(p + ".mssa.wv", {c, c}, c, rng);
    b.mssa.wo = &ps.add_uniform(p + ".mssa.wo", {c, c}, c, rng);
    for (std::size_t h = 0; h < cfg_.num_heads; ++h) {
      b.mssa.sigma.push_back(&ps.add_constant(p + ".mssa.sigma" + std::to_string(h), {1}, 1.0));
    }
    b.mssa.pos1 = Conv::depthwise(ps, p + ".mssa.pos1", c, 3, rng, false);
    b.mssa.pos2 = Conv::depthwise(ps, p + ".mssa.pos2", c, 3, rng, false);
    b.asam.alpha = &ps.add_constant(p + ".asam.alpha", {1}, 1.0);
    b.asam.beta = &ps.add_constant(p + ".asam.beta", {1}, 1.0);
    b.asam.gate = &ps.add_uniform(p + ".asam.gate", {1, 1, 1, k_}, k_, rng);
    b.ffn1 = Conv::make(ps, p + ".ffn1", c, 2 * c, 1, 1, rng, true);
    b.ffn2 = Conv::make(ps, p + ".ffn2", 2 * c, c, 1, 1, rng, true);
    blocks_.push_back(b);
  }
  restore_ = Conv::make(ps, prefix + ".restore", c, cfg_.bands, 3, 3, rng, true);
}

namespace {
void require_input(const Var& x, std::size_t c, const char* what) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[0] != c) {
    throw DimensionError(std::string(what) + ": expected [" + std::to_string(c) + ", H, W], got " + shape_str(s));
  }
}
}  // namespace

MssaResult Har::mssa(Tape& tape, std::size_t block, Var x) const {
  const std::size_t c = cfg_.reduced_bands();
  require_input(x, c, "mssa");
  const auto& bp = blocks_.at(block).mssa;
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  const std::size_t d = c / cfg_.num_heads;
  Var tokens = reshape(x, {c, h * w});
  Var q = matmul(tape.param(*bp.wq), tokens);
  Var k = matmul(tape.param(*bp.wk), tokens);
  Var v = matmul(tape.param(*bp.wv), tokens);
  MssaResult r;
  std::vector<Var> heads;
  for (std::size_t j = 0; j < cfg_.num_heads; ++j) {
    Var a;
    heads.push_back(ssa_head(slice(q, 0, j * d, (j + 1) * d), slice(k, 0, j * d, (j + 1) * d),
                             slice(v, 0, j * d, (j + 1) * d), tape.param(*bp.sigma[j]), &a));
    r.attention.push_back(a);
  }
  Var mixed = reshape(matmul(tape.param(*bp.wo), concat(heads, 0)), {c, h, w});
  Var pos = bp.pos2(tape, gelu(bp.pos1(tape, reshape(v, {c, h, w}))));
  r.out = add(mixed, pos);
  return r;
}

Var Har::asam_descriptor(Tape& tape, std::size_t block, Var x) const {
  require_input(x, cfg_.reduced_bands(), "asam");
  const auto& ap = blocks_.at(block).asam;
  Var avg = pool_global(x, PoolMode::Avg);
  Var mx = pool_global(x, PoolMode::Max);
  return add(add(scale(add(avg, mx), 0.5), mul_scalar(avg, tape.param(*ap.alpha))),
             mul_scalar(mx, tape.param(*ap.beta)));
}

Var Har::asam(Tape& tape, std::size_t block, Var x) const {
  const std::size_t c = cfg_.reduced_bands();
  Var row = conv2d(reshape(asam_descriptor(tape, block, x), {1, 1, c}), tape.param(*blocks_.at(block).asam.gate));
  return mul(x, sigmoid(reshape(row, {c, 1, 1})));
}

Var Har::hpsab(Tape& tape, std::size_t block, Var x) const {
  const auto& bp = blocks_.at(block);
  Var y = add(x, add(mssa(tape, block, x).out, asam(tape, block, x)));
  return add(y, bp.ffn2(tape, gelu(bp.ffn1(tape, y))));
}

HarOutput Har::forward(Tape& tape, Var reduced) const {
  require_input(reduced, cfg_.reduced_bands(), "har");
  Var f = embed_(tape, reduced);
  for (std::size_t i = 0; i < blocks_.size(); ++i) f = hpsab(tape, i, f);
  return {f, restore_(tape, f)};
}

}  // namespace hsod::har
