#include "hsod/netdec.hpp"

#include <algorithm>
#include <cmath>

#include "hsod/errors.hpp"

namespace hsod::netdec {

namespace {

std::string level_name(const std::string& prefix, const char* what, std::size_t i) {
  return prefix + "." + what + std::to_string(i + 1);
}

Conv conv(ParameterSet& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kh,
          std::size_t kw, Rng& rng, bool bias = false, std::size_t stride = 1) {
  Conv2dOptions o;
  o.stride = stride;
  return Conv::make(ps, name, cin, cout, kh, kw, rng, bias, o);
}

std::size_t pow2(std::size_t k) { return std::size_t{1} << k; }

}  // namespace

void BackboneConfig::validate() const {
  if (in_channels == 0) throw ConfigError("backbone: in_channels must be positive");
  if (stem_stride == 0) throw ConfigError("backbone: stem_stride must be positive");
  for (std::size_t i = 0; i < kLevels; ++i) {
    if (widths[i] == 0 || widths[i] % 2 != 0) {
      throw ConfigError("backbone: widths[" + std::to_string(i) + "] must be a positive even number, got " +
                        std::to_string(widths[i]));
    }
    if (i > 0 && widths[i] <= widths[i - 1]) throw ConfigError("backbone: widths must be strictly increasing");
  }
}

Backbone::Backbone(const BackboneConfig& cfg, ParameterSet& ps, Rng& rng, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  const auto& w = cfg_.widths;
  stem_ = {conv(ps, prefix + ".stem", cfg_.in_channels, w[0], 3, 3, rng, false, cfg_.stem_stride),
           Norm::make(ps, prefix + ".stem.norm", w[0])};
  for (std::size_t i = 0; i + 1 < kLevels; ++i) {
    const auto name = level_name(prefix, "transition", i + 1);
    transitions_[i] = {conv(ps, name, w[i], w[i + 1], 3, 3, rng, false, 2), Norm::make(ps, name + ".norm", w[i + 1])};
  }
  for (std::size_t i = 0; i < kLevels; ++i) {
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const auto name = level_name(prefix, "branch", i) + ".block" + std::to_string(b);
      blocks_[i].push_back({conv(ps, name + ".conv1", w[i], w[i], 3, 3, rng), conv(ps, name + ".conv2", w[i], w[i], 3, 3, rng),
                            Norm::make(ps, name + ".norm1", w[i]), Norm::make(ps, name + ".norm2", w[i])});
    }
  }
  if (cfg_.fusion) {
    for (std::size_t i = 0; i < kLevels; ++i)
      for (std::size_t j = 0; j < kLevels; ++j) {
        if (i == j) continue;
        const auto name = prefix + ".fuse" + std::to_string(j + 1) + "to" + std::to_string(i + 1);
        fuse_[i][j] = Stage{conv(ps, name, w[j], w[i], 1, 1, rng), Norm::make(ps, name + ".norm", w[i])};
      }
  }
}

Var Backbone::block(Tape& tape, const Block& b, Var x) const {
  Var h = relu(b.n1(tape, b.c1(tape, x)));
  return relu(add(x, b.n2(tape, b.c2(tape, h))));
}

MultiScaleFeatures Backbone::forward(Tape& tape, Var x) const {
  const auto& s = x.shape();
  if (s.size() != 3 || s[0] != cfg_.in_channels) {
    throw DimensionError("backbone: expected [" + std::to_string(cfg_.in_channels) + ", H, W], got " + shape_str(s));
  }
  if (s[1] != s[2] || s[1] % cfg_.input_multiple() != 0) {
    throw DimensionError("backbone: input must be square with side a multiple of " +
                         std::to_string(cfg_.input_multiple()) + ", got " + shape_str(s));
  }
  std::array<Var, kLevels> b;
  Var cur = relu(stem_.norm(tape, stem_.conv(tape, x)));
  for (std::size_t i = 0; i < kLevels; ++i) {
    if (i > 0) cur = relu(transitions_[i - 1].norm(tape, transitions_[i - 1].conv(tape, cur)));
    for (const auto& blk : blocks_[i]) cur = block(tape, blk, cur);
    b[i] = cur;
  }
  if (!cfg_.fusion) return {b};
  MultiScaleFeatures out;
  for (std::size_t i = 0; i < kLevels; ++i) {
    Var acc = b[i];
    for (std::size_t j = 0; j < kLevels; ++j) {
      if (i == j) continue;
      const auto& st = *fuse_[i][j];
      Var y;
      if (j > i) {
        y = upsample_nearest(st.norm(tape, st.conv(tape, b[j])), pow2(j - i));
      } else {
        y = st.norm(tape, st.conv(tape, downsample_avg(b[j], pow2(i - j))));
      }
      acc = add(acc, y);
    }
    out.f[i] = relu(acc);
  }
  return out;
}

Tensor gt_global(const data::GroundTruthMask& mask, std::size_t grid) {
  if (grid == 0 || mask.height != mask.width || mask.height % grid != 0) {
    throw DimensionError("gt_global: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not split into a " + std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  }
  const std::size_t r = mask.height / grid;
  Tape tape;
  const Tensor stack = pixel_unshuffle(tape.constant(mask.to_tensor()), r).value();
  Tensor out({1, grid, grid});
  const std::size_t cells = grid * grid;
  for (std::size_t c = 0; c < stack.dim(0); ++c)
    for (std::size_t i = 0; i < cells; ++i) out[i] = std::max(out[i], stack[c * cells + i]);
  return out;
}

Var resize_to(Var x, std::size_t side) {
  const std::size_t s = x.shape().at(1);
  if (s == side) return x;
  if (side > s && side % s == 0) return upsample_nearest(x, side / s);
  if (side < s && s % side == 0) return downsample_avg(x, s / side);
  throw DimensionError("resize_to: cannot resize side " + std::to_string(s) + " to " + std::to_string(side));
}

void DecoderConfig::validate() const {
  if (width == 0 || grid == 0 || attn_dim == 0 || mlp_hidden == 0) {
    throw ConfigError("decoder: width, grid, attn_dim and mlp_hidden must be positive");
  }
}

// ---- global attention ---------------------------------------------------------------------

namespace {

// Channels after rearranging a [c, s, s] map to g x g.
std::size_t rearranged_channels(std::size_t c, std::size_t s, std::size_t g, std::size_t level) {
  const auto where = " at level " + std::to_string(level + 1);
  if (s >= g) {
    if (s % g != 0) throw ConfigError("gafa: side " + std::to_string(s) + " is not a multiple of grid " + std::to_string(g) + where);
    return c * (s / g) * (s / g);
  }
  const std::size_t r = g / s;
  if (g % s != 0 || c % (r * r) != 0) {
    throw ConfigError("gafa: cannot pixel-shuffle [" + std::to_string(c) + ", " + std::to_string(s) + ", " +
                      std::to_string(s) + "] to grid " + std::to_string(g) + where);
  }
  return c / (r * r);
}

Var rearrange(Var x, std::size_t g) {
  const std::size_t s = x.shape()[1];
  if (s > g) return pixel_unshuffle(x, s / g);
  if (s < g) return pixel_shuffle(x, g / s);
  return x;
}

}  // namespace

Gafa::Gafa(const std::array<std::size_t, kLevels>& widths, std::size_t side, const DecoderConfig& cfg,
           ParameterSet& ps, Rng& rng, const std::string& prefix)
    : widths_(widths), side_(side), cfg_(cfg) {
  cfg_.validate();
  std::size_t total = 0;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::size_t s = side >> i;
    if (s == 0 || (side % pow2(i)) != 0) throw ConfigError("gafa: feature side " + std::to_string(side) + " too small");
    const std::size_t cin = rearranged_channels(widths_[i], s, cfg_.grid, i);
    const auto name = level_name(prefix, "fuse", i);
    fuse_conv_[i] = conv(ps, name, cin, widths_[i], 3, 3, rng);
    fuse_norm_[i] = Norm::make(ps, name + ".norm", widths_[i]);
    total += widths_[i];
  }
  const std::size_t d = cfg_.attn_dim;
  proj_ = Linear::make(ps, prefix + ".proj", total, d, rng, true);
  wq_ = Linear::make(ps, prefix + ".wq", d, d, rng, false);
  wk_ = Linear::make(ps, prefix + ".wk", d, d, rng, false);
  wv_ = Linear::make(ps, prefix + ".wv", d, d, rng, false);
  mlp1_ = Linear::make(ps, prefix + ".mlp1", d, cfg_.mlp_hidden, rng, true);
  mlp2_ = Linear::make(ps, prefix + ".mlp2", cfg_.mlp_hidden, 1, rng, true);
}

Var Gafa::tokens(Tape& tape, const MultiScaleFeatures& feats) const {
  const std::size_t g = cfg_.grid;
  std::vector<Var> parts;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const auto& s = feats.f[i].shape();
    if (s.size() != 3 || s[0] != widths_[i] || s[1] != (side_ >> i) || s[2] != s[1]) {
      throw DimensionError("gafa: level " + std::to_string(i + 1) + " feature " + shape_str(s) + " does not match the configured side " +
                           std::to_string(side_ >> i));
    }
    Var y = relu(fuse_norm_[i](tape, fuse_conv_[i](tape, rearrange(feats.f[i], g))));
    parts.push_back(reshape(y, {widths_[i], g * g}));
  }
  return proj_(tape, transpose(concat(parts, 0)));
}

Var Gafa::attend(Tape& tape, Var x, Var* attention) const {
  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.attn_dim));
  Var q = wq_(tape, x), k = wk_(tape, x), v = wv_(tape, x);
  Var a = softmax(scale(matmul(q, transpose(k)), inv), 1);
  if (attention) *attention = a;
  return add(x, matmul(a, v));
}

Var Gafa::forward(Tape& tape, const MultiScaleFeatures& feats, Var* attention) const {
  const std::size_t g = cfg_.grid;
  Var z = attend(tape, tokens(tape, feats), attention);
  Var logits = mlp2_(tape, relu(mlp1_(tape, z)));
  return sigmoid(reshape(logits, {1, g, g}));
}

// ---- decoder ------------------------------------------------------------------------------

Decoder::Decoder(const std::array<std::size_t, kLevels>& widths, std::size_t side, const DecoderConfig& cfg,
                 ParameterSet& ps, Rng& rng, const std::string& prefix)
    : widths_(widths), side_(side), cfg_(cfg), gafa_(widths, side, cfg, ps, rng, prefix + ".gafa") {
  const std::size_t w = cfg_.width;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::size_t h = widths_[i] / 2;
    const auto p = level_name(prefix, "cmfi", i);
    auto& c = cmfi_[i];
    c.main_conv = conv(ps, p + ".main", h, h, 3, 3, rng);
    c.main_norm = Norm::make(ps, p + ".main.norm", h);
    c.gcn_a1 = conv(ps, p + ".gcn_a1", h, h, 7, 1, rng);
    c.gcn_a2 = conv(ps, p + ".gcn_a2", h, h, 1, 7, rng);
    c.gcn_b1 = conv(ps, p + ".gcn_b1", h, h, 1, 7, rng);
    c.gcn_b2 = conv(ps, p + ".gcn_b2", h, h, 7, 1, rng);
    c.gcn_norm = Norm::make(ps, p + ".gcn.norm", h);
    c.sub1 = conv(ps, p + ".sub1", h, h, 1, 1, rng);
    c.sub2 = conv(ps, p + ".sub2", h, h, 3, 3, rng);
    c.sub3 = conv(ps, p + ".sub3", h, h, 3, 3, rng);
    c.sub_n1 = Norm::make(ps, p + ".sub1.norm", h);
    c.sub_n2 = Norm::make(ps, p + ".sub2.norm", h);
    c.sub_n3 = Norm::make(ps, p + ".sub3.norm", h);
    const std::size_t merged = 2 * h + (i + 1 < kLevels ? widths_[i + 1] / 2 : 0);
    c.merge = conv(ps, p + ".merge", merged, w, 1, 1, rng);
    c.merge_norm = Norm::make(ps, p + ".merge.norm", w);
    const auto t = level_name(prefix, "taw", i);
    taw_[i].pre = conv(ps, t + ".pre", w, 1, 3, 3, rng, true);
    taw_[i].weight = conv(ps, t + ".weight", w, 3, 3, 3, rng, true);
  }
}

Var Decoder::cmfi(Tape& tape, std::size_t level, Var f, std::optional<Var> deeper) const {
  const auto& c = cmfi_.at(level);
  const std::size_t ch = widths_[level], h = ch / 2;
  const auto& s = f.shape();
  if (s.size() != 3 || s[0] != ch) {
    throw DimensionError("cmfi: level " + std::to_string(level + 1) + " expects " + std::to_string(ch) + " channels, got " + shape_str(s));
  }
  if (deeper.has_value() != (level + 1 < kLevels)) throw DimensionError("cmfi: deeper feature must be given for all but the deepest level");
  Var f1 = slice(f, 0, 0, h), f2 = slice(f, 0, h, ch);

  const std::size_t side = s[1];
  const std::size_t pool = (side >= 2 && side % 2 == 0 && s[2] % 2 == 0) ? 2 : 1;
  Var m = relu(c.main_norm(tape, c.main_conv(tape, pool > 1 ? downsample_avg(f1, pool) : f1)));
  if (pool > 1) m = upsample_nearest(m, pool);
  Var u = add(m, f1);
  Var gcn = add(c.gcn_a2(tape, c.gcn_a1(tape, u)), c.gcn_b2(tape, c.gcn_b1(tape, u)));
  Var d1 = relu(c.gcn_norm(tape, gcn));

  Var sub = relu(c.sub_n1(tape, c.sub1(tape, f2)));
  sub = relu(c.sub_n2(tape, c.sub2(tape, sub)));
  sub = relu(c.sub_n3(tape, c.sub3(tape, sub)));
  std::vector<Var> parts{d1, sub};
  if (deeper) {
    const std::size_t cn = widths_[level + 1];
    parts.push_back(resize_to(slice(*deeper, 0, cn / 2, cn), side));
  }
  return relu(c.merge_norm(tape, c.merge(tape, concat(parts, 0))));
}

LevelOutput Decoder::taw(Tape& tape, std::size_t level, Var d) const {
  const auto& t = taw_.at(level);
  Var p = sigmoid(t.pre(tape, d));
  Var tri = softmax(t.weight(tape, add(mul(d, p), d)), 0);
  return {d, p, tri};
}

DecoderOutput Decoder::forward(Tape& tape, const MultiScaleFeatures& feats, std::size_t output_scale) const {
  DecoderOutput out;
  out.global = gafa_.forward(tape, feats);
  for (std::size_t n = kLevels; n-- > 0;) {
    std::optional<Var> deeper;
    if (n + 1 < kLevels) deeper = feats.f[n + 1];
    Var d = cmfi(tape, n, feats.f[n], deeper);
    const std::size_t side = d.shape()[1];
    d = add(d, mul(d, resize_to(out.global, side)));
    if (n + 1 < kLevels) {
      Var uncertain = slice(out.levels[n + 1].t, 0, 2, 3);
      d = mul(d, add_scalar(resize_to(uncertain, side), 1.0));
    }
    out.levels[n] = taw(tape, n, d);
  }
  out.saliency = output_scale > 1 ? upsample_nearest(out.levels[0].p, output_scale) : out.levels[0].p;
  return out;
}

}  // namespace hsod::netdec
