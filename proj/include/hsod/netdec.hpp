#pragma once

// Multi-resolution backbone and the hierarchical saliency decoder with global and ternary
// guidance.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hsod/hsidata.hpp"
#include "hsod/layers.hpp"
#include "hsod/tensor.hpp"

namespace hsod::netdec {

inline constexpr std::size_t kLevels = 4;

struct BackboneConfig {
  std::size_t in_channels = 8;
  std::array<std::size_t, kLevels> widths{8, 16, 32, 64};
  std::size_t stem_stride = 2;
  std::size_t blocks = 1;  // basic blocks per branch
  bool fusion = true;      // cross-resolution exchange; off only for ablations

  void validate() const;  // ConfigError
  // Input height and width must be multiples of this.
  std::size_t input_multiple() const { return stem_stride * 8; }
  // Side length of branch `level` (0-based) for an input side `n`.
  std::size_t branch_size(std::size_t n, std::size_t level) const { return n / (stem_stride << level); }
};

struct MultiScaleFeatures {
  std::array<Var, kLevels> f;  // f[0] highest resolution
};

class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, ParameterSet& ps, Rng& rng, const std::string& prefix = "backbone");
  const BackboneConfig& config() const { return cfg_; }
  MultiScaleFeatures forward(Tape& tape, Var x) const;

 private:
  struct Block {
    Conv c1, c2;
    Norm n1, n2;
  };
  struct Stage {
    Conv conv;
    Norm norm;
  };
  Var block(Tape& tape, const Block& b, Var x) const;

  BackboneConfig cfg_;
  Stage stem_;
  std::array<Stage, kLevels - 1> transitions_;
  std::array<std::vector<Block>, kLevels> blocks_;
  // fuse_[i][j]: 1x1 conv + norm bringing branch j to branch i (unused on the diagonal).
  std::array<std::array<std::optional<Stage>, kLevels>, kLevels> fuse_;
};

// Ground-truth global map: 1 where the block of `mask` mapping to a g x g cell holds any
// foreground. Implemented as pixel unshuffle followed by a channel max. Returns [1, g, g].
Tensor gt_global(const data::GroundTruthMask& mask, std::size_t grid);

struct DecoderConfig {
  std::size_t width = 16;      // channels of every decoded level
  std::size_t grid = 4;        // side of the global map
  std::size_t attn_dim = 16;   // token width inside the global attention
  std::size_t mlp_hidden = 16;

  void validate() const;
};

// Global attention feature aggregation: all levels rearranged to g x g, fused, one
// self-attention layer, MLP head, sigmoid.
class Gafa {
 public:
  // `side` is the side length of the highest-resolution feature; every level must map to
  // g x g by an integer rearrangement ratio.
  Gafa(const std::array<std::size_t, kLevels>& widths, std::size_t side, const DecoderConfig& cfg, ParameterSet& ps,
       Rng& rng, const std::string& prefix);
  // Level features as g*g tokens of width attn_dim, [g*g, d].
  Var tokens(Tape& tape, const MultiScaleFeatures& feats) const;
  // x + softmax(Q K^T / sqrt(d)) V over token rows; rows of the attention sum to 1.
  Var attend(Tape& tape, Var tokens, Var* attention = nullptr) const;
  // [1, g, g] in (0, 1).
  Var forward(Tape& tape, const MultiScaleFeatures& feats, Var* attention = nullptr) const;

 private:
  std::array<std::size_t, kLevels> widths_;
  std::size_t side_;
  DecoderConfig cfg_;
  std::array<Conv, kLevels> fuse_conv_;
  std::array<Norm, kLevels> fuse_norm_;
  Linear proj_, wq_, wk_, wv_, mlp1_, mlp2_;
};

struct LevelOutput {
  Var d;  // decoded feature
  Var p;  // [1, S, S] saliency in (0, 1)
  Var t;  // [3, S, S] trimap: background, object, uncertain
};

struct DecoderOutput {
  Var saliency;  // [1, H, W] at input resolution
  Var global;    // G_m, [1, g, g]
  std::array<LevelOutput, kLevels> levels;
};

class Decoder {
 public:
  Decoder(const std::array<std::size_t, kLevels>& widths, std::size_t side, const DecoderConfig& cfg, ParameterSet& ps,
          Rng& rng, const std::string& prefix = "decoder");
  const DecoderConfig& config() const { return cfg_; }
  const Gafa& gafa() const { return gafa_; }

  // Cross-level feature interaction for `level`; `deeper` is the next-deeper backbone feature
  // (absent at the deepest level).
  Var cmfi(Tape& tape, std::size_t level, Var f, std::optional<Var> deeper) const;
  // Saliency and trimap heads.
  LevelOutput taw(Tape& tape, std::size_t level, Var d) const;
  DecoderOutput forward(Tape& tape, const MultiScaleFeatures& feats, std::size_t output_scale) const;

 private:
  struct Cmfi {
    Conv main_conv;
    Norm main_norm;
    Conv gcn_a1, gcn_a2, gcn_b1, gcn_b2;
    Norm gcn_norm;
    Conv sub1, sub2, sub3;
    Norm sub_n1, sub_n2, sub_n3;
    Conv merge;
    Norm merge_norm;
  };
  struct Taw {
    Conv pre, weight;
  };
  std::array<std::size_t, kLevels> widths_;
  std::size_t side_;
  DecoderConfig cfg_;
  std::array<Cmfi, kLevels> cmfi_;
  std::array<Taw, kLevels> taw_;
  Gafa gafa_;
};

// Resizes a [C, S, S] map to side `side` by nearest upsampling or average pooling.
Var resize_to(Var x, std::size_t side);

}  // namespace hsod::netdec
