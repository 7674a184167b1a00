#pragma once

// Full model, losses, optimizer, training loop, gradient checks and checkpoints.

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hsod/har.hpp"
#include "hsod/hsidata.hpp"
#include "hsod/netdec.hpp"
#include "hsod/tensor.hpp"

namespace hsod::train {

struct ModelConfig {
  std::size_t input_size = 32;  // square input side
  har::HarConfig har;
  netdec::BackboneConfig backbone;  // in_channels follows har.reduced_bands()
  netdec::DecoderConfig decoder;

  void validate() const;  // ConfigError
  // 8x8 input, stem 1, grid 2: the gradient-check model.
  static ModelConfig tiny();
};

// Strict JSON mapping; unknown keys throw ConfigError.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// One training pair, preprocessed.
struct Sample {
  Tensor original;  // [C, H, W]
  Tensor reduced;   // [C/4, H, W]
  Tensor gt;        // [1, H, W] of 0/1
  Tensor gt_global; // [1, g, g]
};

Sample make_sample(const data::HsiCube& cube, const data::GroundTruthMask& mask, std::size_t grid);

struct ModelOutput {
  har::HarOutput har;
  netdec::DecoderOutput decoder;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return *params_; }
  const ParameterSet& params() const { return *params_; }

  // Reduced cube [C/4, S, S] through the whole network.
  ModelOutput forward(Tape& tape, Var reduced) const;
  har::HarOutput forward_har(Tape& tape, Var reduced) const;

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParameterSet> params_;
  std::unique_ptr<har::Har> har_;
  std::unique_ptr<netdec::Backbone> backbone_;
  std::unique_ptr<netdec::Decoder> decoder_;
};

// Attention scalars sigma_j, alpha, beta.
std::vector<Parameter*> attention_scalars(ParameterSet& ps);

// ---- losses -------------------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kIouSmoothing = 1.0;

Var loss_s(Var restored, Var original);                    // mean absolute error
Var iou_loss(Var p, const Tensor& gt);                     // 1 - (I + 1) / (U + 1)
Var loss_level(Var p, const Tensor& gt);                   // BCE + IoU after nearest upsampling
Var loss_g(Var global, const Tensor& gt_global);           // clamped BCE

struct LossReport {
  double l_s = 0.0;
  double l_sod = 0.0;
  double l_g = 0.0;
  double l_m = 0.0;
  std::array<double, netdec::kLevels> l_sod_levels{};
};

struct LossTerms {
  Var l_s, l_sod, l_g, total;
  LossReport report;
};

LossTerms compute_losses(Tape& tape, const ModelOutput& out, const Sample& sample,
                         const std::array<double, netdec::kLevels>& level_weights);

// ---- optimizer ----------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParameterSet& ps, AdamConfig cfg);
  // Applies one update from the accumulated gradients; frozen parameters are skipped.
  void step();
  std::size_t steps() const { return t_; }

 private:
  ParameterSet& ps_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// ---- training -----------------------------------------------------------------------------

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 100;
  AdamConfig adam;
  std::array<double, netdec::kLevels> level_weights{1.0, 1.0, 1.0, 1.0};

  void validate() const;
};

// Full forward, hybrid loss, backward, update. Throws NumericError on a non-finite loss or
// gradient, naming the first non-finite tensor.
LossReport train_step(Model& model, const Sample& sample, const TrainConfig& cfg, Adam& opt);
// Reconstruction branch only: L_s, backward, update. Returns L_s before the update.
double reconstruction_step(Model& model, const Sample& sample, Adam& opt);

using StepCallback = std::function<void(std::size_t step, const LossReport&)>;
// Cycles through samples in order for cfg.steps steps.
std::vector<LossReport> run_training(Model& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                              const StepCallback& on_step = {});

// {"step":s,"L_s":...,"L_sod":...,"L_g":...,"L_m":...} with round-trip precision.
std::string log_line(std::size_t step, const LossReport& r);

// ---- gradient checks ----------------------------------------------------------------------

struct GradGroupResult {
  std::string group;
  std::size_t checked = 0;
  std::size_t available = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]"
};

struct GradCheckReport {
  std::vector<GradGroupResult> groups;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradGroup {
  std::string name;
  std::vector<Parameter*> params;
};

// Central differences (step h) on up to `per_group` sampled scalars of every group; groups
// no larger than that are checked exhaustively. `loss` must run a fresh forward pass.
GradCheckReport check_gradients(const std::vector<GradGroup>& groups, const std::function<Var(Tape&)>& loss,
                                std::size_t per_group, double tolerance, std::uint64_t seed, double h = 1e-5);

// Groups: attention scalars sigma / alpha / beta, output projection W, attention
// projections, convolution kernels, and everything else.
std::vector<GradGroup> parameter_groups(ParameterSet& ps);

// Gradient check of the full loss on a tiny seeded model and scene.
GradCheckReport grad_check_suite(const ModelConfig& cfg, std::uint64_t seed, double tolerance = 1e-4,
                                 std::size_t per_group = 20);

// ---- checkpoints --------------------------------------------------------------------------

// "HHCK", u32 version, u32 n + model config JSON, u32 count, then per parameter:
// u32 n + name, u32 rank, rank x u32 dims, f32 values. Little-endian.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "checkpoint");

}  // namespace hsod::train
