#include "hsod/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hsod/errors.hpp"
#include "hsod/io.hpp"
#include "hsod/jsonutil.hpp"

namespace hsod::train {

using json::Json;

// ---- configuration ------------------------------------------------------------------------

void ModelConfig::validate() const {
  har.validate();
  backbone.validate();
  decoder.validate();
  if (input_size == 0 || input_size % backbone.input_multiple() != 0) {
    throw ConfigError("model: input_size " + std::to_string(input_size) + " must be a positive multiple of " +
                      std::to_string(backbone.input_multiple()));
  }
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_size = 8;
  c.backbone.stem_stride = 1;
  c.decoder.grid = 2;
  return c;
}

std::string model_config_to_json(const ModelConfig& c) {
  Json j;
  j["input_size"] = c.input_size;
  j["har"] = {{"bands", c.har.bands},
              {"num_blocks", c.har.num_blocks},
              {"num_heads", c.har.num_heads},
              {"eca_gamma", c.har.eca_gamma},
              {"eca_b", c.har.eca_b}};
  j["backbone"] = {{"widths", c.backbone.widths},
                   {"stem_stride", c.backbone.stem_stride},
                   {"blocks", c.backbone.blocks},
                   {"fusion", c.backbone.fusion}};
  j["decoder"] = {{"width", c.decoder.width},
                  {"grid", c.decoder.grid},
                  {"attn_dim", c.decoder.attn_dim},
                  {"mlp_hidden", c.decoder.mlp_hidden}};
  return j.dump();
}

namespace {

ModelConfig model_config_from(const Json& j) {
  ModelConfig c;
  json::check_keys(j, {"input_size", "har", "backbone", "decoder"}, "model");
  json::read(j, "input_size", c.input_size, "model");
  if (auto it = j.find("har"); it != j.end()) {
    json::check_keys(*it, {"bands", "num_blocks", "num_heads", "eca_gamma", "eca_b"}, "model.har");
    json::read(*it, "bands", c.har.bands, "model.har");
    json::read(*it, "num_blocks", c.har.num_blocks, "model.har");
    json::read(*it, "num_heads", c.har.num_heads, "model.har");
    json::read(*it, "eca_gamma", c.har.eca_gamma, "model.har");
    json::read(*it, "eca_b", c.har.eca_b, "model.har");
  }
  if (auto it = j.find("backbone"); it != j.end()) {
    json::check_keys(*it, {"widths", "stem_stride", "blocks", "fusion"}, "model.backbone");
    if (auto w = it->find("widths"); w != it->end()) {
      if (!w->is_array() || w->size() != netdec::kLevels) throw ConfigError("model.backbone.widths: expected 4 integers");
      for (std::size_t i = 0; i < netdec::kLevels; ++i) {
        if (!(*w)[i].is_number_unsigned()) throw ConfigError("model.backbone.widths: expected 4 integers");
        c.backbone.widths[i] = (*w)[i].get<std::size_t>();
      }
    }
    json::read(*it, "stem_stride", c.backbone.stem_stride, "model.backbone");
    json::read(*it, "blocks", c.backbone.blocks, "model.backbone");
    json::read(*it, "fusion", c.backbone.fusion, "model.backbone");
  }
  if (auto it = j.find("decoder"); it != j.end()) {
    json::check_keys(*it, {"width", "grid", "attn_dim", "mlp_hidden"}, "model.decoder");
    json::read(*it, "width", c.decoder.width, "model.decoder");
    json::read(*it, "grid", c.decoder.grid, "model.decoder");
    json::read(*it, "attn_dim", c.decoder.attn_dim, "model.decoder");
    json::read(*it, "mlp_hidden", c.decoder.mlp_hidden, "model.decoder");
  }
  c.backbone.in_channels = c.har.reduced_bands();
  c.validate();
  return c;
}

}  // namespace

ModelConfig model_config_from_json(const std::string& text) { return model_config_from(json::parse(text, "model")); }

// ---- model --------------------------------------------------------------------------------

Sample make_sample(const data::HsiCube& cube, const data::GroundTruthMask& mask, std::size_t grid) {
  if (mask.height != cube.height || mask.width != cube.width) {
    throw DimensionError("sample: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not match cube " + std::to_string(cube.height) + "x" + std::to_string(cube.width));
  }
  Sample s;
  s.original = cube.to_tensor();
  s.reduced = data::band_interpolate_4to1(cube).to_tensor();
  s.gt = mask.to_tensor();
  s.gt_global = netdec::gt_global(mask, grid);
  return s;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(std::make_unique<ParameterSet>()) {
  cfg_.backbone.in_channels = cfg_.har.reduced_bands();
  cfg_.validate();
  Rng rng(seed);
  har_ = std::make_unique<har::Har>(cfg_.har, *params_, rng);
  backbone_ = std::make_unique<netdec::Backbone>(cfg_.backbone, *params_, rng);
  decoder_ = std::make_unique<netdec::Decoder>(cfg_.backbone.widths, cfg_.input_size / cfg_.backbone.stem_stride,
                                               cfg_.decoder, *params_, rng);
}

har::HarOutput Model::forward_har(Tape& tape, Var reduced) const {
  const auto& s = reduced.shape();
  if (s.size() != 3 || s[1] != cfg_.input_size || s[2] != cfg_.input_size) {
    throw DimensionError("model: input " + shape_str(s) + " does not match configured side " +
                         std::to_string(cfg_.input_size));
  }
  return har_->forward(tape, reduced);
}

ModelOutput Model::forward(Tape& tape, Var reduced) const {
  ModelOutput out;
  out.har = forward_har(tape, reduced);
  out.decoder = decoder_->forward(tape, backbone_->forward(tape, out.har.features), cfg_.backbone.stem_stride);
  return out;
}

std::vector<Parameter*> attention_scalars(ParameterSet& ps) {
  std::vector<Parameter*> out;
  for (auto& p : ps) {
    const auto& n = p.name;
    if (n.find(".mssa.sigma") != std::string::npos || n.ends_with(".asam.alpha") || n.ends_with(".asam.beta")) {
      out.push_back(&p);
    }
  }
  return out;
}

// ---- losses -------------------------------------------------------------------------------

Var loss_s(Var restored, Var original) {
  if (restored.shape() != original.shape()) {
    throw DimensionError("loss_s: restored " + shape_str(restored.shape()) + " vs original " +
                         shape_str(original.shape()));
  }
  return mean(abs(sub(restored, original)));
}

Var iou_loss(Var p, const Tensor& gt) {
  if (p.shape() != gt.shape()) throw DimensionError("iou_loss: " + shape_str(p.shape()) + " vs " + shape_str(gt.shape()));
  double gt_sum = 0.0;
  for (double v : gt.data()) gt_sum += v;
  Var inter = sum(mul(p, p.tape().constant(gt, "gt")));
  Var uni = add_scalar(sub(sum(p), inter), gt_sum + kIouSmoothing);
  return add_scalar(scale(div(add_scalar(inter, kIouSmoothing), uni), -1.0), 1.0);
}

Var loss_level(Var p, const Tensor& gt) {
  const std::size_t side = p.shape().at(1), target = gt.shape().at(1);
  if (target % side != 0) {
    throw DimensionError("loss_level: prediction side " + std::to_string(side) + " does not divide " + std::to_string(target));
  }
  Var up = target == side ? p : upsample_nearest(p, target / side);
  if (up.shape() != gt.shape()) throw DimensionError("loss_level: " + shape_str(up.shape()) + " vs " + shape_str(gt.shape()));
  return add(binary_cross_entropy(up, gt, kProbabilityClamp), iou_loss(up, gt));
}

Var loss_g(Var global, const Tensor& gt_global) { return binary_cross_entropy(global, gt_global, kProbabilityClamp); }

LossTerms compute_losses(Tape& tape, const ModelOutput& out, const Sample& sample,
                         const std::array<double, netdec::kLevels>& level_weights) {
  LossTerms t;
  t.l_s = loss_s(out.har.restored, tape.constant(sample.original, "original"));
  for (std::size_t i = 0; i < netdec::kLevels; ++i) {
    Var li = loss_level(out.decoder.levels[i].p, sample.gt);
    t.report.l_sod_levels[i] = li.value().item();
    Var w = scale(li, level_weights[i]);
    t.l_sod = i == 0 ? w : add(t.l_sod, w);
  }
  t.l_g = loss_g(out.decoder.global, sample.gt_global);
  t.total = add(add(t.l_s, t.l_sod), t.l_g);
  t.report.l_s = t.l_s.value().item();
  t.report.l_sod = t.l_sod.value().item();
  t.report.l_g = t.l_g.value().item();
  t.report.l_m = t.total.value().item();
  return t;
}

// ---- optimizer ----------------------------------------------------------------------------

Adam::Adam(ParameterSet& ps, AdamConfig cfg) : ps_(ps), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  for (const auto& p : ps_) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  for (auto& p : ps_) {
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      p.value[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

// ---- training -----------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train: steps must be >= 1");
  if (!(adam.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  for (double w : level_weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("train: level weights must be finite and non-negative");
}

namespace {

void require_finite_loss(const Tape& tape, Var loss, const char* what) {
  if (std::isfinite(loss.value().item())) return;
  const auto culprit = tape.first_non_finite();
  throw NumericError(std::string(what) + " is not finite; first non-finite tensor: " + culprit.value_or("(loss only)"));
}

void require_finite_grads(const ParameterSet& ps) {
  for (const auto& p : ps) {
    if (!p.grad.all_finite()) throw NumericError("gradient of '" + p.name + "' is not finite");
  }
}

}  // namespace

LossReport train_step(Model& model, const Sample& sample, const TrainConfig& cfg, Adam& opt) {
  Tape tape;
  auto out = model.forward(tape, tape.constant(sample.reduced, "reduced"));
  auto terms = compute_losses(tape, out, sample, cfg.level_weights);
  require_finite_loss(tape, terms.total, "L_m");
  model.params().zero_grad();
  tape.backward(terms.total);
  require_finite_grads(model.params());
  opt.step();
  return terms.report;
}

double reconstruction_step(Model& model, const Sample& sample, Adam& opt) {
  Tape tape;
  auto out = model.forward_har(tape, tape.constant(sample.reduced, "reduced"));
  Var l = loss_s(out.restored, tape.constant(sample.original, "original"));
  require_finite_loss(tape, l, "L_s");
  model.params().zero_grad();
  tape.backward(l);
  require_finite_grads(model.params());
  opt.step();
  return l.value().item();
}

std::vector<LossReport> run_training(Model& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                              const StepCallback& on_step) {
  cfg.validate();
  if (samples.empty()) throw DataError("train: no training samples");
  Adam opt(model.params(), cfg.adam);
  std::vector<LossReport> history;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    history.push_back(train_step(model, samples[s % samples.size()], cfg, opt));
    if (on_step) on_step(s, history.back());
  }
  return history;
}

std::string log_line(std::size_t step, const LossReport& r) {
  Json j;
  j["step"] = step;
  j["L_s"] = r.l_s;
  j["L_sod"] = r.l_sod;
  j["L_g"] = r.l_g;
  j["L_m"] = r.l_m;
  return j.dump();
}

// ---- gradient checks ----------------------------------------------------------------------

GradCheckReport check_gradients(const std::vector<GradGroup>& groups, const std::function<Var(Tape&)>& loss,
                                std::size_t per_group, double tolerance, std::uint64_t seed, double h) {
  for (const auto& g : groups)
    for (auto* p : g.params) p->zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    tape.backward(l);
  }
  auto eval = [&]() {
    Tape tape;
    return loss(tape).value().item();
  };
  Rng rng(seed);
  GradCheckReport report;
  report.passed = true;
  for (const auto& g : groups) {
    GradGroupResult r;
    r.group = g.name;
    std::vector<std::pair<Parameter*, std::size_t>> slots;
    double scale = 0.0;
    for (auto* p : g.params) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        slots.emplace_back(p, i);
        scale = std::max(scale, std::fabs(p->grad[i]));
      }
    }
    r.available = slots.size();
    const std::size_t n = std::min(per_group, slots.size());
    for (std::size_t i = 0; i < n; ++i) std::swap(slots[i], slots[i + rng.index(slots.size() - i)]);
    const double floor = std::max(1e-6, 1e-2 * scale);
    for (std::size_t k = 0; k < n; ++k) {
      auto [p, i] = slots[k];
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = eval();
      p->value[i] = saved - h;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double e = std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
      if (r.worst.empty() || e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
    r.checked = n;
    report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    if (!(r.max_rel_error < tolerance)) report.passed = false;
    report.groups.push_back(r);
  }
  return report;
}

std::vector<GradGroup> parameter_groups(ParameterSet& ps) {
  std::vector<GradGroup> g{{"sigma", {}}, {"alpha", {}}, {"beta", {}}, {"output_projection", {}},
                           {"attention_projections", {}}, {"conv_kernels", {}}, {"other", {}}};
  for (auto& p : ps) {
    if (p.frozen) continue;
    const auto& n = p.name;
    std::size_t k = 6;
    if (n.find(".mssa.sigma") != std::string::npos) {
      k = 0;
    } else if (n.ends_with(".asam.alpha")) {
      k = 1;
    } else if (n.ends_with(".asam.beta")) {
      k = 2;
    } else if (n.ends_with(".mssa.wo")) {
      k = 3;
    } else if (n.ends_with(".mssa.wq") || n.ends_with(".mssa.wk") || n.ends_with(".mssa.wv") ||
               n.ends_with(".gafa.wq.w") || n.ends_with(".gafa.wk.w") || n.ends_with(".gafa.wv.w")) {
      k = 4;
    } else if (p.value.rank() == 4) {
      k = 5;
    }
    g[k].params.push_back(&p);
  }
  std::erase_if(g, [](const GradGroup& x) { return x.params.empty(); });
  return g;
}

GradCheckReport grad_check_suite(const ModelConfig& cfg, std::uint64_t seed, double tolerance, std::size_t per_group) {
  Model model(cfg, seed);
  data::SceneSpec spec;
  spec.height = spec.width = cfg.input_size;
  spec.bands = cfg.har.bands;
  spec.wavelength_step_nm = 600.0 / static_cast<double>(spec.bands);
  spec.noise = 0.01;
  data::ObjectSpec obj;
  obj.center = std::array<double, 2>{0.5, 0.5};
  obj.scale = 0.2;
  obj.spectrum = data::SpectrumSpec{0.6, 0.2, {}};
  spec.objects = {obj};
  const auto scene = data::synth_scene(spec, seed);
  const Sample sample = make_sample(scene.cube, scene.mask, cfg.decoder.grid);
  const std::array<double, netdec::kLevels> weights{1.0, 1.0, 1.0, 1.0};
  auto loss = [&](Tape& tape) {
    auto out = model.forward(tape, tape.constant(sample.reduced));
    return compute_losses(tape, out, sample, weights).total;
  };
  return check_gradients(parameter_groups(model.params()), loss, per_group, tolerance, seed);
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  io::ByteWriter w;
  w.bytes("HHCK");
  w.u32(kCheckpointVersion);
  const auto cfg = model_config_to_json(model.config());
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.value.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  if (r.bytes(4) != "HHCK") throw BadMagicError(source + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.u32();
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(r.bytes(cfg_len));
  } catch (const ConfigError& e) {
    throw FormatError(source + ": embedded model config: " + e.what());
  }
  Model model(cfg, 0);
  const auto count = r.u32();
  if (count != model.params().size()) {
    throw PayloadMismatchError(source + ": holds " + std::to_string(count) + " parameters, model needs " +
                               std::to_string(model.params().size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = r.bytes(r.u32());
    Parameter* p = model.params().find(name);
    if (!p) throw PayloadMismatchError(source + ": unknown parameter '" + name + "'");
    const auto rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    if (shape != p->value.shape()) {
      throw PayloadMismatchError(source + ": parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                                 shape_str(p->value.shape()));
    }
    for (auto& v : p->value.data()) {
      v = r.f32();
      if (!std::isfinite(v)) throw DataError(source + ": parameter '" + name + "' holds a non-finite value");
    }
  }
  if (r.remaining() != 0) throw PayloadMismatchError(source + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace hsod::train
