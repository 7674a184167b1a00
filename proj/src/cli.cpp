#include "hsod/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "hsod/basemetrics.hpp"
#include "hsod/errors.hpp"
#include "hsod/hsidata.hpp"
#include "hsod/io.hpp"
#include "hsod/jsonutil.hpp"
#include "hsod/train.hpp"

namespace hsod::cli {

namespace fs = std::filesystem;
using json::Json;

namespace {

// ---- run configuration --------------------------------------------------------------------

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::optional<train::ModelConfig> model;
  train::TrainConfig train;
};

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  const std::string where = path;
  const Json j = json::parse(io::read_text(path), where);
  json::check_keys(j, {"seed", "model", "train"}, where);
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    json::read(j, "seed", s, where);
    rc.seed = s;
  }
  if (j.contains("model")) {
    try {
      rc.model = train::model_config_from_json(j["model"].dump());
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  if (auto it = j.find("train"); it != j.end()) {
    const std::string w = where + ".train";
    json::check_keys(*it, {"steps", "lr", "beta1", "beta2", "eps", "level_weights"}, w);
    json::read(*it, "steps", rc.train.steps, w);
    json::read(*it, "lr", rc.train.adam.lr, w);
    json::read(*it, "beta1", rc.train.adam.beta1, w);
    json::read(*it, "beta2", rc.train.adam.beta2, w);
    json::read(*it, "eps", rc.train.adam.eps, w);
    if (auto lw = it->find("level_weights"); lw != it->end()) {
      if (!lw->is_array() || lw->size() != netdec::kLevels) throw ConfigError(w + ".level_weights: expected 4 numbers");
      for (std::size_t i = 0; i < netdec::kLevels; ++i) {
        if (!(*lw)[i].is_number()) throw ConfigError(w + ".level_weights: expected 4 numbers");
        rc.train.level_weights[i] = (*lw)[i].get<double>();
      }
    }
  }
  return rc;
}

// ---- output helpers -----------------------------------------------------------------------

void write_saliency(const data::SaliencyMap& map, const fs::path& pgm, const std::optional<fs::path>& raw) {
  io::write_file_atomic(pgm, data::encode_saliency_pgm(map));
  if (raw) io::write_file_atomic(*raw, data::encode_saliency_raw(map));
}

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<const data::ManifestEntry*> entries_of(const data::DatasetManifest& m, const std::string& split) {
  if (split != "train" && split != "test" && split != "all")
    throw ConfigError("--split must be train, test or all, got '" + split + "'");
  auto out = m.split(split);
  if (out.empty()) throw DataError("manifest has no entries in split '" + split + "'");
  return out;
}

data::SaliencyMap model_saliency(const train::Model& model, const data::HsiCube& cube, const std::string& source) {
  const auto& cfg = model.config();
  if (cube.bands != cfg.har.bands || cube.height != cfg.input_size || cube.width != cfg.input_size) {
    throw DataError(source + ": cube is " + std::to_string(cube.height) + "x" + std::to_string(cube.width) + "x" +
                    std::to_string(cube.bands) + ", model expects " + std::to_string(cfg.input_size) + "x" +
                    std::to_string(cfg.input_size) + "x" + std::to_string(cfg.har.bands));
  }
  Tape tape;
  auto out = model.forward(tape, tape.constant(data::band_interpolate_4to1(cube).to_tensor()));
  auto map = data::SaliencyMap::from_tensor(out.decoder.saliency.value());
  for (double v : map.values)
    if (!std::isfinite(v)) throw NumericError(source + ": model produced a non-finite saliency value");
  return map;
}

// ---- subcommands --------------------------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
};

struct SynthArgs {
  std::string spec, preset, cube, mask, out_dir;
  std::uint64_t seed = 0;
  std::size_t count = 0, size = 32, bands = 32;
  double train_fraction = data::kPaperTrainFraction;
};

int run_synth(const SynthArgs& a, Context& ctx) {
  if (a.count > 0) {
    if (a.out_dir.empty()) throw ConfigError("synth: --count needs --out-dir");
    if (!a.spec.empty() || !a.preset.empty()) throw ConfigError("synth: --count cannot be combined with --spec/--preset");
    Rng rng(a.seed);
    data::DatasetManifest man;
    std::vector<data::Scene> scenes;
    for (std::size_t i = 0; i < a.count; ++i) {
      const auto spec = data::random_scene(rng, a.size, a.size, a.bands);
      scenes.push_back(data::synth_scene(spec, rng.next_u64()));
      char id[32];
      std::snprintf(id, sizeof id, "scene_%03zu", i);
      data::ManifestEntry e;
      e.id = id;
      e.cube = e.id + ".hsi";
      e.mask = e.id + ".pgm";
      e.attributes = spec.attributes;
      man.entries.push_back(e);
    }
    if (a.count > 1) man = data::split_manifest(man, a.train_fraction, a.seed);
    const fs::path dir(a.out_dir);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      data::write_cube(scenes[i].cube, dir / man.entries[i].cube);
      data::write_mask(scenes[i].mask, dir / man.entries[i].mask);
    }
    data::write_manifest(man, dir / "manifest.json");
    ctx.out << "wrote " << a.count << " scenes and " << (dir / "manifest.json").string() << "\n";
    return kExitOk;
  }
  if (a.cube.empty() || a.mask.empty()) throw ConfigError("synth: --cube and --mask are required (or use --count)");
  if (a.spec.empty() == a.preset.empty()) throw ConfigError("synth: give exactly one of --spec or --preset");
  data::SceneSpec spec;
  if (!a.spec.empty()) {
    try {
      spec = data::scene_spec_from_json(io::read_text(a.spec));
    } catch (const ConfigError& e) {
      throw ConfigError(a.spec + ": " + e.what());
    }
  } else if (a.preset == "cs") {
    spec = data::color_similarity_scene(a.size, a.size, a.bands);
  } else {
    throw ConfigError("synth: unknown preset '" + a.preset + "' (expected cs)");
  }
  const auto scene = data::synth_scene(spec, a.seed);
  data::write_cube(scene.cube, a.cube);
  data::write_mask(scene.mask, a.mask);
  ctx.out << "wrote " << a.cube << " (" << spec.height << "x" << spec.width << "x" << spec.bands << ") and " << a.mask
          << "\n";
  return kExitOk;
}

struct PseudoArgs {
  std::string cube, out;
};

int run_pseudocolor(const PseudoArgs& a, Context& ctx) {
  io::write_file_atomic(a.out, data::encode_ppm(data::pseudo_color(data::read_cube(a.cube))));
  ctx.out << "wrote " << a.out << "\n";
  return kExitOk;
}

struct CalibrateArgs {
  std::string raw, dark, white, out;
};

int run_calibrate(const CalibrateArgs& a, Context& ctx) {
  const auto raw = data::read_cube(a.raw);
  const auto dark = data::read_cube(a.dark);
  const auto white = data::read_cube(a.white);
  data::write_cube(data::calibrate(raw, dark, white), a.out);
  ctx.out << "wrote " << a.out << "\n";
  return kExitOk;
}

struct MapArgs {
  std::string method = "sad", checkpoint, cube, out, raw, manifest, out_dir, split = "all";
};

// Shared by `baseline` and `infer`: one cube, or every entry of a manifest split.
int run_maps(const MapArgs& a, Context& ctx, const std::function<data::SaliencyMap(const data::HsiCube&, const std::string&)>& compute) {
  if (!a.manifest.empty()) {
    if (a.out_dir.empty()) throw ConfigError("--manifest needs --out-dir");
    const auto man = data::read_manifest(a.manifest);
    std::vector<std::pair<std::string, data::SaliencyMap>> maps;
    for (const auto* e : entries_of(man, a.split)) {
      const auto path = man.resolve(e->cube);
      maps.emplace_back(e->id, compute(data::read_cube(path), path.string()));
    }
    const fs::path dir(a.out_dir);
    for (const auto& [id, map] : maps) write_saliency(map, dir / (id + ".pgm"), dir / (id + ".sal"));
    ctx.out << "wrote " << maps.size() << " saliency maps to " << a.out_dir << "\n";
    return kExitOk;
  }
  if (a.cube.empty() || a.out.empty()) throw ConfigError("give --cube and --out, or --manifest and --out-dir");
  const auto map = compute(data::read_cube(a.cube), a.cube);
  write_saliency(map, a.out, a.raw.empty() ? std::nullopt : std::optional<fs::path>(a.raw));
  ctx.out << "wrote " << a.out << "\n";
  return kExitOk;
}

int run_baseline(const MapArgs& a, Context& ctx) {
  const auto method = metrics::parse_baseline(a.method);
  return run_maps(a, ctx, [&](const data::HsiCube& cube, const std::string&) { return metrics::baseline_map(cube, method); });
}

int run_infer(const MapArgs& a, Context& ctx) {
  const auto model = train::load_checkpoint(a.checkpoint);
  return run_maps(a, ctx, [&](const data::HsiCube& cube, const std::string& src) { return model_saliency(model, cube, src); });
}

struct TrainArgs {
  std::string manifest, config, checkpoint, log, split = "train";
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double lr = 0.0;
  std::size_t grid = 0;
};

int run_train(const TrainArgs& a, bool has_steps, bool has_lr, bool has_grid, Context& ctx) {
  RunConfig rc = load_run_config(a.config);
  train::ModelConfig mc = rc.model.value_or(train::ModelConfig{});
  if (has_grid) mc.decoder.grid = a.grid;
  train::TrainConfig tc = rc.train;
  tc.seed = a.seed;
  if (has_steps) tc.steps = a.steps;
  if (has_lr) tc.adam.lr = a.lr;
  tc.validate();
  mc.backbone.in_channels = mc.har.reduced_bands();
  mc.validate();

  const auto man = data::read_manifest(a.manifest);
  std::vector<train::Sample> samples;
  for (const auto* e : entries_of(man, a.split)) {
    const auto cube_path = man.resolve(e->cube), mask_path = man.resolve(e->mask);
    const auto cube = data::read_cube(cube_path);
    if (cube.bands != mc.har.bands || cube.height != mc.input_size || cube.width != mc.input_size) {
      throw DataError(cube_path.string() + ": cube is " + std::to_string(cube.height) + "x" + std::to_string(cube.width) +
                      "x" + std::to_string(cube.bands) + ", model expects " + std::to_string(mc.input_size) + "x" +
                      std::to_string(mc.input_size) + "x" + std::to_string(mc.har.bands));
    }
    samples.push_back(train::make_sample(cube, data::read_mask(mask_path), mc.decoder.grid));
  }

  train::Model model(mc, a.seed);
  std::string log;
  const auto reports = train::run_training(model, samples, tc, [&](std::size_t step, const train::LossReport& r) {
    log += train::log_line(step, r) + "\n";
  });
  io::write_file_atomic(a.checkpoint, train::encode_checkpoint(model));
  if (!a.log.empty()) io::write_text_atomic(a.log, log);
  ctx.out << "trained " << reports.size() << " steps on " << samples.size() << " samples: L_m " << fmt(reports.front().l_m, "%.6f")
          << " -> " << fmt(reports.back().l_m, "%.6f") << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string manifest, pred_dir, out, csv, split = "test";
  bool per_attribute = false;
};

int run_eval(const EvalArgs& a, Context& ctx) {
  const auto man = data::read_manifest(a.manifest);
  std::map<std::string, metrics::ImageMetrics> per_image;
  const fs::path dir(a.pred_dir);
  for (const auto* e : entries_of(man, a.split)) {
    const auto raw = dir / (e->id + ".sal"), pgm = dir / (e->id + ".pgm");
    data::SaliencyMap pred;
    if (fs::exists(raw)) pred = data::read_saliency_raw(raw);
    else if (fs::exists(pgm)) pred = data::read_saliency_pgm(pgm);
    else throw DataError("no prediction for '" + e->id + "': neither " + raw.string() + " nor " + pgm.string() + " exists");
    const auto mask_path = man.resolve(e->mask);
    const auto gt = data::read_mask(mask_path);
    try {
      per_image[e->id] = metrics::evaluate_image(pred, gt);
    } catch (const DimensionError& ex) {
      throw DimensionError(mask_path.string() + ": " + ex.what());
    } catch (const DataError& ex) {
      throw DataError(e->id + ": " + ex.what());
    }
  }
  auto report = metrics::attribute_eval(man, per_image, a.split);
  if (!a.per_attribute) report.attributes.clear();
  const auto text = metrics::report_json(report);
  if (a.out.empty()) ctx.out << text;
  else io::write_text_atomic(a.out, text);
  if (!a.csv.empty()) io::write_text_atomic(a.csv, metrics::report_csv(report));
  for (const auto& e : report.overall.errors) ctx.err << "warning: " << e << "\n";
  return kExitOk;
}

struct StatsArgs {
  std::string manifest, out_dir;
  std::size_t grid = 10, cell = 8;
};

int run_stats(const StatsArgs& a, Context& ctx) {
  if (a.grid == 0 || a.cell == 0) throw ConfigError("stats: --grid and --cell must be positive");
  const auto man = data::read_manifest(a.manifest);
  std::vector<data::GroundTruthMask> masks;
  for (const auto& e : man.entries) masks.push_back(data::read_mask(man.resolve(e.mask)));
  const auto s = data::dataset_statistics(man, masks, a.grid);

  std::string attributes = "attribute,count\n";
  for (const char* tag : data::kAttributeTags) attributes += std::string(tag) + "," + std::to_string(s.attributes.at(tag)) + "\n";
  std::string scale = "lower,upper,count\n";
  Json bins = Json::array();
  for (std::size_t b = 0; b < s.scale_bins.size(); ++b) {
    scale += fmt(data::kScaleBinEdges[b], "%g") + "," + fmt(data::kScaleBinEdges[b + 1], "%g") + "," +
             std::to_string(s.scale_bins[b]) + "\n";
    bins.push_back({{"lower", data::kScaleBinEdges[b]}, {"upper", data::kScaleBinEdges[b + 1]}, {"count", s.scale_bins[b]}});
  }
  std::string centroids = "row,col,count\n";
  Json heat = Json::array();
  std::size_t peak = 0;
  for (std::size_t r = 0; r < a.grid; ++r) {
    Json row = Json::array();
    for (std::size_t c = 0; c < a.grid; ++c) {
      const auto n = s.heatmap[r * a.grid + c];
      centroids += std::to_string(r) + "," + std::to_string(c) + "," + std::to_string(n) + "\n";
      row.push_back(n);
      peak = std::max(peak, n);
    }
    heat.push_back(row);
  }
  // Heatmap image: one cell x cell block per bin, grey level proportional to the count.
  const std::size_t side = a.grid * a.cell;
  std::vector<std::uint8_t> pixels(side * side, 0);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const auto n = s.heatmap[(y / a.cell) * a.grid + x / a.cell];
      pixels[y * side + x] = peak ? static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(n) / static_cast<double>(peak))) : 0;
    }
  Json summary = {{"entries", s.entries},
                  {"empty_masks", s.empty_masks},
                  {"small_objects", s.small_objects},
                  {"small_object_threshold", data::kSmallObjectFraction},
                  {"attributes", s.attributes},
                  {"scale_bins", bins},
                  {"grid", s.grid},
                  {"heatmap", heat}};

  const fs::path dir(a.out_dir);
  io::write_text_atomic(dir / "attributes.csv", attributes);
  io::write_text_atomic(dir / "scale.csv", scale);
  io::write_text_atomic(dir / "centroid.csv", centroids);
  io::write_file_atomic(dir / "centroid.pgm", data::encode_pgm(side, side, pixels));
  io::write_text_atomic(dir / "stats.json", summary.dump(2) + "\n");
  ctx.out << "wrote statistics for " << s.entries << " entries to " << a.out_dir << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string config, out;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  std::size_t per_group = 20;
};

int run_gradcheck(const GradcheckArgs& a, bool has_seed, Context& ctx) {
  const RunConfig rc = load_run_config(a.config);
  const auto mc = rc.model.value_or(train::ModelConfig::tiny());
  const std::uint64_t seed = has_seed ? a.seed : rc.seed.value_or(0);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train::grad_check_suite(mc, seed, a.tolerance, a.per_group);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Json groups = Json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"group", g.group},
                      {"checked", g.checked},
                      {"available", g.available},
                      {"max_rel_error", g.max_rel_error},
                      {"worst", g.worst},
                      {"passed", g.max_rel_error < a.tolerance}});
  const Json report = {{"passed", r.passed},
                       {"tolerance", a.tolerance},
                       {"max_rel_error", r.max_rel_error},
                       {"seed", seed},
                       {"groups", groups}};
  const auto text = report.dump(2) + "\n";
  if (a.out.empty()) ctx.out << text;
  else io::write_text_atomic(a.out, text);
  ctx.err << "gradcheck: max relative error " << fmt(r.max_rel_error, "%.3e") << " in " << fmt(secs, "%.2f") << " s\n";
  if (!r.passed) {
    for (const auto& g : r.groups)
      if (g.max_rel_error >= a.tolerance)
        ctx.err << "gradcheck: group " << g.group << " fails, worst " << g.worst << " at " << fmt(g.max_rel_error, "%.3e") << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitUsage;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitData;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hyperspectral salient object detection toolkit", "hsod"};
  app.require_subcommand(1);
  Context ctx{out, err};

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic scene (cube + mask) or a whole dataset");
  synth_cmd->add_option("--seed", synth.seed, "Random seed")->required();
  synth_cmd->add_option("--spec", synth.spec, "SceneSpec JSON file");
  synth_cmd->add_option("--preset", synth.preset, "Built-in scene: cs (color similarity)");
  synth_cmd->add_option("--cube", synth.cube, "Output cube path");
  synth_cmd->add_option("--mask", synth.mask, "Output mask path (PGM)");
  synth_cmd->add_option("--count", synth.count, "Generate this many random scenes plus a manifest");
  synth_cmd->add_option("--out-dir", synth.out_dir, "Dataset output directory");
  synth_cmd->add_option("--size", synth.size, "Side length for --preset / --count")->capture_default_str();
  synth_cmd->add_option("--bands", synth.bands, "Band count for --preset / --count")->capture_default_str();
  synth_cmd->add_option("--train-fraction", synth.train_fraction, "Train share for --count")->capture_default_str();

  PseudoArgs pseudo;
  auto* pseudo_cmd = app.add_subcommand("pseudocolor", "Render a cube as a pseudo-color PPM");
  pseudo_cmd->add_option("--cube", pseudo.cube, "Input cube")->required();
  pseudo_cmd->add_option("--out", pseudo.out, "Output PPM")->required();

  CalibrateArgs cal;
  auto* cal_cmd = app.add_subcommand("calibrate", "Convert a raw cube to reflectance with dark/white frames");
  cal_cmd->add_option("--raw", cal.raw, "Raw cube")->required();
  cal_cmd->add_option("--dark", cal.dark, "Dark frame cube")->required();
  cal_cmd->add_option("--white", cal.white, "White reference cube")->required();
  cal_cmd->add_option("--out", cal.out, "Output reflectance cube")->required();

  auto add_map_options = [](CLI::App* cmd, MapArgs& m) {
    cmd->add_option("--cube", m.cube, "Input cube");
    cmd->add_option("--out", m.out, "Output saliency PGM");
    cmd->add_option("--raw", m.raw, "Also write the exact float sidecar here");
    cmd->add_option("--manifest", m.manifest, "Process every entry of a manifest split");
    cmd->add_option("--out-dir", m.out_dir, "Output directory for --manifest (<id>.pgm and <id>.sal)");
    cmd->add_option("--split", m.split, "train, test or all")->capture_default_str();
  };
  MapArgs base;
  auto* base_cmd = app.add_subcommand("baseline", "Classical spectral saliency map");
  base_cmd->add_option("--method", base.method, "sad, sed or sg")->capture_default_str();
  add_map_options(base_cmd, base);

  MapArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Saliency maps from a trained checkpoint");
  infer_cmd->add_option("--checkpoint", infer.checkpoint, "Checkpoint file")->required();
  add_map_options(infer_cmd, infer);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest split");
  train_cmd->add_option("--manifest", tr.manifest, "Dataset manifest")->required();
  train_cmd->add_option("--seed", tr.seed, "Random seed")->required();
  train_cmd->add_option("--checkpoint", tr.checkpoint, "Output checkpoint")->required();
  train_cmd->add_option("--log", tr.log, "Output JSONL training log");
  train_cmd->add_option("--config", tr.config, "Run configuration JSON");
  train_cmd->add_option("--split", tr.split, "train, test or all")->capture_default_str();
  auto* steps_opt = train_cmd->add_option("--steps", tr.steps, "Override the step count");
  auto* lr_opt = train_cmd->add_option("--lr", tr.lr, "Override the learning rate");
  auto* grid_opt = train_cmd->add_option("--grid", tr.grid, "Override the global grid g");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score saliency maps against the manifest ground truth");
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--pred-dir", ev.pred_dir, "Directory holding <id>.sal or <id>.pgm")->required();
  eval_cmd->add_option("--out", ev.out, "Report JSON (default: stdout)");
  eval_cmd->add_option("--csv", ev.csv, "Also write a CSV table");
  eval_cmd->add_option("--split", ev.split, "train, test or all")->capture_default_str();
  eval_cmd->add_flag("--per-attribute", ev.per_attribute, "Add one slice per attribute tag");

  StatsArgs st;
  auto* stats_cmd = app.add_subcommand("stats", "Attribute, scale and centroid statistics of a manifest");
  stats_cmd->add_option("--manifest", st.manifest, "Dataset manifest")->required();
  stats_cmd->add_option("--out-dir", st.out_dir, "Output directory")->required();
  stats_cmd->add_option("--grid", st.grid, "Centroid heatmap grid")->capture_default_str();
  stats_cmd->add_option("--cell", st.cell, "Heatmap image pixels per bin")->capture_default_str();

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
  gc_cmd->add_option("--config", gc.config, "Run configuration JSON (default model: tiny)");
  auto* gc_seed = gc_cmd->add_option("--seed", gc.seed, "Random seed");
  gc_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
  gc_cmd->add_option("--per-group", gc.per_group, "Scalars sampled per group")->capture_default_str();
  gc_cmd->add_option("--out", gc.out, "Report JSON (default: stdout)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) return run_synth(synth, ctx);
    if (pseudo_cmd->parsed()) return run_pseudocolor(pseudo, ctx);
    if (cal_cmd->parsed()) return run_calibrate(cal, ctx);
    if (base_cmd->parsed()) return run_baseline(base, ctx);
    if (infer_cmd->parsed()) return run_infer(infer, ctx);
    if (train_cmd->parsed()) return run_train(tr, steps_opt->count() > 0, lr_opt->count() > 0, grid_opt->count() > 0, ctx);
    if (eval_cmd->parsed()) return run_eval(ev, ctx);
    if (stats_cmd->parsed()) return run_stats(st, ctx);
    if (gc_cmd->parsed()) return run_gradcheck(gc, gc_seed->count() > 0, ctx);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace hsod::cli
