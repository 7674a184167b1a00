#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "hsod/cli.hpp"
#include "hsod/errors.hpp"
#include "hsod/hsidata.hpp"
#include "hsod/io.hpp"
#include "json.hpp"

using namespace hsod;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("hsod_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int n = 0;
    return n;
  }
};

std::string slurp(const std::string& p) { return io::read_text(p); }

}  // namespace

TEST_CASE("usage errors") {
  auto r = run({});
  CHECK(r.code == cli::kExitUsage);
  r = run({"frobnicate"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("Subcommands:") != std::string::npos);
  CHECK(run({"synth", "--preset", "cs", "--cube", "a", "--mask", "b"}).code == cli::kExitUsage);  // no seed
  CHECK(run({"--help"}).code == cli::kExitOk);

  CHECK(cli::exit_code_for(ConfigError("x")) == 1);
  CHECK(cli::exit_code_for(FormatError("x")) == 2);
  CHECK(cli::exit_code_for(DataError("x")) == 2);
  CHECK(cli::exit_code_for(DimensionError("x")) == 2);
  CHECK(cli::exit_code_for(NumericError("x")) == 3);
}

TEST_CASE("synth is reproducible and validates specs") {
  TempDir d;
  for (const char* tag : {"a", "b"}) {
    auto r = run({"synth", "--seed", "4", "--preset", "cs", "--size", "16", "--cube", d / (std::string(tag) + ".hsi"),
                  "--mask", d / (std::string(tag) + ".pgm")});
    REQUIRE(r.code == 0);
  }
  CHECK(slurp(d / "a.hsi") == slurp(d / "b.hsi"));
  CHECK(slurp(d / "a.pgm") == slurp(d / "b.pgm"));
  REQUIRE(run({"synth", "--seed", "5", "--preset", "cs", "--size", "16", "--cube", d / "c.hsi", "--mask", d / "c.pgm"}).code == 0);
  CHECK(slurp(d / "a.hsi") != slurp(d / "c.hsi"));

  io::write_text_atomic(d / "spec.json", R"({"height": 8, "width": 8, "bands": 4, "colour": 1})");
  auto r = run({"synth", "--seed", "1", "--spec", d / "spec.json", "--cube", d / "x.hsi", "--mask", d / "x.pgm"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("spec.json") != std::string::npos);
  CHECK(r.err.find("colour") != std::string::npos);
  CHECK_FALSE(fs::exists(d / "x.hsi"));

  io::write_text_atomic(d / "spec.json", R"({"height": 8, "width": 8, "bands": 4,
    "objects": [{"shape": "rect", "center": [0.5, 0.5], "scale": 0.25}]})");
  REQUIRE(run({"synth", "--seed", "1", "--spec", d / "spec.json", "--cube", d / "x.hsi", "--mask", d / "x.pgm"}).code == 0);
  CHECK(data::read_mask(d / "x.pgm").foreground() == 16);
}

TEST_CASE("eval on predictions equal to the ground truth") {
  TempDir d;
  data::GroundTruthMask blob(4, 4), empty(4, 4);
  blob.at(1, 1) = blob.at(1, 2) = blob.at(2, 1) = 1;
  data::write_mask(blob, d / "blob.pgm");
  data::write_mask(empty, d / "empty.pgm");
  io::write_text_atomic(d / "manifest.json", R"({"entries": [
    {"id": "blob", "cube": "blob.hsi", "mask": "blob.pgm", "split": "test", "attributes": ["SO"]},
    {"id": "empty", "cube": "empty.hsi", "mask": "empty.pgm", "split": "test"}]})");
  fs::create_directories(d / "pred");
  for (const auto& [id, m] : {std::pair{"blob", blob}, std::pair{"empty", empty}}) {
    data::SaliencyMap s(4, 4);
    for (std::size_t i = 0; i < 16; ++i) s.values[i] = m.values[i];
    io::write_file_atomic(d / ("pred/" + std::string(id) + ".sal"), data::encode_saliency_raw(s));
  }
  auto r = run({"eval", "--manifest", d / "manifest.json", "--pred-dir", d / "pred", "--per-attribute", "--out",
                d / "report.json", "--csv", d / "report.csv"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(d / "report.json"));
  CHECK(j["overall"]["images"] == 2);
  CHECK(j["overall"]["metrics"]["MAE"] == 0.0);
  CHECK(j["overall"]["metrics"]["AUC"] == 1.0);
  CHECK(j["overall"]["counts"]["AUC"] == 1);
  CHECK(j["overall"]["counts"]["CC"] == 1);
  bool cc_flagged = false;
  for (const auto& e : j["overall"]["errors"]) cc_flagged = cc_flagged || e.get<std::string>().rfind("empty: CC:", 0) == 0;
  CHECK(cc_flagged);
  CHECK(j["attributes"]["SO"]["images"] == 1);
  CHECK(j["attributes"]["CB"]["absent"] == true);
  CHECK(slurp(d / "report.csv").rfind("slice,images,MAE,PRE,REC,avgF1,AUC,CC\n", 0) == 0);

  // A missing prediction is a data error naming the entry.
  fs::remove(d / "pred/blob.sal");
  r = run({"eval", "--manifest", d / "manifest.json", "--pred-dir", d / "pred"});
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("blob") != std::string::npos);
}

TEST_CASE("baseline, train, infer and stats pipeline") {
  TempDir d;
  REQUIRE(run({"synth", "--seed", "9", "--count", "4", "--size", "32", "--bands", "32", "--out-dir", d / "ds"}).code == 0);
  const auto man = d / "ds/manifest.json";

  REQUIRE(run({"baseline", "--method", "sg", "--cube", d / "ds/scene_000.hsi", "--out", d / "sg.pgm", "--raw", d / "sg.sal"}).code == 0);
  const auto sg = data::read_saliency_raw(d / "sg.sal");
  CHECK(sg.height == 32);
  CHECK(run({"baseline", "--method", "pca", "--cube", d / "ds/scene_000.hsi", "--out", d / "x.pgm"}).code == cli::kExitUsage);

  auto train_args = [&](const std::string& ck, const std::string& log) {
    return std::vector<std::string>{"train", "--manifest", man, "--seed", "2", "--steps", "3", "--split", "all",
                                    "--checkpoint", ck, "--log", log};
  };
  REQUIRE(run(train_args(d / "a.hhck", d / "a.jsonl")).code == 0);
  REQUIRE(run(train_args(d / "b.hhck", d / "b.jsonl")).code == 0);
  CHECK(slurp(d / "a.hhck") == slurp(d / "b.hhck"));
  CHECK(slurp(d / "a.jsonl") == slurp(d / "b.jsonl"));
  std::istringstream lines(slurp(d / "a.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == n++);
    CHECK(j["L_m"].get<double>() == doctest::Approx(j["L_s"].get<double>() + j["L_sod"].get<double>() + j["L_g"].get<double>()).epsilon(1e-12));
  }
  CHECK(n == 3);

  REQUIRE(run({"infer", "--checkpoint", d / "a.hhck", "--manifest", man, "--split", "all", "--out-dir", d / "inf"}).code == 0);
  const auto pred = data::read_saliency_raw(d / "inf/scene_001.sal");
  CHECK(pred.width == 32);
  for (double v : pred.values) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  REQUIRE(run({"eval", "--manifest", man, "--pred-dir", d / "inf", "--split", "all"}).code == 0);

  // Wrong-sized cube: data error, nothing written.
  REQUIRE(run({"synth", "--seed", "1", "--preset", "cs", "--size", "16", "--cube", d / "ds/scene_000.hsi", "--mask",
               d / "ds/scene_000.pgm"}).code == 0);
  auto r = run(train_args(d / "c.hhck", d / "c.jsonl"));
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("scene_000.hsi") != std::string::npos);
  CHECK_FALSE(fs::exists(d / "c.hhck"));
  CHECK_FALSE(fs::exists(d / "c.jsonl"));

  io::write_text_atomic(d / "cfg.json", R"({"train": {"steps": 2, "momentum": 0.9}})");
  r = run({"train", "--manifest", man, "--seed", "1", "--checkpoint", d / "d.hhck", "--config", d / "cfg.json"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("momentum") != std::string::npos);
  CHECK(run({"train", "--manifest", man, "--checkpoint", d / "d.hhck"}).code == cli::kExitUsage);  // no seed

  REQUIRE(run({"stats", "--manifest", man, "--out-dir", d / "st", "--grid", "4"}).code == 0);
  for (const char* f : {"attributes.csv", "scale.csv", "centroid.csv", "centroid.pgm", "stats.json"})
    CHECK(fs::exists(d / ("st/" + std::string(f))));
  const auto stats = nlohmann::json::parse(slurp(d / "st/stats.json"));
  CHECK(stats["entries"] == 4);
  std::size_t heat = 0;
  for (const auto& row : stats["heatmap"])
    for (const auto& v : row) heat += v.get<std::size_t>();
  CHECK(heat == 4 - stats["empty_masks"].get<std::size_t>());

  io::write_text_atomic(d / "bad.json", "{\"entries\": 3}");
  CHECK(run({"stats", "--manifest", d / "bad.json", "--out-dir", d / "st2"}).code == cli::kExitData);
  CHECK(run({"pseudocolor", "--cube", d / "missing.hsi", "--out", d / "x.ppm"}).code == cli::kExitData);
}

TEST_CASE("gradcheck on the default tiny model") {
  TempDir d;
  auto r = run({"gradcheck", "--out", d / "gc.json"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(d / "gc.json"));
  CHECK(j["passed"] == true);
  CHECK(j["max_rel_error"].get<double>() < 1e-4);
  bool saw_sigma = false;
  for (const auto& g : j["groups"]) saw_sigma = saw_sigma || g["group"] == "sigma";
  CHECK(saw_sigma);
  // An impossible tolerance turns into a numeric failure.
  CHECK(run({"gradcheck", "--tolerance", "1e-30", "--per-group", "2"}).code == cli::kExitNumeric);
}
