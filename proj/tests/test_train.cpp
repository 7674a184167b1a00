#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "hsod/errors.hpp"
#include "hsod/io.hpp"
#include "hsod/train.hpp"
#include "json.hpp"

using namespace hsod;
using namespace hsod::train;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor random_mask(Shape shape, Rng& rng, double density = 0.3) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform() < density ? 1.0 : 0.0;
  return t;
}

Sample tiny_sample(std::uint64_t seed) {
  data::SceneSpec spec;
  spec.height = spec.width = 8;
  spec.bands = 32;
  data::ObjectSpec o;
  o.center = std::array<double, 2>{0.5, 0.5};
  o.scale = 0.25;
  o.spectrum = data::SpectrumSpec{0.7, 0.1, {}};
  spec.objects = {o};
  const auto scene = data::synth_scene(spec, seed);
  return make_sample(scene.cube, scene.mask, 2);
}

const double kLn2 = std::log(2.0);

}  // namespace

TEST_CASE("reconstruction loss") {
  Tape t;
  Rng rng(1);
  const auto x = random_tensor({4, 3, 3}, rng, 0, 1);
  CHECK(loss_s(t.constant(x), t.constant(x)).value().item() == 0.0);
  Tensor shifted = x;
  for (auto& v : shifted.data()) v += 0.5;
  CHECK(loss_s(t.constant(shifted), t.constant(x)).value().item() == doctest::Approx(0.5).epsilon(1e-14));
  Tensor base({2, 2, 2}, 0.3), twice({2, 2, 2}, 0.6);
  CHECK(loss_s(t.constant(twice), t.constant(base)).value().item() == doctest::Approx(0.3).epsilon(1e-14));
  CHECK_THROWS_AS(loss_s(t.constant(Tensor({1, 2, 2})), t.constant(Tensor({1, 2, 3}))), DimensionError);
}

TEST_CASE("saliency and global losses") {
  Tape t;
  Rng rng(2);
  const auto gt = random_mask({1, 8, 8}, rng);
  // Exact prediction: clamping leaves -log(1 - 1e-7) per pixel.
  CHECK(loss_level(t.constant(gt), gt).value().item() <= 1e-6);
  CHECK(iou_loss(t.constant(gt), gt).value().item() == 0.0);

  Tensor half({1, 8, 8}, 0.5);
  CHECK(binary_cross_entropy(t.constant(half), gt).value().item() == doctest::Approx(kLn2).epsilon(1e-14));
  CHECK(loss_g(t.constant(Tensor({1, 2, 2}, 0.5)), random_mask({1, 2, 2}, rng)).value().item() ==
        doctest::Approx(kLn2).epsilon(1e-14));

  // IoU by hand: p = [0.5, 1, 0, 0], gt = [1, 1, 0, 1] -> I = 1.5, U = 1.5 + 3 - 1.5 = 3.
  Tensor p4({1, 2, 2}, std::vector<double>{0.5, 1.0, 0.0, 0.0});
  Tensor g4({1, 2, 2}, std::vector<double>{1.0, 1.0, 0.0, 1.0});
  CHECK(iou_loss(t.constant(p4), g4).value().item() == doctest::Approx(1.0 - 2.5 / 4.0).epsilon(1e-14));

  // Nearest upsampling to the mask resolution.
  Tensor coarse({1, 2, 2}, std::vector<double>{0.9, 0.1, 0.1, 0.1});
  Tensor fine({1, 4, 4});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) fine[y * 4 + x] = 1.0;
  Tensor fine_pred({1, 4, 4}, 0.1);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) fine_pred[y * 4 + x] = 0.9;
  CHECK(loss_level(t.constant(coarse), fine).value().item() ==
        doctest::Approx(loss_level(t.constant(fine_pred), fine).value().item()).epsilon(1e-14));

  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_tensor({1, 4, 4}, rng, 0, 1);
    const auto g = random_mask({1, 4, 4}, rng);
    CHECK(loss_level(t.constant(p), g).value().item() >= 0.0);
    const double a = loss_g(t.constant(p), g).value().item();
    Tensor pc = p, gc = g;
    for (auto& v : pc.data()) v = 1.0 - v;
    for (auto& v : gc.data()) v = 1.0 - v;
    CHECK(loss_g(t.constant(pc), gc).value().item() == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("cross-entropy gradient") {
  Rng rng(3);
  ParameterSet ps;
  auto& p = ps.add("p", random_tensor({1, 3, 3}, rng, 0.05, 0.95));
  const auto gt = random_mask({1, 3, 3}, rng, 0.5);
  auto build = [&](Tape& t) { return add(binary_cross_entropy(t.param(p), gt), iou_loss(t.param(p), gt)); };
  CHECK(testing::max_param_grad_error({&p}, build) < 1e-7);
}

TEST_CASE("loss decomposition identity") {
  Model m(ModelConfig::tiny(), 4);
  const auto s = tiny_sample(4);
  Tape t;
  auto out = m.forward(t, t.constant(s.reduced));
  auto terms = compute_losses(t, out, s, {1.0, 1.0, 1.0, 1.0});
  const auto& r = terms.report;
  CHECK(std::fabs(r.l_m - (r.l_s + r.l_sod + r.l_g)) <= 1e-12);
  double levels = 0;
  for (double v : r.l_sod_levels) levels += v;
  CHECK(r.l_sod == doctest::Approx(levels).epsilon(1e-14));
  CHECK(r.l_s >= 0.0);
  CHECK(r.l_sod >= 0.0);
  CHECK(r.l_g >= 0.0);
}

TEST_CASE("adam update") {
  ParameterSet ps;
  auto& a = ps.add("a", Tensor({2}, std::vector<double>{1.0, -2.0}));
  auto& f = ps.add("f", Tensor({1}, 5.0));
  f.frozen = true;
  Adam opt(ps, {0.1});
  a.grad = Tensor({2}, std::vector<double>{0.5, -3.0});
  f.grad = Tensor({1}, 1.0);
  opt.step();
  // First step: bias-corrected m / sqrt(v) is g / |g|.
  CHECK(a.value[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(a.value[1] == doctest::Approx(-2.0 + 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
  CHECK(f.value[0] == 5.0);
  CHECK_THROWS_AS(Adam(ps, {0.0}), ConfigError);
}

TEST_CASE("training is deterministic per seed") {
  const auto s = tiny_sample(5);
  TrainConfig cfg;
  cfg.steps = 5;
  std::vector<double> a, b;
  for (auto* out : {&a, &b}) {
    Model m(ModelConfig::tiny(), 9);
    for (const auto& r : run_training(m, {s}, cfg)) {
      out->push_back(r.l_m);
      CHECK(std::isfinite(r.l_m));
    }
  }
  CHECK(a == b);
  CHECK(a.back() < a.front());
}

TEST_CASE("non-finite values abort with a diagnostic") {
  Model m(ModelConfig::tiny(), 6);
  const auto s = tiny_sample(6);
  m.params().get("har.embed.w").value[0] = std::nan("");
  Adam opt(m.params(), {});
  TrainConfig cfg;
  try {
    train_step(m, s, cfg, opt);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("first non-finite tensor") != std::string::npos);
    CHECK(std::string(e.what()).find("har.embed.w") != std::string::npos);
  }
}

TEST_CASE("frozen attention scalars are excluded and matter") {
  const auto s = tiny_sample(7);
  TrainConfig cfg;
  cfg.steps = 30;
  Model free_model(ModelConfig::tiny(), 3), frozen_model(ModelConfig::tiny(), 3);
  auto scalars = attention_scalars(frozen_model.params());
  CHECK(scalars.size() == 8);
  for (auto* p : scalars) p->frozen = true;
  const double free_final = run_training(free_model, {s}, cfg).back().l_m;
  const double frozen_final = run_training(frozen_model, {s}, cfg).back().l_m;
  for (auto* p : scalars) {
    CHECK(p->value[0] == 1.0);
    CHECK(p->grad[0] == 0.0);
  }
  bool moved = false;
  for (auto* p : attention_scalars(free_model.params())) moved = moved || p->value[0] != 1.0;
  CHECK(moved);
  CHECK(free_final != frozen_final);
}

TEST_CASE("every level weight reaches the parameters") {
  const auto s = tiny_sample(8);
  TrainConfig ref;
  ref.steps = 3;
  Model base(ModelConfig::tiny(), 2);
  run_training(base, {s}, ref);
  for (std::size_t level = 0; level < netdec::kLevels; ++level) {
    TrainConfig cfg = ref;
    cfg.level_weights[level] = 0.0;
    Model m(ModelConfig::tiny(), 2);
    run_training(m, {s}, cfg);
    double diff = 0;
    auto it = base.params().begin();
    for (const auto& p : m.params()) {
      for (std::size_t i = 0; i < p.value.size(); ++i) diff = std::max(diff, std::fabs(p.value[i] - it->value[i]));
      ++it;
    }
    CAPTURE(level);
    CHECK(diff > 0.0);
  }
}

TEST_CASE("reconstruction step lowers the reconstruction loss") {
  ModelConfig cfg;
  cfg.input_size = 16;
  data::SceneSpec spec = data::color_similarity_scene(16, 16, 32);
  const auto scene = data::synth_scene(spec, 1);
  const auto s = make_sample(scene.cube, scene.mask, cfg.decoder.grid);
  Model m(cfg, 1);
  Adam opt(m.params(), {});
  const double first = reconstruction_step(m, s, opt);
  double last = first;
  for (int i = 0; i < 30; ++i) last = reconstruction_step(m, s, opt);
  CHECK(last < first);
}

TEST_CASE("gradient checks") {
  auto report = grad_check_suite(ModelConfig::tiny(), 1);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-4);
  std::set<std::string> names;
  for (const auto& g : report.groups) {
    names.insert(g.group);
    CHECK(g.checked == std::min<std::size_t>(20, g.available));
  }
  for (const char* n : {"sigma", "alpha", "beta", "output_projection", "attention_projections", "conv_kernels"})
    CHECK(names.count(n) == 1);

  // Linear submodel: central differences carry no truncation error, so a wider step only
  // shrinks the rounding term.
  Rng rng(2);
  ParameterSet ps;
  auto& w = ps.add("w", random_tensor({3, 4}, rng));
  auto& k = ps.add("k", random_tensor({2, 3, 3, 3}, rng));
  const auto x = random_tensor({4, 5}, rng);
  const auto img = random_tensor({3, 4, 4}, rng);
  auto linear = [&](Tape& t) {
    return add(sum(matmul(t.param(w), t.constant(x))), sum(conv2d(t.constant(img), t.param(k))));
  };
  auto lin = check_gradients({{"linear", {&w, &k}}}, linear, 100, 1e-9, 3, 1e-3);
  CHECK(lin.max_rel_error < 1e-9);
  CHECK(lin.groups[0].checked == 66);

  // Frozen parameters never receive gradient.
  k.frozen = true;
  k.grad.fill(0.0);
  Tape t;
  t.backward(linear(t));
  for (double g : k.grad.data()) CHECK(g == 0.0);
  CHECK(parameter_groups(ps).size() == 1);
}

TEST_CASE("checkpoint round trip") {
  Model m(ModelConfig::tiny(), 5);
  const auto bytes = encode_checkpoint(m);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "HHCK");
  Model back = decode_checkpoint(bytes);
  CHECK(model_config_to_json(back.config()) == model_config_to_json(m.config()));
  auto it = m.params().begin();
  for (const auto& p : back.params()) {
    REQUIRE(p.name == it->name);
    for (std::size_t i = 0; i < p.value.size(); ++i) CHECK(p.value[i] == static_cast<double>(static_cast<float>(it->value[i])));
    ++it;
  }
  CHECK(encode_checkpoint(back) == bytes);

  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), BadMagicError);
  auto cut = bytes;
  cut.resize(cut.size() - 2);
  CHECK_THROWS_AS(decode_checkpoint(cut), TruncatedError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(extra), PayloadMismatchError);

  const auto dir = std::filesystem::temp_directory_path() / "hsod_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(m, dir / "m.hhck");
  CHECK(io::read_file(dir / "m.hhck") == bytes);
  CHECK(load_checkpoint(dir / "m.hhck").params().scalar_count() == m.params().scalar_count());
}

TEST_CASE("model config json") {
  ModelConfig c = ModelConfig::tiny();
  c.har.num_blocks = 1;
  c.backbone.widths = {8, 16, 24, 32};
  const auto back = model_config_from_json(model_config_to_json(c));
  CHECK(back.har.num_blocks == 1);
  CHECK(back.backbone.widths == c.backbone.widths);
  CHECK(back.input_size == 8);
  CHECK(model_config_from_json(R"({"decoder":{"grid":8}})").decoder.grid == 8);
  CHECK_THROWS_AS(model_config_from_json(R"({"har":{"bandz":32}})"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(R"({"input_size":-3})"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(R"({"input_size":20})"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json("{"), ConfigError);
}

TEST_CASE("training log lines round-trip") {
  LossReport r;
  r.l_s = 0.1;
  r.l_sod = 1.0 / 3.0;
  r.l_g = 2e-9;
  r.l_m = r.l_s + r.l_sod + r.l_g;
  const auto j = nlohmann::json::parse(log_line(7, r));
  CHECK(j["step"] == 7);
  CHECK(j["L_sod"].get<double>() == r.l_sod);
  CHECK(j["L_m"].get<double>() == r.l_m);
  CHECK(j.size() == 5);
}
