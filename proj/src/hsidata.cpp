#include "hsod/hsidata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "hsod/errors.hpp"
#include "hsod/io.hpp"
#include "hsod/jsonutil.hpp"
#include "json.hpp"

namespace hsod::data {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- cube ----------------------------------------------------------------------------------

HsiCube::HsiCube(std::size_t h, std::size_t w, std::size_t c, double start_nm, double step_nm, float fill)
    : height(h), width(w), bands(c), wavelength_start_nm(start_nm), wavelength_step_nm(step_nm), data(h * w * c, fill) {}

std::size_t HsiCube::nearest_band(double nm) const {
  const double pos = std::round((nm - wavelength_start_nm) / wavelength_step_nm);
  if (pos <= 0.0) return 0;
  return std::min(static_cast<std::size_t>(pos), bands - 1);
}

void HsiCube::validate() const {
  if (height == 0 || width == 0 || bands == 0) {
    throw DataError("cube has empty dimension " + std::to_string(height) + "x" + std::to_string(width) + "x" +
                    std::to_string(bands));
  }
  if (data.size() != height * width * bands) throw DimensionError("cube payload does not match its dimensions");
  if (!(wavelength_step_nm > 0.0) || !std::isfinite(wavelength_start_nm)) {
    throw DataError("cube wavelength_step_nm must be > 0, got " + std::to_string(wavelength_step_nm));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i]) || data[i] < 0.0f) {
      throw DataError("cube value #" + std::to_string(i) + " is negative or non-finite");
    }
  }
}

Tensor HsiCube::to_tensor() const {
  return Tensor({bands, height, width}, std::vector<double>(data.begin(), data.end()));
}

std::size_t GroundTruthMask::foreground() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

Tensor GroundTruthMask::to_tensor() const {
  return Tensor({1, height, width}, std::vector<double>(values.begin(), values.end()));
}

SaliencyMap SaliencyMap::from_tensor(const Tensor& t) {
  const auto& s = t.shape();
  if (!(s.size() == 3 && s[0] == 1) && s.size() != 2) {
    throw DimensionError("saliency map needs shape [1,H,W] or [H,W], got " + shape_str(s));
  }
  SaliencyMap m(s[s.size() - 2], s[s.size() - 1]);
  m.values.assign(t.data().begin(), t.data().end());
  return m;
}

// ---- file formats --------------------------------------------------------------------------

namespace {
constexpr char kCubeMagic[4] = {'H', 'S', 'V', '2'};
constexpr char kSaliencyMagic[4] = {'H', 'S', 'A', 'L'};

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

PgmImage decode_pgm(std::span<const std::uint8_t> bytes, const std::string& source) {
  std::size_t pos = 0;
  auto skip_space = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t += static_cast<char>(bytes[pos++]);
    if (t.empty()) throw TruncatedError(source + ": truncated PGM header");
    return t;
  };
  if (token() != "P5") throw BadMagicError(source + ": not a binary PGM (P5) file");
  auto number = [&](const char* field) {
    const auto t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError(source + ": bad PGM " + field + " '" + t + "'");
    }
    return static_cast<std::size_t>(std::stoull(t));
  };
  PgmImage img;
  img.width = number("width");
  img.height = number("height");
  if (number("maxval") != 255) throw FormatError(source + ": only 8-bit PGM (maxval 255) is supported");
  ++pos;  // single whitespace after maxval
  const std::size_t n = img.width * img.height;
  if (pos > bytes.size() || bytes.size() - pos < n) throw TruncatedError(source + ": truncated PGM payload");
  if (bytes.size() - pos > n) throw PayloadMismatchError(source + ": trailing bytes after PGM payload");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}
}  // namespace

std::vector<std::uint8_t> encode_cube(const HsiCube& cube) {
  if (cube.data.size() != cube.height * cube.width * cube.bands) {
    throw DimensionError("cube payload does not match its dimensions");
  }
  io::ByteWriter w;
  w.bytes(std::string_view(kCubeMagic, 4));
  w.u32(static_cast<std::uint32_t>(cube.height));
  w.u32(static_cast<std::uint32_t>(cube.width));
  w.u32(static_cast<std::uint32_t>(cube.bands));
  w.f64(cube.wavelength_start_nm);
  w.f64(cube.wavelength_step_nm);
  for (float v : cube.data) w.f32(v);
  return w.take();
}

HsiCube decode_cube(std::span<const std::uint8_t> bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  if (bytes.size() < 4) throw TruncatedError(source + ": file shorter than the 4-byte magic");
  if (r.bytes(4) != std::string_view(kCubeMagic, 4)) throw BadMagicError(source + ": bad magic, expected 'HSV2'");
  HsiCube cube;
  cube.height = r.u32();
  cube.width = r.u32();
  cube.bands = r.u32();
  cube.wavelength_start_nm = r.f64();
  cube.wavelength_step_nm = r.f64();
  const std::size_t n = cube.height * cube.width * cube.bands;
  if (r.remaining() < n * 4) {
    throw TruncatedError(source + ": header claims " + std::to_string(cube.height) + "x" + std::to_string(cube.width) +
                         "x" + std::to_string(cube.bands) + " (" + std::to_string(n) + " values) but payload holds " +
                         std::to_string(r.remaining() / 4));
  }
  if (r.remaining() != n * 4) {
    throw PayloadMismatchError(source + ": payload has " + std::to_string(r.remaining()) + " bytes, header implies " +
                               std::to_string(n * 4));
  }
  cube.data.resize(n);
  for (auto& v : cube.data) v = r.f32();
  cube.validate();
  return cube;
}

HsiCube read_cube(const fs::path& path) { return decode_cube(io::read_file(path), path.string()); }

void write_cube(const HsiCube& cube, const fs::path& path) { io::write_file_atomic(path, encode_cube(cube)); }

std::vector<std::uint8_t> encode_pgm(std::size_t height, std::size_t width, std::span<const std::uint8_t> pixels) {
  if (pixels.size() != height * width) throw DimensionError("PGM pixel count does not match dimensions");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

GroundTruthMask read_mask(const fs::path& path) {
  auto img = decode_pgm(io::read_file(path), path.string());
  GroundTruthMask m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto v = img.pixels[i];
    if (v != 0 && v != 255) {
      throw DataError(path.string() + ": mask pixel #" + std::to_string(i) + " has value " + std::to_string(v) +
                      ", expected 0 or 255");
    }
    m.values[i] = v == 255 ? 1 : 0;
  }
  return m;
}

void write_mask(const GroundTruthMask& mask, const fs::path& path) {
  std::vector<std::uint8_t> px(mask.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.values[i] ? 255 : 0;
  io::write_file_atomic(path, encode_pgm(mask.height, mask.width, px));
}

std::vector<std::uint8_t> encode_saliency_pgm(const SaliencyMap& map) {
  std::vector<std::uint8_t> px(map.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(map.values[i], 0.0, 1.0)));
  }
  return encode_pgm(map.height, map.width, px);
}

SaliencyMap read_saliency_pgm(const fs::path& path) {
  auto img = decode_pgm(io::read_file(path), path.string());
  SaliencyMap m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.values[i] = img.pixels[i] / 255.0;
  return m;
}

std::vector<std::uint8_t> encode_saliency_raw(const SaliencyMap& map) {
  io::ByteWriter w;
  w.bytes(std::string_view(kSaliencyMagic, 4));
  w.u32(static_cast<std::uint32_t>(map.height));
  w.u32(static_cast<std::uint32_t>(map.width));
  for (double v : map.values) w.f32(static_cast<float>(v));
  return w.take();
}

SaliencyMap read_saliency_raw(const fs::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  if (bytes.size() < 4) throw TruncatedError(path.string() + ": file shorter than the 4-byte magic");
  if (r.bytes(4) != std::string_view(kSaliencyMagic, 4)) throw BadMagicError(path.string() + ": bad magic, expected 'HSAL'");
  SaliencyMap m;
  m.height = r.u32();
  m.width = r.u32();
  const std::size_t n = m.height * m.width;
  if (r.remaining() < n * 4) throw TruncatedError(path.string() + ": truncated saliency payload");
  if (r.remaining() != n * 4) throw PayloadMismatchError(path.string() + ": trailing bytes after saliency payload");
  m.values.resize(n);
  for (auto& v : m.values) v = r.f32();
  return m;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

// ---- preprocessing -------------------------------------------------------------------------

HsiCube calibrate(const HsiCube& raw, const HsiCube& dark, const HsiCube& white) {
  auto same = [&](const HsiCube& c) { return c.height == raw.height && c.width == raw.width && c.bands == raw.bands; };
  if (!same(dark) || !same(white)) throw DimensionError("calibration frames must match the raw cube's shape");
  HsiCube out = raw;
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    const double span = static_cast<double>(white.data[i]) - static_cast<double>(dark.data[i]);
    if (!(span > 0.0)) {
      throw DataError("calibration frames invalid: white <= dark at element #" + std::to_string(i));
    }
    const double r = (static_cast<double>(raw.data[i]) - dark.data[i]) / span;
    out.data[i] = static_cast<float>(std::clamp(r, 0.0, kMaxReflectance));
  }
  return out;
}

HsiCube band_interpolate_4to1(const HsiCube& cube) {
  if (cube.bands % 4 != 0 || cube.bands == 0) {
    throw DimensionError("band interpolation needs a band count divisible by 4, got " + std::to_string(cube.bands));
  }
  HsiCube out(cube.height, cube.width, cube.bands / 4, cube.wavelength_start_nm + 1.5 * cube.wavelength_step_nm,
              4.0 * cube.wavelength_step_nm);
  const std::size_t n = cube.pixels();
  for (std::size_t b = 0; b < out.bands; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += cube.data[(4 * b + k) * n + i];
      out.data[b * n + i] = static_cast<float>(acc / 4.0);
    }
  return out;
}

namespace {
double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}
}  // namespace

RgbImage pseudo_color(const HsiCube& cube) {
  RgbImage img;
  img.height = cube.height;
  img.width = cube.width;
  img.rgb.resize(cube.pixels() * 3);
  const std::size_t n = cube.pixels();
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const std::size_t band = cube.nearest_band(kPseudoColorNm[ch]);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = cube.data[band * n + i];
    const double lo = percentile(values, 0.01), hi = percentile(values, 0.99);
    const bool degenerate = !(hi - lo > 1e-9);
    for (std::size_t i = 0; i < n; ++i) {
      // A flat band carries no contrast to stretch; show its absolute reflectance instead.
      const double t = degenerate ? values[i] : (values[i] - lo) / (hi - lo);
      img.rgb[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
    }
  }
  return img;
}

// ---- synthetic scenes ----------------------------------------------------------------------

double SpectrumSpec::evaluate(double nm) const {
  double v = base + slope * (nm - 400.0) / 600.0;
  for (const auto& b : bumps) v += b.amplitude * std::exp(-0.5 * std::pow((nm - b.center_nm) / b.width_nm, 2));
  return std::clamp(v, 0.01, kMaxReflectance);
}

bool is_attribute_tag(const std::string& tag) {
  return std::find_if(kAttributeTags.begin(), kAttributeTags.end(), [&](const char* t) { return tag == t; }) !=
         kAttributeTags.end();
}

void SceneSpec::validate() const {
  if (height == 0 || width == 0 || bands == 0) throw ConfigError("scene dimensions must be positive");
  if (!(wavelength_step_nm > 0.0)) throw ConfigError("scene wavelength_step_nm must be > 0");
  if (noise < 0.0) throw ConfigError("scene noise must be >= 0");
  if (clutter < 0.0 || clutter > 1.0) throw ConfigError("scene clutter must lie in [0, 1]");
  if (clutter > 0.0 && !background_alt) throw ConfigError("scene clutter needs background_alt");
  for (const auto& a : attributes) {
    if (!is_attribute_tag(a)) throw ConfigError("unknown attribute tag '" + a + "'");
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    const std::string where = "object " + std::to_string(i);
    if (!(o.scale > 0.0 && o.scale < 1.0)) throw ConfigError(where + ": scale must lie in (0, 1)");
    if (!(o.aspect > 0.0)) throw ConfigError(where + ": aspect must be > 0");
    if (!(o.brightness > 0.0)) throw ConfigError(where + ": brightness must be > 0");
    if (o.metamer_amplitude < 0.0) throw ConfigError(where + ": metamer_amplitude must be >= 0");
  }
}

double spectral_angle(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::acos(std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0));
}

Scene synth_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const std::size_t h = spec.height, w = spec.width, c = spec.bands;
  Scene scene{HsiCube(h, w, c, spec.wavelength_start_nm, spec.wavelength_step_nm), GroundTruthMask(h, w)};
  const HsiCube& cube = scene.cube;

  std::vector<double> bg(c), bg_alt(c);
  for (std::size_t b = 0; b < c; ++b) {
    bg[b] = spec.background.evaluate(cube.wavelength(b));
    bg_alt[b] = spec.background_alt ? spec.background_alt->evaluate(cube.wavelength(b)) : bg[b];
  }

  // Smooth blend field for background clutter.
  std::array<double, 9> waves{};
  for (std::size_t k = 0; k < 3; ++k) {
    waves[3 * k] = rng.uniform(1.0, 3.0);
    waves[3 * k + 1] = rng.uniform(1.0, 3.0);
    waves[3 * k + 2] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  auto blend = [&](std::size_t y, std::size_t x) {
    if (spec.clutter == 0.0) return 0.0;
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      s += std::sin(2.0 * std::numbers::pi * (waves[3 * k] * (x + 0.5) / w + waves[3 * k + 1] * (y + 0.5) / h) +
                    waves[3 * k + 2]);
    }
    return spec.clutter * (0.5 + s / 6.0);
  };
  auto illumination = [&](std::size_t x) {
    return 1.0 + spec.illumination_gradient * (2.0 * (x + 0.5) / static_cast<double>(w) - 1.0);
  };

  // Weight that vanishes at the pseudo-color bands and grows to 1 within 50 nm of them.
  std::vector<double> metamer_weight(c);
  for (std::size_t b = 0; b < c; ++b) {
    double d = 1e300;
    for (double nm : kPseudoColorNm) d = std::min(d, std::fabs(cube.wavelength(b) - cube.wavelength(cube.nearest_band(nm))));
    metamer_weight[b] = std::min(1.0, d / 50.0);
  }

  // Per-pixel object index (-1 = background); later objects paint over earlier ones.
  std::vector<int> owner(h * w, -1);
  std::vector<std::vector<double>> object_spectra;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const double area = o.scale * static_cast<double>(h * w);
    double half_w, half_h;
    if (o.shape == ShapeKind::Disk) {
      half_w = half_h = std::sqrt(area / std::numbers::pi);
    } else {
      const double ow = std::sqrt(area * o.aspect);
      half_w = ow / 2.0;
      half_h = area / ow / 2.0;
    }
    double cx, cy;
    if (o.center) {
      cx = (*o.center)[0] * w;
      cy = (*o.center)[1] * h;
    } else {
      if (2.0 * half_w > w || 2.0 * half_h > h) {
        throw ConfigError("object " + std::to_string(i) + " does not fit inside a " + std::to_string(h) + "x" +
                          std::to_string(w) + " image");
      }
      cx = rng.uniform(half_w, w - half_w);
      cy = rng.uniform(half_h, h - half_h);
    }
    constexpr double slack = 1e-9;
    if (cx - half_w < -slack || cx + half_w > w + slack || cy - half_h < -slack || cy + half_h > h + slack) {
      throw ConfigError("object " + std::to_string(i) + " extends outside the image bounds");
    }
    std::vector<double> spectrum(c);
    for (std::size_t b = 0; b < c; ++b) {
      spectrum[b] = o.spectrum ? o.spectrum->evaluate(cube.wavelength(b)) : bg[b] + o.metamer_amplitude * metamer_weight[b];
      spectrum[b] *= o.brightness;
    }
    object_spectra.push_back(std::move(spectrum));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const bool inside = o.shape == ShapeKind::Disk ? dx * dx + dy * dy <= half_w * half_w
                                                       : std::fabs(dx) <= half_w && std::fabs(dy) <= half_h;
        if (inside) owner[y * w + x] = static_cast<int>(i);
      }
  }

  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const int who = owner[y * w + x];
      const double m = blend(y, x);
      const double light = illumination(x);
      scene.mask.at(y, x) = who >= 0 ? 1 : 0;
      for (std::size_t b = 0; b < c; ++b) {
        const double s = who >= 0 ? object_spectra[static_cast<std::size_t>(who)][b] : (1.0 - m) * bg[b] + m * bg_alt[b];
        const double v = s * light + (spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0);
        scene.cube.at(b, y, x) = static_cast<float>(std::clamp(v, 0.0, kMaxReflectance));
      }
    }
  return scene;
}

namespace {

namespace sj = hsod::json;

SpectrumSpec spectrum_from(const json& j, const std::string& where) {
  sj::check_keys(j, {"base", "slope", "bumps"}, where);
  SpectrumSpec s;
  sj::read(j, "base", s.base, where);
  sj::read(j, "slope", s.slope, where);
  if (auto it = j.find("bumps"); it != j.end()) {
    if (!it->is_array()) throw ConfigError(where + ".bumps: expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string w = where + ".bumps[" + std::to_string(i) + "]";
      sj::check_keys((*it)[i], {"center_nm", "width_nm", "amplitude"}, w);
      SpectralBump b;
      sj::read((*it)[i], "center_nm", b.center_nm, w);
      sj::read((*it)[i], "width_nm", b.width_nm, w);
      sj::read((*it)[i], "amplitude", b.amplitude, w);
      s.bumps.push_back(b);
    }
  }
  return s;
}

json spectrum_to(const SpectrumSpec& s) {
  json bumps = json::array();
  for (const auto& b : s.bumps) bumps.push_back({{"center_nm", b.center_nm}, {"width_nm", b.width_nm}, {"amplitude", b.amplitude}});
  return {{"base", s.base}, {"slope", s.slope}, {"bumps", bumps}};
}

}  // namespace

SceneSpec scene_spec_from_json(const std::string& text) {
  const std::string where = "scene";
  const json j = sj::parse(text, where);
  sj::check_keys(j, {"height", "width", "bands", "wavelength_start_nm", "wavelength_step_nm", "background",
                     "background_alt", "clutter", "illumination_gradient", "noise", "objects", "attributes"},
                 where);
  SceneSpec s;
  sj::read(j, "height", s.height, where);
  sj::read(j, "width", s.width, where);
  sj::read(j, "bands", s.bands, where);
  sj::read(j, "wavelength_start_nm", s.wavelength_start_nm, where);
  sj::read(j, "wavelength_step_nm", s.wavelength_step_nm, where);
  if (j.contains("background")) s.background = spectrum_from(j["background"], where + ".background");
  if (j.contains("background_alt")) s.background_alt = spectrum_from(j["background_alt"], where + ".background_alt");
  sj::read(j, "clutter", s.clutter, where);
  sj::read(j, "illumination_gradient", s.illumination_gradient, where);
  sj::read(j, "noise", s.noise, where);
  if (auto it = j.find("objects"); it != j.end()) {
    if (!it->is_array()) throw ConfigError(where + ".objects: expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string w = where + ".objects[" + std::to_string(i) + "]";
      const json& o = (*it)[i];
      sj::check_keys(o, {"shape", "center", "scale", "aspect", "brightness", "spectrum", "metamer_amplitude"}, w);
      ObjectSpec obj;
      std::string shape = "disk";
      sj::read(o, "shape", shape, w);
      if (shape == "disk") obj.shape = ShapeKind::Disk;
      else if (shape == "rect") obj.shape = ShapeKind::Rect;
      else throw ConfigError(w + ".shape: expected \"disk\" or \"rect\", got \"" + shape + "\"");
      if (auto c = o.find("center"); c != o.end()) {
        if (!c->is_array() || c->size() != 2 || !(*c)[0].is_number() || !(*c)[1].is_number())
          throw ConfigError(w + ".center: expected [x, y]");
        obj.center = std::array<double, 2>{(*c)[0].get<double>(), (*c)[1].get<double>()};
      }
      sj::read(o, "scale", obj.scale, w);
      sj::read(o, "aspect", obj.aspect, w);
      sj::read(o, "brightness", obj.brightness, w);
      if (o.contains("spectrum")) obj.spectrum = spectrum_from(o["spectrum"], w + ".spectrum");
      sj::read(o, "metamer_amplitude", obj.metamer_amplitude, w);
      s.objects.push_back(obj);
    }
  }
  if (auto it = j.find("attributes"); it != j.end()) {
    if (!it->is_array()) throw ConfigError(where + ".attributes: expected an array of tags");
    for (const auto& a : *it) {
      if (!a.is_string()) throw ConfigError(where + ".attributes: expected an array of tags");
      s.attributes.insert(a.get<std::string>());
    }
  }
  s.validate();
  return s;
}

std::string scene_spec_to_json(const SceneSpec& s) {
  json objects = json::array();
  for (const auto& o : s.objects) {
    json jo = {{"shape", o.shape == ShapeKind::Disk ? "disk" : "rect"},
               {"scale", o.scale},
               {"aspect", o.aspect},
               {"brightness", o.brightness},
               {"metamer_amplitude", o.metamer_amplitude}};
    if (o.center) jo["center"] = {(*o.center)[0], (*o.center)[1]};
    if (o.spectrum) jo["spectrum"] = spectrum_to(*o.spectrum);
    objects.push_back(jo);
  }
  json j = {{"height", s.height},
            {"width", s.width},
            {"bands", s.bands},
            {"wavelength_start_nm", s.wavelength_start_nm},
            {"wavelength_step_nm", s.wavelength_step_nm},
            {"background", spectrum_to(s.background)},
            {"clutter", s.clutter},
            {"illumination_gradient", s.illumination_gradient},
            {"noise", s.noise},
            {"objects", objects},
            {"attributes", std::vector<std::string>(s.attributes.begin(), s.attributes.end())}};
  if (s.background_alt) j["background_alt"] = spectrum_to(*s.background_alt);
  return j.dump(2) + "\n";
}

SceneSpec color_similarity_scene(std::size_t height, std::size_t width, std::size_t bands) {
  SceneSpec s;
  s.height = height;
  s.width = width;
  s.bands = bands;
  s.wavelength_start_nm = 400.0;
  s.wavelength_step_nm = 600.0 / static_cast<double>(bands);
  s.background = SpectrumSpec{0.25, 0.2, {{550.0, 40.0, 0.08}, {800.0, 80.0, 0.05}}};
  s.illumination_gradient = 0.25;
  s.noise = 0.002;
  ObjectSpec obj;
  obj.shape = ShapeKind::Disk;
  obj.center = std::array<double, 2>{0.5, 0.5};
  obj.scale = 0.1;
  obj.metamer_amplitude = 0.25;
  s.objects.push_back(obj);
  s.attributes = {"CS"};
  return s;
}

SceneSpec random_scene(Rng& rng, std::size_t height, std::size_t width, std::size_t bands) {
  SceneSpec s;
  s.height = height;
  s.width = width;
  s.bands = bands;
  s.wavelength_step_nm = 600.0 / static_cast<double>(bands);
  s.background = SpectrumSpec{rng.uniform(0.15, 0.35), rng.uniform(-0.1, 0.3),
                              {{rng.uniform(450.0, 950.0), rng.uniform(30.0, 120.0), rng.uniform(0.0, 0.15)}}};
  s.noise = 0.003;
  if (rng.uniform() < 0.3) {
    s.background_alt = SpectrumSpec{rng.uniform(0.1, 0.4), rng.uniform(-0.2, 0.3), {}};
    s.clutter = 0.7;
    s.attributes.insert("CB");
  }
  const std::size_t count = 1 + rng.index(2);
  bool small = true;
  for (std::size_t i = 0; i < count; ++i) {
    ObjectSpec o;
    o.shape = rng.uniform() < 0.5 ? ShapeKind::Disk : ShapeKind::Rect;
    o.aspect = rng.uniform(0.6, 1.6);
    o.scale = std::exp(rng.uniform(std::log(0.003), std::log(0.25)));
    small = small && o.scale < kSmallObjectFraction;
    const double kind = rng.uniform();
    if (kind < 0.3) {
      o.metamer_amplitude = rng.uniform(0.15, 0.3);
      s.attributes.insert("CS");
    } else if (kind < 0.5) {
      SpectrumSpec near = s.background;
      near.bumps.push_back({rng.uniform(700.0, 950.0), 40.0, 0.04});
      o.spectrum = near;
      s.attributes.insert("MS");
    } else {
      o.spectrum = SpectrumSpec{rng.uniform(0.2, 0.6), rng.uniform(-0.3, 0.3),
                                {{rng.uniform(450.0, 950.0), rng.uniform(30.0, 100.0), rng.uniform(0.05, 0.3)}}};
    }
    if (rng.uniform() < 0.2) {
      o.brightness = 1.8;
      s.attributes.insert("HDR");
    }
    s.objects.push_back(o);
  }
  if (small) s.attributes.insert("SO");
  // Rectangles must fit: shrink aspect toward square when needed.
  for (auto& o : s.objects) {
    if (o.shape == ShapeKind::Rect) {
      const double area = o.scale * static_cast<double>(height * width);
      const double ow = std::sqrt(area * o.aspect);
      if (ow > width || area / ow > height) o.aspect = 1.0;
    }
  }
  return s;
}

// ---- statistics ----------------------------------------------------------------------------

double foreground_scale(const GroundTruthMask& mask) {
  if (mask.values.empty()) return 0.0;
  return static_cast<double>(mask.foreground()) / static_cast<double>(mask.values.size());
}

bool is_small_object(const GroundTruthMask& mask) { return foreground_scale(mask) < kSmallObjectFraction; }

Centroid centroid(const GroundTruthMask& mask) {
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      sx += x + 0.5;
      sy += y + 0.5;
      ++n;
    }
  if (n == 0) throw DataError("centroid of an empty mask is undefined");
  return {sx / static_cast<double>(n) / static_cast<double>(mask.width),
          sy / static_cast<double>(n) / static_cast<double>(mask.height)};
}

std::vector<std::size_t> centroid_heatmap(std::span<const GroundTruthMask> masks, std::size_t grid) {
  if (grid == 0) throw ConfigError("heatmap grid must be >= 1");
  std::vector<std::size_t> counts(grid * grid, 0);
  for (const auto& m : masks) {
    if (m.foreground() == 0) continue;
    const auto c = centroid(m);
    const auto bx = std::min(grid - 1, static_cast<std::size_t>(c.x * static_cast<double>(grid)));
    const auto by = std::min(grid - 1, static_cast<std::size_t>(c.y * static_cast<double>(grid)));
    ++counts[by * grid + bx];
  }
  return counts;
}

std::size_t scale_bin(double fraction) {
  for (std::size_t i = 1; i + 1 < kScaleBinEdges.size(); ++i) {
    if (fraction < kScaleBinEdges[i]) return i - 1;
  }
  return kScaleBinEdges.size() - 2;
}

// ---- manifests -----------------------------------------------------------------------------

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (e.id.empty()) throw DataError("manifest entry with empty id");
    if (!ids.insert(e.id).second) throw DataError("manifest id '" + e.id + "' is not unique");
    for (const auto* p : {&e.cube, &e.mask}) {
      if (p->empty() || p->find('\0') != std::string::npos) {
        throw DataError("manifest entry '" + e.id + "' has a malformed path");
      }
    }
    if (e.split != "train" && e.split != "test") {
      throw DataError("manifest entry '" + e.id + "' has split '" + e.split + "', expected train or test");
    }
    for (const auto& a : e.attributes) {
      if (!is_attribute_tag(a)) throw DataError("manifest entry '" + e.id + "' has unknown attribute '" + a + "'");
    }
  }
}

fs::path DatasetManifest::resolve(const std::string& rel) const {
  fs::path p(rel);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (name == "all" || e.split == name) out.push_back(&e);
  return out;
}

DatasetManifest parse_manifest(const std::string& json_text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  auto fail = [](const std::string& msg) { throw FormatError("manifest: " + msg); };
  if (!doc.is_object()) fail("top level must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it)
    if (it.key() != "entries") fail("unknown key '" + it.key() + "'");
  if (!doc.contains("entries") || !doc["entries"].is_array()) fail("'entries' must be an array");
  DatasetManifest m;
  m.base_dir = base_dir;
  for (const auto& item : doc["entries"]) {
    if (!item.is_object()) fail("every entry must be an object");
    ManifestEntry e;
    for (auto it = item.begin(); it != item.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      if (k == "attributes") {
        if (!v.is_array()) fail("'attributes' must be an array of strings");
        for (const auto& a : v) {
          if (!a.is_string()) fail("'attributes' must be an array of strings");
          e.attributes.insert(a.get<std::string>());
        }
        continue;
      }
      if (!v.is_string()) fail("field '" + k + "' must be a string");
      if (k == "id") e.id = v.get<std::string>();
      else if (k == "cube") e.cube = v.get<std::string>();
      else if (k == "mask") e.mask = v.get<std::string>();
      else if (k == "split") e.split = v.get<std::string>();
      else fail("unknown entry key '" + k + "'");
    }
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

std::string manifest_to_json(const DatasetManifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"id", e.id},
                       {"cube", e.cube},
                       {"mask", e.mask},
                       {"split", e.split},
                       {"attributes", std::vector<std::string>(e.attributes.begin(), e.attributes.end())}});
  }
  return json{{"entries", entries}}.dump(2) + "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  try {
    return parse_manifest(io::read_text(path), path.parent_path());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  manifest.validate();
  io::write_text_atomic(path, manifest_to_json(manifest));
}

std::map<std::string, std::size_t> attribute_histogram(const DatasetManifest& manifest) {
  std::map<std::string, std::size_t> h;
  for (const char* t : kAttributeTags) h[t] = 0;
  for (const auto& e : manifest.entries)
    for (const auto& a : e.attributes) ++h[a];
  return h;
}

DatasetManifest split_manifest(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  }
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    std::string key;
    for (const auto& a : manifest.entries[i].attributes) key += a + ",";
    groups[key].push_back(i);
  }
  Rng rng(seed);
  const std::size_t total = manifest.entries.size();
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(total)));
  struct Quota {
    std::vector<std::size_t>* members;
    std::size_t take;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (auto& [key, members] : groups) {
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.index(i)]);
    const double exact = train_fraction * static_cast<double>(members.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({&members, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k, ++assigned) ++quotas[order[k]].take;

  DatasetManifest out = manifest;
  for (const auto& q : quotas)
    for (std::size_t j = 0; j < q.members->size(); ++j) out.entries[(*q.members)[j]].split = j < q.take ? "train" : "test";
  return out;
}

DatasetStatistics dataset_statistics(const DatasetManifest& manifest, std::span<const GroundTruthMask> masks,
                                     std::size_t grid) {
  if (masks.size() != manifest.entries.size()) throw DimensionError("one mask per manifest entry is required");
  DatasetStatistics s;
  s.entries = masks.size();
  s.attributes = attribute_histogram(manifest);
  s.scale_bins.assign(kScaleBinEdges.size() - 1, 0);
  for (const auto& m : masks) {
    if (m.foreground() == 0) {
      ++s.empty_masks;
      continue;
    }
    const double f = foreground_scale(m);
    ++s.scale_bins[scale_bin(f)];
    if (f < kSmallObjectFraction) ++s.small_objects;
  }
  s.grid = grid;
  s.heatmap = centroid_heatmap(masks, grid);
  return s;
}

}  // namespace hsod::data
