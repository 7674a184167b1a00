#pragma once

// Hyperspectral cubes, masks and dataset tooling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hsod/tensor.hpp"

namespace hsod::data {

// Reflectance cube, band-sequential: data[(band * height + row) * width + col].
struct HsiCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  double wavelength_start_nm = 400.0;
  double wavelength_step_nm = 3.0;
  std::vector<float> data;

  HsiCube() = default;
  HsiCube(std::size_t h, std::size_t w, std::size_t c, double start_nm, double step_nm, float fill = 0.0f);

  float& at(std::size_t band, std::size_t y, std::size_t x) { return data[(band * height + y) * width + x]; }
  float at(std::size_t band, std::size_t y, std::size_t x) const { return data[(band * height + y) * width + x]; }
  double wavelength(std::size_t band) const { return wavelength_start_nm + wavelength_step_nm * static_cast<double>(band); }
  // Band whose center wavelength is closest to `nm` (clamped to the available range).
  std::size_t nearest_band(double nm) const;
  std::size_t pixels() const { return height * width; }

  // Throws FormatError/DataError when invariants fail.
  void validate() const;
  // [bands, height, width] tensor.
  Tensor to_tensor() const;
};

inline constexpr double kMaxReflectance = 1.5;

struct GroundTruthMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // 0 or 1

  GroundTruthMask() = default;
  GroundTruthMask(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t foreground() const;
  Tensor to_tensor() const;  // [1, H, W] of 0/1
};

// Per-pixel saliency in [0, 1].
struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  SaliencyMap() = default;
  SaliencyMap(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  static SaliencyMap from_tensor(const Tensor& t);  // [1, H, W] or [H, W]
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // interleaved

  std::array<std::uint8_t, 3> pixel(std::size_t y, std::size_t x) const {
    const auto* p = &rgb[(y * width + x) * 3];
    return {p[0], p[1], p[2]};
  }
};

// ---- file formats -------------------------------------------------------------------------

// "HSV2", u32 H, W, C, f64 start, f64 step, then H*W*C f32, all little-endian.
std::vector<std::uint8_t> encode_cube(const HsiCube& cube);
HsiCube decode_cube(std::span<const std::uint8_t> bytes, const std::string& source = "cube");
HsiCube read_cube(const std::filesystem::path& path);
void write_cube(const HsiCube& cube, const std::filesystem::path& path);

// Binary PGM (P5); masks store 0/255.
std::vector<std::uint8_t> encode_pgm(std::size_t height, std::size_t width, std::span<const std::uint8_t> pixels);
GroundTruthMask read_mask(const std::filesystem::path& path);
void write_mask(const GroundTruthMask& mask, const std::filesystem::path& path);
// 8-bit grey image of round(255 * value).
std::vector<std::uint8_t> encode_saliency_pgm(const SaliencyMap& map);
SaliencyMap read_saliency_pgm(const std::filesystem::path& path);
// Exact sidecar: "HSAL", u32 H, u32 W, H*W f32.
std::vector<std::uint8_t> encode_saliency_raw(const SaliencyMap& map);
SaliencyMap read_saliency_raw(const std::filesystem::path& path);
// Binary PPM (P6).
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);

// ---- preprocessing ------------------------------------------------------------------------

// (raw - dark) / (white - dark), clamped to [0, 1.5].
HsiCube calibrate(const HsiCube& raw, const HsiCube& dark, const HsiCube& white);

// Mean of every 4 consecutive bands.
HsiCube band_interpolate_4to1(const HsiCube& cube);

inline constexpr std::array<double, 3> kPseudoColorNm{650.0, 550.0, 450.0};
// Bands nearest 650/550/450 nm, each stretched between its 1st and 99th percentile.
RgbImage pseudo_color(const HsiCube& cube);

// ---- synthetic scenes ---------------------------------------------------------------------

struct SpectralBump {
  double center_nm = 550.0;
  double width_nm = 50.0;
  double amplitude = 0.1;
};

// base + slope * (nm - 400) / 600 + sum of Gaussian bumps.
struct SpectrumSpec {
  double base = 0.3;
  double slope = 0.0;
  std::vector<SpectralBump> bumps;
  double evaluate(double nm) const;
};

enum class ShapeKind { Disk, Rect };

struct ObjectSpec {
  ShapeKind shape = ShapeKind::Disk;
  std::optional<std::array<double, 2>> center;  // normalized (x, y); random when unset
  double scale = 0.05;                          // intended area fraction of the image
  double aspect = 1.0;                          // width / height for rectangles
  double brightness = 1.0;
  // Either an explicit spectrum, or a metamer of the background: identical at the
  // pseudo-color bands, diverging by up to `metamer_amplitude` elsewhere.
  std::optional<SpectrumSpec> spectrum;
  double metamer_amplitude = 0.0;
};

struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t bands = 32;
  double wavelength_start_nm = 400.0;
  double wavelength_step_nm = 18.75;
  SpectrumSpec background;
  // Optional second background material blended through a smooth random field (clutter).
  std::optional<SpectrumSpec> background_alt;
  double clutter = 0.0;               // blend amplitude in [0, 1]
  double illumination_gradient = 0.0; // horizontal ramp: factor 1 + g * (2x/W - 1)
  double noise = 0.0;                 // Gaussian sigma
  std::vector<ObjectSpec> objects;
  std::set<std::string> attributes;

  void validate() const;
};

struct Scene {
  HsiCube cube;
  GroundTruthMask mask;
};

// Deterministic for a fixed seed. Throws ConfigError for out-of-bounds objects.
Scene synth_scene(const SceneSpec& spec, std::uint64_t seed);

// Strict JSON mapping of SceneSpec; unknown keys throw ConfigError. Shapes are "disk" or
// "rect", centers [x, y].
SceneSpec scene_spec_from_json(const std::string& text);
std::string scene_spec_to_json(const SceneSpec& spec);

// The color-similarity scene: a metamer object on an illumination ramp.
SceneSpec color_similarity_scene(std::size_t height = 32, std::size_t width = 32, std::size_t bands = 32);
// A randomized scene with attribute tags matching what was generated.
SceneSpec random_scene(Rng& rng, std::size_t height, std::size_t width, std::size_t bands);

// Spectral angle between two spectra, radians.
double spectral_angle(std::span<const double> a, std::span<const double> b);

// ---- dataset statistics -------------------------------------------------------------------

inline constexpr std::array<const char*, 5> kAttributeTags{"CB", "CS", "HDR", "SO", "MS"};
bool is_attribute_tag(const std::string& tag);

inline constexpr double kSmallObjectFraction = 0.01;
// Train share of the original dataset split (406 of 500).
inline constexpr double kPaperTrainFraction = 406.0 / 500.0;

double foreground_scale(const GroundTruthMask& mask);
bool is_small_object(const GroundTruthMask& mask);

struct Centroid {
  double x = 0.0;
  double y = 0.0;
};
// Mean pixel-center coordinate of the foreground, normalized by (W, H).
Centroid centroid(const GroundTruthMask& mask);
// g x g counts (row-major, row = y bin) of centroids of the non-empty masks.
std::vector<std::size_t> centroid_heatmap(std::span<const GroundTruthMask> masks, std::size_t grid);

// Foreground-scale histogram bin edges; the first bin is exactly the small-object range.
inline constexpr std::array<double, 7> kScaleBinEdges{0.0, 0.01, 0.05, 0.1, 0.2, 0.4, 1.0};
std::size_t scale_bin(double fraction);

struct ManifestEntry {
  std::string id;
  std::string cube;
  std::string mask;
  std::string split = "train";  // "train" or "test"
  std::set<std::string> attributes;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;  // relative paths resolve against this

  void validate() const;
  std::filesystem::path resolve(const std::string& rel) const;
  std::vector<const ManifestEntry*> split(const std::string& name) const;
};

DatasetManifest parse_manifest(const std::string& json_text, const std::filesystem::path& base_dir);
std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Multi-tag entries count once per tag; every tag of the vocabulary is present.
std::map<std::string, std::size_t> attribute_histogram(const DatasetManifest& manifest);

// Deterministic per seed, stratified by attribute signature; round(f * n) entries go to train.
DatasetManifest split_manifest(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed);

struct DatasetStatistics {
  std::map<std::string, std::size_t> attributes;
  std::vector<std::size_t> scale_bins;  // one count per kScaleBinEdges interval
  std::size_t small_objects = 0;
  std::size_t empty_masks = 0;
  std::size_t grid = 0;
  std::vector<std::size_t> heatmap;
  std::size_t entries = 0;
};

DatasetStatistics dataset_statistics(const DatasetManifest& manifest, std::span<const GroundTruthMask> masks,
                                     std::size_t grid);

}  // namespace hsod::data
