#pragma once

// Classical spectral-contrast baselines and the saliency evaluation metrics.

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsod/hsidata.hpp"

namespace hsod::metrics {

// ---- baselines ----------------------------------------------------------------------------

enum class Baseline { Sad, Sed, Sg };

Baseline parse_baseline(const std::string& name);  // "sad" | "sed" | "sg"; ConfigError otherwise
const char* baseline_name(Baseline b);

// Per-pixel contrast against the global mean spectrum, before normalization (row-major H*W).
// SAD is the spectral angle (0 where either norm is zero), SED the Euclidean distance, SG the
// Euclidean distance between first-difference spectra.
std::vector<double> contrast_raw(const data::HsiCube& cube, Baseline method);

// Min-max to [0, 1] (a constant map becomes all zero), then a 3x3 box mean over the
// in-bounds neighbours.
data::SaliencyMap normalize_and_smooth(std::span<const double> raw, std::size_t height, std::size_t width);

data::SaliencyMap baseline_map(const data::HsiCube& cube, Baseline method);
inline data::SaliencyMap sad_map(const data::HsiCube& c) { return baseline_map(c, Baseline::Sad); }
inline data::SaliencyMap sed_map(const data::HsiCube& c) { return baseline_map(c, Baseline::Sed); }
inline data::SaliencyMap sg_map(const data::HsiCube& c) { return baseline_map(c, Baseline::Sg); }

// Control without spectral information: |L - mean L| of the pseudo-color luminance
// (0.299 R + 0.587 G + 0.114 B), normalized and smoothed like the baselines.
data::SaliencyMap luminance_contrast_map(const data::RgbImage& image);

// ---- metrics ------------------------------------------------------------------------------
// Predictions must be finite and in [0, 1]; ground truth must be 0/1. Pixels are binarized
// as positive when pred >= threshold.

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

inline constexpr std::size_t kF1Thresholds = 255;  // t = i / 256, i = 1..255

double mae(std::span<const double> pred, std::span<const double> gt);
// Precision is 1 when nothing is predicted positive. DataError on an empty ground truth.
PrecisionRecall precision_recall(std::span<const double> pred, std::span<const double> gt, double threshold);
double adaptive_threshold(std::span<const double> pred);  // min(1, 2 * mean)
double avg_f1(std::span<const double> pred, std::span<const double> gt);
// Mann-Whitney statistic with midranks. DataError unless both classes are present.
double auc(std::span<const double> pred, std::span<const double> gt);
// Pearson correlation of any two equally sized maps. DataError on zero variance.
double cc(std::span<const double> a, std::span<const double> b);

std::vector<double> to_values(const data::GroundTruthMask& mask);
// DimensionError unless the map matches the mask size.
void check_same_size(const data::SaliencyMap& pred, const data::GroundTruthMask& gt);

enum MetricIndex : std::size_t { kMae, kPre, kRec, kAvgF1, kAuc, kCc, kMetricCount };
inline constexpr std::array<const char*, kMetricCount> kMetricNames{"MAE", "PRE", "REC", "avgF1", "AUC", "CC"};

// One image. A metric that is undefined for this pair is left empty and explained in errors.
struct ImageMetrics {
  std::array<std::optional<double>, kMetricCount> values;
  std::vector<std::string> errors;  // "CC: ..." messages
};

ImageMetrics evaluate_image(const data::SaliencyMap& pred, const data::GroundTruthMask& gt);

// Mean over images of every metric, skipping images where it is undefined.
struct MetricReport {
  std::size_t images = 0;
  std::array<std::optional<double>, kMetricCount> values;
  std::array<std::size_t, kMetricCount> counts{};
  std::vector<std::string> errors;  // "<id>: CC: ..."
};

MetricReport aggregate(const std::vector<std::pair<std::string, const ImageMetrics*>>& images);

// Overall report plus one slice per attribute tag of the vocabulary; slices with no test
// entries stay empty (absent), which is distinct from a zero score.
struct AttributeReport {
  MetricReport overall;
  std::map<std::string, std::optional<MetricReport>> attributes;
};

// Evaluates one split ("test", "train" or "all"). DataError if an entry of it has no metrics
// in `per_image`.
AttributeReport attribute_eval(const data::DatasetManifest& manifest,
                               const std::map<std::string, ImageMetrics>& per_image,
                               const std::string& split = "test");

std::string report_json(const AttributeReport& report);
// slice,images,MAE,PRE,REC,avgF1,AUC,CC; undefined cells are empty, absent slices say so.
std::string report_csv(const AttributeReport& report);

}  // namespace hsod::metrics
