#include "hsod/basemetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "hsod/errors.hpp"
#include "hsod/jsonutil.hpp"

namespace hsod::metrics {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Pixel-major spectra: out[p * bands + c].
std::vector<double> spectra(const data::HsiCube& cube) {
  const std::size_t n = cube.pixels();
  std::vector<double> out(n * cube.bands);
  for (std::size_t c = 0; c < cube.bands; ++c)
    for (std::size_t p = 0; p < n; ++p) out[p * cube.bands + c] = cube.data[c * n + p];
  return out;
}

void check_inputs(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size())
    throw DimensionError("metric inputs differ in size: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()));
  if (pred.empty()) throw DimensionError("metric inputs are empty");
  for (double v : pred)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw DataError("prediction value outside [0, 1]");
  for (double v : gt)
    if (v != 0.0 && v != 1.0) throw DataError("ground truth is not binary");
}

std::size_t positives(std::span<const double> gt) {
  return static_cast<std::size_t>(std::count(gt.begin(), gt.end(), 1.0));
}

void require_positive(std::span<const double> gt) {
  if (positives(gt) == 0) throw DataError("ground truth has no foreground pixels");
}

double f1(double pre, double rec) { return pre + rec > 0 ? 2 * pre * rec / (pre + rec) : 0.0; }

}  // namespace

Baseline parse_baseline(const std::string& name) {
  if (name == "sad") return Baseline::Sad;
  if (name == "sed") return Baseline::Sed;
  if (name == "sg") return Baseline::Sg;
  throw ConfigError("unknown baseline method '" + name + "' (expected sad, sed or sg)");
}

const char* baseline_name(Baseline b) {
  switch (b) {
    case Baseline::Sad: return "sad";
    case Baseline::Sed: return "sed";
    case Baseline::Sg: return "sg";
  }
  return "?";
}

std::vector<double> contrast_raw(const data::HsiCube& cube, Baseline method) {
  cube.validate();
  const std::size_t n = cube.pixels();
  std::size_t bands = cube.bands;
  std::vector<double> x = spectra(cube);
  if (method == Baseline::Sg) {
    if (bands < 2) throw DataError("spectral gradient needs at least 2 bands");
    std::vector<double> d(n * (bands - 1));
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t c = 0; c + 1 < bands; ++c) d[p * (bands - 1) + c] = x[p * bands + c + 1] - x[p * bands + c];
    x = std::move(d);
    --bands;
  }
  std::vector<double> mu(bands, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < bands; ++c) mu[c] += x[p * bands + c];
  for (double& v : mu) v /= static_cast<double>(n);
  const double mu_norm = std::sqrt(dot(mu, mu));

  std::vector<double> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    std::span<const double> s(x.data() + p * bands, bands);
    if (method == Baseline::Sad) {
      const double norm = std::sqrt(dot(s, s));
      if (norm == 0.0 || mu_norm == 0.0) continue;
      out[p] = std::acos(std::clamp(dot(s, mu) / (norm * mu_norm), -1.0, 1.0));
    } else {
      out[p] = distance(s, mu);
    }
  }
  return out;
}

data::SaliencyMap normalize_and_smooth(std::span<const double> raw, std::size_t height, std::size_t width) {
  if (raw.size() != height * width) throw DimensionError("contrast map size does not match " +
                                                         std::to_string(height) + "x" + std::to_string(width));
  std::vector<double> norm(raw.size(), 0.0);
  if (!raw.empty()) {
    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    if (*hi > *lo)
      for (std::size_t i = 0; i < raw.size(); ++i) norm[i] = (raw[i] - *lo) / (*hi - *lo);
  }
  data::SaliencyMap out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      double s = 0;
      int count = 0;
      for (std::size_t yy = y == 0 ? 0 : y - 1; yy <= std::min(height - 1, y + 1); ++yy)
        for (std::size_t xx = x == 0 ? 0 : x - 1; xx <= std::min(width - 1, x + 1); ++xx) {
          s += norm[yy * width + xx];
          ++count;
        }
      out.values[y * width + x] = std::clamp(s / count, 0.0, 1.0);
    }
  return out;
}

data::SaliencyMap baseline_map(const data::HsiCube& cube, Baseline method) {
  return normalize_and_smooth(contrast_raw(cube, method), cube.height, cube.width);
}

data::SaliencyMap luminance_contrast_map(const data::RgbImage& image) {
  const std::size_t n = image.height * image.width;
  if (image.rgb.size() != n * 3) throw DimensionError("RGB image size does not match its header");
  std::vector<double> lum(n);
  for (std::size_t i = 0; i < n; ++i)
    lum[i] = 0.299 * image.rgb[i * 3] + 0.587 * image.rgb[i * 3 + 1] + 0.114 * image.rgb[i * 3 + 2];
  const double mean = n ? std::accumulate(lum.begin(), lum.end(), 0.0) / static_cast<double>(n) : 0.0;
  for (double& v : lum) v = std::fabs(v - mean);
  return normalize_and_smooth(lum, image.height, image.width);
}

// ---- metrics ------------------------------------------------------------------------------

double mae(std::span<const double> pred, std::span<const double> gt) {
  check_inputs(pred, gt);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::fabs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.size());
}

PrecisionRecall precision_recall(std::span<const double> pred, std::span<const double> gt, double threshold) {
  check_inputs(pred, gt);
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("threshold outside [0, 1]");
  require_positive(gt);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pos = pred[i] >= threshold;
    if (pos && gt[i] == 1.0) ++tp;
    else if (pos) ++fp;
    else if (gt[i] == 1.0) ++fn;
  }
  PrecisionRecall r;
  r.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return r;
}

double adaptive_threshold(std::span<const double> pred) {
  if (pred.empty()) throw DimensionError("metric inputs are empty");
  return std::min(1.0, 2.0 * std::accumulate(pred.begin(), pred.end(), 0.0) / static_cast<double>(pred.size()));
}

double avg_f1(std::span<const double> pred, std::span<const double> gt) {
  check_inputs(pred, gt);
  require_positive(gt);
  std::vector<double> all(pred.begin(), pred.end()), fg;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (gt[i] == 1.0) fg.push_back(pred[i]);
  std::sort(all.begin(), all.end());
  std::sort(fg.begin(), fg.end());
  double total = 0;
  for (std::size_t i = 1; i <= kF1Thresholds; ++i) {
    const double t = static_cast<double>(i) / 256.0;
    const auto predicted = static_cast<double>(all.end() - std::lower_bound(all.begin(), all.end(), t));
    const auto tp = static_cast<double>(fg.end() - std::lower_bound(fg.begin(), fg.end(), t));
    const double pre = predicted == 0 ? 1.0 : tp / predicted;
    total += f1(pre, tp / static_cast<double>(fg.size()));
  }
  return total / static_cast<double>(kF1Thresholds);
}

double auc(std::span<const double> pred, std::span<const double> gt) {
  check_inputs(pred, gt);
  const std::size_t n = pred.size();
  const std::size_t n_pos = positives(gt), n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("AUC needs both foreground and background pixels");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && pred[order[j]] == pred[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (gt[order[k]] == 1.0) rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

double cc(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("CC inputs differ in size");
  if (a.size() < 2) throw DataError("CC needs at least two values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DataError("CC is undefined for a constant map");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<double> to_values(const data::GroundTruthMask& mask) {
  return {mask.values.begin(), mask.values.end()};
}

void check_same_size(const data::SaliencyMap& pred, const data::GroundTruthMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw DimensionError("prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " but ground truth is " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
}

ImageMetrics evaluate_image(const data::SaliencyMap& pred, const data::GroundTruthMask& gt) {
  check_same_size(pred, gt);
  const auto g = to_values(gt);
  const std::span<const double> p(pred.values);
  ImageMetrics m;
  auto attempt = [&](std::initializer_list<MetricIndex> which, auto&& fn) {
    try {
      fn();
    } catch (const DataError& e) {
      for (auto w : which) m.errors.push_back(std::string(kMetricNames[w]) + ": " + e.what());
    }
  };
  m.values[kMae] = mae(p, g);
  attempt({kPre, kRec}, [&] {
    const auto pr = precision_recall(p, g, adaptive_threshold(p));
    m.values[kPre] = pr.precision;
    m.values[kRec] = pr.recall;
  });
  attempt({kAvgF1}, [&] { m.values[kAvgF1] = avg_f1(p, g); });
  attempt({kAuc}, [&] { m.values[kAuc] = auc(p, g); });
  attempt({kCc}, [&] { m.values[kCc] = cc(p, g); });
  return m;
}

MetricReport aggregate(const std::vector<std::pair<std::string, const ImageMetrics*>>& images) {
  MetricReport r;
  r.images = images.size();
  std::array<double, kMetricCount> sums{};
  for (const auto& [id, m] : images) {
    for (std::size_t k = 0; k < kMetricCount; ++k)
      if (m->values[k]) {
        sums[k] += *m->values[k];
        ++r.counts[k];
      }
    for (const auto& e : m->errors) r.errors.push_back(id + ": " + e);
  }
  for (std::size_t k = 0; k < kMetricCount; ++k)
    if (r.counts[k]) r.values[k] = sums[k] / static_cast<double>(r.counts[k]);
  return r;
}

AttributeReport attribute_eval(const data::DatasetManifest& manifest,
                               const std::map<std::string, ImageMetrics>& per_image, const std::string& split) {
  const auto test = manifest.split(split);
  std::vector<std::pair<std::string, const ImageMetrics*>> all;
  for (const auto* e : test) {
    auto it = per_image.find(e->id);
    if (it == per_image.end()) throw DataError("no prediction for " + split + " entry '" + e->id + "'");
    all.emplace_back(e->id, &it->second);
  }
  AttributeReport out;
  out.overall = aggregate(all);
  for (const char* tag : data::kAttributeTags) {
    std::vector<std::pair<std::string, const ImageMetrics*>> slice;
    for (std::size_t i = 0; i < test.size(); ++i)
      if (test[i]->attributes.count(tag)) slice.push_back(all[i]);
    out.attributes[tag] = slice.empty() ? std::nullopt : std::optional<MetricReport>(aggregate(slice));
  }
  return out;
}

namespace {

json::Json report_object(const MetricReport& r) {
  json::Json j;
  j["images"] = r.images;
  json::Json values = json::Json::object(), counts = json::Json::object();
  for (std::size_t k = 0; k < kMetricCount; ++k) {
    values[kMetricNames[k]] = r.values[k] ? json::Json(*r.values[k]) : json::Json(nullptr);
    counts[kMetricNames[k]] = r.counts[k];
  }
  j["metrics"] = values;
  j["counts"] = counts;
  j["errors"] = r.errors;
  return j;
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

}  // namespace

std::string report_json(const AttributeReport& report) {
  json::Json j;
  j["protocol"] = {
      {"binarize", "pred >= threshold"},
      {"PRE_REC_threshold", "min(1, 2 * mean(pred))"},
      {"avgF1_thresholds", "i / 256 for i = 1..255, F1 with beta = 1"},
      {"AUC", "Mann-Whitney rank statistic with midranks"},
      {"aggregation", "mean over images where the metric is defined"},
  };
  j["overall"] = report_object(report.overall);
  json::Json attrs = json::Json::object();
  for (const auto& [tag, r] : report.attributes)
    attrs[tag] = r ? report_object(*r) : json::Json{{"absent", true}, {"images", 0}};
  j["attributes"] = attrs;
  return j.dump(2) + "\n";
}

std::string report_csv(const AttributeReport& report) {
  std::string out = "slice,images";
  for (const char* name : kMetricNames) out += std::string(",") + name;
  out += "\n";
  auto row = [&](const std::string& name, const MetricReport& r) {
    out += name + "," + std::to_string(r.images);
    for (const auto& v : r.values) out += "," + cell(v);
    out += "\n";
  };
  row("all", report.overall);
  for (const auto& [tag, r] : report.attributes) {
    if (r) row(tag, *r);
    else out += tag + ",absent,,,,,,\n";
  }
  return out;
}

}  // namespace hsod::metrics
