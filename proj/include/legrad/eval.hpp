#pragma once

// Localization and faithfulness benchmarks: binarized-heatmap segmentation
// (pixel accuracy, mIoU, AP), point-annotation IoU, and pixel-erasure
// perturbation curves with their AUC.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "legrad/explain.hpp"

namespace legrad {

class EvalError : public Error {
 public:
  using Error::Error;
};

using Mask = std::vector<std::uint8_t>;

/// values > threshold (strict).
inline Mask binarize(const Heatmap& h, double threshold = 0.5) {
  Mask m(h.values.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = h.values[i] > threshold ? 1 : 0;
  return m;
}

struct SegMetrics {
  double pixel_acc = 0;
  double fg_iou = 0;
  double bg_iou = 0;
  double miou = 0;  // mean of foreground and background IoU
};

/// IoU of an empty union counts as 1: both masks agree there is nothing.
inline SegMetrics seg_metrics(const Mask& pred, const Mask& gt) {
  if (pred.size() != gt.size()) throw ShapeError("seg_metrics: mask sizes differ");
  if (pred.empty()) throw ShapeError("seg_metrics: empty masks");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
    tn += !p && !g;
  }
  auto iou = [](std::size_t inter, std::size_t uni) {
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  };
  SegMetrics m;
  m.pixel_acc = static_cast<double>(tp + tn) / static_cast<double>(pred.size());
  m.fg_iou = iou(tp, tp + fp + fn);
  m.bg_iou = iou(tn, tn + fp + fn);
  m.miou = (m.fg_iou + m.bg_iou) / 2.0;
  return m;
}

/// Average precision of continuous scores against binary labels, with tied
/// scores grouped into one threshold: sum over thresholds of
/// (recall_k - recall_{k-1}) * precision_k. Zero when there are no positives.
inline double average_precision(std::span<const double> scores, const Mask& labels) {
  if (scores.size() != labels.size()) throw ShapeError("average_precision: size mismatch");
  const std::size_t positives = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  if (positives == 0) return 0.0;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0, prev_recall = 0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    tp += labels[order[i]] != 0;
    ++seen;
    if (i + 1 < order.size() && scores[order[i + 1]] == scores[order[i]]) continue;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

struct Point {
  std::size_t x = 0, y = 0;
};

/// TP / (TP + FP + FN) over annotation points: positives inside the mask are
/// hits, positives outside are misses, negatives inside are false alarms.
inline double point_iou(const Mask& mask, std::size_t width, const std::vector<Point>& positives,
                        const std::vector<Point>& negatives) {
  if (positives.empty()) throw EvalError("point_iou: no positive points");
  auto inside = [&](const Point& p) {
    const std::size_t idx = p.y * width + p.x;
    if (p.x >= width || idx >= mask.size()) throw EvalError("point_iou: point outside mask");
    return mask[idx] != 0;
  };
  std::size_t tp = 0, fn = 0, fp = 0;
  for (const auto& p : positives) (inside(p) ? tp : fn)++;
  for (const auto& p : negatives) fp += inside(p);
  return static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
}

// ---------------------------------------------------------------------------
// Perturbation

enum class PerturbMode : std::uint8_t { positive, negative };
enum class ClassSource : std::uint8_t { predicted, target };
enum class AucRule : std::uint8_t { mean, trapezoid };

inline const char* to_string(PerturbMode m) { return m == PerturbMode::positive ? "positive" : "negative"; }
inline const char* to_string(ClassSource s) { return s == ClassSource::predicted ? "predicted" : "target"; }

inline constexpr std::size_t kPerturbSteps = 10;

struct PerturbationCurve {
  std::vector<double> fractions;  // 0.0, 0.1, ..., 0.9
  std::vector<double> accuracy;
  PerturbMode mode = PerturbMode::positive;
  ClassSource class_source = ClassSource::predicted;
};

inline std::vector<double> perturbation_fractions() {
  std::vector<double> f;
  for (std::size_t i = 0; i < kPerturbSteps; ++i) f.push_back(static_cast<double>(i) / 10.0);
  return f;
}

/// Pixel order for erasure: descending relevance for positive mode,
/// ascending for negative; ties keep row-major order.
inline std::vector<std::size_t> erasure_order(const Heatmap& h, PerturbMode mode) {
  std::vector<std::size_t> order(h.values.size());
  std::iota(order.begin(), order.end(), 0);
  if (mode == PerturbMode::positive)
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return h.values[a] > h.values[b]; });
  else
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return h.values[a] < h.values[b]; });
  return order;
}

/// Pixels erased at step i: floor(i * W * H / 10).
inline std::size_t erased_pixels(std::size_t step, std::size_t pixels) { return step * pixels / kPerturbSteps; }

/// Erases the top-ranked pixels of the normalized input (all channels set to
/// 0, i.e. the dataset mean colour) at each fraction and records whether the
/// prediction still equals `reference_class`.
template <typename T>
PerturbationCurve perturb_curve(const ModelBundle<T>& bundle, const Classifier<T>& classifier, const Tensor<T>& input,
                                const Heatmap& h, PerturbMode mode, ClassSource source, std::size_t reference_class) {
  const std::size_t S = bundle.config.image_size;
  if (h.width != S || h.height != S) throw ShapeError("perturb_curve: heatmap must match the input resolution");
  const auto order = erasure_order(h, mode);
  PerturbationCurve c;
  c.fractions = perturbation_fractions();
  c.mode = mode;
  c.class_source = source;
  Tensor<T> x = input;
  std::size_t erased = 0;
  for (std::size_t step = 0; step < kPerturbSteps; ++step) {
    const std::size_t target = erased_pixels(step, S * S);
    for (; erased < target; ++erased) {
      const std::size_t px = order[erased];
      for (std::size_t ch = 0; ch < 3; ++ch) x[ch * S * S + px] = T{0};
    }
    c.accuracy.push_back(argmax(predict(x, bundle, classifier)) == reference_class ? 1.0 : 0.0);
  }
  return c;
}

inline double auc(const PerturbationCurve& c, AucRule rule = AucRule::mean) {
  if (c.accuracy.empty() || c.accuracy.size() != c.fractions.size()) throw EvalError("auc: malformed curve");
  if (rule == AucRule::mean || c.accuracy.size() == 1)
    return std::accumulate(c.accuracy.begin(), c.accuracy.end(), 0.0) / static_cast<double>(c.accuracy.size());
  double area = 0;
  for (std::size_t i = 1; i < c.accuracy.size(); ++i)
    area += (c.fractions[i] - c.fractions[i - 1]) * (c.accuracy[i] + c.accuracy[i - 1]) / 2.0;
  return area / (c.fractions.back() - c.fractions.front());
}

inline nlohmann::json curve_json(const PerturbationCurve& c, AucRule rule = AucRule::mean) {
  return {{"mode", to_string(c.mode)},
          {"class_source", to_string(c.class_source)},
          {"fractions", c.fractions},
          {"accuracy", c.accuracy},
          {"auc", auc(c, rule)}};
}

// ---------------------------------------------------------------------------
// Manifests and benchmark driver

enum class BenchmarkKind : std::uint8_t { segmentation, points, perturbation };

inline const char* to_string(BenchmarkKind k) {
  switch (k) {
    case BenchmarkKind::segmentation: return "segmentation";
    case BenchmarkKind::points: return "points";
    case BenchmarkKind::perturbation: return "perturbation";
  }
  return "?";
}

struct ClassPoints {
  std::vector<std::array<double, 2>> positives;
  std::vector<std::array<double, 2>> negatives;
};

/// One manifest line; paths are resolved against the manifest directory.
struct Sample {
  std::size_t line = 0;
  std::filesystem::path image;
  std::optional<std::filesystem::path> mask;
  std::map<std::string, ClassPoints> points;
  std::optional<std::string> label;
  std::optional<std::size_t> class_index;
};

inline std::vector<Sample> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open manifest " + path.string());
  const auto dir = path.parent_path();
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Sample s;
    s.line = lineno;
    try {
      const auto j = nlohmann::json::parse(line);
      s.image = dir / j.at("image").get<std::string>();
      if (j.contains("mask")) s.mask = dir / j.at("mask").get<std::string>();
      if (j.contains("label")) {
        if (j["label"].is_number_unsigned())
          s.class_index = j["label"].get<std::size_t>();
        else
          s.label = j["label"].get<std::string>();
      }
      if (j.contains("class_index")) s.class_index = j.at("class_index").get<std::size_t>();
      if (j.contains("points")) {
        for (const auto& [cls, pts] : j.at("points").items()) {
          ClassPoints cp;
          cp.positives = pts.value("pos", std::vector<std::array<double, 2>>{});
          cp.negatives = pts.value("neg", std::vector<std::array<double, 2>>{});
          s.points[cls] = std::move(cp);
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw EvalError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct BenchmarkParams {
  BenchmarkKind kind = BenchmarkKind::segmentation;
  ExplainOptions explain;
  std::string classifier;  // empty = first classifier in the bundle
  double threshold = 0.5;
  std::optional<std::size_t> limit;
  std::size_t workers = 1;
  std::vector<PerturbMode> modes{PerturbMode::negative, PerturbMode::positive};
  ClassSource class_source = ClassSource::predicted;
  AucRule auc_rule = AucRule::mean;
  bool suppress_background = false;
  double suppress_threshold = 0.8;
};

struct ImageRecord {
  std::size_t index = 0;
  std::string image;
  bool skipped = false;
  std::string reason;
  std::map<std::string, double> metrics;
  std::map<std::string, std::vector<double>> curves;
};

struct EvalRecord {
  BenchmarkKind kind = BenchmarkKind::segmentation;
  std::string method;
  std::vector<ImageRecord> images;
  std::map<std::string, double> aggregate;
  std::map<std::string, std::vector<double>> curves;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

namespace detail {

template <typename T>
Query<T> sample_query(const Classifier<T>& c, const Sample& s) {
  if (s.class_index) return query_for_class(c, *s.class_index);
  if (s.label) return query_for_label(c, *s.label);
  throw EvalError("sample has no label");
}

template <typename T>
Heatmap explain_for(const ModelBundle<T>& bundle, const ForwardTrace<T>& trace, const Query<T>& q,
                    const BenchmarkParams& p) {
  Heatmap h = explain(bundle, trace, q, p.explain);
  if (p.suppress_background) {
    if (!bundle.embedding("empty")) throw EvalError("background suppression needs an 'empty' embedding");
    h = background_suppress(h, explain(bundle, trace, query_for_embedding(bundle, "empty"), p.explain),
                            p.suppress_threshold);
  }
  return h;
}

inline Image load_image(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw EvalError("cannot read image " + p.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_image(bytes);
}

template <typename T>
ImageRecord evaluate_sample(const ModelBundle<T>& bundle, const Sample& s, const BenchmarkParams& p) {
  ImageRecord r;
  r.image = s.image.filename().string();
  const Classifier<T>& classifier = bundle.classifier(p.classifier);
  const Image img = load_image(s.image);
  const auto pre = preprocess(img, bundle);
  const auto trace = forward_trace(embed(pre.input, bundle.weights, bundle.config), bundle.weights, bundle.config);
  const std::size_t S = bundle.config.image_size;

  switch (p.kind) {
    case BenchmarkKind::segmentation: {
      if (!s.mask) throw EvalError("sample has no mask");
      std::ifstream in(*s.mask, std::ios::binary);
      if (!in) throw EvalError("cannot read mask " + s.mask->string());
      const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
      std::size_t mw = 0, mh = 0;
      const Mask raw = decode_mask(bytes, mw, mh);
      if (mw != img.width || mh != img.height) throw EvalError("mask size differs from image size");
      const Mask gt = resize_and_crop_mask(raw, pre.geometry);
      const Heatmap h = explain_for(bundle, trace, sample_query(classifier, s), p);
      const SegMetrics m = seg_metrics(binarize(h, p.threshold), gt);
      r.metrics = {{"pixel_acc", m.pixel_acc}, {"miou", m.miou}, {"fg_iou", m.fg_iou}, {"bg_iou", m.bg_iou},
                   {"map", average_precision(h.values, gt)}};
      break;
    }
    case BenchmarkKind::points: {
      if (s.points.empty()) throw EvalError("sample has no point annotations");
      double sum = 0;
      std::size_t classes = 0;
      for (const auto& [label, cp] : s.points) {
        auto map_points = [&](const std::vector<std::array<double, 2>>& in) {
          std::vector<Point> out;
          for (const auto& xy : in) {
            if (xy[0] < 0 || xy[1] < 0 || xy[0] >= static_cast<double>(img.width) || xy[1] >= static_cast<double>(img.height))
              throw EvalError("point outside image bounds for class '" + label + "'");
            if (auto m = pre.geometry.map_point(xy[0], xy[1])) out.push_back({m->first, m->second});
          }
          return out;
        };
        const auto pos = map_points(cp.positives);
        const auto neg = map_points(cp.negatives);
        if (pos.empty()) {
          r.metrics["skipped_classes"] += 1;
          continue;
        }
        const Heatmap h = explain_for(bundle, trace, query_for_label(classifier, label), p);
        const double iou = point_iou(binarize(h, p.threshold), S, pos, neg);
        r.metrics["class_iou/" + label] = iou;
        sum += iou;
        ++classes;
      }
      if (classes == 0) throw EvalError("no class with positive points inside the crop");
      r.metrics["p_miou"] = sum / static_cast<double>(classes);
      r.metrics["classes"] = static_cast<double>(classes);
      break;
    }
    case BenchmarkKind::perturbation: {
      const std::size_t predicted = argmax(classify(image_embedding(trace.tokens.back(), bundle), classifier));
      std::size_t reference = predicted;
      if (p.class_source == ClassSource::target) {
        if (s.class_index)
          reference = *s.class_index;
        else if (s.label)
          reference = query_for_label(classifier, *s.label).class_index.value();
        else
          throw EvalError("target class source needs a label");
        if (reference >= classifier.classes()) throw EvalError("target class out of range");
      }
      const Heatmap h = explain_for(bundle, trace, query_for_class(classifier, reference), p);
      r.metrics["reference_class"] = static_cast<double>(reference);
      for (PerturbMode mode : p.modes) {
        const auto c = perturb_curve(bundle, classifier, pre.input, h, mode, p.class_source, reference);
        r.curves[to_string(mode)] = c.accuracy;
        r.metrics[std::string(to_string(mode)) + "_auc"] = auc(c, p.auc_rule);
      }
      break;
    }
  }
  return r;
}

}  // namespace detail

/// Evaluates every sample (in manifest order, capped by `limit`) and
/// aggregates metrics as unweighted means over evaluated images. Unreadable
/// or unusable samples are recorded as skipped with a reason.
template <typename T>
EvalRecord run_benchmark(const ModelBundle<T>& bundle, const std::vector<Sample>& manifest, const BenchmarkParams& p) {
  if (manifest.empty()) throw EvalError("no samples");
  std::size_t count = manifest.size();
  if (p.limit) count = std::min(count, *p.limit);
  if (count == 0) throw EvalError("no samples");
  bundle.classifier(p.classifier);

  EvalRecord rec;
  rec.kind = p.kind;
  rec.method = to_string(p.explain.method);
  rec.images.resize(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      ImageRecord r;
      try {
        r = detail::evaluate_sample(bundle, manifest[i], p);
      } catch (const std::exception& e) {
        r = ImageRecord{};
        r.image = manifest[i].image.filename().string();
        r.skipped = true;
        r.reason = e.what();
      }
      r.index = i;
      rec.images[i] = std::move(r);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(p.workers, count));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
  }

  std::map<std::string, std::size_t> counts;
  std::map<std::string, std::size_t> curve_counts;
  for (const auto& r : rec.images) {
    if (r.skipped) {
      ++rec.skipped;
      continue;
    }
    ++rec.evaluated;
    for (const auto& [k, v] : r.metrics) {
      if (k.starts_with("class_iou/") || k == "reference_class" || k == "classes" || k == "skipped_classes") continue;
      rec.aggregate[k] += v;
      ++counts[k];
    }
    for (const auto& [k, v] : r.curves) {
      auto& acc = rec.curves[k];
      acc.resize(v.size(), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
      ++curve_counts[k];
    }
  }
  for (auto& [k, v] : rec.aggregate) v /= static_cast<double>(counts[k]);
  for (auto& [k, v] : rec.curves)
    for (double& x : v) x /= static_cast<double>(curve_counts[k]);
  return rec;
}

inline nlohmann::json eval_record_json(const EvalRecord& rec) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& r : rec.images) {
    nlohmann::json j = {{"index", r.index}, {"image", r.image}, {"skipped", r.skipped}};
    if (r.skipped)
      j["reason"] = r.reason;
    else
      j["metrics"] = r.metrics;
    if (!r.curves.empty()) j["curves"] = r.curves;
    images.push_back(std::move(j));
  }
  nlohmann::json out = {{"benchmark", to_string(rec.kind)},
                        {"method", rec.method},
                        {"evaluated", rec.evaluated},
                        {"skipped", rec.skipped},
                        {"aggregate", rec.aggregate},
                        {"images", images}};
  if (!rec.curves.empty()) {
    out["curves"] = rec.curves;
    out["fractions"] = perturbation_fractions();
  }
  return out;
}

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// One header row and one row for the method; percentages scaled by 100.
inline std::string eval_record_csv(const EvalRecord& rec) {
  std::vector<std::string> keys;
  switch (rec.kind) {
    case BenchmarkKind::segmentation: keys = {"pixel_acc", "miou", "map"}; break;
    case BenchmarkKind::points: keys = {"p_miou"}; break;
    case BenchmarkKind::perturbation:
      for (const auto& [k, v] : rec.aggregate)
        if (k.ends_with("_auc")) keys.push_back(k);
      break;
  }
  std::ostringstream os;
  os << "method,images,skipped";
  for (const auto& k : keys) os << ',' << k;
  os << '\n' << rec.method << ',' << rec.evaluated << ',' << rec.skipped;
  for (const auto& k : keys) {
    const auto it = rec.aggregate.find(k);
    os << ',' << (it == rec.aggregate.end() ? std::string("nan") : format_metric(100.0 * it->second));
  }
  os << '\n';
  return os.str();
}

inline void write_reports(const EvalRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream j(dir / "report.json", std::ios::binary | std::ios::trunc);
    j << eval_record_json(rec).dump(2) << '\n';
    if (!j) throw EvalError("cannot write report.json");
  }
  std::ofstream c(dir / "report.csv", std::ios::binary | std::ios::trunc);
  c << eval_record_csv(rec);
  if (!c) throw EvalError("cannot write report.csv");
}

}  // namespace legrad
