#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "legrad/eval.hpp"
#include "legrad/fixtures.hpp"

using namespace legrad;
namespace fs = std::filesystem;

namespace {

Heatmap heatmap_of(std::vector<double> v, std::size_t w) {
  Heatmap h;
  h.width = w;
  h.height = v.size() / w;
  h.values = std::move(v);
  return h;
}

ModelBundle<double> tiny_model(std::uint64_t seed = 31) {
  TinyVitSpec s;
  s.seed = seed;
  s.layers = 2;
  s.heads = 2;
  s.width = 8;
  s.patches = 4;
  return make_tiny_vit<double>(s);
}

/// Temporary directory holding generated images, masks and a manifest.
class Workspace {
 public:
  explicit Workspace(const std::string& name) : dir_(fs::temp_directory_path() / ("legrad_eval_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }

  const fs::path& dir() const { return dir_; }

  std::string image(std::uint64_t seed, std::size_t w, std::size_t h) {
    const std::string name = "img" + std::to_string(seed) + ".png";
    write_binary_file(dir_ / name, encode_png(make_test_image(seed, w, h)));
    return name;
  }

  std::string mask(std::uint64_t seed, std::size_t w, std::size_t h) {
    SplitMix64 rng = SplitMix64::stream(seed, "mask");
    std::vector<std::uint8_t> px(w * h);
    for (auto& v : px) v = rng.uniform() < 0.4 ? 255 : 0;
    const std::string name = "mask" + std::to_string(seed) + ".png";
    write_binary_file(dir_ / name, encode_png(px, w, h, 1));
    return name;
  }

  fs::path manifest(const std::vector<nlohmann::json>& lines) {
    const auto p = dir_ / "manifest.jsonl";
    std::ofstream out(p);
    for (const auto& l : lines) out << l.dump() << '\n';
    return p;
  }

 private:
  fs::path dir_;
};

std::vector<nlohmann::json> seg_lines(Workspace& ws, std::size_t n) {
  std::vector<nlohmann::json> lines;
  for (std::size_t i = 0; i < n; ++i)
    lines.push_back({{"image", ws.image(i, 4 + i % 3, 4)}, {"mask", ws.mask(i, 4 + i % 3, 4)}, {"label", "class" + std::to_string(i % 3)}});
  return lines;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Binarize, StrictThreshold) {
  const auto h = heatmap_of({0.2, 0.5, 0.51, 1.0}, 2);
  EXPECT_EQ(binarize(h), (Mask{0, 0, 1, 1}));
  EXPECT_EQ(binarize(h, 0.0), (Mask{1, 1, 1, 1}));
  EXPECT_EQ(binarize(h, 1.0), (Mask{0, 0, 0, 0}));
}

TEST(SegMetrics, WorkedExample) {
  const auto m = seg_metrics({1, 1, 0, 0}, {1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(m.fg_iou, 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.bg_iou, 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.miou, 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.pixel_acc, 0.5);
}

TEST(SegMetrics, EmptyUnionsCountAsAgreement) {
  const auto none = seg_metrics({0, 0, 0}, {0, 0, 0});
  EXPECT_EQ(none.fg_iou, 1.0);
  EXPECT_EQ(none.bg_iou, 1.0);
  const auto all = seg_metrics({1, 1}, {1, 1});
  EXPECT_EQ(all.miou, 1.0);
  EXPECT_THROW(seg_metrics({1}, {1, 0}), ShapeError);
}

TEST(SegMetrics, MatchesSetOracleOnRandomMasks) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SplitMix64 rng(seed);
    Mask pred(256), gt(256);
    std::set<std::size_t> P, G;
    for (std::size_t i = 0; i < 256; ++i) {
      pred[i] = rng.uniform() < 0.3;
      gt[i] = rng.uniform() < 0.5;
      if (pred[i]) P.insert(i);
      if (gt[i]) G.insert(i);
    }
    std::set<std::size_t> inter, uni, all;
    for (std::size_t i = 0; i < 256; ++i) all.insert(i);
    std::set_intersection(P.begin(), P.end(), G.begin(), G.end(), std::inserter(inter, inter.end()));
    std::set_union(P.begin(), P.end(), G.begin(), G.end(), std::inserter(uni, uni.end()));
    const double fg = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    // Background IoU: complement sets; |A' n B'| = N - |A u B|, |A' u B'| = N - |A n B|.
    const double bg = (256.0 - static_cast<double>(uni.size())) / (256.0 - static_cast<double>(inter.size()));
    std::size_t agree = 0;
    for (std::size_t i = 0; i < 256; ++i) agree += P.count(i) == G.count(i);
    const auto m = seg_metrics(pred, gt);
    EXPECT_NEAR(m.fg_iou, fg, 1e-15);
    EXPECT_NEAR(m.bg_iou, bg, 1e-15);
    EXPECT_NEAR(m.miou, (fg + bg) / 2, 1e-15);
    EXPECT_NEAR(m.pixel_acc, static_cast<double>(agree) / 256.0, 1e-15);
  }
}

TEST(AveragePrecision, Examples) {
  const std::vector<double> perfect{0.9, 0.8, 0.1, 0.0};
  EXPECT_DOUBLE_EQ(average_precision(perfect, {1, 1, 0, 0}), 1.0);
  // Ranked: 0 (neg), 1 (pos), 2 (neg), 3 (pos): 0.5 * 1/2 + 0.5 * 2/4
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  EXPECT_DOUBLE_EQ(average_precision(s, {0, 1, 0, 1}), 0.5);
  const std::vector<double> tied(4, 0.5);
  EXPECT_DOUBLE_EQ(average_precision(tied, {1, 0, 0, 0}), 0.25);
  EXPECT_EQ(average_precision(s, {0, 0, 0, 0}), 0.0);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SplitMix64 rng(seed + 77);
    std::vector<double> scores(40);
    Mask labels(40);
    for (std::size_t i = 0; i < 40; ++i) {
      scores[i] = std::floor(rng.uniform() * 8) / 8;  // forces ties
      labels[i] = rng.uniform() < 0.4;
    }
    const double positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    if (positives == 0) continue;
    std::set<double> thresholds(scores.begin(), scores.end());
    double ap = 0, prev = 0;
    for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
      double tp = 0, sel = 0;
      for (std::size_t i = 0; i < 40; ++i)
        if (scores[i] >= *it) sel += 1, tp += labels[i];
      ap += (tp / positives - prev) * (tp / sel);
      prev = tp / positives;
    }
    EXPECT_NEAR(average_precision(scores, labels), ap, 1e-12);
  }
}

TEST(PointIou, Examples) {
  const Mask m{1, 0, 0, 1};
  EXPECT_DOUBLE_EQ(point_iou(m, 2, {{0, 0}, {1, 1}}, {}), 1.0);
  EXPECT_DOUBLE_EQ(point_iou(m, 2, {{0, 0}, {1, 0}}, {{1, 1}}), 1.0 / 3);
  EXPECT_DOUBLE_EQ(point_iou(m, 2, {{1, 0}}, {{0, 1}}), 0.0);
  EXPECT_THROW(point_iou(m, 2, {}, {}), EvalError);
  EXPECT_THROW(point_iou(m, 2, {{2, 0}}, {}), EvalError);
}

TEST(Perturbation, FractionsAndPixelCounts) {
  EXPECT_EQ(perturbation_fractions().size(), 10u);
  EXPECT_EQ(perturbation_fractions()[3], 0.3);
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < 10; ++i) counts.push_back(erased_pixels(i, 16));
  EXPECT_EQ(counts, (std::vector<std::size_t>{0, 1, 3, 4, 6, 8, 9, 11, 12, 14}));
  EXPECT_EQ(erased_pixels(9, 224 * 224), 45158u);
}

TEST(Perturbation, ErasureOrderKeepsRowMajorTies) {
  const auto h = heatmap_of({0.5, 1.0, 0.5, 0.0}, 2);
  EXPECT_EQ(erasure_order(h, PerturbMode::positive), (std::vector<std::size_t>{1, 0, 2, 3}));
  EXPECT_EQ(erasure_order(h, PerturbMode::negative), (std::vector<std::size_t>{3, 0, 2, 1}));
}

TEST(Perturbation, ConstantClassifierNeverChanges) {
  auto b = tiny_model();
  b.classifiers.front().kind = ClassifierKind::learned_head;
  b.classifiers.front().matrix = Tensor<double>(b.classifiers.front().matrix.shape());
  const auto input = random_input(b, 1);
  const auto trace = forward_trace(embed(input, b.weights, b.config), b.weights, b.config);
  const auto h = legrad::legrad(b, trace, query_for_class(b.classifier(), 1), {2});
  for (PerturbMode mode : {PerturbMode::positive, PerturbMode::negative}) {
    const auto c = perturb_curve(b, b.classifier(), input, h, mode, ClassSource::predicted, 0);
    EXPECT_EQ(c.accuracy, std::vector<double>(10, 1.0));
    EXPECT_EQ(auc(c), 1.0);
    EXPECT_EQ(auc(c, AucRule::trapezoid), 1.0);
  }
}

TEST(Perturbation, CurveMatchesIndependentErasure) {
  const auto b = tiny_model(33);
  const auto input = random_input(b, 4);
  const auto h = heatmap_of({0.9, 0.1, 0.4, 0.4, 0.0, 0.7, 0.2, 0.3, 0.8, 0.6, 0.5, 0.05, 0.15, 0.25, 0.35, 1.0}, 4);
  for (PerturbMode mode : {PerturbMode::positive, PerturbMode::negative}) {
    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
      const double va = h.values[a], vc = h.values[c];
      if (va != vc) return mode == PerturbMode::positive ? va > vc : va < vc;
      return a < c;
    });
    const std::size_t ref_class = argmax(predict(input, b, b.classifier()));
    std::vector<double> expected;
    for (std::size_t step = 0; step < 10; ++step) {
      Tensor<double> x = input;
      for (std::size_t k = 0; k < step * 16 / 10; ++k)
        for (std::size_t ch = 0; ch < 3; ++ch) x(ch, order[k] / 4, order[k] % 4) = 0;
      expected.push_back(argmax(predict(x, b, b.classifier())) == ref_class ? 1.0 : 0.0);
    }
    const auto c = perturb_curve(b, b.classifier(), input, h, mode, ClassSource::predicted, ref_class);
    EXPECT_EQ(c.accuracy, expected);
    EXPECT_EQ(c.accuracy.front(), 1.0);
  }
}

TEST(Auc, MeanAndTrapezoid) {
  PerturbationCurve c;
  c.fractions = perturbation_fractions();
  c.accuracy = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(auc(c), 0.5);
  // Trapezoid over [0, 0.9]: 0.4 full + 0.05 ramp, normalized by 0.9.
  EXPECT_NEAR(auc(c, AucRule::trapezoid), 0.45 / 0.9, 1e-12);
  c.accuracy.pop_back();
  EXPECT_THROW(auc(c), EvalError);
}

TEST(Manifest, ParsesLabelsAndResolvesPaths) {
  Workspace ws("manifest");
  const auto p = ws.manifest({{{"image", "a.png"}, {"label", "cat"}},
                              {{"image", "sub/b.png"}, {"label", 4}, {"mask", "m.png"}},
                              {{"image", "c.png"}, {"points", {{"dog", {{"pos", {{1, 2}}}, {"neg", nlohmann::json::array()}}}}}}});
  const auto m = read_manifest(p);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0].image, ws.dir() / "a.png");
  EXPECT_EQ(*m[0].label, "cat");
  EXPECT_EQ(*m[1].class_index, 4u);
  EXPECT_EQ(*m[1].mask, ws.dir() / "m.png");
  EXPECT_EQ(m[2].points.at("dog").positives.size(), 1u);
  EXPECT_EQ(m[2].line, 3u);
}

TEST(Manifest, BadLineReportsLineNumber) {
  Workspace ws("badline");
  const auto p = ws.dir() / "m.jsonl";
  std::ofstream(p) << "{\"image\": \"a.png\"}\n\n{not json}\n";
  try {
    read_manifest(p);
    FAIL();
  } catch (const EvalError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_manifest(ws.dir() / "missing.jsonl"), EvalError);
}

TEST(Benchmark, EmptyManifestIsAnError) {
  const auto b = tiny_model();
  try {
    run_benchmark(b, {}, BenchmarkParams{});
    FAIL();
  } catch (const EvalError& e) {
    EXPECT_STREQ(e.what(), "no samples");
  }
  Workspace ws("limit0");
  BenchmarkParams p;
  p.limit = 0;
  EXPECT_THROW(run_benchmark(b, read_manifest(ws.manifest(seg_lines(ws, 1))), p), EvalError);
}

TEST(Benchmark, SingleSampleMatchesDirectComputation) {
  Workspace ws("single");
  const auto b = tiny_model();
  const auto rec = run_benchmark(b, read_manifest(ws.manifest(seg_lines(ws, 1))), BenchmarkParams{});
  ASSERT_EQ(rec.evaluated, 1u);
  const Image img = decode_image(read_binary_file(ws.dir() / "img0.png"));
  std::size_t w = 0, h = 0;
  const Mask raw = decode_mask(read_binary_file(ws.dir() / "mask0.png"), w, h);
  const auto pre = preprocess(img, b);
  const auto hm = legrad::legrad(b, img, query_for_label(b.classifier(), "class0"));
  const Mask gt = resize_and_crop_mask(raw, pre.geometry);
  const auto m = seg_metrics(binarize(hm), gt);
  EXPECT_EQ(rec.aggregate.at("miou"), m.miou);
  EXPECT_EQ(rec.aggregate.at("pixel_acc"), m.pixel_acc);
  EXPECT_EQ(rec.aggregate.at("map"), average_precision(hm.values, gt));
}

TEST(Benchmark, AggregateIsUnweightedMeanOfImages) {
  Workspace ws("ten");
  const auto b = tiny_model();
  const auto rec = run_benchmark(b, read_manifest(ws.manifest(seg_lines(ws, 10))), BenchmarkParams{});
  ASSERT_EQ(rec.evaluated, 10u);
  for (const char* key : {"pixel_acc", "miou", "map", "fg_iou", "bg_iou"}) {
    double sum = 0;
    for (const auto& r : rec.images) sum += r.metrics.at(key);
    EXPECT_NEAR(rec.aggregate.at(key), sum / 10, 1e-15) << key;
  }
  BenchmarkParams limited;
  limited.limit = 3;
  EXPECT_EQ(run_benchmark(b, read_manifest(ws.dir() / "manifest.jsonl"), limited).images.size(), 3u);
}

TEST(Benchmark, ReportsAreByteIdenticalAcrossRunsAndWorkerCounts) {
  Workspace ws("determinism");
  const auto b = tiny_model();
  const auto manifest = read_manifest(ws.manifest(seg_lines(ws, 8)));
  BenchmarkParams p;
  write_reports(run_benchmark(b, manifest, p), ws.dir() / "r1");
  write_reports(run_benchmark(b, manifest, p), ws.dir() / "r2");
  p.workers = 4;
  write_reports(run_benchmark(b, manifest, p), ws.dir() / "r4");
  for (const char* f : {"report.json", "report.csv"}) {
    EXPECT_EQ(slurp(ws.dir() / "r1" / f), slurp(ws.dir() / "r2" / f)) << f;
    EXPECT_EQ(slurp(ws.dir() / "r1" / f), slurp(ws.dir() / "r4" / f)) << f;
  }
}

TEST(Benchmark, UnreadableSamplesAreSkippedWithReason) {
  Workspace ws("skips");
  const auto b = tiny_model();
  auto lines = seg_lines(ws, 3);
  lines.insert(lines.begin() + 1, nlohmann::json{{"image", "nope.png"}, {"mask", "nope.png"}, {"label", "class0"}});
  lines.push_back({{"image", ws.image(9, 5, 5)}, {"mask", ws.mask(9, 5, 5)}, {"label", "kitten"}});
  const auto rec = run_benchmark(b, read_manifest(ws.manifest(lines)), BenchmarkParams{});
  EXPECT_EQ(rec.evaluated, 3u);
  EXPECT_EQ(rec.skipped, 2u);
  EXPECT_TRUE(rec.images[1].skipped);
  EXPECT_NE(rec.images[1].reason.find("cannot read image"), std::string::npos);
  EXPECT_NE(rec.images[4].reason.find("unknown label"), std::string::npos);
  double sum = 0;
  for (const auto& r : rec.images)
    if (!r.skipped) sum += r.metrics.at("miou");
  EXPECT_NEAR(rec.aggregate.at("miou"), sum / 3, 1e-15);
  const auto j = eval_record_json(rec);
  EXPECT_EQ(j["images"][1]["skipped"], true);
  EXPECT_TRUE(j["images"][1].contains("reason"));
}

TEST(Benchmark, PointsDropOutsideCropAndRejectOutsideImage) {
  Workspace ws("points");
  const auto b = tiny_model();
  const auto img = ws.image(1, 8, 4);  // crop keeps x in [2, 6)
  const auto rec = run_benchmark(
      b,
      read_manifest(ws.manifest({
          {{"image", img}, {"points", {{"class0", {{"pos", {{3, 1}, {0, 0}}}, {"neg", {{4, 2}}}}}, {"class1", {{"pos", {{7, 3}}}}}}}},
          {{"image", img}, {"points", {{"class0", {{"pos", {{9, 1}}}}}}}},
      })),
      [] {
        BenchmarkParams p;
        p.kind = BenchmarkKind::points;
        return p;
      }());
  ASSERT_FALSE(rec.images[0].skipped) << rec.images[0].reason;
  EXPECT_EQ(rec.images[0].metrics.at("classes"), 1.0);
  EXPECT_EQ(rec.images[0].metrics.at("skipped_classes"), 1.0);
  EXPECT_TRUE(rec.images[1].skipped);
  EXPECT_NE(rec.images[1].reason.find("outside image"), std::string::npos);
  EXPECT_EQ(rec.aggregate.at("p_miou"), rec.images[0].metrics.at("class_iou/class0"));
}

TEST(Benchmark, PerturbationRecordsBothModes) {
  Workspace ws("perturb");
  const auto b = tiny_model();
  BenchmarkParams p;
  p.kind = BenchmarkKind::perturbation;
  const auto rec = run_benchmark(b, read_manifest(ws.manifest(seg_lines(ws, 4))), p);
  ASSERT_EQ(rec.evaluated, 4u);
  for (const char* mode : {"positive", "negative"}) {
    ASSERT_EQ(rec.curves.at(mode).size(), 10u);
    EXPECT_EQ(rec.curves.at(mode).front(), 1.0);
    double mean = 0;
    for (double v : rec.curves.at(mode)) mean += v;
    EXPECT_NEAR(rec.aggregate.at(std::string(mode) + "_auc"), mean / 10, 1e-12);
  }
  const auto csv = eval_record_csv(rec);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,images,skipped,negative_auc,positive_auc");
  p.class_source = ClassSource::target;
  const auto target = run_benchmark(b, read_manifest(ws.dir() / "manifest.jsonl"), p);
  for (const auto& r : target.images) EXPECT_EQ(r.metrics.at("reference_class"), static_cast<double>(r.index % 3));
}

TEST(Reports, CsvScalesByHundred) {
  EvalRecord rec;
  rec.method = "legrad";
  rec.evaluated = 2;
  rec.skipped = 1;
  rec.aggregate = {{"pixel_acc", 0.5}, {"miou", 0.25}, {"map", 1.0 / 3}};
  EXPECT_EQ(eval_record_csv(rec), "method,images,skipped,pixel_acc,miou,map\nlegrad,2,1,50.000000,25.000000,33.333333\n");
}
