// legrad: explain images, run the benchmarks, and serve the HTTP API.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <thread>

#include "CLI11.hpp"
#include "legrad/eval.hpp"
#include "legrad/fixtures.hpp"
#include "legrad/server.hpp"

namespace fs = std::filesystem;
using namespace legrad;

namespace {

enum Exit : int { kOk = 0, kBadArgs = 2, kModelLoad = 3, kInference = 4, kBind = 5 };

struct Failure {
  int code;
  std::string message;
};

struct ExplainArgs {
  std::string model, image, label, embedding, classifier, method = "legrad", layers = "last40%", out_dir = ".",
                                                                  prefix, precision = "f64";
  std::optional<std::size_t> class_index, gradcam_layer;
  double threshold = 0.5, alpha = 0.5;
  bool suppress = false;
};

struct EvalArgs {
  std::string model, manifest, classifier, method = "legrad", layers = "last40%", out_dir = "report", precision = "f64",
                                                mode = "both", class_source = "predicted", auc_rule = "mean";
  std::optional<std::size_t> limit, gradcam_layer;
  std::size_t workers = 1;
  double threshold = 0.5;
  bool suppress = false;
};

struct ServeArgs {
  std::string model_dir, host = "127.0.0.1", precision = "f64";
  std::vector<std::string> models;
  int port = 8080;
};

struct TinyArgs {
  std::string out, pooling = "cls_token", classifier = "text", precision = "f64";
  std::uint64_t seed = 0;
  std::size_t layers = 2, heads = 2, width = 8, patches = 4, patch_size = 2, classes = 3;
  std::vector<std::string> labels;
  bool pooler_out = false, no_projection = false;
};

/// Resolves a model argument: an existing path as given, otherwise a file in
/// $LEGRAD_MODEL_DIR (with or without the .lgtc extension).
fs::path resolve_model(const std::string& arg) {
  if (fs::exists(arg)) return arg;
  if (const char* dir = std::getenv("LEGRAD_MODEL_DIR")) {
    for (const fs::path& p : {fs::path(dir) / arg, fs::path(dir) / (arg + ".lgtc")})
      if (fs::exists(p)) return p;
  }
  throw Failure{kModelLoad, "model not found: " + arg};
}

template <typename T>
ModelBundle<T> load_model(const std::string& arg) {
  const fs::path path = resolve_model(arg);
  try {
    return load_bundle<T>(path);
  } catch (const std::exception& e) {
    throw Failure{kModelLoad, "cannot load model " + path.string() + ": " + e.what()};
  }
}

Method method_arg(const std::string& s) {
  if (auto m = parse_method(s)) return *m;
  throw Failure{kBadArgs, "unknown method '" + s + "'"};
}

ExplainOptions explain_options(const std::string& method, const std::string& layers,
                               std::optional<std::size_t> gradcam_layer, std::size_t L) {
  ExplainOptions opt;
  opt.method = method_arg(method);
  try {
    opt.layers = parse_layer_spec(layers, L);
    if (gradcam_layer) check_layer(*gradcam_layer, L);
  } catch (const std::exception& e) {
    throw Failure{kBadArgs, e.what()};
  }
  opt.gradcam_layer = gradcam_layer;
  return opt;
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  try {
    write_binary_file(p, bytes);
  } catch (const std::exception& e) {
    throw Failure{kInference, e.what()};
  }
}

template <typename T>
int run_explain(const ExplainArgs& a) {
  const int sources = !a.label.empty() + a.class_index.has_value() + !a.embedding.empty();
  if (sources != 1) throw Failure{kBadArgs, "exactly one of --query, --class-index, --embedding is required"};
  const auto bundle = load_model<T>(a.model);
  const ExplainOptions opt = explain_options(a.method, a.layers, a.gradcam_layer, bundle.config.layers);

  Query<T> q;
  try {
    const auto& classifier = bundle.classifier(a.classifier);
    if (!a.label.empty())
      q = query_for_label(classifier, a.label);
    else if (a.class_index)
      q = query_for_class(classifier, *a.class_index);
    else
      q = query_for_embedding(bundle, a.embedding);
  } catch (const QueryError& e) {
    std::string msg = e.what();
    if (!e.suggestions().empty()) {
      msg += "; did you mean:";
      for (const auto& s : e.suggestions()) msg += " '" + s + "'";
    }
    throw Failure{kBadArgs, msg};
  } catch (const ModelError& e) {
    throw Failure{kBadArgs, e.what()};
  }

  Image img;
  try {
    img = decode_image(read_binary_file(a.image));
  } catch (const std::exception& e) {
    throw Failure{kBadArgs, "cannot read image " + a.image + ": " + e.what()};
  }

  nlohmann::json out;
  Heatmap h;
  Preprocessed<T> pre;
  try {
    pre = preprocess(img, bundle);
    const auto trace = forward_trace(embed(pre.input, bundle.weights, bundle.config), bundle.weights, bundle.config);
    nlohmann::json layers = nlohmann::json::array();
    if (opt.method == Method::legrad) {
      const auto res = legrad_detailed(bundle, trace, q, opt.layers);
      h = res.heatmap;
      for (const auto& s : res.scores) layers.push_back({{"layer", s.layer}, {"score", s.score}});
    } else {
      h = explain(bundle, trace, q, opt);
    }
    if (a.suppress) {
      if (!bundle.embedding("empty")) throw Failure{kBadArgs, "model has no 'empty' embedding"};
      h = background_suppress(h, explain(bundle, trace, query_for_embedding(bundle, "empty"), opt));
    }
    const Mask mask = binarize(h, a.threshold);
    out = heatmap_json(h);
    out["query"] = q.label;
    if (q.class_index) out["class_index"] = *q.class_index;
    out["score"] = embedding_score(image_embedding(trace.tokens.back(), bundle), q);
    out["layers"] = layers;
    out["threshold"] = a.threshold;
    out["foreground_fraction"] =
        static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
    out["suppress_background"] = a.suppress;
    out["image"] = fs::path(a.image).filename().string();
    out["provenance"] = bundle.provenance;
  } catch (const Failure&) {
    throw;
  } catch (const std::exception& e) {
    throw Failure{kInference, std::string("inference failed: ") + e.what()};
  }

  const std::string stem = a.prefix.empty() ? fs::path(a.image).stem().string() : a.prefix;
  const fs::path dir(a.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  write_file(dir / (stem + "_overlay.png"), encode_png(overlay(pre.view, h, a.alpha)));
  write_file(dir / (stem + "_heatmap.png"), heatmap_png(h));
  const std::string text = out.dump(2) + "\n";
  write_file(dir / (stem + "_heatmap.json"), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::cout << (dir / (stem + "_overlay.png")).string() << '\n'
            << (dir / (stem + "_heatmap.png")).string() << '\n'
            << (dir / (stem + "_heatmap.json")).string() << '\n';
  return kOk;
}

template <typename T>
int run_eval(const EvalArgs& a, BenchmarkKind kind) {
  const auto bundle = load_model<T>(a.model);
  BenchmarkParams p;
  p.kind = kind;
  p.explain = explain_options(a.method, a.layers, a.gradcam_layer, bundle.config.layers);
  p.classifier = a.classifier;
  p.threshold = a.threshold;
  p.limit = a.limit;
  p.workers = a.workers;
  p.suppress_background = a.suppress;
  if (a.mode == "positive")
    p.modes = {PerturbMode::positive};
  else if (a.mode == "negative")
    p.modes = {PerturbMode::negative};
  p.class_source = a.class_source == "target" ? ClassSource::target : ClassSource::predicted;
  p.auc_rule = a.auc_rule == "trapezoid" ? AucRule::trapezoid : AucRule::mean;

  std::vector<Sample> manifest;
  try {
    manifest = read_manifest(a.manifest);
  } catch (const std::exception& e) {
    throw Failure{kBadArgs, e.what()};
  }
  EvalRecord rec;
  try {
    rec = run_benchmark(bundle, manifest, p);
    write_reports(rec, a.out_dir);
  } catch (const EvalError& e) {
    throw Failure{std::string(e.what()) == "no samples" ? kBadArgs : kInference, e.what()};
  } catch (const ModelError& e) {
    throw Failure{kBadArgs, e.what()};
  } catch (const std::exception& e) {
    throw Failure{kInference, e.what()};
  }
  std::cout << eval_record_csv(rec);
  for (const auto& r : rec.images)
    if (r.skipped) std::cerr << "skipped " << r.image << ": " << r.reason << '\n';
  return kOk;
}

template <typename T>
int run_serve(const ServeArgs& a) {
  auto registry = std::make_shared<ModelRegistry<T>>();
  std::string dir = a.model_dir;
  if (dir.empty() && a.models.empty()) {
    const char* env = std::getenv("LEGRAD_MODEL_DIR");
    if (!env) throw Failure{kBadArgs, "no models: pass --model-dir, --model, or set LEGRAD_MODEL_DIR"};
    dir = env;
  }
  try {
    if (!dir.empty()) registry->add_directory(dir);
  } catch (const std::exception& e) {
    throw Failure{kModelLoad, e.what()};
  }
  for (const auto& m : a.models) {
    const fs::path path = resolve_model(m);
    registry->add_file(path);
    if (!registry->entries().back().bundle)
      throw Failure{kModelLoad, "cannot load model " + path.string() + ": " + registry->entries().back().error};
  }
  auto service = std::make_shared<const ExplainService<T>>(registry);
  auto svr = make_http_server<T>(service);

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::jthread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    svr->stop();
  });

  if (!svr->bind_to_port(a.host, a.port)) {
    pthread_kill(waiter.native_handle(), SIGTERM);
    throw Failure{kBind, "cannot bind " + a.host + ":" + std::to_string(a.port)};
  }
  std::cerr << "listening on " << a.host << ":" << a.port << " with " << registry->entries().size() << " model(s)\n";
  svr->listen_after_bind();
  pthread_kill(waiter.native_handle(), SIGTERM);
  return kOk;
}

template <typename T>
int run_make_tiny(const TinyArgs& a) {
  TinyVitSpec s;
  s.seed = a.seed;
  s.layers = a.layers;
  s.heads = a.heads;
  s.width = a.width;
  s.patches = a.patches;
  s.patch_size = a.patch_size;
  s.classes = a.labels.empty() ? a.classes : a.labels.size();
  s.pooling = a.pooling == "attn_pooler" ? Pooling::attn_pooler : Pooling::cls_token;
  s.classifier = a.classifier == "head" ? ClassifierKind::learned_head : ClassifierKind::text_embeddings;
  s.pooler_out = a.pooler_out;
  s.projection = !a.no_projection;
  ModelBundle<T> b;
  try {
    b = make_tiny_vit<T>(s);
  } catch (const std::exception& e) {
    throw Failure{kBadArgs, e.what()};
  }
  if (!a.labels.empty()) b.classifiers.front().labels = a.labels;
  try {
    save_bundle(a.out, b);
  } catch (const std::exception& e) {
    throw Failure{kInference, e.what()};
  }
  std::cout << a.out << '\n';
  return kOk;
}

int run_fd_battery(double tolerance, bool json) {
  const auto start = std::chrono::steady_clock::now();
  const auto report = legrad::run_fd_battery(default_fd_battery(), tolerance, analytic_attention_gradient, true);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (json) {
    nlohmann::json j = {{"passed", report.passed}, {"tolerance", report.tolerance}, {"max_rel_error", report.max_rel_error}};
    for (const auto& c : report.configs) {
      nlohmann::json layers = nlohmann::json::array();
      for (const auto& l : c.layers)
        layers.push_back({{"layer", l.layer}, {"max_rel_error", l.max_rel_error}, {"step_stability", l.step_stability}});
      j["configs"].push_back({{"spec", to_string(c.spec)}, {"passed", c.passed}, {"layers", layers}});
    }
    std::cout << j.dump(2) << '\n';
  } else {
    for (const auto& c : report.configs)
      std::cout << (c.passed ? "ok   " : "FAIL ") << to_string(c.spec) << " max_rel_error=" << c.max_rel_error << '\n';
    std::cout << (report.passed ? "PASS" : "FAIL") << " max_rel_error=" << report.max_rel_error << " time=" << seconds
              << "s\n";
  }
  return report.passed ? kOk : kInference;
}

template <typename F>
int with_precision(const std::string& precision, F&& f) {
  if (precision == "f32") return f(float{});
  return f(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LeGrad explainability engine for vision transformers", "legrad"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "legrad 1.0.0");

  const std::vector<std::string> methods = method_names();
  const std::vector<std::string> precisions{"f32", "f64"};

  ExplainArgs ex;
  auto* c_explain = app.add_subcommand("explain", "Explain one image and write overlay PNG, heatmap PNG and JSON");
  c_explain->add_option("--model,-m", ex.model, "Model container (.lgtc) or name inside $LEGRAD_MODEL_DIR")->required();
  c_explain->add_option("--image,-i", ex.image, "Input image (PNG, JPEG, PPM/PGM)")->required();
  c_explain->add_option("--query,-q", ex.label, "Class label to explain");
  c_explain->add_option("--class-index", ex.class_index, "Class index to explain");
  c_explain->add_option("--embedding", ex.embedding, "Named embedding stored in the container to explain");
  c_explain->add_option("--classifier", ex.classifier, "Classifier name (default: first in the container)");
  c_explain->add_option("--method", ex.method, "Explanation method")->check(CLI::IsMember(methods))->capture_default_str();
  c_explain->add_option("--layers", ex.layers, "Layer range: lastP%, all, or a list such as 10,11,12 or 9-12")
      ->capture_default_str();
  c_explain->add_option("--gradcam-layer", ex.gradcam_layer, "Layer for gradcam (default: (2L+1)/3)");
  c_explain->add_option("--threshold", ex.threshold, "Binarization threshold reported in the JSON")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  c_explain->add_flag("--suppress-background", ex.suppress, "Zero pixels highlighted by the 'empty' embedding");
  c_explain->add_option("--alpha", ex.alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  c_explain->add_option("--out-dir,-o", ex.out_dir, "Output directory")->capture_default_str();
  c_explain->add_option("--prefix", ex.prefix, "Output file prefix (default: image stem)");
  c_explain->add_option("--precision", ex.precision, "Arithmetic precision")
      ->check(CLI::IsMember(precisions))
      ->capture_default_str();

  EvalArgs ev;
  auto add_eval = [&](const char* name, const char* help) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("--model,-m", ev.model, "Model container (.lgtc) or name inside $LEGRAD_MODEL_DIR")->required();
    c->add_option("--manifest", ev.manifest, "JSONL dataset manifest")->required()->check(CLI::ExistingFile);
    c->add_option("--classifier", ev.classifier, "Classifier name (default: first in the container)");
    c->add_option("--method", ev.method, "Explanation method")->check(CLI::IsMember(methods))->capture_default_str();
    c->add_option("--layers", ev.layers, "Layer range: lastP%, all, or a list")->capture_default_str();
    c->add_option("--gradcam-layer", ev.gradcam_layer, "Layer for gradcam (default: (2L+1)/3)");
    c->add_option("--limit", ev.limit, "Evaluate at most N samples");
    c->add_option("--workers", ev.workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--out-dir,-o", ev.out_dir, "Directory for report.json and report.csv")->capture_default_str();
    c->add_flag("--suppress-background", ev.suppress, "Zero pixels highlighted by the 'empty' embedding");
    c->add_option("--precision", ev.precision, "Arithmetic precision")
        ->check(CLI::IsMember(precisions))
        ->capture_default_str();
    return c;
  };
  auto* c_seg = add_eval("eval-seg", "Segmentation benchmark: pixel accuracy, mIoU, mAP");
  c_seg->add_option("--threshold", ev.threshold, "Binarization threshold")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  auto* c_points = add_eval("eval-points", "Point-annotation benchmark: p-mIoU");
  c_points->add_option("--threshold", ev.threshold, "Binarization threshold")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  auto* c_perturb = add_eval("eval-perturb", "Perturbation benchmark: accuracy curve and AUC");
  c_perturb->add_option("--mode", ev.mode, "Erasure order")
      ->check(CLI::IsMember({"positive", "negative", "both"}))
      ->capture_default_str();
  c_perturb->add_option("--class-source", ev.class_source, "Reference class")
      ->check(CLI::IsMember({"predicted", "target"}))
      ->capture_default_str();
  c_perturb->add_option("--auc-rule", ev.auc_rule, "AUC rule")
      ->check(CLI::IsMember({"mean", "trapezoid"}))
      ->capture_default_str();

  ServeArgs sv;
  auto* c_serve = app.add_subcommand("serve", "Serve the /v1 HTTP API");
  c_serve->add_option("--model-dir", sv.model_dir, "Directory of .lgtc containers (default: $LEGRAD_MODEL_DIR)");
  c_serve->add_option("--model,-m", sv.models, "Additional model container; may be repeated");
  c_serve->add_option("--host", sv.host, "Bind address")->capture_default_str();
  c_serve->add_option("--port,-p", sv.port, "Bind port")->check(CLI::Range(0, 65535))->capture_default_str();
  c_serve->add_option("--precision", sv.precision, "Arithmetic precision")
      ->check(CLI::IsMember(precisions))
      ->capture_default_str();

  TinyArgs tv;
  auto* c_tiny = app.add_subcommand("make-tiny", "Write a seeded random tiny ViT container");
  c_tiny->add_option("--out,-o", tv.out, "Output container path")->required();
  c_tiny->add_option("--seed", tv.seed, "PRNG seed")->capture_default_str();
  c_tiny->add_option("--layers", tv.layers, "Transformer blocks")->check(CLI::PositiveNumber)->capture_default_str();
  c_tiny->add_option("--heads", tv.heads, "Attention heads")->check(CLI::PositiveNumber)->capture_default_str();
  c_tiny->add_option("--width", tv.width, "Token width")->check(CLI::PositiveNumber)->capture_default_str();
  c_tiny->add_option("--patches", tv.patches, "Patch count (perfect square)")->check(CLI::PositiveNumber)->capture_default_str();
  c_tiny->add_option("--patch-size", tv.patch_size, "Patch side in pixels")->check(CLI::PositiveNumber)->capture_default_str();
  c_tiny->add_option("--classes", tv.classes, "Classifier columns")->check(CLI::PositiveNumber)->capture_default_str();
  c_tiny->add_option("--labels", tv.labels, "Class labels (overrides --classes)")->delimiter(',');
  c_tiny->add_option("--pooling", tv.pooling, "Pooling head")
      ->check(CLI::IsMember({"cls_token", "attn_pooler"}))
      ->capture_default_str();
  c_tiny->add_option("--classifier", tv.classifier, "Classifier kind")
      ->check(CLI::IsMember({"text", "head"}))
      ->capture_default_str();
  c_tiny->add_flag("--pooler-out", tv.pooler_out, "Add an output projection to the attentional pooler");
  c_tiny->add_flag("--no-projection", tv.no_projection, "Omit the final embedding projection");
  c_tiny->add_option("--precision", tv.precision, "Stored dtype")->check(CLI::IsMember(precisions))->capture_default_str();

  double fd_tol = 1e-4;
  bool fd_json = false;
  auto* c_fd = app.add_subcommand("fd-battery", "Check attention gradients against finite differences");
  c_fd->add_option("--tolerance", fd_tol, "Maximum relative error")->capture_default_str();
  c_fd->add_flag("--json", fd_json, "Print the report as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadArgs;
  }

  try {
    if (c_explain->parsed()) return with_precision(ex.precision, [&](auto t) { return run_explain<decltype(t)>(ex); });
    if (c_seg->parsed())
      return with_precision(ev.precision, [&](auto t) { return run_eval<decltype(t)>(ev, BenchmarkKind::segmentation); });
    if (c_points->parsed())
      return with_precision(ev.precision, [&](auto t) { return run_eval<decltype(t)>(ev, BenchmarkKind::points); });
    if (c_perturb->parsed())
      return with_precision(ev.precision,
                            [&](auto t) { return run_eval<decltype(t)>(ev, BenchmarkKind::perturbation); });
    if (c_serve->parsed()) return with_precision(sv.precision, [&](auto t) { return run_serve<decltype(t)>(sv); });
    if (c_tiny->parsed()) return with_precision(tv.precision, [&](auto t) { return run_make_tiny<decltype(t)>(tv); });
    if (c_fd->parsed()) return run_fd_battery(fd_tol, fd_json);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInference;
  }
  return kBadArgs;
}
