#pragma once

// HTTP/JSON service over the explanation engine. Request handling lives in
// ExplainService (no sockets involved) and `make_http_server` wires it into
// cpp-httplib routes under /v1.

#include <chrono>
#include <filesystem>
#include <memory>

#include "httplib.h"
#include "json.hpp"
#include "legrad/eval.hpp"

namespace legrad {

// ---------------------------------------------------------------------------
// base64

inline std::string base64_encode(std::span<const std::uint8_t> in) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    for (int s : {18, 12, 6, 0}) out += kAlphabet[(v >> s) & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = in[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

/// Accepts standard and URL-safe alphabets, optional padding, embedded
/// whitespace, and a leading "data:...;base64," prefix.
inline std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view in) {
  if (in.starts_with("data:")) {
    const auto comma = in.find(',');
    if (comma == std::string_view::npos) return std::nullopt;
    in.remove_prefix(comma + 1);
  }
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+' || c == '-') return 62;
    if (c == '/' || c == '_') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(in.size() * 3 / 4);
  std::uint32_t acc = 0;
  int bits = 0;
  bool padding = false;
  for (char c : in) {
    if (c == ' ' || c == '\n' || c == '\r' || c == '\t') continue;
    if (c == '=') {
      padding = true;
      continue;
    }
    const int v = value(c);
    if (v < 0 || padding) return std::nullopt;
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
    }
  }
  if (bits >= 6) return std::nullopt;
  return out;
}

// ---------------------------------------------------------------------------
// Model registry

template <typename T>
struct ModelEntry {
  std::string id;
  std::filesystem::path path;
  std::shared_ptr<const ModelBundle<T>> bundle;  // null when invalid
  std::string error;
};

/// Bundles loaded once and shared read-only by every request.
template <typename T>
class ModelRegistry {
 public:
  void add_file(const std::filesystem::path& path) {
    ModelEntry<T> e;
    e.id = path.stem().string();
    e.path = path;
    try {
      e.bundle = std::make_shared<const ModelBundle<T>>(load_bundle<T>(path));
    } catch (const std::exception& ex) {
      e.error = ex.what();
    }
    entries_.push_back(std::move(e));
  }

  /// Every *.lgtc file in `dir`, sorted by file name.
  void add_directory(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ModelError("model directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& it : std::filesystem::directory_iterator(dir))
      if (it.is_regular_file() && it.path().extension() == ".lgtc") files.push_back(it.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add_file(f);
  }

  void add_bundle(std::string id, ModelBundle<T> bundle) {
    entries_.push_back({std::move(id), {}, std::make_shared<const ModelBundle<T>>(std::move(bundle)), {}});
  }

  const std::vector<ModelEntry<T>>& entries() const { return entries_; }

  const ModelEntry<T>* find(std::string_view id) const {
    for (const auto& e : entries_)
      if (e.id == id) return &e;
    return nullptr;
  }

 private:
  std::vector<ModelEntry<T>> entries_;
};

// ---------------------------------------------------------------------------
// Service

inline constexpr std::size_t kMaxImageBytes = 8u << 20;

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

/// Status-carrying error raised while validating or serving a request.
class RequestError : public Error {
 public:
  RequestError(int status, const std::string& what, nlohmann::json extra = nlohmann::json::object())
      : Error(what), status_(status), extra_(std::move(extra)) {}
  int status() const { return status_; }
  const nlohmann::json& extra() const { return extra_; }

 private:
  int status_;
  nlohmann::json extra_;
};

/// A parsed explain/perturb request. The image arrives either as a base64
/// JSON field or as a multipart file part.
struct ExplainRequest {
  std::string model;
  std::vector<std::uint8_t> image;
  std::optional<std::string> label;
  std::optional<std::size_t> class_index;
  std::optional<std::string> embedding_name;
  std::string classifier;
  Method method = Method::legrad;
  nlohmann::json layer_range;  // null, spec string, or integer list
  std::optional<std::size_t> gradcam_layer;
  double threshold = 0.5;
  bool suppress_background = false;
  bool include_values = true;
  bool include_timing = false;
  PerturbMode mode = PerturbMode::negative;
  ClassSource class_source = ClassSource::predicted;
};

inline ExplainRequest parse_explain_request(const nlohmann::json& j, std::optional<std::vector<std::uint8_t>> image) {
  if (!j.is_object()) throw RequestError(400, "request body must be a JSON object");
  ExplainRequest r;
  try {
    r.model = j.value("model", std::string{});
    if (image) {
      r.image = std::move(*image);
    } else {
      if (!j.contains("image") || !j["image"].is_string()) throw RequestError(400, "missing image");
      const auto& s = j["image"].get_ref<const std::string&>();
      if (s.size() / 4 * 3 > kMaxImageBytes + 3) throw RequestError(413, "image exceeds 8 MB");
      auto bytes = base64_decode(s);
      if (!bytes) throw RequestError(400, "image is not valid base64");
      r.image = std::move(*bytes);
    }
    if (r.image.size() > kMaxImageBytes) throw RequestError(413, "image exceeds 8 MB");

    if (!j.contains("query") || !j["query"].is_object()) throw RequestError(400, "missing query object");
    const auto& q = j["query"];
    int sources = 0;
    if (q.contains("label")) r.label = q["label"].get<std::string>(), ++sources;
    if (q.contains("class_index")) r.class_index = q["class_index"].get<std::size_t>(), ++sources;
    if (q.contains("embedding_name")) r.embedding_name = q["embedding_name"].get<std::string>(), ++sources;
    if (sources != 1) throw RequestError(400, "query needs exactly one of label, class_index, embedding_name");

    r.classifier = j.value("classifier", std::string{});
    const std::string method = j.value("method", std::string("legrad"));
    const auto m = parse_method(method);
    if (!m) throw RequestError(400, "unknown method '" + method + "'", {{"methods", method_names()}});
    r.method = *m;
    if (j.contains("layer_range")) r.layer_range = j["layer_range"];
    if (j.contains("gradcam_layer")) r.gradcam_layer = j["gradcam_layer"].get<std::size_t>();
    r.threshold = j.value("threshold", 0.5);
    if (!(r.threshold >= 0.0 && r.threshold <= 1.0)) throw RequestError(400, "threshold must be in [0, 1]");
    r.suppress_background = j.value("suppress_background", false);
    r.include_values = j.value("include_values", true);
    r.include_timing = j.value("include_timing", false);
    const std::string mode = j.value("mode", std::string("negative"));
    if (mode != "positive" && mode != "negative") throw RequestError(400, "mode must be positive or negative");
    r.mode = mode == "positive" ? PerturbMode::positive : PerturbMode::negative;
    const std::string source = j.value("class_source", std::string("predicted"));
    if (source != "predicted" && source != "target") throw RequestError(400, "class_source must be predicted or target");
    r.class_source = source == "target" ? ClassSource::target : ClassSource::predicted;
  } catch (const nlohmann::json::exception& e) {
    throw RequestError(400, std::string("invalid request field: ") + e.what());
  }
  return r;
}

inline nlohmann::json model_summary(const ViTConfig& c) {
  return {{"layers", c.layers},         {"heads", c.heads},     {"width", c.width},
          {"patches", c.patches()},     {"grid", c.grid()},     {"patch_size", c.patch_size},
          {"image_size", c.image_size}, {"pooling", to_string(c.pooling)}};
}

template <typename T>
class ExplainService {
 public:
  explicit ExplainService(std::shared_ptr<const ModelRegistry<T>> registry) : registry_(std::move(registry)) {}

  HttpResult models() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : registry_->entries()) {
      nlohmann::json m = {{"id", e.id}};
      if (e.bundle) {
        m["status"] = "ok";
        m["config"] = model_summary(e.bundle->config);
        nlohmann::json cls = nlohmann::json::array();
        for (const auto& c : e.bundle->classifiers)
          cls.push_back({{"name", c.name}, {"kind", to_string(c.kind)}, {"classes", c.classes()}});
        m["classifiers"] = cls;
        m["provenance"] = e.bundle->provenance;
      } else {
        m["status"] = "invalid";
        m["error"] = e.error;
      }
      out.push_back(std::move(m));
    }
    return {200, out};
  }

  HttpResult vocab(std::string_view id) const {
    return guard([&] {
      const ModelBundle<T>& b = bundle(std::string(id));
      nlohmann::json cls = nlohmann::json::array();
      for (const auto& c : b.classifiers) {
        std::vector<std::size_t> idx(c.classes());
        std::iota(idx.begin(), idx.end(), 0);
        nlohmann::json entry = {{"name", c.name}, {"kind", to_string(c.kind)}, {"class_indices", idx}};
        entry["labels"] = c.labels;
        cls.push_back(std::move(entry));
      }
      nlohmann::json emb = nlohmann::json::array();
      for (const auto& e : b.embeddings) emb.push_back({{"name", e.name}, {"prompt", e.prompt}});
      const auto& def = b.classifier("");
      std::vector<std::size_t> idx(def.classes());
      std::iota(idx.begin(), idx.end(), 0);
      return HttpResult{200,
                        {{"model", id}, {"labels", def.labels}, {"class_indices", idx}, {"classifiers", cls}, {"embeddings", emb}}};
    });
  }

  HttpResult explain_json(const std::string& body) const {
    return guard([&] { return explain(parse_explain_request(parse_body(body), std::nullopt)); });
  }

  HttpResult perturb_json(const std::string& body) const {
    return guard([&] { return perturb(parse_explain_request(parse_body(body), std::nullopt)); });
  }

  /// Multipart form: file part "image" plus either a "request" part holding
  /// the JSON fields or individual fields with the same names.
  HttpResult explain_multipart(const httplib::Request& req) const {
    return guard([&] { return explain(parse_multipart(req)); });
  }

  HttpResult perturb_multipart(const httplib::Request& req) const {
    return guard([&] { return perturb(parse_multipart(req)); });
  }

  HttpResult explain(const ExplainRequest& r) const {
    const auto start = std::chrono::steady_clock::now();
    const ModelBundle<T>& b = bundle(r.model);
    const Classifier<T>& classifier = find_classifier(b, r.classifier);
    const Query<T> q = make_query(b, classifier, r);
    const ExplainOptions opt = options(b, r);
    const Preprocessed<T> pre = preprocess(decode(r.image), b);

    nlohmann::json out;
    try {
      const auto trace = forward_trace(embed(pre.input, b.weights, b.config), b.weights, b.config);
      Heatmap h;
      nlohmann::json layers = nlohmann::json::array();
      if (opt.method == Method::legrad) {
        const auto range = opt.layers.empty() ? default_layer_range(b.config.layers) : opt.layers;
        const auto res = legrad_detailed(b, trace, q, range);
        h = res.heatmap;
        for (std::size_t i = 0; i < res.layers.size(); ++i) {
          const auto& e = res.layers[i];
          const std::size_t off = e.has_cls ? 1 : 0;
          double mn = 0, mx = 0, sum = 0;
          for (std::size_t j = off; j < e.values.size(); ++j) {
            const double v = static_cast<double>(e.values[j]);
            mn = j == off ? v : std::min(mn, v);
            mx = j == off ? v : std::max(mx, v);
            sum += v;
          }
          layers.push_back({{"layer", e.layer},
                            {"score", res.scores[i].score},
                            {"min", mn},
                            {"max", mx},
                            {"mean", sum / static_cast<double>(e.values.size() - off)}});
        }
      } else {
        h = legrad::explain(b, trace, q, opt);
      }
      if (r.suppress_background) {
        if (!b.embedding("empty")) throw RequestError(400, "model has no 'empty' embedding for background suppression");
        h = background_suppress(h, legrad::explain(b, trace, query_for_embedding(b, "empty"), opt));
      }
      const Mask mask = binarize(h, r.threshold);
      const double fg = static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
      std::vector<std::uint8_t> mask_px(mask.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask_px[i] = mask[i] ? 255 : 0;

      nlohmann::json hm = {{"W", h.width},
                           {"H", h.height},
                           {"grid", h.grid},
                           {"patch_grid", h.patch_grid},
                           {"png_base64", base64_encode(heatmap_png(h))},
                           {"mask_png_base64", base64_encode(encode_png(mask_px, h.width, h.height, 1))}};
      if (r.include_values) hm["values"] = h.values;
      out = {{"model", r.model.empty() ? registry_->entries().front().id : r.model},
             {"method", to_string(opt.method)},
             {"query", query_json(q)},
             {"score", embedding_score(image_embedding(trace.tokens.back(), b), q)},
             {"layer_range", h.layers},
             {"threshold", r.threshold},
             {"foreground_fraction", fg},
             {"suppress_background", r.suppress_background},
             {"heatmap", hm},
             {"layers", layers},
             {"provenance", b.provenance}};
    } catch (const RequestError&) {
      throw;
    } catch (const std::exception& e) {
      throw RequestError(500, std::string("inference failed: ") + e.what());
    }
    if (r.include_timing)
      out["timing_ms"] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return {200, out};
  }

  HttpResult perturb(const ExplainRequest& r) const {
    const ModelBundle<T>& b = bundle(r.model);
    const Classifier<T>& classifier = find_classifier(b, r.classifier);
    if (r.embedding_name) throw RequestError(400, "perturbation needs a class query (label or class_index)");
    const Query<T> target = make_query(b, classifier, r);
    const ExplainOptions opt = options(b, r);
    const Preprocessed<T> pre = preprocess(decode(r.image), b);
    try {
      const auto trace = forward_trace(embed(pre.input, b.weights, b.config), b.weights, b.config);
      const std::size_t predicted = argmax(classify(image_embedding(trace.tokens.back(), b), classifier));
      const std::size_t reference = r.class_source == ClassSource::target ? *target.class_index : predicted;
      Heatmap h = legrad::explain(b, trace, query_for_class(classifier, reference), opt);
      const auto curve = perturb_curve(b, classifier, pre.input, h, r.mode, r.class_source, reference);
      nlohmann::json out = curve_json(curve);
      out["model"] = r.model.empty() ? registry_->entries().front().id : r.model;
      out["method"] = to_string(opt.method);
      out["predicted_class"] = predicted;
      out["reference_class"] = reference;
      return HttpResult{200, out};
    } catch (const std::exception& e) {
      throw RequestError(500, std::string("inference failed: ") + e.what());
    }
  }

 private:
  template <typename F>
  static HttpResult guard(F&& f) {
    try {
      return f();
    } catch (const RequestError& e) {
      nlohmann::json body = e.extra();
      body["error"] = e.what();
      return {e.status(), body};
    } catch (const std::exception& e) {
      return {500, {{"error", e.what()}}};
    }
  }

  static nlohmann::json parse_body(const std::string& body) {
    try {
      return nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw RequestError(400, std::string("malformed JSON: ") + e.what());
    }
  }

  static ExplainRequest parse_multipart(const httplib::Request& req) {
    if (!req.has_file("image")) throw RequestError(400, "multipart request needs an 'image' file part");
    const auto file = req.get_file_value("image");
    auto has = [&](const char* key) { return req.has_file(key); };
    auto field = [&](const char* key) { return req.get_file_value(key).content; };
    if (file.content.size() > kMaxImageBytes) throw RequestError(413, "image exceeds 8 MB");
    nlohmann::json j = nlohmann::json::object();
    if (has("request")) {
      j = parse_body(field("request"));
    } else {
      for (const char* key : {"model", "method", "classifier", "mode", "class_source"})
        if (has(key)) j[key] = field(key);
      if (has("layer_range")) j["layer_range"] = field("layer_range");
      nlohmann::json q = nlohmann::json::object();
      if (has("label")) q["label"] = field("label");
      if (has("embedding_name")) q["embedding_name"] = field("embedding_name");
      try {
        if (has("class_index")) q["class_index"] = std::stoul(field("class_index"));
        if (has("threshold")) j["threshold"] = std::stod(field("threshold"));
        if (has("gradcam_layer")) j["gradcam_layer"] = std::stoul(field("gradcam_layer"));
      } catch (const std::exception&) {
        throw RequestError(400, "malformed numeric form field");
      }
      if (has("suppress_background")) j["suppress_background"] = field("suppress_background") == "true";
      j["query"] = q;
    }
    return parse_explain_request(j, std::vector<std::uint8_t>(file.content.begin(), file.content.end()));
  }

  const ModelBundle<T>& bundle(const std::string& id) const {
    const ModelEntry<T>* e = nullptr;
    if (id.empty()) {
      if (registry_->entries().size() != 1) throw RequestError(400, "request must name a model");
      e = &registry_->entries().front();
    } else {
      e = registry_->find(id);
    }
    if (!e) throw RequestError(404, "unknown model '" + id + "'");
    if (!e->bundle) throw RequestError(404, "model '" + e->id + "' is invalid: " + e->error);
    return *e->bundle;
  }

  static const Classifier<T>& find_classifier(const ModelBundle<T>& b, const std::string& name) {
    try {
      return b.classifier(name);
    } catch (const std::exception& e) {
      throw RequestError(400, e.what());
    }
  }

  static Query<T> make_query(const ModelBundle<T>& b, const Classifier<T>& c, const ExplainRequest& r) {
    try {
      if (r.label) return query_for_label(c, *r.label);
      if (r.class_index) return query_for_class(c, *r.class_index);
      return query_for_embedding(b, *r.embedding_name);
    } catch (const QueryError& e) {
      throw RequestError(400, e.what(), {{"suggestions", e.suggestions()}});
    }
  }

  static ExplainOptions options(const ModelBundle<T>& b, const ExplainRequest& r) {
    ExplainOptions opt;
    opt.method = r.method;
    opt.gradcam_layer = r.gradcam_layer;
    const std::size_t L = b.config.layers;
    try {
      if (r.layer_range.is_string()) {
        opt.layers = parse_layer_spec(r.layer_range.get<std::string>(), L);
      } else if (r.layer_range.is_array()) {
        for (const auto& v : r.layer_range) {
          if (!v.is_number_integer()) throw Error("layer_range entries must be integers");
          const auto x = v.get<std::int64_t>();
          if (x < 1 || static_cast<std::size_t>(x) > L)
            throw Error("layer " + std::to_string(x) + " outside [1, " + std::to_string(L) + "]");
          opt.layers.push_back(static_cast<std::size_t>(x));
        }
        validate_layer_range(opt.layers, L);
      } else if (!r.layer_range.is_null()) {
        throw Error("layer_range must be a string or an integer list");
      }
      if (opt.gradcam_layer) check_layer(*opt.gradcam_layer, L);
    } catch (const std::exception& e) {
      throw RequestError(400, e.what());
    }
    return opt;
  }

  static Image decode(const std::vector<std::uint8_t>& bytes) {
    try {
      return decode_image(bytes);
    } catch (const std::exception& e) {
      throw RequestError(422, std::string("undecodable image: ") + e.what());
    }
  }

  static nlohmann::json query_json(const Query<T>& q) {
    nlohmann::json j = {{"label", q.label}, {"normalized", q.normalize}};
    j["class_index"] = q.class_index ? nlohmann::json(*q.class_index) : nlohmann::json(nullptr);
    return j;
  }

  std::shared_ptr<const ModelRegistry<T>> registry_;
};

// ---------------------------------------------------------------------------
// HTTP wiring

inline void send_json(httplib::Response& res, const HttpResult& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

template <typename T>
std::unique_ptr<httplib::Server> make_http_server(std::shared_ptr<const ExplainService<T>> service) {
  auto svr = std::make_unique<httplib::Server>();
  // SO_REUSEADDR without SO_REUSEPORT.
  svr->set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  // base64 inflates by 4/3; the decoded image limit is enforced per request.
  svr->set_payload_max_length(kMaxImageBytes * 2);
  svr->set_default_headers({{"Access-Control-Allow-Origin", "*"},
                            {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                            {"Access-Control-Allow-Headers", "Content-Type"}});
  svr->Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  svr->Get("/v1/models", [service](const httplib::Request&, httplib::Response& res) { send_json(res, service->models()); });
  svr->Get(R"(/v1/models/([^/]+)/vocab)", [service](const httplib::Request& req, httplib::Response& res) {
    send_json(res, service->vocab(req.matches[1].str()));
  });
  auto post = [&](const char* path, auto json_handler, auto multipart_handler) {
    svr->Post(path, [service, json_handler, multipart_handler](const httplib::Request& req, httplib::Response& res) {
      if (req.is_multipart_form_data())
        send_json(res, ((*service).*multipart_handler)(req));
      else
        send_json(res, ((*service).*json_handler)(req.body));
    });
  };
  post("/v1/explain", &ExplainService<T>::explain_json, &ExplainService<T>::explain_multipart);
  post("/v1/perturb", &ExplainService<T>::perturb_json, &ExplainService<T>::perturb_multipart);
  svr->set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const char* msg = res.status == 413 ? "payload too large" : res.status == 404 ? "not found" : "request failed";
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  });
  return svr;
}

}  // namespace legrad
