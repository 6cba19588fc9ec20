#include "idinv/service.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>

#include "idinv/checkpoint.hpp"

namespace idinv::frontends {

using workspace::StrictObject;

fs::path workspace_home() {
  const char* env = std::getenv("IDINV_HOME");
  return env && *env ? fs::path(env) : fs::path("idinv-home");
}

fs::path resolve_checkpoint(const std::string& ref, const fs::path& home) {
  IDINV_REQUIRE(!ref.empty(), "checkpoint reference is empty");
  if (fs::is_directory(ref)) return ref;
  IDINV_REQUIRE(ref.find('/') == std::string::npos && ref != "." && ref != "..", "checkpoint id '" + ref + "' is not a plain name");
  const fs::path dir = home / "checkpoints" / ref;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::kNotFound, "unknown checkpoint '" + ref + "' (looked in " + dir.string() + ")");
  return dir;
}

const evaluation::SemanticBoundary& ModelBundle::boundary(const std::string& attribute) const {
  for (const auto& b : boundaries)
    if (b.attribute == attribute) return b;
  throw Error(ErrorKind::kNotFound, "checkpoint '" + id + "' has no boundary for '" + attribute + "'");
}

std::shared_ptr<const ModelBundle> load_bundle(const fs::path& dir, const std::string& id) {
  auto ckpt = workspace::load_checkpoint(dir);
  if (!ckpt.generator || !ckpt.encoder || !ckpt.features)
    throw Error(ErrorKind::kInvalidArgument, "checkpoint " + dir.string() + " needs generator, encoder and features");
  std::vector<evaluation::SemanticBoundary> boundaries;
  if (fs::exists(dir / "boundaries.json")) boundaries = workspace::load_boundaries(dir / "boundaries.json");
  return std::make_shared<const ModelBundle>(
      ModelBundle{id, dir, std::move(*ckpt.generator), std::move(*ckpt.encoder), std::move(*ckpt.features), std::move(boundaries)});
}

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error(ErrorKind::kDecode, "base64 length is not a multiple of 4");
  std::vector<unsigned char> out(3 * text.size() / 4 + 1);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorKind::kDecode, "invalid base64");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string image_to_base64(const Image<float>& image) { return base64_encode(workspace::encode_png(image)); }

Image<float> image_from_base64(const std::string& text, const std::string& field) {
  try {
    return workspace::decode_png(base64_decode(text), field);
  } catch (const Error& e) {
    throw Error(ErrorKind::kDecode, field + ": " + e.message());
  }
}

Reply error_reply(const std::exception& e) {
  json body = {{"error", e.what()}};
  int status = 500;
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    body["error"] = err->message();
    body["kind"] = error_kind_name(err->kind());
    switch (err->kind()) {
      case ErrorKind::kInvalidArgument:
      case ErrorKind::kDecode: status = 400; break;
      case ErrorKind::kNotFound: status = 404; break;
      case ErrorKind::kDegenerateMask: status = 422; break;
      default: status = 500;
    }
    if (const auto* step = dynamic_cast<const StepFailure*>(err)) {
      body["step"] = step->step();
      json tail = json::array();
      for (double v : step->tail()) tail.push_back(std::isfinite(v) ? json(v) : json(nullptr));
      body["trace_tail"] = tail;
    }
  } else if (dynamic_cast<const json::exception*>(&e)) {
    status = 400;
    body["kind"] = "invalid-argument";
  }
  return {status, body};
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::optional<editing::LayerRange> parse_layers(const json& j, const std::string& path) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
    throw Error(ErrorKind::kInvalidArgument, path + ": expected [begin, end)");
  return editing::LayerRange{j[0].get<int>(), j[1].get<int>()};
}

json layers_json(const std::optional<editing::LayerRange>& r) {
  return r ? json::array({r->begin, r->end}) : json(nullptr);
}

// Grey levels of the first channel, black 0 and white 1.
Mask<float> mask_from_image(const Image<float>& img) {
  Mask<float> m(img.height, img.width);
  m.weights = (img.pixels.head(m.weights.size()) + 1.0f) * 0.5f;
  return m;
}

struct Source {
  LatentCode<float> code;
  std::optional<inversion::InversionResult<float>> inverted;
};

// A request item is either a base64 PNG (inverted first) or a code object.
Source resolve_source(const ModelBundle& m, const json& item, const inversion::InversionConfig& cfg, const std::string& field) {
  if (item.is_string()) {
    auto r = inversion::invert(m.g, m.e, m.f, image_from_base64(item.get<std::string>(), field), cfg);
    auto code = r.code;
    return {std::move(code), std::move(r)};
  }
  if (item.is_object()) {
    auto code = workspace::parse_code(item, field);
    IDINV_REQUIRE(code.space == LatentSpace::kW && code.layers() == m.g.layers() && code.width() == m.g.latent_dim(),
                  field + ": code does not match the checkpoint's generator");
    return {std::move(code), std::nullopt};
  }
  throw Error(ErrorKind::kInvalidArgument, field + ": expected a base64 PNG string or a code object");
}

json source_json(const Source& s) {
  if (!s.inverted) return {{"code", workspace::to_json(s.code)}};
  return {{"code", workspace::to_json(s.code)},
          {"reconstruction", image_to_base64(s.inverted->reconstruction)},
          {"terms", workspace::to_json(s.inverted->final)},
          {"initial_terms", workspace::to_json(s.inverted->initial)},
          {"steps_used", s.inverted->steps_used}};
}

}  // namespace

Service::Service(ServiceConfig config) : config_(std::move(config)) {
  IDINV_REQUIRE(config_.step_cap >= 0, "step cap must be non-negative");
}

std::shared_ptr<const ModelBundle> Service::bundle(const std::string& id) {
  std::lock_guard lock(cache_mutex_);
  auto it = cache_.find(id);
  if (it != cache_.end()) return it->second;
  auto b = load_bundle(resolve_checkpoint(id, config_.home), id);
  cache_[id] = b;
  return b;
}

void Service::reload(const std::string& id) {
  std::unique_lock swap(swap_);
  auto fresh = load_bundle(resolve_checkpoint(id, config_.home), id);
  std::lock_guard lock(cache_mutex_);
  cache_[id] = std::move(fresh);
}

Reply Service::handle(const std::string& method, const std::string& path, const std::string& body,
                      const std::map<std::string, std::string>& query) {
  std::shared_lock swap(swap_);
  try {
    if (method == "GET" && path == "/health") return {200, health()};
    if (method == "GET" && path == "/boundaries") {
      auto it = query.find("checkpoint");
      return {200, boundaries(it == query.end() ? config_.default_checkpoint : it->second)};
    }
    if (method != "POST") return {404, {{"error", "no route for " + method + " " + path}, {"kind", "not-found"}}};
    const auto req = json::parse(body);
    if (path == "/invert") return {200, invert(req)};
    if (path == "/edit") return {200, edit(req)};
    if (path == "/interpolate") return {200, interpolate(req)};
    if (path == "/mix") return {200, mix(req)};
    if (path == "/diffuse") return {200, diffuse(req)};
    return {404, {{"error", "no route for " + method + " " + path}, {"kind", "not-found"}}};
  } catch (const std::exception& e) {
    return error_reply(e);
  }
}

json Service::health() {
  return {{"status", "ok"}, {"default_checkpoint", config_.default_checkpoint}, {"step_cap", config_.step_cap}};
}

json Service::boundaries(const std::string& id) {
  const auto m = bundle(id);
  json list = json::array();
  for (const auto& b : m->boundaries) list.push_back(workspace::to_json(b));
  return {{"checkpoint", id}, {"boundaries", list}};
}

namespace {

// Inversion settings from the optional "inversion" object, with the step count capped.
inversion::InversionConfig request_inversion(const json& j, int cap) {
  auto cfg = j.is_null() ? inversion::InversionConfig{} : workspace::parse_inversion_config(j, "inversion");
  IDINV_REQUIRE(cfg.init != inversion::InitMode::kGiven, "inversion.init: 'given' is not available over the API");
  cfg.steps = std::min(cfg.steps, cap);
  return cfg;
}

}  // namespace

json Service::invert(const json& req) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string checkpoint = config_.default_checkpoint, image, mask;
  json inv;
  bool with_trace = false;
  StrictObject o(req, "");
  o.get("checkpoint", checkpoint).get("image", image).get("mask", mask).get("inversion", inv).get("trace", with_trace);
  o.finish();
  IDINV_REQUIRE(!image.empty(), "image: required");
  auto cfg = request_inversion(inv, config_.step_cap);
  if (!mask.empty()) cfg.mask = mask_from_image(image_from_base64(mask, "mask"));
  const auto m = bundle(checkpoint);
  const auto r = inversion::invert(m->g, m->e, m->f, image_from_base64(image), cfg);
  json out = {{"image", image_to_base64(r.reconstruction)},
              {"code", workspace::to_json(r.code)},
              {"terms", workspace::to_json(r.final)},
              {"initial_terms", workspace::to_json(r.initial)},
              {"steps_used", r.steps_used},
              {"params", {{"checkpoint", checkpoint}, {"inversion", workspace::to_json(cfg)}}}};
  if (with_trace) {
    json trace = json::array();
    for (const auto& t : r.trace) {
      auto row = workspace::to_json(t.terms);
      row["step"] = t.step;
      trace.push_back(row);
    }
    out["trace"] = trace;
  }
  out["timing_ms"] = elapsed_ms(t0);
  return out;
}

json Service::edit(const json& req) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string checkpoint = config_.default_checkpoint, attribute;
  json source, inv, layers;
  double alpha = 0.0;
  StrictObject o(req, "");
  o.get("checkpoint", checkpoint).get("source", source).get("boundary", attribute).get("alpha", alpha);
  o.get("layers", layers).get("inversion", inv);
  o.finish();
  IDINV_REQUIRE(!source.is_null(), "source: required");
  IDINV_REQUIRE(std::isfinite(alpha), "alpha must be finite");
  const auto cfg = request_inversion(inv, config_.step_cap);
  const auto m = bundle(checkpoint);
  const editing::EditSpec spec{m->boundary(attribute), alpha, parse_layers(layers, "layers")};
  const auto src = resolve_source(*m, source, cfg, "source");
  const auto edited = editing::shift_code(src.code, spec);
  json out = {{"image", image_to_base64(synthesis::generate(m->g, edited))},
              {"code", workspace::to_json(edited)},
              {"source", source_json(src)},
              {"params",
               {{"checkpoint", checkpoint},
                {"boundary", attribute},
                {"alpha", alpha},
                {"layers", layers_json(spec.layers)},
                {"inversion", workspace::to_json(cfg)}}}};
  out["timing_ms"] = elapsed_ms(t0);
  return out;
}

json Service::interpolate(const json& req) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string checkpoint = config_.default_checkpoint;
  json a, b, inv, lambdas = json::array({0.5});
  StrictObject o(req, "");
  o.get("checkpoint", checkpoint).get("a", a).get("b", b).get("lambdas", lambdas).get("inversion", inv);
  o.finish();
  IDINV_REQUIRE(!a.is_null() && !b.is_null(), "a and b: required");
  IDINV_REQUIRE(lambdas.is_array() && !lambdas.empty(), "lambdas: expected a non-empty array");
  const auto cfg = request_inversion(inv, config_.step_cap);
  const auto m = bundle(checkpoint);
  const auto sa = resolve_source(*m, a, cfg, "a");
  const auto sb = resolve_source(*m, b, cfg, "b");
  json images = json::array(), used = json::array();
  for (const auto& l : lambdas) {
    IDINV_REQUIRE(l.is_number(), "lambdas: expected numbers");
    const double lambda = l.get<double>();
    images.push_back(image_to_base64(editing::interpolate(m->g, sa.code, sb.code, lambda)));
    used.push_back(lambda);
  }
  json out = {{"images", images},
              {"a", source_json(sa)},
              {"b", source_json(sb)},
              {"params", {{"checkpoint", checkpoint}, {"lambdas", used}, {"inversion", workspace::to_json(cfg)}}}};
  out["timing_ms"] = elapsed_ms(t0);
  return out;
}

json Service::mix(const json& req) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string checkpoint = config_.default_checkpoint;
  json content, style, inv, layers;
  StrictObject o(req, "");
  o.get("checkpoint", checkpoint).get("content", content).get("style", style).get("layers", layers).get("inversion", inv);
  o.finish();
  IDINV_REQUIRE(!content.is_null() && !style.is_null(), "content and style: required");
  const auto cfg = request_inversion(inv, config_.step_cap);
  const auto m = bundle(checkpoint);
  const auto sc = resolve_source(*m, content, cfg, "content");
  const auto ss = resolve_source(*m, style, cfg, "style");
  const auto range = parse_layers(layers, "layers").value_or(editing::default_style_layers(m->g.layers()));
  const auto mixed = editing::mix_codes(sc.code, ss.code, range);
  json out = {{"image", image_to_base64(synthesis::generate(m->g, mixed))},
              {"code", workspace::to_json(mixed)},
              {"content", source_json(sc)},
              {"style", source_json(ss)},
              {"params", {{"checkpoint", checkpoint}, {"layers", {range.begin, range.end}}, {"inversion", workspace::to_json(cfg)}}}};
  out["timing_ms"] = elapsed_ms(t0);
  return out;
}

json Service::diffuse(const json& req) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string checkpoint = config_.default_checkpoint, target, context;
  json crop, paste, inv;
  editing::DiffusionSpec spec;
  StrictObject o(req, "");
  o.get("checkpoint", checkpoint).get("target", target).get("context", context).get("crop", crop).get("paste", paste);
  o.get("feather", spec.feather).get("inversion", inv);
  o.finish();
  IDINV_REQUIRE(!target.empty() && !context.empty(), "target and context: required");
  IDINV_REQUIRE(!crop.is_null(), "crop: required");
  StrictObject c(crop, "crop");
  c.get("top", spec.crop.top).get("left", spec.crop.left).get("height", spec.crop.height).get("width", spec.crop.width);
  c.finish();
  if (!paste.is_null()) {
    StrictObject p(paste, "paste");
    p.get("top", spec.paste_top).get("left", spec.paste_left);
    p.finish();
  } else {
    spec.paste_top = spec.crop.top;
    spec.paste_left = spec.crop.left;
  }
  const auto cfg = request_inversion(inv, config_.step_cap);
  IDINV_REQUIRE(cfg.init == inversion::InitMode::kEncoder, "inversion.init: diffusion always starts from the encoder");
  spec.lambda_vgg = cfg.lambda_vgg;
  spec.lambda_dom = cfg.lambda_dom;
  spec.steps = cfg.steps;
  spec.step_size = cfg.step_size;
  const auto m = bundle(checkpoint);
  const auto timg = image_from_base64(target, "target");
  const auto cimg = image_from_base64(context, "context");
  const auto stitched = editing::stitch(timg, cimg, spec);
  const auto r = editing::semantic_diffuse(m->g, m->e, m->f, timg, cimg, spec);
  json out = {{"image", image_to_base64(r.reconstruction)},
              {"stitched", image_to_base64(stitched)},
              {"code", workspace::to_json(r.code)},
              {"terms", workspace::to_json(r.final)},
              {"initial_terms", workspace::to_json(r.initial)},
              {"steps_used", r.steps_used},
              {"params",
               {{"checkpoint", checkpoint},
                {"crop", {{"top", spec.crop.top}, {"left", spec.crop.left}, {"height", spec.crop.height}, {"width", spec.crop.width}}},
                {"paste", {{"top", spec.paste_top}, {"left", spec.paste_left}}},
                {"feather", spec.feather},
                {"inversion", workspace::to_json(cfg)}}}};
  out["timing_ms"] = elapsed_ms(t0);
  return out;
}

}  // namespace idinv::frontends
