#include "idinv/config.hpp"

#include <iomanip>
#include <sstream>

namespace idinv::workspace {

namespace {
std::string join(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] void type_error(const std::string& path, const char* expected) {
  throw Error(ErrorKind::kInvalidArgument, path + ": expected " + expected);
}
}  // namespace

template <>
int StrictObject::read<int>(const json& j, const std::string& path) {
  if (!j.is_number_integer()) type_error(path, "an integer");
  const auto v = j.get<long long>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) type_error(path, "a 32-bit integer");
  return static_cast<int>(v);
}

template <>
std::uint64_t StrictObject::read<std::uint64_t>(const json& j, const std::string& path) {
  if (!j.is_number_unsigned()) type_error(path, "a non-negative integer");
  return j.get<std::uint64_t>();
}

template <>
double StrictObject::read<double>(const json& j, const std::string& path) {
  if (!j.is_number()) type_error(path, "a number");
  return j.get<double>();
}

template <>
bool StrictObject::read<bool>(const json& j, const std::string& path) {
  if (!j.is_boolean()) type_error(path, "a boolean");
  return j.get<bool>();
}

template <>
std::string StrictObject::read<std::string>(const json& j, const std::string& path) {
  if (!j.is_string()) type_error(path, "a string");
  return j.get<std::string>();
}

template <>
json StrictObject::read<json>(const json& j, const std::string&) {
  return j;
}

synthesis::GeneratorConfig parse_generator_config(const json& j, const std::string& path) {
  synthesis::GeneratorConfig c;
  StrictObject o(j, path);
  o.get("resolution", c.resolution).get("latent_dim", c.latent_dim).get("channels", c.channels);
  o.get("max_fmaps", c.max_fmaps).get("min_fmaps", c.min_fmaps);
  json mapper;
  o.get("mapper", mapper);
  o.finish();
  if (!mapper.is_null()) {
    StrictObject m(mapper, join(path, "mapper"));
    m.get("depth", c.mapper.depth).get("width", c.mapper.width);
    m.finish();
  }
  c.validate();
  return c;
}

training::EncoderConfig parse_encoder_config(const json& j, const std::string& path) {
  training::EncoderConfig c;
  StrictObject o(j, path);
  o.get("resolution", c.resolution).get("channels", c.channels).get("layers", c.layers).get("latent_dim", c.latent_dim);
  o.get("min_fmaps", c.min_fmaps).get("max_fmaps", c.max_fmaps);
  o.finish();
  return c;
}

training::DiscriminatorConfig parse_discriminator_config(const json& j, const std::string& path) {
  training::DiscriminatorConfig c;
  StrictObject o(j, path);
  o.get("resolution", c.resolution).get("channels", c.channels).get("min_fmaps", c.min_fmaps).get("max_fmaps", c.max_fmaps);
  o.finish();
  return c;
}

perception::FeatureConfig parse_feature_config(const json& j, const std::string& path) {
  perception::FeatureConfig c;
  StrictObject o(j, path);
  o.get("resolution", c.resolution).get("channels", c.channels).get("attributes", c.attributes);
  o.get("min_fmaps", c.min_fmaps).get("max_fmaps", c.max_fmaps);
  o.finish();
  return c;
}

training::TrainingConfig parse_training_config(const json& j, const std::string& path) {
  training::TrainingConfig c;
  StrictObject o(j, path);
  o.get("lambda_vgg", c.lambda_vgg).get("lambda_adv", c.lambda_adv).get("gamma", c.gamma);
  o.get("lr_encoder", c.lr_encoder).get("lr_discriminator", c.lr_discriminator);
  o.get("batch_size", c.batch_size).get("steps", c.steps).get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

training::GanConfig parse_gan_config(const json& j, const std::string& path) {
  training::GanConfig c;
  StrictObject o(j, path);
  o.get("steps", c.steps).get("batch_size", c.batch_size).get("learning_rate", c.learning_rate).get("gamma", c.gamma);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

training::FeatureTrainingConfig parse_feature_training_config(const json& j, const std::string& path) {
  training::FeatureTrainingConfig c;
  StrictObject o(j, path);
  o.get("steps", c.steps).get("batch_size", c.batch_size).get("learning_rate", c.learning_rate);
  o.get("holdout_fraction", c.holdout_fraction).get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

inversion::InitMode parse_init_mode(const std::string& name) {
  if (name == "encoder") return inversion::InitMode::kEncoder;
  if (name == "random") return inversion::InitMode::kRandom;
  if (name == "given") return inversion::InitMode::kGiven;
  throw Error(ErrorKind::kInvalidArgument, "unknown init mode '" + name + "' (expected encoder, random or given)");
}

inversion::InversionConfig parse_inversion_config(const json& j, const std::string& path) {
  inversion::InversionConfig c;
  StrictObject o(j, path);
  std::string init = inversion::init_mode_name(c.init);
  o.get("lambda_vgg", c.lambda_vgg).get("lambda_dom", c.lambda_dom).get("init", init);
  o.get("steps", c.steps).get("step_size", c.step_size).get("seed", c.seed);
  o.finish();
  c.init = parse_init_mode(init);
  IDINV_REQUIRE(c.lambda_vgg >= 0 && c.lambda_dom >= 0, path + ": loss weights must be non-negative");
  IDINV_REQUIRE(c.steps >= 0 && c.step_size > 0, path + ": invalid step settings");
  return c;
}

evaluation::SwdConfig parse_swd_config(const json& j, const std::string& path) {
  evaluation::SwdConfig c;
  StrictObject o(j, path);
  o.get("patch", c.patch).get("projections", c.projections).get("stride", c.stride).get("seed", c.seed);
  o.finish();
  IDINV_REQUIRE(c.patch >= 1 && c.projections >= 1 && c.stride >= 1, path + ": patch, projections and stride must be positive");
  return c;
}

evaluation::ProbeConfig parse_probe_config(const json& j, const std::string& path) {
  evaluation::ProbeConfig c;
  StrictObject o(j, path);
  o.get("boundary_samples", c.boundary_samples).get("seed", c.seed);
  o.finish();
  return c;
}

namespace {
AttributeRange parse_range(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) type_error(path, "[low, high]");
  return {j[0].get<double>(), j[1].get<double>()};
}
json range_json(const AttributeRange& r) { return json::array({r.low, r.high}); }
}  // namespace

SyntheticParams parse_synthetic_params(const json& j, const std::string& path) {
  SyntheticParams p;
  StrictObject o(j, path);
  o.get("resolution", p.resolution).get("channels", p.channels).get("count", p.count).get("background", p.background);
  json size, shade, x, aspect, y;
  o.get("size", size).get("shade", shade).get("x_position", x).get("aspect", aspect).get("y_position", y);
  o.finish();
  if (!size.is_null()) p.size = parse_range(size, join(path, "size"));
  if (!shade.is_null()) p.shade = parse_range(shade, join(path, "shade"));
  if (!x.is_null()) p.x_position = parse_range(x, join(path, "x_position"));
  if (!aspect.is_null()) p.aspect = parse_range(aspect, join(path, "aspect"));
  if (!y.is_null()) p.y_position = parse_range(y, join(path, "y_position"));
  return p;
}

DatasetSpec parse_dataset_spec(const json& j, const std::string& path) {
  DatasetSpec s;
  StrictObject o(j, path);
  std::string kind = "synthetic", folder;
  json synthetic;
  o.get("kind", kind).get("synthetic", synthetic).get("folder", folder).get("seed", s.seed);
  o.finish();
  if (kind == "synthetic") {
    s.kind = DatasetKind::kSynthetic;
  } else if (kind == "folder") {
    s.kind = DatasetKind::kFolder;
    IDINV_REQUIRE(!folder.empty(), join(path, "folder") + " is required for folder datasets");
  } else {
    throw Error(ErrorKind::kInvalidArgument, join(path, "kind") + ": expected synthetic or folder");
  }
  if (!synthetic.is_null()) s.synthetic = parse_synthetic_params(synthetic, join(path, "synthetic"));
  s.folder = folder;
  return s;
}

json to_json(const synthesis::GeneratorConfig& c) {
  return {{"resolution", c.resolution}, {"latent_dim", c.latent_dim}, {"channels", c.channels}, {"max_fmaps", c.max_fmaps},
          {"min_fmaps", c.min_fmaps},   {"mapper", {{"depth", c.mapper.depth}, {"width", c.mapper.width}}}};
}

json to_json(const training::EncoderConfig& c) {
  return {{"resolution", c.resolution}, {"channels", c.channels},   {"layers", c.layers},
          {"latent_dim", c.latent_dim}, {"min_fmaps", c.min_fmaps}, {"max_fmaps", c.max_fmaps}};
}

json to_json(const training::DiscriminatorConfig& c) {
  return {{"resolution", c.resolution}, {"channels", c.channels}, {"min_fmaps", c.min_fmaps}, {"max_fmaps", c.max_fmaps}};
}

json to_json(const perception::FeatureConfig& c) {
  return {{"resolution", c.resolution}, {"channels", c.channels},   {"attributes", c.attributes},
          {"min_fmaps", c.min_fmaps},   {"max_fmaps", c.max_fmaps}};
}

json to_json(const training::TrainingConfig& c) {
  return {{"lambda_vgg", c.lambda_vgg}, {"lambda_adv", c.lambda_adv}, {"gamma", c.gamma},
          {"lr_encoder", c.lr_encoder}, {"lr_discriminator", c.lr_discriminator},
          {"batch_size", c.batch_size}, {"steps", c.steps},           {"seed", c.seed}};
}

json to_json(const training::GanConfig& c) {
  return {{"steps", c.steps}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"gamma", c.gamma}, {"seed", c.seed}};
}

json to_json(const training::FeatureTrainingConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"holdout_fraction", c.holdout_fraction},
          {"seed", c.seed}};
}

json to_json(const inversion::InversionConfig& c) {
  return {{"lambda_vgg", c.lambda_vgg}, {"lambda_dom", c.lambda_dom}, {"init", inversion::init_mode_name(c.init)},
          {"steps", c.steps},           {"step_size", c.step_size},   {"seed", c.seed}};
}

json to_json(const evaluation::SwdConfig& c) {
  return {{"patch", c.patch}, {"projections", c.projections}, {"stride", c.stride}, {"seed", c.seed}};
}

json to_json(const evaluation::ProbeConfig& c) { return {{"boundary_samples", c.boundary_samples}, {"seed", c.seed}}; }

json to_json(const SyntheticParams& p) {
  return {{"resolution", p.resolution},         {"channels", p.channels},          {"count", p.count},
          {"background", p.background},         {"size", range_json(p.size)},      {"shade", range_json(p.shade)},
          {"x_position", range_json(p.x_position)}, {"aspect", range_json(p.aspect)}, {"y_position", range_json(p.y_position)}};
}

json to_json(const DatasetSpec& s) {
  json j = {{"kind", s.kind == DatasetKind::kSynthetic ? "synthetic" : "folder"}, {"seed", s.seed}};
  if (s.kind == DatasetKind::kSynthetic) j["synthetic"] = to_json(s.synthetic);
  else j["folder"] = s.folder.string();
  return j;
}

ExperimentConfig parse_experiment_config(const json& j) {
  ExperimentConfig c;
  StrictObject o(j, "");
  json dataset, generator, gan, features, feature_training, encoder, inv, swd, probe;
  o.get("dataset", dataset).get("generator", generator).get("gan", gan).get("features", features);
  o.get("feature_training", feature_training).get("encoder", encoder).get("inversion", inv).get("swd", swd);
  o.get("probe", probe).get("output", c.output);
  o.finish();
  if (!dataset.is_null()) c.dataset = parse_dataset_spec(dataset);
  if (!generator.is_null()) c.generator = parse_generator_config(generator);
  if (!gan.is_null()) c.gan = parse_gan_config(gan);
  if (!features.is_null()) c.features = parse_feature_config(features);
  if (!feature_training.is_null()) c.feature_training = parse_feature_training_config(feature_training);
  if (!encoder.is_null()) c.encoder = parse_training_config(encoder, "encoder");
  if (!inv.is_null()) c.inversion = parse_inversion_config(inv);
  if (!swd.is_null()) c.swd = parse_swd_config(swd);
  if (!probe.is_null()) c.probe = parse_probe_config(probe);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) { return parse_experiment_config(read_json(path)); }

json to_json(const ExperimentConfig& c) {
  return {{"dataset", to_json(c.dataset)},
          {"generator", to_json(c.generator)},
          {"gan", to_json(c.gan)},
          {"features", to_json(c.features)},
          {"feature_training", to_json(c.feature_training)},
          {"encoder", to_json(c.encoder)},
          {"inversion", to_json(c.inversion)},
          {"swd", to_json(c.swd)},
          {"probe", to_json(c.probe)},
          {"output", c.output}};
}

json to_json(const inversion::ObjectiveTerms& t) {
  return {{"pixel", t.pixel}, {"perceptual", t.perceptual}, {"domain", t.domain}, {"total", t.total}};
}

json to_json(const evaluation::SemanticBoundary& b) {
  return {{"attribute", b.attribute}, {"normal", std::vector<double>(b.normal.data(), b.normal.data() + b.normal.size())},
          {"bias", b.bias}};
}

evaluation::SemanticBoundary parse_boundary(const json& j, const std::string& path) {
  evaluation::SemanticBoundary b;
  StrictObject o(j, path);
  json normal;
  o.get("attribute", b.attribute).get("normal", normal).get("bias", b.bias);
  o.finish();
  if (!normal.is_array() || normal.empty()) type_error(join(path, "normal"), "a non-empty array of numbers");
  b.normal.resize(static_cast<Eigen::Index>(normal.size()));
  for (std::size_t i = 0; i < normal.size(); ++i) {
    if (!normal[i].is_number()) type_error(join(path, "normal"), "numbers");
    b.normal(static_cast<Eigen::Index>(i)) = normal[i].get<double>();
  }
  IDINV_REQUIRE(std::abs(b.normal.norm() - 1.0) < 1e-6, join(path, "normal") + " must have unit length");
  return b;
}

json to_json(const evaluation::PRCurve& c) {
  json points = json::array();
  for (const auto& p : c.points) points.push_back({{"precision", p.precision}, {"recall", p.recall}, {"threshold", p.threshold}});
  return {{"points", points}, {"auc", c.auc}};
}

json to_json(const evaluation::MetricReport& r) {
  return {{"mse", r.mse}, {"swd", r.swd}, {"ffd", r.ffd}, {"count_a", r.count_a}, {"count_b", r.count_b}, {"swd_config", to_json(r.swd_config)}};
}

json to_json(const evaluation::ProbeResult& r) {
  json boundaries = json::array();
  for (const auto& b : r.boundaries) boundaries.push_back(to_json(b));
  json inverters = json::array();
  for (std::size_t i = 0; i < r.inverters.size(); ++i) {
    json curves = json::object();
    for (std::size_t a = 0; a < r.curves[i].size(); ++a) curves[r.boundaries[a].attribute] = to_json(r.curves[i][a]);
    inverters.push_back({{"name", r.inverters[i]}, {"curves", curves}});
  }
  return {{"boundaries", boundaries}, {"inverters", inverters}};
}

json to_json(const LatentCode<float>& code) {
  return {{"space", latent_space_name(code.space)},
          {"layers", code.layers()},
          {"width", code.width()},
          {"values", std::vector<float>(code.values.data(), code.values.data() + code.values.size())}};
}

LatentCode<float> parse_code(const json& j, const std::string& path) {
  StrictObject o(j, path);
  std::string space = "W";
  int layers = 0, width = 0;
  json values;
  o.get("space", space).get("layers", layers).get("width", width).get("values", values);
  o.finish();
  IDINV_REQUIRE(space == "W" || space == "Z", join(path, "space") + ": expected W or Z");
  IDINV_REQUIRE(layers >= 1 && width >= 1, path + ": layers and width must be positive");
  if (!values.is_array() || values.size() != static_cast<std::size_t>(layers) * static_cast<std::size_t>(width))
    type_error(join(path, "values"), "layers * width numbers");
  RowMatrix<float> v(layers, width);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i].is_number()) type_error(join(path, "values"), "numbers");
    v.data()[i] = values[i].get<float>();
  }
  return LatentCode<float>(std::move(v), space == "W" ? LatentSpace::kW : LatentSpace::kZ);
}

std::string trace_jsonl(const std::vector<inversion::TraceRecord>& trace) {
  std::string out;
  for (const auto& r : trace) {
    json j = to_json(r.terms);
    j["step"] = r.step;
    out += j.dump() + "\n";
  }
  return out;
}

std::string pr_curves_csv(const evaluation::ProbeResult& r) {
  std::ostringstream out;
  out << std::setprecision(10) << "inverter,attribute,threshold,precision,recall\n";
  for (std::size_t i = 0; i < r.inverters.size(); ++i)
    for (std::size_t a = 0; a < r.curves[i].size(); ++a)
      for (const auto& p : r.curves[i][a].points)
        out << r.inverters[i] << ',' << r.boundaries[a].attribute << ',' << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
  return out.str();
}

std::vector<evaluation::SemanticBoundary> load_boundaries(const std::filesystem::path& path) {
  const json j = read_json(path);
  if (!j.is_array()) throw Error(ErrorKind::kDecode, path.string() + ": expected an array of boundaries");
  std::vector<evaluation::SemanticBoundary> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(parse_boundary(j[i], "boundaries[" + std::to_string(i) + "]"));
  return out;
}

void save_boundaries(const std::vector<evaluation::SemanticBoundary>& boundaries, const std::filesystem::path& path) {
  json j = json::array();
  for (const auto& b : boundaries) j.push_back(to_json(b));
  write_text(path, j.dump(2) + "\n");
}

MetricsLog::MetricsLog(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_ = std::make_shared<std::ofstream>(path, std::ios::app);
  if (!*out_) throw Error(ErrorKind::kNotFound, "cannot open metrics log " + path.string());
}

void MetricsLog::operator()(const training::StepRecord& r) {
  json j = {{"phase", r.phase}, {"step", r.step}};
  for (const auto& [k, v] : r.terms) j[k] = v;
  *out_ << j.dump() << '\n';
}

training::MetricsSink MetricsLog::sink() {
  return [self = *this](const training::StepRecord& r) mutable { self(r); };
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kNotFound, "cannot write " + path.string());
  out << text;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kNotFound, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kDecode, path.string() + ": " + e.what());
  }
}

}  // namespace idinv::workspace
