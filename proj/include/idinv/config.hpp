#pragma once

// JSON binding for every configuration struct. Parsing is strict: unknown keys
// and mistyped values are rejected with the offending path in the message.

#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>

#include <json.hpp>

#include "idinv/dataset.hpp"
#include "idinv/evaluation.hpp"
#include "idinv/inversion.hpp"
#include "idinv/models.hpp"
#include "idinv/perception.hpp"
#include "idinv/synthesis.hpp"
#include "idinv/training.hpp"

namespace idinv::workspace {

using json = nlohmann::json;

/// Reads declared keys from an object and rejects anything left over.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorKind::kInvalidArgument, where() + " must be an object");
  }

  template <typename T>
  StrictObject& get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = read<T>(*it, path_.empty() ? key : path_ + "." + key);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kInvalidArgument, (path_.empty() ? std::string(key) : path_ + "." + key) + ": " + e.what());
    }
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw Error(ErrorKind::kInvalidArgument, "unknown key " + (path_.empty() ? it.key() : path_ + "." + it.key()));
  }

  template <typename T>
  static T read(const json& j, const std::string& path);

 private:
  std::string where() const { return path_.empty() ? "document" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Each parse_* fills a default-constructed struct, so omitted keys keep library defaults.
synthesis::GeneratorConfig parse_generator_config(const json& j, const std::string& path = "generator");
training::EncoderConfig parse_encoder_config(const json& j, const std::string& path = "encoder");
training::DiscriminatorConfig parse_discriminator_config(const json& j, const std::string& path = "discriminator");
perception::FeatureConfig parse_feature_config(const json& j, const std::string& path = "features");
training::TrainingConfig parse_training_config(const json& j, const std::string& path = "training");
training::GanConfig parse_gan_config(const json& j, const std::string& path = "gan");
training::FeatureTrainingConfig parse_feature_training_config(const json& j, const std::string& path = "feature_training");
inversion::InversionConfig parse_inversion_config(const json& j, const std::string& path = "inversion");
evaluation::SwdConfig parse_swd_config(const json& j, const std::string& path = "swd");
evaluation::ProbeConfig parse_probe_config(const json& j, const std::string& path = "probe");
SyntheticParams parse_synthetic_params(const json& j, const std::string& path = "synthetic");
DatasetSpec parse_dataset_spec(const json& j, const std::string& path = "dataset");

json to_json(const synthesis::GeneratorConfig& c);
json to_json(const training::EncoderConfig& c);
json to_json(const training::DiscriminatorConfig& c);
json to_json(const perception::FeatureConfig& c);
json to_json(const training::TrainingConfig& c);
json to_json(const training::GanConfig& c);
json to_json(const training::FeatureTrainingConfig& c);
json to_json(const inversion::InversionConfig& c);  // mask and given code are not serialized
json to_json(const evaluation::SwdConfig& c);
json to_json(const evaluation::ProbeConfig& c);
json to_json(const SyntheticParams& p);
json to_json(const DatasetSpec& s);

inversion::InitMode parse_init_mode(const std::string& name);

/// Everything one pipeline run needs.
struct ExperimentConfig {
  DatasetSpec dataset;
  synthesis::GeneratorConfig generator;
  training::GanConfig gan;
  perception::FeatureConfig features;
  training::FeatureTrainingConfig feature_training;
  training::TrainingConfig encoder;
  inversion::InversionConfig inversion;
  evaluation::SwdConfig swd;
  evaluation::ProbeConfig probe;
  std::string output = "run";
};

ExperimentConfig parse_experiment_config(const json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
json to_json(const ExperimentConfig& c);

// Result serialization.
json to_json(const inversion::ObjectiveTerms& t);
json to_json(const evaluation::SemanticBoundary& b);
evaluation::SemanticBoundary parse_boundary(const json& j, const std::string& path = "boundary");
json to_json(const evaluation::PRCurve& c);
json to_json(const evaluation::MetricReport& r);
json to_json(const evaluation::ProbeResult& r);
json to_json(const LatentCode<float>& code);
LatentCode<float> parse_code(const json& j, const std::string& path = "code");

/// Line-delimited JSON, one object per trace record.
std::string trace_jsonl(const std::vector<inversion::TraceRecord>& trace);
/// CSV with columns inverter, attribute, threshold, precision, recall.
std::string pr_curves_csv(const evaluation::ProbeResult& r);

std::vector<evaluation::SemanticBoundary> load_boundaries(const std::filesystem::path& path);
void save_boundaries(const std::vector<evaluation::SemanticBoundary>& boundaries, const std::filesystem::path& path);

/// Appends StepRecords as JSON lines.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void operator()(const training::StepRecord& r);
  training::MetricsSink sink();

 private:
  std::filesystem::path path_;
  std::shared_ptr<std::ofstream> out_;
};

void write_text(const std::filesystem::path& path, const std::string& text);
json read_json(const std::filesystem::path& path);

}  // namespace idinv::workspace
