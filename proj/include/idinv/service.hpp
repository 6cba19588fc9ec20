#pragma once

// Shared plumbing for the command line and the HTTP service: checkpoint
// resolution, base64 PNG transport and the JSON request handlers.

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "idinv/config.hpp"
#include "idinv/editing.hpp"

namespace idinv::frontends {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// $IDINV_HOME, or ./idinv-home when unset.
fs::path workspace_home();

/// An existing directory is used as is; anything else names `<home>/checkpoints/<ref>`.
fs::path resolve_checkpoint(const std::string& ref, const fs::path& home);

struct ModelBundle {
  std::string id;
  fs::path dir;
  synthesis::GeneratorModel<float> g;
  training::EncoderModel<float> e;
  perception::FeatureExtractor<float> f;
  std::vector<evaluation::SemanticBoundary> boundaries;  // from boundaries.json next to the manifest

  const evaluation::SemanticBoundary& boundary(const std::string& attribute) const;
};

/// Needs generator, encoder and features in the bundle.
std::shared_ptr<const ModelBundle> load_bundle(const fs::path& dir, const std::string& id);

std::string base64_encode(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> base64_decode(const std::string& text);
std::string image_to_base64(const Image<float>& image);
Image<float> image_from_base64(const std::string& text, const std::string& field = "image");

struct ServiceConfig {
  fs::path home;
  std::string default_checkpoint = "default";
  int step_cap = 200;
};

struct Reply {
  int status = 200;
  json body;
};

/// Maps library errors onto HTTP statuses: 400 malformed, 404 unknown
/// checkpoint or boundary, 422 degenerate input, 500 optimisation failure.
Reply error_reply(const std::exception& e);

class Service {
 public:
  explicit Service(ServiceConfig config);

  Reply handle(const std::string& method, const std::string& path, const std::string& body,
               const std::map<std::string, std::string>& query = {});

  /// Drops the cached copy of `id` and loads it again; blocks new requests meanwhile.
  void reload(const std::string& id);

  const ServiceConfig& config() const { return config_; }

 private:
  std::shared_ptr<const ModelBundle> bundle(const std::string& id);

  json health();
  json boundaries(const std::string& id);
  json invert(const json& req);
  json edit(const json& req);
  json interpolate(const json& req);
  json mix(const json& req);
  json diffuse(const json& req);

  ServiceConfig config_;
  std::shared_mutex swap_;
  std::mutex cache_mutex_;
  std::map<std::string, std::shared_ptr<const ModelBundle>> cache_;
};

/// Blocks serving `service` until `*stop` turns true (or forever without one).
/// Port 0 picks a free port; `on_bound` receives the port actually bound.
void run_server(Service& service, const std::string& host, int port, const std::atomic<bool>* stop = nullptr,
                std::function<void(int)> on_bound = {});

}  // namespace idinv::frontends
