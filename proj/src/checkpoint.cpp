#include "idinv/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "idinv/config.hpp"

namespace idinv::workspace {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'I', 'D', 'T', 'N'};
constexpr std::uint16_t kFloat32 = 1;
constexpr std::size_t kHeaderBytes = 16;

void put_u16(std::vector<unsigned char>& out, std::size_t at, std::uint16_t v) {
  out[at] = static_cast<unsigned char>(v & 0xff);
  out[at + 1] = static_cast<unsigned char>(v >> 8);
}

std::uint16_t get_u16(const std::vector<unsigned char>& in, std::size_t at) {
  return static_cast<std::uint16_t>(in[at] | (in[at + 1] << 8));
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kCorruption, "missing checkpoint file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kNotFound, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kNotFound, "short write to " + path.string());
}

std::string tensor_file(const std::string& model, const std::string& name) {
  std::string file = model + "." + name;
  for (char& c : file)
    if (c == '/') c = '.';
  return file + ".bin";
}

template <typename Model>
void save_model(const std::string& key, const Model& model, const json& config, const fs::path& dir, json& manifest) {
  manifest["models"][key] = {{"config", config}};
  for (const auto& e : model.parameters().entries()) {
    const auto bytes = encode_tensor(e.var.value(), e.var.shape());
    const std::string file = tensor_file(key, e.name);
    write_bytes(dir / file, bytes);
    manifest["tensors"].push_back(
        {{"model", key}, {"name", e.name}, {"file", file}, {"dtype", "float32"}, {"shape", e.var.shape()}, {"sha256", sha256_hex(bytes)}});
  }
}

using TensorIndex = std::map<std::pair<std::string, std::string>, json>;

template <typename Model>
void load_params(const std::string& key, Model& model, const TensorIndex& index, const fs::path& dir) {
  auto& params = model.parameters();
  std::vector<Buffer<float>> values;
  for (const auto& e : params.entries()) {
    auto it = index.find({key, e.name});
    if (it == index.end()) throw Error(ErrorKind::kCorruption, "manifest has no tensor for " + key + "/" + e.name);
    const auto& entry = it->second;
    const std::string file = entry.at("file").template get<std::string>();
    if (file.find('/') != std::string::npos || file.find("..") != std::string::npos)
      throw Error(ErrorKind::kCorruption, "tensor file outside the bundle: " + file);
    const auto bytes = read_bytes(dir / file);
    if (sha256_hex(bytes) != entry.at("sha256").template get<std::string>())
      throw Error(ErrorKind::kCorruption, "hash mismatch for " + file);
    auto [value, shape] = decode_tensor(bytes, file);
    if (shape != e.var.shape())
      throw Error(ErrorKind::kCorruption, file + " has shape " + shape_string(shape) + ", expected " + shape_string(e.var.shape()));
    values.push_back(std::move(value));
  }
  params.assign(values);
}

}  // namespace

std::string sha256_hex(const std::vector<unsigned char>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorKind::kCorruption, "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::vector<unsigned char> encode_tensor(const Buffer<float>& values, const Shape& shape) {
  IDINV_REQUIRE(shape.size() <= 4, "tensor rank above 4: " + shape_string(shape));
  IDINV_REQUIRE(ad::shape_size(shape) == values.size(), "tensor shape does not match its values");
  std::vector<unsigned char> out(kHeaderBytes + sizeof(float) * static_cast<std::size_t>(values.size()), 0);
  std::memcpy(out.data(), kMagic, 4);
  put_u16(out, 4, kFloat32);
  put_u16(out, 6, static_cast<std::uint16_t>(shape.size()));
  for (std::size_t i = 0; i < shape.size(); ++i) {
    IDINV_REQUIRE(shape[i] >= 0 && shape[i] <= 0xffff, "tensor dim does not fit 16 bits");
    put_u16(out, 8 + 2 * i, static_cast<std::uint16_t>(shape[i]));
  }
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values(i), 4);
    const std::size_t at = kHeaderBytes + 4 * static_cast<std::size_t>(i);
    for (int b = 0; b < 4; ++b) out[at + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

std::pair<Buffer<float>, Shape> decode_tensor(const std::vector<unsigned char>& bytes, const std::string& name) {
  if (bytes.size() < kHeaderBytes) throw Error(ErrorKind::kCorruption, name + ": truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorKind::kCorruption, name + ": bad magic");
  if (get_u16(bytes, 4) != kFloat32) throw Error(ErrorKind::kCorruption, name + ": unsupported dtype code " + std::to_string(get_u16(bytes, 4)));
  const int rank = get_u16(bytes, 6);
  if (rank > 4) throw Error(ErrorKind::kCorruption, name + ": rank " + std::to_string(rank) + " above 4");
  Shape shape;
  for (int i = 0; i < rank; ++i) shape.push_back(get_u16(bytes, 8 + 2 * static_cast<std::size_t>(i)));
  const auto count = static_cast<std::size_t>(ad::shape_size(shape));
  if (bytes.size() != kHeaderBytes + 4 * count)
    throw Error(ErrorKind::kCorruption, name + ": expected " + std::to_string(kHeaderBytes + 4 * count) + " bytes, found " +
                                            std::to_string(bytes.size()));
  Buffer<float> values(static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[kHeaderBytes + 4 * i + static_cast<std::size_t>(b)]) << (8 * b);
    std::memcpy(&values(static_cast<Eigen::Index>(i)), &bits, 4);
  }
  return {std::move(values), shape};
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  fs::path target = dir.lexically_normal();
  if (target.filename().empty()) target = target.parent_path();
  IDINV_REQUIRE(!target.empty(), "checkpoint directory must not be empty");
  const fs::path parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
  fs::create_directories(parent);
  const fs::path tmp = parent / (target.filename().string() + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  json manifest = {{"format", kCheckpointFormat},
                   {"version", kCheckpointVersion},
                   {"rng_algorithm", SeededRng::kAlgorithm},
                   {"models", json::object()},
                   {"tensors", json::array()},
                   {"metadata", ckpt.metadata}};
  if (ckpt.generator) save_model("generator", *ckpt.generator, to_json(ckpt.generator->config()), tmp, manifest);
  if (ckpt.encoder) save_model("encoder", *ckpt.encoder, to_json(ckpt.encoder->config()), tmp, manifest);
  if (ckpt.discriminator) save_model("discriminator", *ckpt.discriminator, to_json(ckpt.discriminator->config()), tmp, manifest);
  if (ckpt.features) save_model("features", *ckpt.features, to_json(ckpt.features->config()), tmp, manifest);
  write_text(tmp / "manifest.json", manifest.dump(2) + "\n");

  const fs::path old = parent / (target.filename().string() + ".old");
  fs::remove_all(old);
  if (fs::exists(target)) fs::rename(target, old);
  fs::rename(tmp, target);
  fs::remove_all(old);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::kNotFound, "no checkpoint at " + dir.string());
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw Error(ErrorKind::kCorruption, "missing manifest in " + dir.string());
  json manifest;
  try {
    manifest = read_json(manifest_path);
  } catch (const Error& e) {
    throw Error(ErrorKind::kCorruption, e.message());
  }
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat)
      throw Error(ErrorKind::kCorruption, "not a checkpoint manifest: " + manifest_path.string());
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw Error(ErrorKind::kUnsupportedVersion, "checkpoint version " + std::to_string(version) + ", this build reads " +
                                                      std::to_string(kCheckpointVersion));
    TensorIndex index;
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "float32")
        throw Error(ErrorKind::kCorruption, "unsupported dtype " + t.at("dtype").get<std::string>());
      index[{t.at("model").get<std::string>(), t.at("name").get<std::string>()}] = t;
    }
    Checkpoint ckpt;
    ckpt.metadata = manifest.value("metadata", json::object());
    const auto& models = manifest.at("models");
    for (auto it = models.begin(); it != models.end(); ++it) {
      const auto& cfg = it.value().at("config");
      if (it.key() == "generator") {
        auto g = synthesis::GeneratorModel<float>::create(parse_generator_config(cfg), 0);
        load_params("generator", g, index, dir);
        g.freeze();
        ckpt.generator = std::move(g);
      } else if (it.key() == "encoder") {
        auto e = training::EncoderModel<float>::create(parse_encoder_config(cfg), 0);
        load_params("encoder", e, index, dir);
        e.set_trainable(false);
        ckpt.encoder = std::move(e);
      } else if (it.key() == "discriminator") {
        auto d = training::DiscriminatorModel<float>::create(parse_discriminator_config(cfg), 0);
        load_params("discriminator", d, index, dir);
        d.parameters().set_trainable(false);
        ckpt.discriminator = std::move(d);
      } else if (it.key() == "features") {
        auto f = perception::FeatureExtractor<float>::create(parse_feature_config(cfg), 0);
        load_params("features", f, index, dir);
        f.freeze();
        ckpt.features = std::move(f);
      } else {
        throw Error(ErrorKind::kCorruption, "unknown model '" + it.key() + "' in manifest");
      }
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruption, manifest_path.string() + ": " + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInvalidArgument) throw Error(ErrorKind::kCorruption, e.message());
    throw;
  }
}

}  // namespace idinv::workspace
