#pragma once

// Checkpoint bundles: a directory with manifest.json and one raw tensor file
// per parameter array.
//
// Tensor file layout (little-endian):
//   bytes 0-3   magic "IDTN"
//   bytes 4-5   dtype code (1 = float32)
//   bytes 6-7   rank (<= 4)
//   bytes 8-15  four uint16 dims, unused ones 0
//   then prod(dims) float32 values

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "idinv/models.hpp"
#include "idinv/perception.hpp"
#include "idinv/synthesis.hpp"

namespace idinv::workspace {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "idinv-checkpoint";

struct Checkpoint {
  std::optional<synthesis::GeneratorModel<float>> generator;
  std::optional<training::EncoderModel<float>> encoder;
  std::optional<training::DiscriminatorModel<float>> discriminator;
  std::optional<perception::FeatureExtractor<float>> features;
  nlohmann::json metadata = nlohmann::json::object();
};

/// Writes into a sibling temporary directory and renames it over `dir`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);

/// Loaded models come back frozen.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::vector<unsigned char> encode_tensor(const Buffer<float>& values, const Shape& shape);
std::pair<Buffer<float>, Shape> decode_tensor(const std::vector<unsigned char>& bytes, const std::string& name);

std::string sha256_hex(const std::vector<unsigned char>& bytes);

}  // namespace idinv::workspace
