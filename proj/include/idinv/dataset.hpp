#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "idinv/core.hpp"

namespace idinv::workspace {

inline constexpr int kAttributeCount = 4;
inline const std::array<std::string, kAttributeCount> kAttributeNames = {"size", "shade", "x_position", "aspect"};

struct AttributeRange {
  double low = 0.0;
  double high = 1.0;
  double midpoint() const { return 0.5 * (low + high); }
};

/// Parameters of the synthetic shape renderer. Each attribute's binary label
/// is `value > midpoint`; `aspect` is sampled in log space so 1.0 is its midpoint.
struct SyntheticParams {
  int resolution = 32;
  int channels = 1;
  int count = 5000;
  AttributeRange size{0.12, 0.28};        // mean semi-axis as a fraction of the side
  AttributeRange shade{-0.1, 0.9};        // foreground level
  AttributeRange x_position{0.35, 0.65};  // horizontal centre as a fraction of the side
  AttributeRange aspect{0.625, 1.6};      // width / height
  AttributeRange y_position{0.4, 0.6};    // nuisance, not labelled
  double background = -0.7;
};

enum class DatasetKind { kSynthetic, kFolder };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kSynthetic;
  SyntheticParams synthetic;
  std::filesystem::path folder;
  std::uint64_t seed = 1;
};

struct Dataset {
  std::vector<Image<float>> images;
  std::vector<std::string> names;
  /// Row per image, one 0/1 column per attribute; empty when unlabelled.
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> labels;
  /// Continuous rendering parameters behind each label (synthetic only).
  RowMatrix<double> attributes;

  std::size_t size() const { return images.size(); }
  bool labeled() const { return labels.rows() == static_cast<Eigen::Index>(images.size()) && labels.rows() > 0; }

  /// Subset by index, keeping labels aligned.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Contiguous split: [0, first) and [first, size).
  std::pair<Dataset, Dataset> split(std::size_t first) const;
};

/// Deterministic renderer of attribute-labelled ellipses; labels are exactly
/// balanced per attribute.
Dataset make_synthetic_dataset(const SyntheticParams& params, std::uint64_t seed);

/// Renders one image from explicit attribute values (size, shade, x, aspect) and y position.
Image<float> render_shape(const SyntheticParams& params, double size, double shade, double x_position, double aspect,
                          double y_position);

/// PNGs in lexicographic order; labels come from labels.csv when present.
Dataset load_image_folder(const std::filesystem::path& folder);

/// Writes zero-padded PNGs plus labels.csv (when labelled).
void save_image_folder(const Dataset& data, const std::filesystem::path& folder);

Dataset load_dataset(const DatasetSpec& spec);

// PNG codec (8-bit gray or RGB).
Image<float> read_png(const std::filesystem::path& path);
void write_png(const Image<float>& image, const std::filesystem::path& path);
std::vector<unsigned char> encode_png(const Image<float>& image);
Image<float> decode_png(const std::vector<unsigned char>& bytes, const std::string& name = "<memory>");

}  // namespace idinv::workspace
