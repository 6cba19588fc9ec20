#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "idinv/dataset.hpp"

namespace idinv::workspace {

namespace fs = std::filesystem;

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  const bool has_labels = labeled();
  const bool has_attrs = attributes.rows() == static_cast<Eigen::Index>(images.size()) && attributes.rows() > 0;
  if (has_labels) out.labels.resize(static_cast<Eigen::Index>(indices.size()), labels.cols());
  if (has_attrs) out.attributes.resize(static_cast<Eigen::Index>(indices.size()), attributes.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    IDINV_REQUIRE(i < images.size(), "dataset index out of range");
    out.images.push_back(images[i]);
    out.names.push_back(i < names.size() ? names[i] : std::to_string(i));
    if (has_labels) out.labels.row(static_cast<Eigen::Index>(k)) = labels.row(static_cast<Eigen::Index>(i));
    if (has_attrs) out.attributes.row(static_cast<Eigen::Index>(k)) = attributes.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

std::pair<Dataset, Dataset> Dataset::split(std::size_t first) const {
  IDINV_REQUIRE(first <= images.size(), "split point beyond dataset size");
  std::vector<std::size_t> a(first), b(images.size() - first);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = i;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = first + i;
  return {subset(a), subset(b)};
}

Image<float> render_shape(const SyntheticParams& p, double size, double shade, double x_position, double aspect,
                          double y_position) {
  const int r = p.resolution;
  Image<float> img(p.channels, r, r);
  const double semi_x = size * r * std::sqrt(aspect);
  const double semi_y = size * r / std::sqrt(aspect);
  const double cx = x_position * r, cy = y_position * r;
  const double edge = std::min(semi_x, semi_y);
  for (int y = 0; y < r; ++y) {
    for (int x = 0; x < r; ++x) {
      const double dx = (x + 0.5 - cx) / semi_x, dy = (y + 0.5 - cy) / semi_y;
      // Approximate signed distance to the boundary in pixels; one-pixel soft edge.
      const double dist = (std::sqrt(dx * dx + dy * dy) - 1.0) * edge;
      const double coverage = std::clamp(0.5 - dist, 0.0, 1.0);
      const double v = p.background + coverage * (shade - p.background);
      for (int c = 0; c < p.channels; ++c) img.at(c, y, x) = static_cast<float>(v);
    }
  }
  return img;
}

Dataset make_synthetic_dataset(const SyntheticParams& p, std::uint64_t seed) {
  IDINV_REQUIRE(p.count >= 1, "dataset count must be at least 1");
  IDINV_REQUIRE(p.resolution >= 8 && (p.resolution & (p.resolution - 1)) == 0, "resolution must be a power of two >= 8");
  IDINV_REQUIRE(p.channels == 1 || p.channels == 3, "channels must be 1 or 3");
  const std::array<const AttributeRange*, kAttributeCount> ranges = {&p.size, &p.shade, &p.x_position, &p.aspect};
  for (const auto* range : ranges) IDINV_REQUIRE(range->low < range->high, "attribute range must have low < high");
  IDINV_REQUIRE(p.size.low > 0 && p.aspect.low > 0, "size and aspect must be positive");
  IDINV_REQUIRE(p.shade.low >= -1 && p.shade.high <= 1 && p.background >= -1 && p.background <= 1,
                "shade and background must lie in [-1, 1]");
  IDINV_REQUIRE(p.x_position.low >= 0 && p.x_position.high <= 1 && p.y_position.low >= 0 && p.y_position.high <= 1 &&
                    p.y_position.low <= p.y_position.high,
                "positions must lie in [0, 1]");

  const std::size_t n = static_cast<std::size_t>(p.count);
  Dataset data;
  data.labels.resize(p.count, kAttributeCount);
  data.attributes.resize(p.count, kAttributeCount);

  // Stratified labels: exactly half positive per attribute (odd counts differ by one).
  SeededRng root(seed);
  for (int a = 0; a < kAttributeCount; ++a) {
    std::vector<int> column(n, 0);
    std::fill(column.begin(), column.begin() + static_cast<long>(n / 2), 1);
    SeededRng rng = root.fork(static_cast<std::uint64_t>(a));
    if (n % 2 == 1) column[n - 1] = rng.uniform_int(0, 1);
    rng.shuffle(column);
    for (std::size_t i = 0; i < n; ++i) data.labels(static_cast<Eigen::Index>(i), a) = column[i];
  }

  SeededRng values = root.fork(100);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    std::array<double, kAttributeCount> v{};
    for (int a = 0; a < kAttributeCount; ++a) {
      const bool positive = data.labels(row, a) == 1;
      if (a == 3) {
        const double lo = std::log(ranges[a]->low), hi = std::log(ranges[a]->high), mid = 0.5 * (lo + hi);
        v[a] = std::exp(positive ? values.uniform(mid, hi) : values.uniform(lo, mid));
      } else {
        const double mid = ranges[a]->midpoint();
        v[a] = positive ? values.uniform(mid, ranges[a]->high) : values.uniform(ranges[a]->low, mid);
      }
      data.attributes(row, a) = v[a];
    }
    const double y = values.uniform(p.y_position.low, p.y_position.high);
    data.images.push_back(render_shape(p, v[0], v[1], v[2], v[3], y));
    std::ostringstream name;
    name << "img_" << std::setw(6) << std::setfill('0') << i << ".png";
    data.names.push_back(name.str());
  }
  return data;
}

namespace {

void read_labels(const fs::path& csv, Dataset& data) {
  std::ifstream in(csv);
  if (!in) return;
  std::string line;
  std::getline(in, line);  // header
  std::map<std::string, std::array<int, kAttributeCount>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, cell;
    std::getline(ss, name, ',');
    std::array<int, kAttributeCount> values{};
    for (int a = 0; a < kAttributeCount; ++a) {
      if (!std::getline(ss, cell, ',')) throw Error(ErrorKind::kDecode, csv.string() + ": short row for " + name);
      values[a] = std::stoi(cell);
    }
    rows[name] = values;
  }
  data.labels.resize(static_cast<Eigen::Index>(data.images.size()), kAttributeCount);
  for (std::size_t i = 0; i < data.names.size(); ++i) {
    auto it = rows.find(data.names[i]);
    if (it == rows.end()) throw Error(ErrorKind::kDecode, csv.string() + ": no labels for " + data.names[i]);
    for (int a = 0; a < kAttributeCount; ++a) data.labels(static_cast<Eigen::Index>(i), a) = it->second[a];
  }
}

}  // namespace

Dataset load_image_folder(const fs::path& folder) {
  if (!fs::is_directory(folder)) throw Error(ErrorKind::kNotFound, "no such folder: " + folder.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(folder)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  if (files.empty()) throw Error(ErrorKind::kNotFound, "no PNG files in " + folder.string());
  std::sort(files.begin(), files.end());
  Dataset data;
  for (const auto& f : files) {
    data.images.push_back(read_png(f));
    data.names.push_back(f.filename().string());
    const auto& first = data.images.front();
    if (!data.images.back().same_shape(first)) {
      throw Error(ErrorKind::kInvalidArgument, "mixed image shapes in " + folder.string() + " (" + f.filename().string() + ")");
    }
  }
  read_labels(folder / "labels.csv", data);
  return data;
}

void save_image_folder(const Dataset& data, const fs::path& folder) {
  fs::create_directories(folder);
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    std::string name = i < data.names.size() ? data.names[i] : "img_" + std::to_string(i) + ".png";
    write_png(data.images[i], folder / name);
  }
  if (data.labeled()) {
    std::ofstream csv(folder / "labels.csv");
    csv << "name";
    for (const auto& a : kAttributeNames) csv << ',' << a;
    csv << '\n';
    for (std::size_t i = 0; i < data.images.size(); ++i) {
      csv << data.names[i];
      for (int a = 0; a < kAttributeCount; ++a) csv << ',' << data.labels(static_cast<Eigen::Index>(i), a);
      csv << '\n';
    }
  }
}

Dataset load_dataset(const DatasetSpec& spec) {
  if (spec.kind == DatasetKind::kFolder) return load_image_folder(spec.folder);
  return make_synthetic_dataset(spec.synthetic, spec.seed);
}

}  // namespace idinv::workspace
