#include <doctest.h>

#include <unistd.h>

#include <fstream>
#include <iterator>

#include "idinv/checkpoint.hpp"
#include "idinv/config.hpp"
#include "idinv/dataset.hpp"
#include "toy_models.hpp"

using namespace idinv;
using namespace idinv::workspace;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("idinv_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kInvalidArgument;
}

Checkpoint toy_checkpoint() {
  auto m = idinv::testing::toy_models<float>(16, 5);
  Checkpoint c;
  c.generator = m.g;
  c.encoder = m.e;
  c.discriminator = m.d;
  c.features = m.f;
  c.metadata = {{"note", "toy"}, {"steps", 3}};
  return c;
}

}  // namespace

TEST_CASE("synthetic dataset is deterministic and balanced") {
  SyntheticParams p;
  p.resolution = 16;
  p.count = 40;
  const auto a = make_synthetic_dataset(p, 3);
  const auto b = make_synthetic_dataset(p, 3);
  REQUIRE(a.size() == 40);
  CHECK(a.labeled());
  CHECK(a.labels.cols() == kAttributeCount);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK((a.images[i].pixels == b.images[i].pixels).all());
  for (int k = 0; k < kAttributeCount; ++k) CHECK(a.labels.col(k).sum() == 20);
  for (const auto& img : a.images) CHECK(img.valid());
  const auto c = make_synthetic_dataset(p, 4);
  CHECK_FALSE((c.images[0].pixels == a.images[0].pixels).all());

  const auto [head, tail] = a.split(30);
  CHECK(head.size() == 30);
  CHECK(tail.size() == 10);
  CHECK(tail.labels.row(0) == a.labels.row(30));
  const auto sub = a.subset({5, 2});
  CHECK(sub.labels.row(1) == a.labels.row(2));
}

TEST_CASE("rendered attributes move the picture the right way") {
  SyntheticParams p;
  p.resolution = 32;
  const auto small = render_shape(p, 0.13, 0.8, 0.5, 1.0, 0.5);
  const auto large = render_shape(p, 0.27, 0.8, 0.5, 1.0, 0.5);
  auto coverage = [&](const Image<float>& img) { return (img.pixels > static_cast<float>(p.background) + 0.1f).count(); };
  CHECK(coverage(large) > coverage(small));
  const auto dark = render_shape(p, 0.2, 0.0, 0.5, 1.0, 0.5);
  CHECK(dark.pixels.maxCoeff() < large.pixels.maxCoeff());
}

TEST_CASE("PNG round trip is exact on 8-bit levels") {
  TempDir tmp("png");
  std::vector<int> raw(3 * 5 * 4);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<int>((i * 37) % 256);
  const auto rgb = rescale_pixels<float>(raw, 3, 5, 4);
  write_png(rgb, tmp.path / "rgb.png");
  const auto back = read_png(tmp.path / "rgb.png");
  CHECK(back.shape() == rgb.shape());
  CHECK(unscale_pixels(back) == raw);
  const auto bytes = encode_png(rgb);
  CHECK(unscale_pixels(decode_png(bytes)) == raw);

  spit(tmp.path / "broken.png", "definitely not a png");
  try {
    read_png(tmp.path / "broken.png");
    FAIL("expected decode error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDecode);
    CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
  }
}

TEST_CASE("image folders") {
  TempDir tmp("folder");
  SyntheticParams p;
  p.resolution = 8;
  p.count = 3;
  auto data = make_synthetic_dataset(p, 1);
  save_image_folder(data, tmp.path / "set");
  const auto loaded = load_image_folder(tmp.path / "set");
  REQUIRE(loaded.size() == 3);
  CHECK(loaded.labeled());
  CHECK(loaded.labels == data.labels);
  CHECK(std::is_sorted(loaded.names.begin(), loaded.names.end()));
  for (std::size_t i = 0; i < 3; ++i) CHECK((loaded.images[i].pixels - data.images[i].pixels).abs().maxCoeff() <= 1.0f / 255);

  fs::remove(tmp.path / "set" / "labels.csv");
  CHECK_FALSE(load_image_folder(tmp.path / "set").labeled());

  fs::create_directories(tmp.path / "empty");
  CHECK(kind_of([&] { load_image_folder(tmp.path / "empty"); }) == ErrorKind::kNotFound);
  CHECK(kind_of([&] { load_image_folder(tmp.path / "missing"); }) == ErrorKind::kNotFound);

  write_png(Image<float>(1, 4, 4), tmp.path / "set" / "zz_small.png");
  CHECK(kind_of([&] { load_image_folder(tmp.path / "set"); }) == ErrorKind::kInvalidArgument);
  fs::remove(tmp.path / "set" / "zz_small.png");
  spit(tmp.path / "set" / "zz_corrupt.png", "\x89PNG garbage");
  try {
    load_image_folder(tmp.path / "set");
    FAIL("expected decode error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDecode);
    CHECK(std::string(e.what()).find("zz_corrupt.png") != std::string::npos);
  }
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
  TempDir tmp("ckpt");
  const auto ckpt = toy_checkpoint();
  save_checkpoint(ckpt, tmp.path / "a");
  const auto loaded = load_checkpoint(tmp.path / "a");
  REQUIRE(loaded.generator);
  REQUIRE(loaded.encoder);
  REQUIRE(loaded.discriminator);
  REQUIRE(loaded.features);
  CHECK(loaded.generator->frozen());
  CHECK(loaded.encoder->frozen());
  CHECK(loaded.features->frozen());
  CHECK(loaded.metadata == ckpt.metadata);
  save_checkpoint(loaded, tmp.path / "b/");

  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(tmp.path / "a")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  CHECK(names.size() == 1 + ckpt.generator->parameters().size() + ckpt.encoder->parameters().size() +
                            ckpt.discriminator->parameters().size() + ckpt.features->parameters().size());
  for (const auto& n : names) CHECK(slurp(tmp.path / "a" / n) == slurp(tmp.path / "b" / n));
  CHECK_FALSE(fs::exists(tmp.path / "b.tmp"));
  CHECK_FALSE(fs::exists(tmp.path / "b.old"));

  SeededRng rng(1);
  const auto code = synthesis::sample_w_codes(*ckpt.generator, rng, 1).front();
  CHECK((synthesis::generate(*ckpt.generator, code).pixels == synthesis::generate(*loaded.generator, code).pixels).all());

  const auto manifest = read_json(tmp.path / "a" / "manifest.json");
  CHECK(manifest.at("format") == "idinv-checkpoint");
  CHECK(manifest.at("version") == 1);
  CHECK(manifest.at("rng_algorithm") == SeededRng::kAlgorithm);
  const auto& first = manifest.at("tensors").at(0);
  const auto bytes = slurp(tmp.path / "a" / first.at("file").get<std::string>());
  CHECK(bytes.substr(0, 4) == "IDTN");
  CHECK(first.at("sha256").get<std::string>().size() == 64);

  save_checkpoint(ckpt, tmp.path / "a");
  CHECK(load_checkpoint(tmp.path / "a").metadata == ckpt.metadata);
}

TEST_CASE("checkpoint corruption is detected") {
  TempDir tmp("corrupt");
  const auto ckpt = toy_checkpoint();
  const fs::path dir = tmp.path / "c";
  auto fresh = [&] {
    save_checkpoint(ckpt, dir);
    return read_json(dir / "manifest.json");
  };
  auto manifest = fresh();
  const std::string file = manifest.at("tensors").at(2).at("file").get<std::string>();

  std::string bytes = slurp(dir / file);
  spit(dir / file, bytes.substr(0, bytes.size() - 4));
  CHECK(kind_of([&] { load_checkpoint(dir); }) == ErrorKind::kCorruption);

  fresh();
  bytes = slurp(dir / file);
  bytes[bytes.size() - 1] = static_cast<char>(bytes.back() ^ 0x40);
  spit(dir / file, bytes);
  CHECK(kind_of([&] { load_checkpoint(dir); }) == ErrorKind::kCorruption);

  fresh();
  fs::remove(dir / file);
  CHECK(kind_of([&] { load_checkpoint(dir); }) == ErrorKind::kCorruption);

  manifest = fresh();
  manifest["version"] = 2;
  spit(dir / "manifest.json", manifest.dump());
  CHECK(kind_of([&] { load_checkpoint(dir); }) == ErrorKind::kUnsupportedVersion);

  fresh();
  spit(dir / "manifest.json", "{ not json");
  CHECK(kind_of([&] { load_checkpoint(dir); }) == ErrorKind::kCorruption);
  CHECK(kind_of([&] { load_checkpoint(tmp.path / "nothing"); }) == ErrorKind::kNotFound);

  const auto t = encode_tensor(Buffer<float>::LinSpaced(6, 0, 1), {2, 3});
  CHECK(t.size() == 16 + 24);
  const auto [values, shape] = decode_tensor(t, "t");
  CHECK(shape == Shape{2, 3});
  CHECK(values(5) == 1.0f);
  auto bad = t;
  bad[0] = 'X';
  CHECK(kind_of([&] { decode_tensor(bad, "t"); }) == ErrorKind::kCorruption);
}

TEST_CASE("strict configuration parsing") {
  const auto g = parse_generator_config({{"resolution", 16}, {"latent_dim", 8}});
  CHECK(g.resolution == 16);
  CHECK(g.latent_dim == 8);
  CHECK(parse_generator_config(to_json(g)).layers() == g.layers());

  try {
    parse_generator_config({{"resolution", 16}, {"latnet_dim", 8}});
    FAIL("expected unknown key error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("generator.latnet_dim") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_generator_config({{"resolution", "big"}}), Error);
  CHECK_THROWS_AS(parse_inversion_config({{"init", "sideways"}}), Error);
  CHECK_THROWS_AS(parse_training_config(json::array()), Error);

  const auto inv = parse_inversion_config({{"init", "random"}, {"steps", 50}, {"lambda_dom", 0.5}});
  CHECK(inv.init == inversion::InitMode::kRandom);
  CHECK(inv.steps == 50);
  CHECK(parse_inversion_config(to_json(inv)).lambda_dom == 0.5);

  const auto exp = parse_experiment_config(json::object());
  const auto round = parse_experiment_config(to_json(exp));
  CHECK(to_json(round) == to_json(exp));
  CHECK_THROWS_AS(parse_experiment_config({{"extra", 1}}), Error);
}

TEST_CASE("codes and boundaries serialize") {
  LatentCode<float> code(RowMatrix<float>::Constant(3, 2, 0.25f), LatentSpace::kW);
  code.values(2, 1) = -1.5f;
  const auto back = parse_code(to_json(code));
  CHECK(back.values == code.values);
  CHECK(back.space == LatentSpace::kW);

  TempDir tmp("bnd");
  Eigen::VectorXd n(2);
  n << 0.6, 0.8;
  save_boundaries({{"size", n, 0.1}}, tmp.path / "b.json");
  const auto loaded = load_boundaries(tmp.path / "b.json");
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].attribute == "size");
  CHECK(loaded[0].normal == n);
  CHECK_THROWS_AS(parse_boundary({{"attribute", "x"}, {"normal", {1.0, 1.0}}, {"bias", 0.0}}), Error);
}
