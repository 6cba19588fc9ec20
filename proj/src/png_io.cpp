#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "idinv/dataset.hpp"

namespace idinv::workspace {

namespace {

Image<float> from_png_image(png_image& meta, const std::vector<unsigned char>& buffer) {
  const int channels = (meta.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  const int h = static_cast<int>(meta.height), w = static_cast<int>(meta.width);
  std::vector<int> raw(static_cast<std::size_t>(channels) * h * w);
  // png pixels are interleaved HWC; images are planar CHW.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        raw[(static_cast<std::size_t>(c) * h + y) * w + x] = buffer[(static_cast<std::size_t>(y) * w + x) * channels + c];
  return rescale_pixels<float>(raw, channels, h, w);
}

std::vector<unsigned char> interleave(const Image<float>& image) {
  const auto raw = unscale_pixels(image);
  const int c = image.channels, h = image.height, w = image.width;
  std::vector<unsigned char> out(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        out[(static_cast<std::size_t>(y) * w + x) * c + k] =
            static_cast<unsigned char>(raw[(static_cast<std::size_t>(k) * h + y) * w + x]);
  return out;
}

png_image describe(const Image<float>& image) {
  IDINV_REQUIRE(image.channels == 1 || image.channels == 3, "PNG export supports 1 or 3 channels");
  png_image meta;
  std::memset(&meta, 0, sizeof(meta));
  meta.version = PNG_IMAGE_VERSION;
  meta.width = static_cast<png_uint_32>(image.width);
  meta.height = static_cast<png_uint_32>(image.height);
  meta.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  return meta;
}

Image<float> decode(png_image& meta, const std::string& name) {
  // Keep gray sources gray, everything else becomes RGB.
  meta.format = (meta.format & PNG_FORMAT_FLAG_COLOR) ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(meta));
  if (!png_image_finish_read(&meta, nullptr, buffer.data(), 0, nullptr)) {
    const std::string message = meta.message;
    png_image_free(&meta);
    throw Error(ErrorKind::kDecode, name + ": " + message);
  }
  return from_png_image(meta, buffer);
}

}  // namespace

Image<float> decode_png(const std::vector<unsigned char>& bytes, const std::string& name) {
  png_image meta;
  std::memset(&meta, 0, sizeof(meta));
  meta.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&meta, bytes.data(), bytes.size())) {
    throw Error(ErrorKind::kDecode, name + ": " + meta.message);
  }
  return decode(meta, name);
}

Image<float> read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kNotFound, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes, path.string());
}

std::vector<unsigned char> encode_png(const Image<float>& image) {
  png_image meta = describe(image);
  const auto pixels = interleave(image);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&meta, nullptr, &size, 0, pixels.data(), 0, nullptr))
    throw Error(ErrorKind::kDecode, std::string("png encode: ") + meta.message);
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&meta, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw Error(ErrorKind::kDecode, std::string("png encode: ") + meta.message);
  out.resize(size);
  return out;
}

void write_png(const Image<float>& image, const std::filesystem::path& path) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kNotFound, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace idinv::workspace
