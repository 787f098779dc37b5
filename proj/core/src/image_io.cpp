#include "mtsplat/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "mtsplat/common.hpp"

namespace mtsplat {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_impl(const std::string& path, int width, int height, int color_type,
                    int bit_depth, const std::vector<png_bytep>& rows) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  MTS_REQUIRE(fp != nullptr, "cannot open for writing: " << path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  MTS_REQUIRE(png, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw UserError("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);  // rows are little-endian in memory
  png_write_image(png, const_cast<png_bytep*>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FilePtr fp;

  explicit PngReader(const std::string& path) : fp(std::fopen(path.c_str(), "rb")) {
    MTS_REQUIRE(fp != nullptr, "cannot open: " << path);
    unsigned char sig[8];
    MTS_REQUIRE(std::fread(sig, 1, 8, fp.get()) == 8 && !png_sig_cmp(sig, 0, 8),
                "not a PNG file: " << path);
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    MTS_REQUIRE(png, "png_create_read_struct failed");
    info = png_create_info_struct(png);
    MTS_REQUIRE(info, "png_create_info_struct failed");
  }
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

}  // namespace

void write_png_rgb8(const std::string& path, const Image<float>& img) {
  MTS_CHECK(img.channels == 3, "write_png_rgb8 expects 3 channels");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(img.width) * img.height * 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_u8(img.data[i]);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = bytes.data() + static_cast<std::size_t>(y) * img.width * 3;
  write_png_impl(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 8, rows);
}

Image<float> read_png_rgb8(const std::string& path) {
  PngReader r(path);
  if (setjmp(png_jmpbuf(r.png))) throw UserError("png read failed: " + path);
  png_init_io(r.png, r.fp.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
  png_set_expand(r.png);
  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  png_set_gray_to_rgb(r.png);
  png_read_update_info(r.png, r.info);
  int width = png_get_image_width(r.png, r.info);
  int height = png_get_image_height(r.png, r.info);
  MTS_REQUIRE(png_get_channels(r.png, r.info) == 3, "expected RGB PNG: " << path);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(width) * height * 3);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = bytes.data() + static_cast<std::size_t>(y) * width * 3;
  png_read_image(r.png, rows.data());
  Image<float> img(width, height, 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

void write_png_gray8(const std::string& path, const Image<std::uint8_t>& img) {
  MTS_CHECK(img.channels == 1, "write_png_gray8 expects 1 channel");
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.data.data() + static_cast<std::size_t>(y) * img.width);
  write_png_impl(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 8, rows);
}

Image<std::uint8_t> read_png_gray8(const std::string& path) {
  PngReader r(path);
  if (setjmp(png_jmpbuf(r.png))) throw UserError("png read failed: " + path);
  png_init_io(r.png, r.fp.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
  png_set_expand(r.png);
  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  png_set_rgb_to_gray(r.png, 1, -1, -1);
  png_read_update_info(r.png, r.info);
  int width = png_get_image_width(r.png, r.info);
  int height = png_get_image_height(r.png, r.info);
  Image<std::uint8_t> img(width, height, 1);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = img.data.data() + static_cast<std::size_t>(y) * width;
  png_read_image(r.png, rows.data());
  return img;
}

void write_png_depth16(const std::string& path, const Image<float>& depth_m) {
  MTS_CHECK(depth_m.channels == 1, "write_png_depth16 expects 1 channel");
  std::vector<std::uint16_t> mm(depth_m.pixel_count());
  for (std::size_t i = 0; i < mm.size(); ++i) {
    float v = std::round(depth_m.data[i] * 1000.0f);
    mm[i] = static_cast<std::uint16_t>(std::min(65535.0f, std::max(0.0f, v)));
  }
  std::vector<png_bytep> rows(depth_m.height);
  for (int y = 0; y < depth_m.height; ++y)
    rows[y] = reinterpret_cast<png_bytep>(mm.data() + static_cast<std::size_t>(y) * depth_m.width);
  write_png_impl(path, depth_m.width, depth_m.height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

void write_pfm(const std::string& path, const Image<float>& img) {
  MTS_REQUIRE(img.channels == 1 || img.channels == 3, "PFM supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  MTS_REQUIRE(out.good(), "cannot open for writing: " << path);
  out << (img.channels == 3 ? "PF" : "Pf") << "\n"
      << img.width << " " << img.height << "\n"
      << "-1.0\n";  // negative scale: little-endian
  // PFM stores rows bottom-up.
  for (int y = img.height - 1; y >= 0; --y)
    out.write(reinterpret_cast<const char*>(
                  img.data.data() + static_cast<std::size_t>(y) * img.width * img.channels),
              static_cast<std::streamsize>(sizeof(float)) * img.width * img.channels);
  MTS_REQUIRE(out.good(), "write failed: " << path);
}

namespace {
constexpr char kFloatMapMagic[4] = {'M', 'T', 'F', 'M'};
constexpr std::uint32_t kFloatMapVersion = 1;
}  // namespace

void write_float_map(const std::string& path, const Image<float>& img) {
  std::ofstream out(path, std::ios::binary);
  MTS_REQUIRE(out.good(), "cannot open for writing: " << path);
  out.write(kFloatMapMagic, 4);
  std::uint32_t header[3] = {kFloatMapVersion, static_cast<std::uint32_t>(img.width),
                             static_cast<std::uint32_t>(img.height)};
  std::uint32_t channels = static_cast<std::uint32_t>(img.channels);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(&channels), sizeof(channels));
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  MTS_REQUIRE(out.good(), "write failed: " << path);
}

Image<float> read_float_map(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  MTS_REQUIRE(in.good(), "cannot open: " << path);
  char magic[4];
  in.read(magic, 4);
  MTS_REQUIRE(in.good() && std::memcmp(magic, kFloatMapMagic, 4) == 0,
              "not a float map file: " << path);
  std::uint32_t header[4];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  MTS_REQUIRE(in.good(), "truncated float map header: " << path);
  MTS_REQUIRE(header[0] == kFloatMapVersion,
              "unsupported float map version " << header[0] << " in " << path);
  Image<float> img(static_cast<int>(header[1]), static_cast<int>(header[2]),
                   static_cast<int>(header[3]));
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  MTS_REQUIRE(in.good(), "truncated float map data: " << path);
  return img;
}

}  // namespace mtsplat
