#include "bam/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace bam {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32(out, crc);
}

std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(bound);
  if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  packed.resize(bound);
  return packed;
}

void write_png(const std::string& path, int width, int height, int channels,
               std::uint8_t color_type, const std::uint8_t* data) {
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), data + y * stride, data + (y + 1) * stride);
  }

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);           // bit depth
  ihdr.push_back(color_type);  // 0 gray, 2 rgb
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);  // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", zlib_deflate(raw));
  append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("png: write failed: " + path);
}

struct PngData {
  int width = 0;
  int height = 0;
  int channels = 0;  // bytes per pixel after decode (1 or 3)
  std::vector<std::uint8_t> pixels;
};

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

PngData read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw std::runtime_error("png: bad signature: " + path);

  int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t len = get_u32(buf.data() + pos);
    if (pos + 12 + len > buf.size()) throw std::runtime_error("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    const std::uint8_t* payload = buf.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      width = static_cast<int>(get_u32(payload));
      height = static_cast<int>(get_u32(payload + 4));
      bit_depth = payload[8];
      color_type = payload[9];
      interlace = payload[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0) throw std::runtime_error("png: missing IHDR");
  if (bit_depth != 8 || interlace != 0)
    throw std::runtime_error("png: only 8-bit non-interlaced supported");
  int channels;
  switch (color_type) {
    case 0: channels = 1; break;  // grayscale
    case 2: channels = 3; break;  // rgb
    case 3: channels = 1; break;  // palette indices read as labels
    default: throw std::runtime_error("png: unsupported color type");
  }

  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  const std::size_t raw_size = (stride + 1) * static_cast<std::size_t>(height);
  std::vector<std::uint8_t> raw(raw_size);
  uLongf out_len = static_cast<uLongf>(raw_size);
  if (uncompress(raw.data(), &out_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      out_len != raw_size)
    throw std::runtime_error("png: inflate failed: " + path);

  PngData img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.resize(stride * static_cast<std::size_t>(height));
  const int bpp = channels;
  for (int y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* dst = img.pixels.data() + y * stride;
    const std::uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::runtime_error("png: bad filter byte");
      }
      dst[x] = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

}  // namespace

void write_png_rgb(const std::string& path, const RgbImage& image) {
  write_png(path, image.width, image.height, 3, 2, image.pixels.data());
}

void write_png_index(const std::string& path, const LabelMap& mask) {
  std::vector<std::uint8_t> bytes(mask.labels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (mask.labels[i] < 0 || mask.labels[i] > 255)
      throw std::invalid_argument("png: index mask value out of 8-bit range");
    bytes[i] = static_cast<std::uint8_t>(mask.labels[i]);
  }
  write_png(path, mask.width, mask.height, 1, 0, bytes.data());
}

RgbImage read_png_rgb(const std::string& path) {
  PngData data = read_png(path);
  RgbImage img(data.height, data.width);
  if (data.channels == 3) {
    img.pixels = std::move(data.pixels);
  } else {
    for (std::size_t i = 0; i < data.pixels.size(); ++i)
      img.pixels[i * 3] = img.pixels[i * 3 + 1] = img.pixels[i * 3 + 2] = data.pixels[i];
  }
  return img;
}

LabelMap read_png_index(const std::string& path) {
  PngData data = read_png(path);
  if (data.channels != 1)
    throw std::runtime_error("png: index mask expected single channel: " + path);
  LabelMap mask(data.height, data.width);
  for (std::size_t i = 0; i < data.pixels.size(); ++i)
    mask.labels[i] = data.pixels[i];
  return mask;
}

}  // namespace bam
