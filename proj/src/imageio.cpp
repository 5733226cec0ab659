#include "holdfield/imageio.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace holdfield {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back((uint8_t)(v >> 24));
  out.push_back((uint8_t)(v >> 16));
  out.push_back((uint8_t)(v >> 8));
  out.push_back((uint8_t)v);
}

uint32_t get_u32(const uint8_t* p) {
  return ((uint32_t)p[0] << 24) | ((uint32_t)p[1] << 16) | ((uint32_t)p[2] << 8) | p[3];
}

void write_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& data) {
  std::vector<uint8_t> head;
  put_u32(head, (uint32_t)data.size());
  os.write((const char*)head.data(), 4);
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, (const Bytef*)type, 4);
  if (!data.empty()) crc = crc32(crc, data.data(), (uInt)data.size());
  os.write(type, 4);
  if (!data.empty()) os.write((const char*)data.data(), (std::streamsize)data.size());
  std::vector<uint8_t> tail;
  put_u32(tail, crc);
  os.write((const char*)tail.data(), 4);
}

}  // namespace

void save_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("save_png: 1 or 3 channels only");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_png: cannot open " + path);
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  os.write((const char*)sig, 8);

  std::vector<uint8_t> ihdr;
  put_u32(ihdr, (uint32_t)img.width);
  put_u32(ihdr, (uint32_t)img.height);
  ihdr.push_back(8);                               // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);       // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(os, "IHDR", ihdr);

  const size_t stride = (size_t)img.width * img.channels;
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.pixels.begin() + y * stride, img.pixels.begin() + (y + 1) * stride);
  }
  uLongf comp_size = compressBound((uLong)raw.size());
  std::vector<uint8_t> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), (uLong)raw.size(), 6) != Z_OK)
    throw Error("save_png: deflate failed");
  comp.resize(comp_size);
  write_chunk(os, "IDAT", comp);
  write_chunk(os, "IEND", {});
  if (!os) throw Error("save_png: write failed for " + path);
}

ImageU8 load_png(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_png: cannot open " + path);
  std::vector<uint8_t> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (file.size() < 8 || file[1] != 'P' || file[2] != 'N' || file[3] != 'G')
    throw Error("load_png: not a PNG: " + path);

  ImageU8 img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  int bit_depth = 0, color_type = 0;
  while (pos + 8 <= file.size()) {
    const uint32_t len = get_u32(&file[pos]);
    const std::string type((const char*)&file[pos + 4], 4);
    const uint8_t* data = &file[pos + 8];
    if (type == "IHDR") {
      img.width = (int)get_u32(data);
      img.height = (int)get_u32(data + 4);
      bit_depth = data[8];
      color_type = data[9];
      if (bit_depth != 8 || (color_type != 0 && color_type != 2) || data[12] != 0)
        throw Error("load_png: unsupported format in " + path);
      img.channels = color_type == 0 ? 1 : 3;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  const size_t stride = (size_t)img.width * img.channels;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  uLongf raw_size = (uLongf)raw.size();
  if (uncompress(raw.data(), &raw_size, idat.data(), (uLong)idat.size()) != Z_OK ||
      raw_size != raw.size())
    throw Error("load_png: inflate failed for " + path);

  img.pixels.resize(stride * img.height);
  std::vector<uint8_t> prev(stride, 0);
  const int bpp = img.channels;
  for (int y = 0; y < img.height; ++y) {
    const uint8_t filter = raw[y * (stride + 1)];
    const uint8_t* line = &raw[y * (stride + 1) + 1];
    uint8_t* out = &img.pixels[y * stride];
    for (size_t x = 0; x < stride; ++x) {
      const int a = x >= (size_t)bpp ? out[x - bpp] : 0;
      const int b = prev[x];
      const int c = x >= (size_t)bpp ? prev[x - bpp] : 0;
      int v = line[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default: throw Error("load_png: bad filter");
      }
      out[x] = (uint8_t)v;
    }
    std::memcpy(prev.data(), out, stride);
  }
  return img;
}

void save_pfm(const std::string& path, int width, int height,
              const std::vector<double>& values) {
  if ((int)values.size() != width * height) throw Error("save_pfm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_pfm: cannot open " + path);
  os << "Pf\n" << width << " " << height << "\n-1.0\n";
  // PFM scanlines run bottom-to-top.
  for (int y = height - 1; y >= 0; --y)
    for (int x = 0; x < width; ++x) {
      const float f = (float)values[(size_t)y * width + x];
      os.write((const char*)&f, 4);
    }
  if (!os) throw Error("save_pfm: write failed");
}

std::vector<double> load_pfm(const std::string& path, int& width, int& height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_pfm: cannot open " + path);
  std::string magic;
  double scale;
  is >> magic >> width >> height >> scale;
  if (magic != "Pf" || scale >= 0) throw Error("load_pfm: unsupported format");
  is.get();
  std::vector<double> out((size_t)width * height);
  for (int y = height - 1; y >= 0; --y)
    for (int x = 0; x < width; ++x) {
      float f;
      is.read((char*)&f, 4);
      out[(size_t)y * width + x] = f;
    }
  return out;
}

void save_ply(const std::string& path, const std::vector<Vec3>& points) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_ply: cannot open " + path);
  os << "ply\nformat binary_little_endian 1.0\nelement vertex " << points.size()
     << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (const auto& p : points) {
    const float f[3] = {(float)p.x, (float)p.y, (float)p.z};
    os.write((const char*)f, 12);
  }
  if (!os) throw Error("save_ply: write failed");
}

std::vector<Vec3> load_ply(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_ply: cannot open " + path);
  std::string line;
  size_t count = 0;
  bool binary = false;
  while (std::getline(is, line)) {
    if (line.rfind("format", 0) == 0) binary = line.find("binary_little_endian") != std::string::npos;
    if (line.rfind("element vertex", 0) == 0) count = std::stoul(line.substr(15));
    if (line == "end_header") break;
  }
  if (!binary) throw Error("load_ply: only binary_little_endian supported");
  std::vector<Vec3> out(count);
  for (size_t i = 0; i < count; ++i) {
    float f[3];
    is.read((char*)f, 12);
    out[i] = {f[0], f[1], f[2]};
  }
  if (!is) throw Error("load_ply: truncated file");
  return out;
}

}  // namespace holdfield
