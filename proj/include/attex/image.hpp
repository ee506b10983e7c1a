#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "attex/errors.hpp"
#include "attex/tensor.hpp"

#include <json.hpp>

namespace attex {

// RGB image, channel-major floats in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;  // size channels*height*width, [c][y][x]

  float at(int c, int y, int x) const {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
  float& at(int c, int y, int x) {
    return pixels[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

// Real-valued spatial map. GradCAM-sourced maps are nonnegative; gaze or
// custom maps may carry arbitrary values until softmaxed by enforcement.
struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major
  std::string source = "custom";  // gradcam | gaze | uniform | custom

  float at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
  float& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
};

namespace pnm_detail {

inline int next_token(std::istream& in) {
  // Skips whitespace and '#' comments per the PNM grammar.
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  in >> value;
  if (!in) throw FormatError("malformed PNM header token");
  return value;
}

}  // namespace pnm_detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open image: " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw FormatError(path + ": expected P6 magic, got '" + magic + "'");
  const int w = pnm_detail::next_token(in);
  const int h = pnm_detail::next_token(in);
  const int maxval = pnm_detail::next_token(in);
  if (maxval != 255) throw FormatError(path + ": only 8-bit P6 supported, maxval=" +
                                       std::to_string(maxval));
  in.get();  // single whitespace after maxval
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path + ": truncated pixel data");
  Image img;
  img.height = h;
  img.width = w;
  img.channels = 3;
  img.pixels.resize(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PathError("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> raw(static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        raw[(static_cast<size_t>(y) * img.width + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// P5 graymap, max-normalized on write (lossy by design; use the JSON form for
// exact exchange).
inline void write_pgm(const std::string& path, const SaliencyMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PathError("cannot write map: " + path);
  out << "P5\n" << map.width << " " << map.height << "\n255\n";
  float mx = 0.0f;
  for (float v : map.values) mx = std::max(mx, v);
  std::vector<uint8_t> raw(map.values.size());
  for (size_t i = 0; i < map.values.size(); ++i) {
    const float v = mx > 0.0f ? std::max(map.values[i], 0.0f) / mx : 0.0f;
    raw[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline SaliencyMap read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open map: " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P5") throw FormatError(path + ": expected P5 magic, got '" + magic + "'");
  const int w = pnm_detail::next_token(in);
  const int h = pnm_detail::next_token(in);
  const int maxval = pnm_detail::next_token(in);
  if (maxval != 255) throw FormatError(path + ": only 8-bit P5 supported");
  in.get();
  std::vector<uint8_t> raw(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path + ": truncated pixel data");
  SaliencyMap map;
  map.height = h;
  map.width = w;
  map.values.resize(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) map.values[i] = static_cast<float>(raw[i]) / 255.0f;
  return map;
}

// Lossless JSON exchange: {"height":h,"width":w,"values":[...],"source":...}
inline void write_map_json(const std::string& path, const SaliencyMap& map) {
  nlohmann::json j;
  j["height"] = map.height;
  j["width"] = map.width;
  j["values"] = map.values;
  j["source"] = map.source;
  std::ofstream out(path);
  if (!out) throw PathError("cannot write map: " + path);
  out << j.dump(2) << "\n";
}

inline SaliencyMap read_map_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open map: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  SaliencyMap map;
  map.height = j.at("height").get<int>();
  map.width = j.at("width").get<int>();
  map.values = j.at("values").get<std::vector<float>>();
  map.source = j.value("source", "custom");
  if (static_cast<int>(map.values.size()) != map.height * map.width)
    throw FormatError(path + ": value count does not match dimensions");
  return map;
}

inline SaliencyMap read_map_any(const std::string& path) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") return read_map_json(path);
  return read_pgm(path);
}

// Bilinear resampling used to bring externally sourced maps to the feature
// grid resolution. Sample positions align cell centers of the two grids.
inline SaliencyMap resample_bilinear(const SaliencyMap& src, int out_h, int out_w) {
  if (src.height == out_h && src.width == out_w) return src;
  SaliencyMap out;
  out.height = out_h;
  out.width = out_w;
  out.source = src.source;
  out.values.resize(static_cast<size_t>(out_h) * out_w);
  const float sy = static_cast<float>(src.height) / out_h;
  const float sx = static_cast<float>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const float cy = (y + 0.5f) * sy - 0.5f;
      const float cx = (x + 0.5f) * sx - 0.5f;
      const int y0 = std::clamp(static_cast<int>(std::floor(cy)), 0, src.height - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(cx)), 0, src.width - 1);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const float fy = std::clamp(cy - static_cast<float>(y0), 0.0f, 1.0f);
      const float fx = std::clamp(cx - static_cast<float>(x0), 0.0f, 1.0f);
      const float top = src.at(y0, x0) * (1.0f - fx) + src.at(y0, x1) * fx;
      const float bot = src.at(y1, x0) * (1.0f - fx) + src.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0f - fy) + bot * fy;
    }
  }
  return out;
}

// Nearest-neighbor upsampling for attention overlays; keeps grid cells crisp.
inline SaliencyMap upsample_nearest(const SaliencyMap& src, int out_h, int out_w) {
  SaliencyMap out;
  out.height = out_h;
  out.width = out_w;
  out.source = src.source;
  out.values.resize(static_cast<size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      out.at(y, x) = src.at(y * src.height / out_h, x * src.width / out_w);
  return out;
}

template <typename S>
Tensor<S> image_to_tensor(const Image& img) {
  std::vector<S> vals(img.pixels.size());
  for (size_t i = 0; i < img.pixels.size(); ++i) vals[i] = static_cast<S>(img.pixels[i]);
  return Tensor<S>::from({img.channels, img.height, img.width}, std::move(vals));
}

}  // namespace attex
