#pragma once

// Depth-map encodings into three-channel 8-bit images (raw, HHA, surface
// normals) and the resize / center-crop / normalize step shared with RGB.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "rgbdvit/error.hpp"
#include "rgbdvit/tensor.hpp"
#include "rgbdvit/util.hpp"

namespace rgbdvit::depth {

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::size_t width = 0, height = 0;
  bool operator==(const CameraIntrinsics&) const = default;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
    if (!(cx >= 0.0 && cx < static_cast<double>(width)) || !(cy >= 0.0 && cy < static_cast<double>(height)))
      throw InvalidArgument("principal point outside the image");
  }

  // Pinhole model with a focal length of one image width, centered.
  static CameraIntrinsics centered(std::size_t width, std::size_t height) {
    CameraIntrinsics k;
    k.width = width;
    k.height = height;
    k.fx = k.fy = static_cast<double>(width);
    k.cx = (static_cast<double>(width) - 1.0) / 2.0;
    k.cy = (static_cast<double>(height) - 1.0) / 2.0;
    return k;
  }
};

inline void to_json(nlohmann::json& j, const CameraIntrinsics& k) {
  j = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline void from_json(const nlohmann::json& j, CameraIntrinsics& k) {
  k.fx = j.at("fx");
  k.fy = j.at("fy");
  k.cx = j.at("cx");
  k.cy = j.at("cy");
  k.width = j.at("width");
  k.height = j.at("height");
}

inline CameraIntrinsics load_intrinsics(const std::filesystem::path& path) {
  try {
    auto k = nlohmann::json::parse(read_text(path)).get<CameraIntrinsics>();
    k.validate();
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("bad intrinsics file '" + path.string() + "': " + e.what());
  }
}

// Metric depth in meters; holes are flagged in `valid`, never negative.
struct DepthMap {
  std::size_t width = 0, height = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0.0f), valid(w * h, 0) {}

  std::size_t size() const { return width * height; }
  float at(std::size_t u, std::size_t v) const { return values[v * width + u]; }
  bool is_valid(std::size_t i) const { return valid[i] != 0; }
  void set(std::size_t u, std::size_t v, float meters) {
    values[v * width + u] = meters;
    valid[v * width + u] = 1;
  }

  void validate() const {
    if (values.size() != size() || valid.size() != size()) throw InvalidArgument("depth map buffers do not match its size");
    for (std::size_t i = 0; i < size(); ++i)
      if (valid[i] && !(std::isfinite(values[i]) && values[i] >= 0.0f))
        throw InvalidArgument("valid depth values must be finite and non-negative");
  }
};

// Planar 8-bit three-channel image, [3][height][width].
struct EncodedImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> values;

  EncodedImage() = default;
  EncodedImage(std::size_t w, std::size_t h) : width(w), height(h), values(3 * w * h, 0) {}

  std::uint8_t& at(std::size_t c, std::size_t u, std::size_t v) { return values[(c * height + v) * width + u]; }
  std::uint8_t at(std::size_t c, std::size_t u, std::size_t v) const { return values[(c * height + v) * width + u]; }
  bool empty() const { return width == 0 || height == 0; }
  bool operator==(const EncodedImage&) const = default;
};

struct PointCloud {
  std::size_t width = 0, height = 0;
  std::vector<double> points;  // [height][width][3], camera frame, meters
  std::vector<std::uint8_t> valid;

  std::array<double, 3> point(std::size_t i) const { return {points[3 * i], points[3 * i + 1], points[3 * i + 2]}; }
};

struct NormalMap {
  std::size_t width = 0, height = 0;
  std::vector<double> normals;  // [height][width][3], unit length where valid
  std::vector<std::uint8_t> valid;

  std::array<double, 3> normal(std::size_t i) const { return {normals[3 * i], normals[3 * i + 1], normals[3 * i + 2]}; }
};

enum class DepthFormat { raw, hha, surfnorm };

inline DepthFormat depth_format_from_string(std::string_view s) {
  if (s == "raw") return DepthFormat::raw;
  if (s == "hha") return DepthFormat::hha;
  if (s == "surfnorm") return DepthFormat::surfnorm;
  throw InvalidArgument("unknown depth format '" + std::string(s) + "'");
}

inline std::string to_string(DepthFormat f) {
  switch (f) {
    case DepthFormat::raw: return "raw";
    case DepthFormat::hha: return "hha";
    case DepthFormat::surfnorm: return "surfnorm";
  }
  return "?";
}

// Round-half-up into [0,255].
inline std::uint8_t to_u8(double x) {
  double r = std::floor(x + 0.5);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

inline EncodedImage raw_depth_to_image(const DepthMap& d, double d_max) {
  if (!(d_max > 0.0)) throw InvalidArgument("d_max must be positive");
  EncodedImage out(d.width, d.height);
  const std::size_t plane = d.size();
  for (std::size_t i = 0; i < plane; ++i) {
    std::uint8_t v = 0;
    if (d.is_valid(i)) v = to_u8(std::min<double>(d.values[i], d_max) / d_max * 255.0);
    out.values[i] = out.values[plane + i] = out.values[2 * plane + i] = v;
  }
  return out;
}

inline void check_dimensions(const DepthMap& d, const CameraIntrinsics& k) {
  if (d.width != k.width || d.height != k.height)
    throw InvalidArgument("depth map is " + std::to_string(d.width) + "x" + std::to_string(d.height) +
                          " but intrinsics describe " + std::to_string(k.width) + "x" + std::to_string(k.height));
}

inline PointCloud depth_to_pointcloud(const DepthMap& d, const CameraIntrinsics& k) {
  check_dimensions(d, k);
  PointCloud pc;
  pc.width = d.width;
  pc.height = d.height;
  pc.points.assign(3 * d.size(), 0.0);
  pc.valid = d.valid;
  for (std::size_t v = 0; v < d.height; ++v)
    for (std::size_t u = 0; u < d.width; ++u) {
      const std::size_t i = v * d.width + u;
      if (!d.is_valid(i)) continue;
      const double z = d.values[i];
      pc.points[3 * i] = (static_cast<double>(u) - k.cx) * z / k.fx;
      pc.points[3 * i + 1] = (static_cast<double>(v) - k.cy) * z / k.fy;
      pc.points[3 * i + 2] = z;
    }
  return pc;
}

// PCA normals: the eigenvector of the smallest eigenvalue of the covariance
// of valid points in a window x window neighborhood, oriented so z <= 0.
inline NormalMap estimate_normals(const PointCloud& pc, std::size_t window = 5) {
  if (window < 3 || window % 2 == 0) throw InvalidArgument("normal window must be odd and at least 3");
  NormalMap nm;
  nm.width = pc.width;
  nm.height = pc.height;
  nm.normals.assign(pc.points.size(), 0.0);
  nm.valid.assign(pc.valid.size(), 0);
  const long half = static_cast<long>(window / 2);
  const long w = static_cast<long>(pc.width), h = static_cast<long>(pc.height);
  for (long v = 0; v < h; ++v)
    for (long u = 0; u < w; ++u) {
      const std::size_t i = static_cast<std::size_t>(v * w + u);
      if (!pc.valid[i]) continue;
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      std::size_t count = 0;
      for (long dv = -half; dv <= half; ++dv)
        for (long du = -half; du <= half; ++du) {
          long uu = u + du, vv = v + dv;
          if (uu < 0 || vv < 0 || uu >= w || vv >= h) continue;
          std::size_t j = static_cast<std::size_t>(vv * w + uu);
          if (!pc.valid[j]) continue;
          mean += Eigen::Vector3d(pc.points[3 * j], pc.points[3 * j + 1], pc.points[3 * j + 2]);
          ++count;
        }
      if (count < 3) continue;
      mean /= static_cast<double>(count);
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (long dv = -half; dv <= half; ++dv)
        for (long du = -half; du <= half; ++du) {
          long uu = u + du, vv = v + dv;
          if (uu < 0 || vv < 0 || uu >= w || vv >= h) continue;
          std::size_t j = static_cast<std::size_t>(vv * w + uu);
          if (!pc.valid[j]) continue;
          Eigen::Vector3d p = Eigen::Vector3d(pc.points[3 * j], pc.points[3 * j + 1], pc.points[3 * j + 2]) - mean;
          cov += p * p.transpose();
        }
      cov /= static_cast<double>(count);
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
      Eigen::Vector3d n = solver.eigenvectors().col(0).normalized();
      if (!n.allFinite()) continue;
      if (n.z() > 0.0) n = -n;
      nm.normals[3 * i] = n.x();
      nm.normals[3 * i + 1] = n.y();
      nm.normals[3 * i + 2] = n.z();
      nm.valid[i] = 1;
    }
  return nm;
}

inline EncodedImage colorize_normals(const NormalMap& n) {
  EncodedImage out(n.width, n.height);
  const std::size_t plane = n.width * n.height;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!n.valid[i]) continue;
    for (std::size_t c = 0; c < 3; ++c) out.values[c * plane + i] = to_u8((n.normals[3 * i + c] + 1.0) / 2.0 * 255.0);
  }
  return out;
}

inline EncodedImage surface_normal_image(const DepthMap& d, const CameraIntrinsics& k, std::size_t window = 5) {
  return colorize_normals(estimate_normals(depth_to_pointcloud(d, k), window));
}

// Linear-interpolated percentile (q in [0,1]) of an unsorted sample.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInput("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  double pos = q * static_cast<double>(values.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, values.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

// HHA: channel 0 horizontal disparity fx/depth, channel 1 height above the
// inferred ground along `up`, channel 2 angle between the local surface
// normal and `up`. Pixels with depth <= 0 count as holes.
inline EncodedImage compute_hha(const DepthMap& d, const CameraIntrinsics& k,
                                std::array<double, 3> up = {0.0, -1.0, 0.0}, std::size_t window = 5) {
  check_dimensions(d, k);
  const double up_norm = std::sqrt(up[0] * up[0] + up[1] * up[1] + up[2] * up[2]);
  if (std::abs(up_norm - 1.0) > 1e-6) throw InvalidArgument("up vector must have unit norm");

  DepthMap usable = d;
  for (std::size_t i = 0; i < usable.size(); ++i)
    if (usable.valid[i] && !(usable.values[i] > 0.0f)) usable.valid[i] = 0;

  std::vector<double> disparity, heights;
  for (std::size_t i = 0; i < usable.size(); ++i)
    if (usable.valid[i]) disparity.push_back(k.fx / usable.values[i]);
  if (disparity.empty()) throw EmptyInput("HHA needs at least one valid depth pixel");

  const PointCloud pc = depth_to_pointcloud(usable, k);
  const NormalMap normals = estimate_normals(pc, window);
  for (std::size_t i = 0; i < usable.size(); ++i)
    if (usable.valid[i]) {
      auto p = pc.point(i);
      heights.push_back(p[0] * up[0] + p[1] * up[1] + p[2] * up[2]);
    }

  const auto [dmin_it, dmax_it] = std::minmax_element(disparity.begin(), disparity.end());
  const double disp_lo = *dmin_it, disp_range = *dmax_it - *dmin_it;
  const double ground = percentile(heights, 0.05);
  const double height_top = *std::max_element(heights.begin(), heights.end()) - ground;

  EncodedImage out(d.width, d.height);
  const std::size_t plane = d.size();
  for (std::size_t i = 0; i < plane; ++i) {
    if (!usable.valid[i]) continue;
    const double disp = k.fx / usable.values[i];
    out.values[i] = disp_range > 0.0 ? to_u8((disp - disp_lo) / disp_range * 255.0) : 0;
    auto p = pc.point(i);
    const double hgt = std::max(0.0, p[0] * up[0] + p[1] * up[1] + p[2] * up[2] - ground);
    out.values[plane + i] = height_top > 0.0 ? to_u8(hgt / height_top * 255.0) : 0;
    if (normals.valid[i]) {
      auto n = normals.normal(i);
      double c = std::clamp(n[0] * up[0] + n[1] * up[1] + n[2] * up[2], -1.0, 1.0);
      double deg = std::acos(c) * 180.0 / std::numbers::pi;
      out.values[2 * plane + i] = to_u8(deg / 180.0 * 255.0);
    }
  }
  return out;
}

inline EncodedImage encode_depth(const DepthMap& d, const CameraIntrinsics& k, DepthFormat format,
                                 double d_max = 3.5, std::size_t window = 5) {
  switch (format) {
    case DepthFormat::raw: return raw_depth_to_image(d, d_max);
    case DepthFormat::hha: return compute_hha(d, k, {0.0, -1.0, 0.0}, window);
    case DepthFormat::surfnorm: return surface_normal_image(d, k, window);
  }
  throw InvalidArgument("unknown depth format");
}

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessSpec {
  std::size_t target_size = 224;
  std::size_t crop_size = 224;
  std::array<double, 3> mean = {0.485, 0.456, 0.406};
  std::array<double, 3> std = {0.229, 0.224, 0.225};

  void validate() const {
    if (target_size == 0 || crop_size == 0) throw InvalidArgument("preprocess sizes must be positive");
    if (crop_size > target_size) throw InvalidArgument("crop_size exceeds target_size");
    for (double s : std)
      if (!(s > 0.0)) throw InvalidArgument("normalization std must be positive");
  }

  static PreprocessSpec square(std::size_t size) {
    PreprocessSpec p;
    p.target_size = p.crop_size = size;
    return p;
  }
};

inline void to_json(nlohmann::json& j, const PreprocessSpec& p) {
  j = {{"target_size", p.target_size}, {"crop_size", p.crop_size}, {"mean", p.mean}, {"std", p.std}};
}

inline void from_json(const nlohmann::json& j, PreprocessSpec& p) {
  p.target_size = j.at("target_size");
  p.crop_size = j.at("crop_size");
  p.mean = j.at("mean");
  p.std = j.at("std");
}

// Bilinear resampling with half-pixel centers and edge clamping. Output is
// planar [3][out_h][out_w] on the 0..255 scale.
inline std::vector<double> resize_bilinear(const EncodedImage& img, std::size_t out_w, std::size_t out_h) {
  std::vector<double> out(3 * out_w * out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  auto coord = [](std::size_t dst, double scale, std::size_t in) {
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    std::size_t hi = std::min(lo + 1, in - 1);
    return std::tuple{lo, hi, src - static_cast<double>(lo)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    auto [y0, y1, fy] = coord(y, sy, img.height);
    for (std::size_t x = 0; x < out_w; ++x) {
      auto [x0, x1, fx] = coord(x, sx, img.width);
      for (std::size_t c = 0; c < 3; ++c) {
        double top = img.at(c, x0, y0) * (1.0 - fx) + img.at(c, x1, y0) * fx;
        double bot = img.at(c, x0, y1) * (1.0 - fx) + img.at(c, x1, y1) * fx;
        out[(c * out_h + y) * out_w + x] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return out;
}

// Shorter side to target_size, center crop, scale to [0,1], then per-channel
// (x - mean) / std. Returns [3, crop, crop].
template <class T = float>
Tensor<T> preprocess(const EncodedImage& img, const PreprocessSpec& spec) {
  if (img.empty()) throw InvalidArgument("preprocess: empty image");
  spec.validate();
  std::size_t rw, rh;
  if (img.width <= img.height) {
    rw = spec.target_size;
    rh = static_cast<std::size_t>(std::lround(static_cast<double>(img.height) * spec.target_size / img.width));
  } else {
    rh = spec.target_size;
    rw = static_cast<std::size_t>(std::lround(static_cast<double>(img.width) * spec.target_size / img.height));
  }
  if (spec.crop_size > rw || spec.crop_size > rh) throw InvalidArgument("crop larger than resized image");
  std::vector<double> resized = (rw == img.width && rh == img.height)
                                    ? std::vector<double>(img.values.begin(), img.values.end())
                                    : resize_bilinear(img, rw, rh);
  const std::size_t crop = spec.crop_size, top = (rh - crop) / 2, left = (rw - crop) / 2;
  Tensor<T> out({3, crop, crop});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < crop; ++y)
      for (std::size_t x = 0; x < crop; ++x) {
        double v = resized[(c * rh + top + y) * rw + left + x] / 255.0;
        out.data[(c * crop + y) * crop + x] = static_cast<T>((v - spec.mean[c]) / spec.std[c]);
      }
  return out;
}

}  // namespace rgbdvit::depth
