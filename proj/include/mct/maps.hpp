#pragma once

// Inference-time localization maps: class-to-patch attention, patch affinity,
// PatchCAM, their fusion and affinity refinement. All functions are pure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mct/encoder.hpp"
#include "mct/error.hpp"
#include "mct/io.hpp"
#include "mct/tensor.hpp"

namespace mct {

enum class MapKind { MctAttention, PatchCAM, Fused, Refined };

inline std::string to_string(MapKind k) {
  switch (k) {
    case MapKind::MctAttention: return "attention";
    case MapKind::PatchCAM: return "patchcam";
    case MapKind::Fused: return "fused";
    case MapKind::Refined: return "refined";
  }
  return "?";
}

template <std::floating_point T>
struct LocalizationMaps {
  Tensor<T> maps;  // C x N x N (or C x H x W once upsampled)
  MapKind kind = MapKind::MctAttention;
  std::vector<std::uint8_t> class_filter;  // empty = every class present

  std::size_t classes() const { return maps.dim(0); }
};

/// Row-stochastic M x M patch affinity.
template <std::floating_point T>
struct PatchAffinity {
  Tensor<T> matrix;
  std::size_t grid = 0;
};

/// Per-class min-max normalization of a C x ... tensor to [0,1].
/// A constant class map becomes all zeros.
template <std::floating_point T>
Tensor<T> normalize_per_class(const Tensor<T>& maps) {
  Tensor<T> out = maps;
  const std::size_t c = maps.dim(0), per = maps.size() / c;
  for (std::size_t k = 0; k < c; ++k) {
    T* m = out.data().data() + k * per;
    const auto [lo, hi] = std::minmax_element(m, m + per);
    const T mn = *lo, mx = *hi;
    if (!(mx > mn)) {
      std::fill(m, m + per, T(0));
      continue;
    }
    const T inv = T(1) / (mx - mn);
    for (std::size_t i = 0; i < per; ++i) m[i] = std::clamp((m[i] - mn) * inv, T(0), T(1));
  }
  return out;
}

/// Head mean within each layer, then mean over the last `k` layers.
template <std::floating_point T>
Tensor<T> fuse_attention(const AttentionStack<T>& stack, std::size_t k) {
  if (k < 1 || k > stack.layers) {
    throw ConfigError("fuse_attention: K=" + std::to_string(k) + " outside [1," +
                      std::to_string(stack.layers) + "]");
  }
  const Shape shape = stack.at(0, 0).shape();
  Tensor<T> fused(shape);
  for (std::size_t l = stack.layers - k; l < stack.layers; ++l) {
    Tensor<T> layer_mean(shape);
    for (std::size_t h = 0; h < stack.heads; ++h) {
      const auto& a = stack.at(l, h);
      for (std::size_t i = 0; i < a.size(); ++i) layer_mean[i] += a[i];
    }
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += layer_mean[i] / T(stack.heads);
  }
  for (auto& v : fused.data()) v /= T(k);
  return fused;
}

/// Rows [0,C) x columns [C,C+M) of the fused token attention, one N x N map
/// per class, min-max normalized.
template <std::floating_point T>
LocalizationMaps<T> extract_class_to_patch(const Tensor<T>& fused, std::size_t num_classes,
                                           std::size_t grid) {
  const std::size_t m = grid * grid, t = num_classes + m;
  if (fused.rank() != 2 || fused.dim(0) != t || fused.dim(1) != t) {
    throw DimensionError("extract_class_to_patch: expected " + std::to_string(t) + "x" +
                         std::to_string(t) + ", got " + shape_str(fused.shape()));
  }
  Tensor<T> raw({num_classes, grid, grid});
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t j = 0; j < m; ++j) raw[c * m + j] = fused[c * t + num_classes + j];
  return {normalize_per_class(raw), MapKind::MctAttention, {}};
}

/// Rows and columns [C,C+M) of the fused attention. Rows are renormalized to
/// sum to one unless `raw` is set.
template <std::floating_point T>
PatchAffinity<T> extract_affinity(const Tensor<T>& fused, std::size_t num_classes,
                                  std::size_t grid, bool raw = false) {
  const std::size_t m = grid * grid, t = num_classes + m;
  if (fused.rank() != 2 || fused.dim(0) != t || fused.dim(1) != t) {
    throw DimensionError("extract_affinity: expected " + std::to_string(t) + "x" +
                         std::to_string(t) + ", got " + shape_str(fused.shape()));
  }
  Tensor<T> a({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    T row_sum = 0;
    for (std::size_t j = 0; j < m; ++j) {
      a[i * m + j] = fused[(num_classes + i) * t + num_classes + j];
      row_sum += a[i * m + j];
    }
    if (!raw && row_sum > T(0)) {
      for (std::size_t j = 0; j < m; ++j) a[i * m + j] /= row_sum;
    }
  }
  return {std::move(a), grid};
}

/// refined(c, i) = sum_k A(i, k) * map(c, k), applied `iterations` times.
template <std::floating_point T>
LocalizationMaps<T> refine(const LocalizationMaps<T>& in, const PatchAffinity<T>& aff,
                           std::size_t iterations = 1) {
  const std::size_t m = aff.grid * aff.grid;
  if (in.maps.rank() != 3 || in.maps.dim(1) * in.maps.dim(2) != m ||
      aff.matrix.shape() != Shape{m, m}) {
    throw DimensionError("refine: maps " + shape_str(in.maps.shape()) + " vs affinity " +
                         shape_str(aff.matrix.shape()));
  }
  const std::size_t c = in.maps.dim(0);
  Tensor<T> cur = in.maps;
  for (std::size_t it = 0; it < iterations; ++it) {
    Tensor<T> next(cur.shape());
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < m; ++j) acc += aff.matrix[i * m + j] * cur[k * m + j];
        next[k * m + i] = acc;
      }
    cur = std::move(next);
  }
  return {std::move(cur), MapKind::Refined, in.class_filter};
}

/// ReLU then per-class min-max normalization of the CAM feature map.
template <std::floating_point T>
LocalizationMaps<T> patch_cam(const Tensor<T>& feature_map) {
  require_rank(feature_map.shape(), 3, "patch_cam");
  Tensor<T> r = feature_map;
  for (auto& v : r.data()) v = std::max(v, T(0));
  return {normalize_per_class(r), MapKind::PatchCAM, {}};
}

/// Element-wise product of attention and PatchCAM maps, renormalized.
template <std::floating_point T>
LocalizationMaps<T> fuse_maps(const LocalizationMaps<T>& mct, const LocalizationMaps<T>& pcam) {
  if (mct.kind != MapKind::MctAttention || pcam.kind != MapKind::PatchCAM) {
    throw ConfigError("fuse_maps expects attention x patchcam maps, got " + to_string(mct.kind) +
                      " x " + to_string(pcam.kind));
  }
  if (mct.maps.shape() != pcam.maps.shape()) {
    throw DimensionError("fuse_maps: shape mismatch " + shape_str(mct.maps.shape()) + " vs " +
                         shape_str(pcam.maps.shape()));
  }
  Tensor<T> prod = mct.maps;
  for (std::size_t i = 0; i < prod.size(); ++i) prod[i] *= pcam.maps[i];
  return {normalize_per_class(prod), MapKind::Fused, mct.class_filter};
}

/// Bilinear resize of every class map to target x target (half-pixel centres,
/// edge clamped).
template <std::floating_point T>
LocalizationMaps<T> upsample_maps(const LocalizationMaps<T>& in, std::size_t target) {
  require_rank(in.maps.shape(), 3, "upsample_maps");
  const std::size_t c = in.maps.dim(0), h = in.maps.dim(1), w = in.maps.dim(2);
  Tensor<T> out({c, target, target});
  auto axis = [](std::size_t dst, std::size_t n_in, std::size_t n_out, std::size_t& i0,
                 std::size_t& i1, T& frac) {
    const double src = (double(dst) + 0.5) * double(n_in) / double(n_out) - 0.5;
    const double clamped = std::clamp(src, 0.0, double(n_in - 1));
    i0 = std::size_t(std::floor(clamped));
    i1 = std::min(i0 + 1, n_in - 1);
    frac = T(clamped - double(i0));
  };
  for (std::size_t y = 0; y < target; ++y) {
    std::size_t y0, y1;
    T fy;
    axis(y, h, target, y0, y1, fy);
    for (std::size_t x = 0; x < target; ++x) {
      std::size_t x0, x1;
      T fx;
      axis(x, w, target, x0, x1, fx);
      for (std::size_t k = 0; k < c; ++k) {
        const T* m = in.maps.data().data() + k * h * w;
        const T top = m[y0 * w + x0] * (T(1) - fx) + m[y0 * w + x1] * fx;
        const T bot = m[y1 * w + x0] * (T(1) - fx) + m[y1 * w + x1] * fx;
        out[(k * target + y) * target + x] = std::clamp(top * (T(1) - fy) + bot * fy, T(0), T(1));
      }
    }
  }
  return {std::move(out), in.kind, in.class_filter};
}

/// Zeroes maps of classes the filter marks absent.
template <std::floating_point T>
LocalizationMaps<T> apply_class_filter(LocalizationMaps<T> maps, std::vector<std::uint8_t> filter) {
  if (filter.size() != maps.classes()) {
    throw DimensionError("class filter length " + std::to_string(filter.size()) + " vs " +
                         std::to_string(maps.classes()) + " classes");
  }
  const std::size_t per = maps.maps.size() / maps.classes();
  for (std::size_t k = 0; k < filter.size(); ++k)
    if (!filter[k]) std::fill_n(maps.maps.data().begin() + long(k * per), per, T(0));
  maps.class_filter = std::move(filter);
  return maps;
}

/// 8-bit binary PGM of one class map, values scaled by 255.
template <std::floating_point T>
std::string encode_pgm(const Tensor<T>& maps, std::size_t cls) {
  require_rank(maps.shape(), 3, "encode_pgm");
  const std::size_t h = maps.dim(1), w = maps.dim(2);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(double(maps[cls * h * w + i]), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  return out;
}

}  // namespace mct
