#pragma once

// Deterministic multi-label synthetic shapes with exact pixel ground truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mct/config.hpp"
#include "mct/error.hpp"
#include "mct/io.hpp"
#include "mct/tensor.hpp"

namespace mct::synth {

enum class ShapeKind { Disk, Square, Triangle, Ring, Cross };

inline constexpr std::array<const char*, 5> kShapeNames{"disk", "square", "triangle", "ring",
                                                        "cross"};

// Base RGB per archetype; instances jitter around it.
inline constexpr std::array<std::array<double, 3>, 5> kClassColors{{
    {0.85, 0.20, 0.20},
    {0.20, 0.75, 0.25},
    {0.20, 0.35, 0.90},
    {0.90, 0.80, 0.15},
    {0.80, 0.25, 0.85},
}};

struct DatasetSpec {
  std::size_t num_samples = 400;
  std::size_t image_size = 64;
  std::size_t num_classes = 3;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_size = 9;   // object radius in pixels
  std::size_t max_size = 18;
  double noise = 0.10;
  double color_jitter = 0.10;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("dataset spec: " + m); };
    if (num_samples == 0) fail("num_samples must be positive");
    if (num_classes < 2 || num_classes > kShapeNames.size()) fail("num_classes must lie in [2,5]");
    if (min_objects < 1) fail("min_objects must be >= 1");
    if (min_objects > max_objects) fail("min_objects exceeds max_objects");
    if (max_objects > num_classes) fail("max_objects exceeds num_classes (objects have distinct classes)");
    if (min_size < 1 || min_size > max_size) fail("size range is empty");
    if (2 * max_size + 1 > image_size) fail("max_size does not fit in the image");
    if (noise < 0 || color_jitter < 0) fail("noise levels must be non-negative");
  }

  io::Manifest to_manifest() const {
    io::Manifest m;
    m.set("num_samples", num_samples);
    m.set("image_size", image_size);
    m.set("num_classes", num_classes);
    m.set("min_objects", min_objects);
    m.set("max_objects", max_objects);
    m.set("min_size", min_size);
    m.set("max_size", max_size);
    m.set("noise", noise);
    m.set("color_jitter", color_jitter);
    m.set("seed", seed);
    return m;
  }

  static DatasetSpec from_manifest(const io::Manifest& m) {
    DatasetSpec s;
    auto sz = [&](const char* k, std::size_t& dst) {
      if (m.has(k)) dst = ModelConfig::parse_size(k, m.get(k));
    };
    sz("num_samples", s.num_samples);
    sz("image_size", s.image_size);
    sz("num_classes", s.num_classes);
    sz("min_objects", s.min_objects);
    sz("max_objects", s.max_objects);
    sz("min_size", s.min_size);
    sz("max_size", s.max_size);
    if (m.has("noise")) s.noise = ModelConfig::parse_real("noise", m.get("noise"));
    if (m.has("color_jitter")) {
      s.color_jitter = ModelConfig::parse_real("color_jitter", m.get("color_jitter"));
    }
    if (m.has("seed")) s.seed = ModelConfig::parse_size("seed", m.get("seed"));
    s.validate();
    return s;
  }
};

struct Sample {
  Tensor<float> image;              // 3 x S x S in [0,1]
  std::vector<std::uint8_t> labels;  // multi-hot, length C
  std::vector<std::uint8_t> mask;    // S x S, 0 = background, c + 1 = class c

  template <std::floating_point T>
  std::vector<T> label_vector() const {
    return std::vector<T>(labels.begin(), labels.end());
  }
};

using Dataset = std::vector<Sample>;

inline bool shape_contains(ShapeKind kind, long dx, long dy, long r) {
  const double x = double(dx), y = double(dy), rr = double(r);
  switch (kind) {
    case ShapeKind::Disk:
      return x * x + y * y <= rr * rr;
    case ShapeKind::Square:
      return std::abs(x) <= 0.85 * rr && std::abs(y) <= 0.85 * rr;
    case ShapeKind::Triangle:
      // apex at the top, base of width 2r at the bottom
      return y >= -rr && y <= rr && std::abs(x) <= (y + rr) / 2.0;
    case ShapeKind::Ring: {
      const double d2 = x * x + y * y;
      return d2 <= rr * rr && d2 >= 0.25 * rr * rr;
    }
    case ShapeKind::Cross: {
      const double arm = rr / 3.0;
      return (std::abs(x) <= arm && std::abs(y) <= rr) ||
             (std::abs(y) <= arm && std::abs(x) <= rr);
    }
  }
  return false;
}

/// One sample from its own RNG stream (seeded by spec seed and index), so
/// samples can be produced independently.
inline Sample generate_sample(const DatasetSpec& spec, std::size_t index) {
  std::seed_seq seq{std::uint32_t(spec.seed & 0xFFFFFFFFu), std::uint32_t(spec.seed >> 32),
                    std::uint32_t(index & 0xFFFFFFFFu), std::uint32_t(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  const std::size_t s = spec.image_size, px = s * s;
  Sample out;
  out.image = Tensor<float>({3, s, s});
  out.mask.assign(px, 0);
  out.labels.assign(spec.num_classes, 0);

  // Background: desaturated base colour with low-amplitude noise.
  const double gray = uniform(0.3, 0.7);
  std::array<double, 3> base{};
  for (auto& b : base) b = gray + uniform(-0.06, 0.06);
  std::vector<double> img(3 * px);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < px; ++i) img[c * px + i] = base[c] + uniform(-spec.noise, spec.noise);

  std::vector<std::size_t> classes(spec.num_classes);
  for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = i;
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(pick(spec.min_objects, spec.max_objects));

  std::vector<std::size_t> area(spec.num_classes + 1, 0);
  constexpr int kAttempts = 64;
  for (std::size_t cls : classes) {
    const auto kind = static_cast<ShapeKind>(cls);
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const long r = long(pick(spec.min_size, spec.max_size));
      const long cx = long(pick(std::size_t(r), s - 1 - std::size_t(r)));
      const long cy = long(pick(std::size_t(r), s - 1 - std::size_t(r)));
      std::vector<std::size_t> pixels;
      for (long y = cy - r; y <= cy + r; ++y)
        for (long x = cx - r; x <= cx + r; ++x)
          if (shape_contains(kind, x - cx, y - cy, r)) pixels.push_back(std::size_t(y) * s + std::size_t(x));
      if (pixels.empty()) continue;

      // Earlier objects must keep >= 25% of their pixels and the background
      // must keep >= 30% of the image.
      std::vector<std::size_t> lost(spec.num_classes + 1, 0);
      std::size_t new_fg = 0;
      for (auto p : pixels) {
        ++lost[out.mask[p]];
        if (out.mask[p] == 0) ++new_fg;
      }
      bool ok = true;
      for (std::size_t k = 1; k <= spec.num_classes; ++k) {
        if (area[k] && 4 * (area[k] - lost[k]) < area[k]) ok = false;
      }
      std::size_t fg = 0;
      for (std::size_t k = 1; k <= spec.num_classes; ++k) fg += area[k] - (area[k] ? lost[k] : 0);
      fg += pixels.size();
      if (10 * fg > 7 * px) ok = false;
      if (!ok) continue;

      std::array<double, 3> color{};
      for (std::size_t c = 0; c < 3; ++c)
        color[c] = kClassColors[cls][c] + uniform(-spec.color_jitter, spec.color_jitter);
      for (std::size_t k = 1; k <= spec.num_classes; ++k) area[k] -= area[k] ? lost[k] : 0;
      area[cls + 1] = pixels.size();
      for (auto p : pixels) {
        out.mask[p] = std::uint8_t(cls + 1);
        for (std::size_t c = 0; c < 3; ++c) img[c * px + p] = color[c] + uniform(-spec.noise, spec.noise);
      }
      break;
    }
  }

  for (std::size_t i = 0; i < 3 * px; ++i) out.image[i] = float(std::clamp(img[i], 0.0, 1.0));
  for (auto v : out.mask)
    if (v) out.labels[v - 1] = 1;
  return out;
}

inline Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.reserve(spec.num_samples);
  for (std::size_t i = 0; i < spec.num_samples; ++i) ds.push_back(generate_sample(spec, i));
  return ds;
}

/// Horizontal mirror of image and mask; labels unchanged.
inline Sample hflip(const Sample& s) {
  Sample out = s;
  const std::size_t h = s.image.dim(1), w = s.image.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.image[(c * h + y) * w + x] = s.image[(c * h + y) * w + (w - 1 - x)];
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.mask[y * w + x] = s.mask[y * w + (w - 1 - x)];
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: images.mct1, labels.mct1, masks.mct1, manifest.txt

inline void save(const std::filesystem::path& dir, const DatasetSpec& spec, const Dataset& ds) {
  if (ds.empty()) throw ConfigError("refusing to save an empty dataset");
  std::filesystem::create_directories(dir);
  const std::size_t n = ds.size(), s = ds.front().image.dim(1), c = ds.front().labels.size();
  Tensor<float> images({n, 3, s, s}), labels({n, c}), masks({n, s, s});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(ds[i].image.data().begin(), ds[i].image.data().end(),
              images.data().begin() + long(i * 3 * s * s));
    for (std::size_t k = 0; k < c; ++k) labels[i * c + k] = ds[i].labels[k];
    for (std::size_t p = 0; p < s * s; ++p) masks[i * s * s + p] = ds[i].mask[p];
  }
  io::save_tensor(dir / "images.mct1", images);
  io::save_tensor(dir / "labels.mct1", labels);
  io::save_tensor(dir / "masks.mct1", masks);
  spec.to_manifest().save(dir / "manifest.txt");
}

struct LoadedDataset {
  DatasetSpec spec;
  Dataset samples;
};

inline LoadedDataset load(const std::filesystem::path& dir) {
  LoadedDataset out;
  out.spec = DatasetSpec::from_manifest(io::Manifest::load(dir / "manifest.txt"));
  const auto images = io::load_tensor(dir / "images.mct1");
  const auto labels = io::load_tensor(dir / "labels.mct1");
  const auto masks = io::load_tensor(dir / "masks.mct1");
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != images.dim(3)) {
    throw FormatError("images.mct1 must be N x 3 x S x S, got " + shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0), s = images.dim(2);
  if (labels.rank() != 2 || labels.dim(0) != n) {
    throw FormatError("labels.mct1 shape " + shape_str(labels.shape()) + " disagrees with images");
  }
  if (masks.rank() != 3 || masks.dim(0) != n || masks.dim(1) != s || masks.dim(2) != s) {
    throw FormatError("masks.mct1 shape " + shape_str(masks.shape()) + " disagrees with images");
  }
  const std::size_t c = labels.dim(1);
  if (c != out.spec.num_classes || s != out.spec.image_size) {
    throw FormatError("dataset tensors disagree with manifest");
  }
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& smp = out.samples[i];
    std::vector<float> img(images.data().begin() + long(i * 3 * s * s),
                           images.data().begin() + long((i + 1) * 3 * s * s));
    smp.image = Tensor<float>({3, s, s}, std::move(img));
    smp.labels.resize(c);
    for (std::size_t k = 0; k < c; ++k) {
      const float v = labels[i * c + k];
      if (v != 0.0f && v != 1.0f) throw FormatError("labels.mct1 holds a non-binary value");
      smp.labels[k] = std::uint8_t(v);
    }
    smp.mask.resize(s * s);
    for (std::size_t p = 0; p < s * s; ++p) {
      const float v = masks[i * s * s + p];
      if (v < 0 || v > float(c) || v != std::floor(v)) {
        throw FormatError("masks.mct1 holds an invalid class id");
      }
      smp.mask[p] = std::uint8_t(v);
    }
  }
  return out;
}

}  // namespace mct::synth
