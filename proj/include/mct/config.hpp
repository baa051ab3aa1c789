#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "mct/error.hpp"
#include "mct/io.hpp"

namespace mct {

enum class Pooling { GAP, GMP, GWRP };

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::GAP: return "gap";
    case Pooling::GMP: return "gmp";
    case Pooling::GWRP: return "gwrp";
  }
  return "?";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "gap" || s == "GAP") return Pooling::GAP;
  if (s == "gmp" || s == "GMP") return Pooling::GMP;
  if (s == "gwrp" || s == "GWRP") return Pooling::GWRP;
  throw ConfigError("unknown pooling '" + s + "' (expected gap|gmp|gwrp)");
}

/// Architecture, loss and inference hyperparameters of the multi-class-token
/// model. Field names double as keys of the key=value config file.
struct ModelConfig {
  std::size_t num_classes = 5;
  std::size_t grid = 8;
  std::size_t embed_dim = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t image_size = 64;
  double mlp_ratio = 4.0;
  Pooling pooling = Pooling::GWRP;
  double gwrp_lambda = 0.996;
  std::size_t fuse_layers = 3;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  // Number of top layers whose output class tokens enter the contrastive
  // term; negative means all layers.
  long cct_layers = -1;
  std::size_t conv_kernel = 3;
  double attn_dropout = 0.0;
  // Scale attention logits by sqrt(D) instead of sqrt(D / H).
  bool full_dim_scale = false;
  bool affinity_raw = false;
  bool affinity_all_layers = false;
  std::size_t refine_iterations = 1;
  double ln_eps = 1e-6;
  double init_std = 0.02;

  std::size_t num_patches() const { return grid * grid; }
  std::size_t num_tokens() const { return num_classes + num_patches(); }
  std::size_t patch_size() const { return image_size / grid; }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(mlp_ratio * double(embed_dim)));
  }
  std::size_t cct_depth() const {
    return cct_layers < 0 ? layers : std::min<std::size_t>(std::size_t(cct_layers), layers);
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (grid < 2) fail("grid must be >= 2");
    if (layers < 2) fail("layers must be >= 2");
    if (heads < 1) fail("heads must be >= 1");
    if (embed_dim < 2 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
    if (image_size == 0 || image_size % grid != 0) {
      fail("image_size " + std::to_string(image_size) + " is not divisible by grid " +
           std::to_string(grid));
    }
    if (!(gwrp_lambda >= 0.0 && gwrp_lambda <= 1.0)) fail("gwrp_lambda must lie in [0,1]");
    if (fuse_layers < 1 || fuse_layers > layers) fail("fuse_layers must lie in [1, layers]");
    if (alpha < 0 || beta < 0 || gamma < 0) fail("loss weights must be non-negative");
    if (conv_kernel % 2 == 0) fail("conv_kernel must be odd");
    if (!(attn_dropout >= 0.0 && attn_dropout < 1.0)) fail("attn_dropout must lie in [0,1)");
    if (mlp_hidden() < 1) fail("mlp_ratio too small");
    if (refine_iterations < 1) fail("refine_iterations must be >= 1");
  }

  io::Manifest to_manifest() const {
    io::Manifest m;
    m.set("num_classes", num_classes);
    m.set("grid", grid);
    m.set("embed_dim", embed_dim);
    m.set("layers", layers);
    m.set("heads", heads);
    m.set("image_size", image_size);
    m.set("mlp_ratio", mlp_ratio);
    m.set("pooling", to_string(pooling));
    m.set("gwrp_lambda", gwrp_lambda);
    m.set("fuse_layers", fuse_layers);
    m.set("alpha", alpha);
    m.set("beta", beta);
    m.set("gamma", gamma);
    m.set("cct_layers", cct_layers);
    m.set("conv_kernel", conv_kernel);
    m.set("attn_dropout", attn_dropout);
    m.set("full_dim_scale", int(full_dim_scale));
    m.set("affinity_raw", int(affinity_raw));
    m.set("affinity_all_layers", int(affinity_all_layers));
    m.set("refine_iterations", refine_iterations);
    m.set("ln_eps", ln_eps);
    m.set("init_std", init_std);
    return m;
  }

  /// Reads every recognised key; absent keys keep their current value.
  /// Unknown keys are left for other consumers (training options).
  void apply(const io::Manifest& m) {
    auto sz = [&](const char* k, std::size_t& dst) {
      if (m.has(k)) dst = parse_size(k, m.get(k));
    };
    auto real = [&](const char* k, double& dst) {
      if (m.has(k)) dst = parse_real(k, m.get(k));
    };
    auto flag = [&](const char* k, bool& dst) {
      if (m.has(k)) dst = parse_bool(k, m.get(k));
    };
    sz("num_classes", num_classes);
    sz("grid", grid);
    sz("embed_dim", embed_dim);
    sz("layers", layers);
    sz("heads", heads);
    sz("image_size", image_size);
    real("mlp_ratio", mlp_ratio);
    if (m.has("pooling")) pooling = parse_pooling(m.get("pooling"));
    real("gwrp_lambda", gwrp_lambda);
    sz("fuse_layers", fuse_layers);
    real("alpha", alpha);
    real("beta", beta);
    real("gamma", gamma);
    if (m.has("cct_layers")) cct_layers = parse_long("cct_layers", m.get("cct_layers"));
    sz("conv_kernel", conv_kernel);
    real("attn_dropout", attn_dropout);
    flag("full_dim_scale", full_dim_scale);
    flag("affinity_raw", affinity_raw);
    flag("affinity_all_layers", affinity_all_layers);
    sz("refine_iterations", refine_iterations);
    real("ln_eps", ln_eps);
    real("init_std", init_std);
  }

  static ModelConfig from_manifest(const io::Manifest& m) {
    ModelConfig c;
    c.apply(m);
    c.validate();
    return c;
  }

  static std::size_t parse_size(const std::string& key, const std::string& v) {
    const long x = parse_long(key, v);
    if (x < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(x);
  }

  static long parse_long(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long x = 0;
    try {
      x = std::stol(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return x;
  }

  static double parse_real(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0;
    try {
      x = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return x;
  }

  static bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError(key + ": expected 0/1/true/false, got '" + v + "'");
  }
};

}  // namespace mct
