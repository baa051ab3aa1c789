#pragma once

// Multi-class-token transformer encoder: patch embedding, C class tokens,
// learned positional embeddings over all C + M tokens and L pre-norm
// encoder layers whose per-head attention maps are captured.
//
// Token layout at every layer boundary: rows [0, C) are class tokens, rows
// [C, C + M) are patch tokens in row-major grid order.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mct/autodiff.hpp"
#include "mct/config.hpp"
#include "mct/io.hpp"
#include "mct/tensor.hpp"

namespace mct {

template <std::floating_point T>
using ParamStore = std::map<std::string, Tensor<T>>;

template <std::floating_point T>
using ParamVars = std::map<std::string, Var<T>>;

/// Per-layer, per-head token-to-token attention, each (C+M) x (C+M).
template <std::floating_point T>
struct AttentionStack {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<Tensor<T>> maps;  // layer-major

  const Tensor<T>& at(std::size_t layer, std::size_t head) const {
    return maps.at(layer * heads + head);
  }
};

enum class ParamInit { Normal, Zeros, Ones, SharedRow };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init;
};

inline std::string block_key(std::size_t layer, const char* suffix) {
  return "blocks." + std::to_string(layer) + "." + suffix;
}

/// Every parameter of the model, in the fixed order used for initialization.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim, c = cfg.num_classes, p = cfg.patch_size();
  const std::size_t hid = cfg.mlp_hidden(), k = cfg.conv_kernel;
  std::vector<ParamSpec> specs{
      {"patch_embed.weight", {3 * p * p, d}, ParamInit::Normal},
      {"patch_embed.bias", {d}, ParamInit::Zeros},
      {"cls_tokens", {c, d}, ParamInit::SharedRow},
      {"pos_embed", {cfg.num_tokens(), d}, ParamInit::Normal},
  };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    specs.push_back({block_key(l, "norm1.weight"), {d}, ParamInit::Ones});
    specs.push_back({block_key(l, "norm1.bias"), {d}, ParamInit::Zeros});
    specs.push_back({block_key(l, "attn.qkv.weight"), {d, 3 * d}, ParamInit::Normal});
    specs.push_back({block_key(l, "attn.qkv.bias"), {3 * d}, ParamInit::Zeros});
    specs.push_back({block_key(l, "attn.proj.weight"), {d, d}, ParamInit::Normal});
    specs.push_back({block_key(l, "attn.proj.bias"), {d}, ParamInit::Zeros});
    specs.push_back({block_key(l, "norm2.weight"), {d}, ParamInit::Ones});
    specs.push_back({block_key(l, "norm2.bias"), {d}, ParamInit::Zeros});
    specs.push_back({block_key(l, "mlp.fc1.weight"), {d, hid}, ParamInit::Normal});
    specs.push_back({block_key(l, "mlp.fc1.bias"), {hid}, ParamInit::Zeros});
    specs.push_back({block_key(l, "mlp.fc2.weight"), {hid, d}, ParamInit::Normal});
    specs.push_back({block_key(l, "mlp.fc2.bias"), {d}, ParamInit::Zeros});
  }
  specs.push_back({"head.conv.weight", {c, d, k, k}, ParamInit::Normal});
  specs.push_back({"head.conv.bias", {c}, ParamInit::Zeros});
  return specs;
}

namespace detail {

template <class Rng>
double truncated_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double z = dist(rng);
    if (z >= -2.0 && z <= 2.0) return z * stddev;
  }
}

}  // namespace detail

/// Weights and embeddings ~ truncated normal(0, init_std) cut at two standard
/// deviations; biases zero; LayerNorm gains one. All class tokens start as one
/// shared random vector. Deterministic in the seed.
template <std::floating_point T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> store;
  for (const auto& spec : param_specs(cfg)) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case ParamInit::Normal:
        for (auto& v : t.data()) v = static_cast<T>(detail::truncated_normal(rng, cfg.init_std));
        break;
      case ParamInit::Zeros:
        break;
      case ParamInit::Ones:
        t.fill(T(1));
        break;
      case ParamInit::SharedRow: {
        const std::size_t cols = spec.shape[1];
        std::vector<T> row(cols);
        for (auto& v : row) v = static_cast<T>(detail::truncated_normal(rng, cfg.init_std));
        for (std::size_t r = 0; r < spec.shape[0]; ++r)
          for (std::size_t j = 0; j < cols; ++j) t[r * cols + j] = row[j];
        break;
      }
    }
    store.emplace(spec.name, std::move(t));
  }
  return store;
}

template <std::floating_point T>
void check_params(const ParamStore<T>& params, const ModelConfig& cfg) {
  for (const auto& spec : param_specs(cfg)) {
    auto it = params.find(spec.name);
    if (it == params.end()) throw ConfigError("missing parameter " + spec.name);
    if (it->second.shape() != spec.shape) {
      throw DimensionError("parameter " + spec.name + " has shape " +
                           shape_str(it->second.shape()) + ", config expects " +
                           shape_str(spec.shape));
    }
  }
}

/// Places every parameter on the graph, trainable or frozen.
template <std::floating_point T>
ParamVars<T> bind_params(Graph<T>& g, const ParamStore<T>& params, bool trainable) {
  ParamVars<T> vars;
  for (const auto& [name, t] : params) {
    vars.emplace(name, trainable ? g.parameter(t) : g.constant(t));
  }
  return vars;
}

/// Splits a 3 x S x S image into M = N^2 row-major patches, each flattened
/// channel-major to 3 * p * p values.
template <std::floating_point T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  require_rank(image.shape(), 3, "patchify");
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0 || h != w) {
    throw ConfigError("image " + shape_str(image.shape()) +
                      " is not a square divisible by patch size " + std::to_string(patch));
  }
  const std::size_t n = h / patch, len = ch * patch * patch;
  Tensor<T> out({n * n, len});
  for (std::size_t gy = 0; gy < n; ++gy)
    for (std::size_t gx = 0; gx < n; ++gx) {
      T* dst = out.data().data() + (gy * n + gx) * len;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            *dst++ = image[(c * h + gy * patch + y) * w + gx * patch + x];
    }
  return out;
}

/// Linear projection of flattened patches to M x D patch tokens.
template <std::floating_point T>
Var<T> embed_patches(Graph<T>& g, const Tensor<T>& image, Var<T> weight, Var<T> bias,
                     std::size_t patch) {
  Var<T> flat = g.constant(patchify(image, patch));
  return add_row_bias(matmul(flat, weight), bias);
}

template <std::floating_point T>
struct EncoderOutput {
  Var<T> tokens;                     // (C+M) x D after the last layer
  std::vector<Var<T>> class_tokens;  // per layer, C x D output class tokens
  AttentionStack<T> attention;
};

namespace detail {

template <std::floating_point T>
void require_finite(const Var<T>& v, const std::string& where) {
  if (!v.value().all_finite()) throw NumericalError("non-finite activation in " + where);
}

}  // namespace detail

/// Runs the encoder. `dropout_rng` enables attention dropout when non-null
/// and the config knob is positive.
template <std::floating_point T>
EncoderOutput<T> encode(Graph<T>& g, const ParamVars<T>& pv, const Tensor<T>& image,
                        const ModelConfig& cfg, std::mt19937_64* dropout_rng = nullptr) {
  const std::size_t c = cfg.num_classes, d = cfg.embed_dim, nh = cfg.heads;
  const std::size_t hd = cfg.head_dim();
  const std::size_t expected = cfg.image_size;
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != expected ||
      image.dim(2) != expected) {
    throw ConfigError("image " + shape_str(image.shape()) + " does not match image_size " +
                      std::to_string(expected));
  }
  auto p = [&](const std::string& name) { return pv.at(name); };

  Var<T> patches = embed_patches(g, image, p("patch_embed.weight"), p("patch_embed.bias"),
                                 cfg.patch_size());
  Var<T> x = add(concat_rows<T>({p("cls_tokens"), patches}), p("pos_embed"));

  const T scale_factor =
      T(1) / std::sqrt(static_cast<T>(cfg.full_dim_scale ? d : hd));
  const T eps = static_cast<T>(cfg.ln_eps);

  EncoderOutput<T> out;
  out.attention.layers = cfg.layers;
  out.attention.heads = nh;
  out.attention.maps.reserve(cfg.layers * nh);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto bp = [&](const char* suffix) { return pv.at(block_key(l, suffix)); };

    Var<T> h = layer_norm(x, bp("norm1.weight"), bp("norm1.bias"), eps);
    Var<T> qkv = add_row_bias(matmul(h, bp("attn.qkv.weight")), bp("attn.qkv.bias"));
    std::vector<Var<T>> head_out;
    head_out.reserve(nh);
    for (std::size_t i = 0; i < nh; ++i) {
      Var<T> q = slice_cols(qkv, i * hd, (i + 1) * hd);
      Var<T> k = slice_cols(qkv, d + i * hd, d + (i + 1) * hd);
      Var<T> v = slice_cols(qkv, 2 * d + i * hd, 2 * d + (i + 1) * hd);
      Var<T> attn = softmax_rows(scale(matmul_nt(q, k), scale_factor));
      out.attention.maps.push_back(attn.value());
      if (dropout_rng && cfg.attn_dropout > 0) {
        attn = dropout(attn, static_cast<T>(cfg.attn_dropout), *dropout_rng);
      }
      head_out.push_back(matmul(attn, v));
    }
    Var<T> mixed = nh == 1 ? head_out.front() : concat_cols(head_out);
    x = add(x, add_row_bias(matmul(mixed, bp("attn.proj.weight")), bp("attn.proj.bias")));

    Var<T> h2 = layer_norm(x, bp("norm2.weight"), bp("norm2.bias"), eps);
    Var<T> hidden = gelu(add_row_bias(matmul(h2, bp("mlp.fc1.weight")), bp("mlp.fc1.bias")));
    x = add(x, add_row_bias(matmul(hidden, bp("mlp.fc2.weight")), bp("mlp.fc2.bias")));

    detail::require_finite(x, "encoder layer " + std::to_string(l));
    out.class_tokens.push_back(slice_rows(x, 0, c));
  }
  out.tokens = x;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of MCT1 tensors plus manifest.txt with the config.

inline void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg,
                            const ParamStore<float>& params) {
  std::filesystem::create_directories(dir);
  cfg.to_manifest().save(dir / "manifest.txt");
  for (const auto& [name, t] : params) io::save_tensor(dir / (name + ".mct1"), t);
}

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.config = ModelConfig::from_manifest(io::Manifest::load(dir / "manifest.txt"));
  for (const auto& spec : param_specs(ck.config)) {
    Tensor<float> t = io::load_tensor(dir / (spec.name + ".mct1"));
    if (t.shape() != spec.shape) {
      throw FormatError("checkpoint tensor " + spec.name + " has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(spec.shape));
    }
    ck.params.emplace(spec.name, std::move(t));
  }
  return ck;
}

}  // namespace mct
