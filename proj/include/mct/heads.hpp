#pragma once

// Classification heads and training losses:
//   class-token scores  y_cls[c] = mean_j T_cls[c, j]
//   patch-token CAM head  conv -> F (C x N x N) -> global pooling -> y_patch
//   contrastive class tokens  mean over layers of CE(softmax(T T^T), I)
//   total = alpha * mlsm(y_cls) + beta * mlsm(y_patch) + gamma * cct

#include <cmath>
#include <random>
#include <vector>

#include "mct/autodiff.hpp"
#include "mct/config.hpp"
#include "mct/encoder.hpp"

namespace mct {

template <std::floating_point T>
Var<T> class_token_scores(Var<T> class_tokens) {
  return mean_cols(class_tokens);
}

/// Pools each row of F viewed as C x M.
template <std::floating_point T>
Var<T> global_pool(Var<T> rows, Pooling mode, T lambda) {
  switch (mode) {
    case Pooling::GAP: return mean_cols(rows);
    case Pooling::GMP: return max_cols(rows);
    case Pooling::GWRP: return rank_pool_cols(rows, lambda);
  }
  throw ConfigError("unknown pooling mode");
}

template <std::floating_point T>
struct CamHeadOutput {
  Var<T> feature_map;  // C x N x N
  Var<T> scores;       // C
};

template <std::floating_point T>
CamHeadOutput<T> cam_head(Var<T> patch_tokens, Var<T> conv_weight, Var<T> conv_bias,
                          Pooling mode, T lambda) {
  require_rank(patch_tokens.shape(), 2, "cam_head");
  const std::size_t m = patch_tokens.value().dim(0), d = patch_tokens.value().dim(1);
  const auto n = static_cast<std::size_t>(std::lround(std::sqrt(double(m))));
  if (n * n != m) {
    throw ConfigError("cam_head: " + std::to_string(m) + " patch tokens do not form a square grid");
  }
  Var<T> grid = reshape(transpose(patch_tokens), {d, n, n});
  Var<T> fmap = conv2d_same(grid, conv_weight, conv_bias);
  const std::size_t c = fmap.value().dim(0);
  Var<T> scores = global_pool(reshape(fmap, {c, m}), mode, lambda);
  return {fmap, scores};
}

/// Contrastive class-token regularizer over the given per-layer class tokens.
template <std::floating_point T>
Var<T> cct_loss(const std::vector<Var<T>>& class_tokens_per_layer) {
  if (class_tokens_per_layer.empty()) throw ConfigError("cct_loss: no layers given");
  Var<T> acc{};
  for (std::size_t i = 0; i < class_tokens_per_layer.size(); ++i) {
    const Var<T>& t = class_tokens_per_layer[i];
    Var<T> term = softmax_xent_identity(matmul_nt(t, t));
    acc = i == 0 ? term : add(acc, term);
  }
  return scale(acc, T(1) / T(class_tokens_per_layer.size()));
}

template <std::floating_point T>
struct ModelOutput {
  EncoderOutput<T> encoder;
  Var<T> class_scores;  // y_cls
  Var<T> feature_map;   // F, C x N x N
  Var<T> patch_scores;  // y_patch
};

template <std::floating_point T>
ModelOutput<T> run_model(Graph<T>& g, const ParamVars<T>& pv, const Tensor<T>& image,
                         const ModelConfig& cfg, std::mt19937_64* dropout_rng = nullptr) {
  ModelOutput<T> out;
  out.encoder = encode(g, pv, image, cfg, dropout_rng);
  const std::size_t c = cfg.num_classes;
  out.class_scores = class_token_scores(out.encoder.class_tokens.back());
  Var<T> patches = slice_rows(out.encoder.tokens, c, cfg.num_tokens());
  auto head = cam_head(patches, pv.at("head.conv.weight"), pv.at("head.conv.bias"),
                       cfg.pooling, static_cast<T>(cfg.gwrp_lambda));
  out.feature_map = head.feature_map;
  out.patch_scores = head.scores;
  return out;
}

template <std::floating_point T>
struct LossTerms {
  Var<T> total;
  double cls_class = 0;
  double cls_patch = 0;
  double cct = 0;
};

/// Weighted sum of the three loss terms. The contrastive term covers the top
/// `cfg.cct_depth()` layers; with depth 0 it is reported and weighted as 0.
template <std::floating_point T>
LossTerms<T> total_loss(const ModelOutput<T>& out, const std::vector<T>& labels,
                        const ModelConfig& cfg) {
  Graph<T>& g = *out.class_scores.graph;
  Var<T> l_cls = multilabel_soft_margin(out.class_scores, labels);
  Var<T> l_patch = multilabel_soft_margin(out.patch_scores, labels);
  const auto& layers = out.encoder.class_tokens;
  const std::size_t depth = cfg.cct_depth();
  Var<T> l_cct = depth == 0
                     ? g.constant(Tensor<T>({1}))
                     : cct_loss(std::vector<Var<T>>(layers.end() - long(depth), layers.end()));
  Var<T> total = add(add(scale(l_cls, static_cast<T>(cfg.alpha)),
                         scale(l_patch, static_cast<T>(cfg.beta))),
                     scale(l_cct, static_cast<T>(cfg.gamma)));
  return {total, double(l_cls.value()[0]), double(l_patch.value()[0]), double(l_cct.value()[0])};
}

// ---------------------------------------------------------------------------
// Value-level conveniences over plain tensors.

template <std::floating_point T>
Tensor<T> class_token_scores(const Tensor<T>& class_tokens) {
  Graph<T> g;
  return class_token_scores(g.constant(class_tokens)).value();
}

template <std::floating_point T>
T mlsm_loss(const Tensor<T>& logits, const std::vector<T>& labels) {
  Graph<T> g;
  return multilabel_soft_margin(g.constant(logits), labels).value()[0];
}

/// GWRP over P [M x C], pooling each channel column -> [C].
template <std::floating_point T>
Tensor<T> gwrp(const Tensor<T>& patches_by_channel, T lambda) {
  Graph<T> g;
  return rank_pool_cols(transpose(g.constant(patches_by_channel)), lambda).value();
}

template <std::floating_point T>
T cct_loss(const std::vector<Tensor<T>>& class_tokens_per_layer) {
  Graph<T> g;
  std::vector<Var<T>> vars;
  for (const auto& t : class_tokens_per_layer) vars.push_back(g.constant(t));
  return cct_loss(vars).value()[0];
}

/// Gram matrix T T^T of one layer's class tokens.
template <std::floating_point T>
Tensor<T> similarity_matrix(const Tensor<T>& class_tokens) {
  Graph<T> g;
  Var<T> t = g.constant(class_tokens);
  return matmul_nt(t, t).value();
}

}  // namespace mct
