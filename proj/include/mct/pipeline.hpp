#pragma once

// Checkpoint -> localization maps -> seed masks -> metrics.

#include <cstdint>
#include <string>
#include <vector>

#include "mct/config.hpp"
#include "mct/encoder.hpp"
#include "mct/heads.hpp"
#include "mct/maps.hpp"
#include "mct/metrics.hpp"
#include "mct/synth.hpp"

namespace mct {

/// Which maps feed the seed masks.
enum class Stage {
  Attention,          // class-to-patch attention
  AttentionAffinity,  // attention refined by patch affinity
  PatchCam,           // CAM head only
  Fused,              // attention x PatchCAM
  FusedAffinity,      // fused maps refined by patch affinity
};

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Attention: return "attention";
    case Stage::AttentionAffinity: return "attention+affinity";
    case Stage::PatchCam: return "patchcam";
    case Stage::Fused: return "attention+patchcam";
    case Stage::FusedAffinity: return "attention+patchcam+affinity";
  }
  return "?";
}

/// CLI kinds: attention | patchcam | fused | refined.
inline Stage parse_stage(const std::string& kind) {
  if (kind == "attention") return Stage::Attention;
  if (kind == "patchcam") return Stage::PatchCam;
  if (kind == "fused") return Stage::Fused;
  if (kind == "refined") return Stage::FusedAffinity;
  if (kind == "attention-refined") return Stage::AttentionAffinity;
  throw ConfigError("unknown map kind '" + kind + "'");
}

inline std::string kind_name(Stage s) {
  switch (s) {
    case Stage::Attention: return "attention";
    case Stage::AttentionAffinity: return "attention-refined";
    case Stage::PatchCam: return "patchcam";
    case Stage::Fused: return "fused";
    case Stage::FusedAffinity: return "refined";
  }
  return "?";
}

struct InferenceResult {
  AttentionStack<float> attention;
  Tensor<float> feature_map;   // C x N x N
  Tensor<float> class_scores;  // C logits
};

/// Forward pass without gradient bookkeeping.
inline InferenceResult infer(const ParamStore<float>& params, const ModelConfig& cfg,
                             const Tensor<float>& image) {
  Graph<float> g;
  auto pv = bind_params(g, params, false);
  auto out = run_model(g, pv, image, cfg);
  return {std::move(out.encoder.attention), out.feature_map.value(), out.class_scores.value()};
}

struct MapOptions {
  std::size_t fuse_layers = 3;
  std::size_t refine_iterations = 1;
  bool affinity_raw = false;
  bool affinity_all_layers = false;

  static MapOptions from(const ModelConfig& cfg) {
    return {cfg.fuse_layers, cfg.refine_iterations, cfg.affinity_raw, cfg.affinity_all_layers};
  }
};

/// Class maps on the N x N grid for one stage. Refined stages are min-max
/// renormalized after propagation so the seed threshold keeps its meaning.
inline LocalizationMaps<float> build_maps(const InferenceResult& inf, const ModelConfig& cfg,
                                          Stage stage, const MapOptions& opt) {
  const std::size_t c = cfg.num_classes, n = cfg.grid;
  auto attention = [&] {
    return extract_class_to_patch(fuse_attention(inf.attention, opt.fuse_layers), c, n);
  };
  auto affinity = [&] {
    const std::size_t k = opt.affinity_all_layers ? inf.attention.layers : opt.fuse_layers;
    return extract_affinity(fuse_attention(inf.attention, k), c, n, opt.affinity_raw);
  };
  auto renormalized = [](LocalizationMaps<float> m) {
    m.maps = normalize_per_class(m.maps);
    return m;
  };
  switch (stage) {
    case Stage::Attention:
      return attention();
    case Stage::AttentionAffinity:
      return renormalized(refine(attention(), affinity(), opt.refine_iterations));
    case Stage::PatchCam:
      return patch_cam(inf.feature_map);
    case Stage::Fused:
      return fuse_maps(attention(), patch_cam(inf.feature_map));
    case Stage::FusedAffinity:
      return renormalized(
          refine(fuse_maps(attention(), patch_cam(inf.feature_map)), affinity(), opt.refine_iterations));
  }
  throw ConfigError("unknown stage");
}

/// Classes with sigmoid(score) >= 0.5.
inline std::vector<std::uint8_t> predicted_classes(const Tensor<float>& class_scores) {
  std::vector<std::uint8_t> out(class_scores.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = class_scores[i] >= 0.0f ? 1 : 0;
  return out;
}

/// Pixel-resolution maps for a sample, filtered to the given classes.
inline LocalizationMaps<float> seed_maps(const InferenceResult& inf, const ModelConfig& cfg,
                                         Stage stage, const MapOptions& opt,
                                         const std::vector<std::uint8_t>& present) {
  auto grid_maps = apply_class_filter(build_maps(inf, cfg, stage, opt), present);
  return upsample_maps(grid_maps, cfg.image_size);
}

struct EvalOptions {
  double tau = 0.35;
  MapOptions maps;
  // Filter classes by ground-truth labels (seed protocol) or by predictions.
  bool use_gt_classes = true;
};

/// Accumulates seed metrics for several stages over a split, one forward per
/// image.
class StageEvaluator {
 public:
  StageEvaluator(const ModelConfig& cfg, std::vector<Stage> stages, EvalOptions opt)
      : cfg_(cfg), stages_(std::move(stages)), opt_(opt) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      confusion_.emplace_back(cfg.num_classes);
      sweeps_.emplace_back(cfg.num_classes);
    }
  }

  void add(const InferenceResult& inf, const synth::Sample& sample) {
    const auto present = opt_.use_gt_classes ? sample.labels : predicted_classes(inf.class_scores);
    const std::size_t px = sample.mask.size();
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      auto maps = seed_maps(inf, cfg_, stages_[s], opt_.maps, present);
      confusion_[s].add(seed_prediction(maps.maps, present, opt_.tau), sample.mask);
      for (std::size_t c = 0; c < cfg_.num_classes; ++c) {
        if (!sample.labels[c]) continue;
        LabelMask positive(px);
        for (std::size_t i = 0; i < px; ++i) positive[i] = sample.mask[i] == c + 1;
        sweeps_[s].add<float>(c, maps.maps.data().subspan(c * px, px), positive);
      }
    }
  }

  std::vector<MetricReport> reports() const {
    std::vector<MetricReport> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      out.push_back({to_string(stages_[s]), compute_iou(confusion_[s]), compute_fp_fn(confusion_[s]),
                     sweeps_[s].result()});
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  std::vector<Stage> stages_;
  EvalOptions opt_;
  std::vector<ConfusionMatrix> confusion_;
  std::vector<ThresholdSweep> sweeps_;
};

inline std::vector<MetricReport> evaluate_stages(const ParamStore<float>& params,
                                                 const ModelConfig& cfg,
                                                 const synth::Dataset& data,
                                                 const std::vector<Stage>& stages,
                                                 const EvalOptions& opt) {
  StageEvaluator ev(cfg, stages, opt);
  for (const auto& sample : data) ev.add(infer(params, cfg, sample.image), sample);
  return ev.reports();
}

inline MetricReport evaluate(const ParamStore<float>& params, const ModelConfig& cfg,
                             const synth::Dataset& data, Stage stage, const EvalOptions& opt) {
  return evaluate_stages(params, cfg, data, {stage}, opt).front();
}

}  // namespace mct
