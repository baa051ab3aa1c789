#pragma once

// Finite-difference check of the full training loss in double precision.

#include <algorithm>
#include <chrono>
#include <numeric>
#include <cstdint>
#include <string>
#include <vector>

#include "mct/config.hpp"
#include "mct/encoder.hpp"
#include "mct/gradcheck.hpp"
#include "mct/heads.hpp"
#include "mct/synth.hpp"

namespace mct {

struct ModelCheckReport {
  GradcheckResult result;
  std::string worst_param;
  double seconds = 0;
  double tolerance = 1e-4;

  bool passed() const { return result.max_rel_error < tolerance; }
};

/// FNV-1a hash of the descending order of every class row of a C x N x N
/// feature map: the branch selector of rank-based pooling.
inline std::uint64_t pooling_ranking(const Tensor<double>& fmap) {
  const std::size_t c = fmap.dim(0), m = fmap.size() / c;
  std::uint64_t h = 1469598103934665603ull;
  std::vector<std::size_t> order(m);
  for (std::size_t k = 0; k < c; ++k) {
    const double* row = fmap.data().data() + k * m;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    for (std::size_t i : order) h = (h ^ i) * 1099511628211ull;
  }
  return h;
}

/// Total loss on one synthetic sample at a seeded random init. Every
/// parameter tensor is checked on up to `coords_per_tensor` coordinates
/// (0 = all of them).
inline ModelCheckReport check_model_gradients(const ModelConfig& cfg, std::uint64_t seed,
                                              std::size_t coords_per_tensor = 16,
                                              double step = 1e-3, bool richardson = true,
                                              double denom_floor = 1e-8) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  synth::DatasetSpec ds;
  ds.num_classes = cfg.num_classes;
  ds.image_size = cfg.image_size;
  ds.max_objects = std::min<std::size_t>(3, cfg.num_classes);
  ds.max_size = std::min(ds.max_size, (cfg.image_size - 1) / 2);
  ds.min_size = std::min(ds.min_size, ds.max_size);
  ds.seed = seed;
  const synth::Sample sample = synth::generate_sample(ds, 0);
  const Tensor<double> image = sample.image.cast<double>();
  const std::vector<double> labels = sample.label_vector<double>();

  const auto specs = param_specs(cfg);
  const ParamStore<double> init = init_params<double>(cfg, seed);
  std::vector<Tensor<double>> flat;
  for (const auto& s : specs) flat.push_back(init.at(s.name));

  std::uint64_t ranking = 0;
  LossBuilder loss = [&](Graph<double>& g, const std::vector<Var<double>>& vars) {
    ParamVars<double> pv;
    for (std::size_t i = 0; i < specs.size(); ++i) pv.emplace(specs[i].name, vars[i]);
    auto out = run_model(g, pv, image, cfg);
    ranking = pooling_ranking(out.feature_map.value());
    return total_loss(out, labels, cfg).total;
  };

  GradcheckOptions opt;
  opt.step = step;
  opt.richardson = richardson;
  opt.max_coords_per_tensor = coords_per_tensor;
  opt.seed = seed;
  opt.denom_floor = denom_floor;
  if (cfg.pooling != Pooling::GAP) opt.branch = [&] { return ranking; };
  ModelCheckReport rep;
  rep.result = check_gradients(loss, std::move(flat), opt);
  rep.worst_param = specs[rep.result.worst_tensor].name;
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace mct
