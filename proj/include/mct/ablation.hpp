#pragma once

// End-to-end studies: layer-count sweep, pipeline stages, pooling modes and
// CCT depth. Each study trains from a fixed seed and reports seed metrics.

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mct/pipeline.hpp"
#include "mct/synth.hpp"
#include "mct/train.hpp"

namespace mct {

struct StudySetup {
  synth::Dataset train_data;
  synth::Dataset eval_data;
  ModelConfig model;
  TrainOptions train;
  EvalOptions eval;
  std::uint64_t seed = 0;
  std::function<void(const std::string&)> log;  // progress lines, may be empty

  void note(const std::string& line) const {
    if (log) log(line);
  }
};

/// Train and eval splits from the default generator. The eval split uses the
/// next seed so it shares no samples with the training split.
inline std::pair<synth::Dataset, synth::Dataset> default_splits(std::uint64_t seed,
                                                                std::size_t train_samples = 400,
                                                                std::size_t eval_samples = 100) {
  synth::DatasetSpec spec;
  spec.seed = seed;
  spec.num_samples = train_samples;
  auto train = synth::generate(spec);
  spec.seed = seed + 1;
  spec.num_samples = eval_samples;
  return {std::move(train), synth::generate(spec)};
}

inline ParamStore<float> train_variant(const StudySetup& s, const ModelConfig& cfg,
                                       const std::string& name) {
  s.note("training " + name);
  return train<float>(s.train_data, cfg, s.train, s.seed).params;
}

struct KSweepRow {
  std::size_t k = 0;
  MetricReport report;
};

/// Attention seeds for every fused layer count K = 1..L.
inline std::vector<KSweepRow> sweep_k(const ParamStore<float>& params, const ModelConfig& cfg,
                                      const synth::Dataset& data, const EvalOptions& opt) {
  std::vector<StageEvaluator> evals;
  for (std::size_t k = 1; k <= cfg.layers; ++k) {
    EvalOptions o = opt;
    o.maps.fuse_layers = k;
    evals.emplace_back(cfg, std::vector<Stage>{Stage::Attention}, o);
  }
  for (const auto& sample : data) {
    const auto inf = infer(params, cfg, sample.image);
    for (auto& e : evals) e.add(inf, sample);
  }
  std::vector<KSweepRow> rows;
  for (std::size_t k = 1; k <= cfg.layers; ++k) rows.push_back({k, evals[k - 1].reports().front()});
  return rows;
}

inline std::string k_sweep_csv(const std::vector<KSweepRow>& rows) {
  std::ostringstream os;
  os << "k,fp,fn,miou\n" << std::fixed << std::setprecision(6);
  for (const auto& r : rows)
    os << r.k << ',' << r.report.rates.fp << ',' << r.report.rates.fn << ',' << r.report.iou.miou
       << '\n';
  return os.str();
}

/// The four map pipelines on one trained model.
inline std::vector<MetricReport> pipeline_study(const ParamStore<float>& params,
                                                const ModelConfig& cfg,
                                                const synth::Dataset& data,
                                                const EvalOptions& opt) {
  return evaluate_stages(params, cfg, data,
                         {Stage::Attention, Stage::AttentionAffinity, Stage::Fused,
                          Stage::FusedAffinity},
                         opt);
}

inline std::string reports_csv(const std::vector<MetricReport>& reports, std::size_t num_classes) {
  std::string out = MetricReport::csv_header(num_classes) + "\n";
  for (const auto& r : reports) out += r.csv_row() + "\n";
  return out;
}

struct PoolingRow {
  Pooling pooling = Pooling::GAP;
  double lambda = 0;  // GWRP only
  MetricReport report;
};

inline std::vector<std::pair<Pooling, double>> pooling_variants() {
  return {{Pooling::GMP, 0.0},
          {Pooling::GAP, 1.0},
          {Pooling::GWRP, 0.9},
          {Pooling::GWRP, 0.96},
          {Pooling::GWRP, 0.996}};
}

/// One training run per pooling variant, scored on the final seed stage.
inline std::vector<PoolingRow> pooling_study(const StudySetup& s,
                                             Stage stage = Stage::FusedAffinity) {
  std::vector<PoolingRow> rows;
  for (const auto& [mode, lambda] : pooling_variants()) {
    ModelConfig cfg = s.model;
    cfg.pooling = mode;
    if (mode == Pooling::GWRP) cfg.gwrp_lambda = lambda;
    std::ostringstream name;
    name << to_string(mode);
    if (mode == Pooling::GWRP) name << " lambda=" << lambda;
    auto params = train_variant(s, cfg, name.str());
    auto report = evaluate(params, cfg, s.eval_data, stage, s.eval);
    report.label = name.str();
    rows.push_back({mode, lambda, std::move(report)});
  }
  return rows;
}

inline std::string pooling_csv(const std::vector<PoolingRow>& rows) {
  std::ostringstream os;
  os << "pooling,lambda,miou,fp,fn,piou,pxap\n" << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    os << to_string(r.pooling) << ',';
    if (r.pooling == Pooling::GWRP) os << r.lambda;
    os << ',' << r.report.iou.miou << ',' << r.report.rates.fp << ',' << r.report.rates.fn << ','
       << r.report.loc.piou << ',' << r.report.loc.pxap << '\n';
  }
  return os.str();
}

struct DepthRow {
  std::size_t depth = 0;
  MetricReport report;
};

/// CCT applied to the top T layers, T = 0..L.
inline std::vector<DepthRow> sweep_cct_depth(const StudySetup& s,
                                             Stage stage = Stage::FusedAffinity) {
  std::vector<DepthRow> rows;
  for (std::size_t t = 0; t <= s.model.layers; ++t) {
    ModelConfig cfg = s.model;
    cfg.cct_layers = long(t);
    auto params = train_variant(s, cfg, "cct depth " + std::to_string(t));
    rows.push_back({t, evaluate(params, cfg, s.eval_data, stage, s.eval)});
  }
  return rows;
}

inline std::string cct_depth_csv(const std::vector<DepthRow>& rows) {
  std::ostringstream os;
  os << "depth,miou\n" << std::fixed << std::setprecision(6);
  for (const auto& r : rows) os << r.depth << ',' << r.report.iou.miou << '\n';
  return os.str();
}

}  // namespace mct
