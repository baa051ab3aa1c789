#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mct/autodiff.hpp"
#include "mct/config.hpp"
#include "mct/encoder.hpp"
#include "mct/heads.hpp"
#include "mct/io.hpp"
#include "mct/synth.hpp"

namespace mct {

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool hflip = false;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  }

  void apply(const io::Manifest& m) {
    if (m.has("epochs")) epochs = ModelConfig::parse_size("epochs", m.get("epochs"));
    if (m.has("batch_size")) batch_size = ModelConfig::parse_size("batch_size", m.get("batch_size"));
    if (m.has("lr")) lr = ModelConfig::parse_real("lr", m.get("lr"));
    if (m.has("beta1")) beta1 = ModelConfig::parse_real("beta1", m.get("beta1"));
    if (m.has("beta2")) beta2 = ModelConfig::parse_real("beta2", m.get("beta2"));
    if (m.has("adam_eps")) eps = ModelConfig::parse_real("adam_eps", m.get("adam_eps"));
    if (m.has("weight_decay")) {
      weight_decay = ModelConfig::parse_real("weight_decay", m.get("weight_decay"));
    }
    if (m.has("hflip")) hflip = ModelConfig::parse_bool("hflip", m.get("hflip"));
  }
};

/// Adam with bias correction; decoupled weight decay when enabled.
template <std::floating_point T>
class Adam {
 public:
  Adam(const ParamStore<T>& params, const TrainOptions& opt) : opt_(opt) {
    for (const auto& [name, t] : params) {
      m_.emplace(name, std::vector<double>(t.size(), 0.0));
      v_.emplace(name, std::vector<double>(t.size(), 0.0));
    }
  }

  void step(ParamStore<T>& params, const ParamStore<T>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (auto& [name, p] : params) {
      const auto& g = grads.at(name);
      auto& m = m_.at(name);
      auto& v = v_.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        double upd = opt_.lr * mh / (std::sqrt(vh) + opt_.eps);
        if (opt_.weight_decay > 0) upd += opt_.lr * opt_.weight_decay * double(p[i]);
        p[i] = static_cast<T>(double(p[i]) - upd);
      }
    }
  }

 private:
  TrainOptions opt_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double total = 0;
  double cls_class = 0;
  double cls_patch = 0;
  double cct = 0;
};

inline std::string loss_csv(const std::vector<LossRecord>& rows) {
  std::ostringstream os;
  os << "epoch,step,loss_total,loss_cls_class,loss_cls_patch,loss_cct\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.step << ',' << r.total << ',' << r.cls_class << ',' << r.cls_patch
       << ',' << r.cct << '\n';
  }
  return os.str();
}

template <std::floating_point T>
struct TrainResult {
  ParamStore<T> params;
  std::vector<LossRecord> curve;  // one row per optimizer step
};

/// Loss terms of one sample at the given parameters (no gradient).
template <std::floating_point T>
LossRecord evaluate_loss(const ParamStore<T>& params, const ModelConfig& cfg,
                         const synth::Sample& sample) {
  Graph<T> g;
  auto pv = bind_params(g, params, false);
  auto out = run_model(g, pv, sample.image.template cast<T>(), cfg);
  auto terms = total_loss(out, sample.template label_vector<T>(), cfg);
  return {0, 0, double(terms.total.value()[0]), terms.cls_class, terms.cls_patch, terms.cct};
}

using ProgressFn = std::function<void(const LossRecord&)>;

/// Mini-batch Adam over the dataset. Each sample runs on its own graph and
/// gradients are summed in sample order, so runs are reproducible for a seed.
/// Sub-seeds: init = seed, shuffling = seed + 1, dropout/flip = seed + 2.
template <std::floating_point T>
TrainResult<T> train(const synth::Dataset& data, const ModelConfig& cfg, const TrainOptions& opt,
                     std::uint64_t seed, const ProgressFn& progress = {}) {
  if (data.empty()) throw ConfigError("train: dataset is empty");
  cfg.validate();
  opt.validate();
  if (data.front().labels.size() != cfg.num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.front().labels.size()) +
                      " classes, model config has " + std::to_string(cfg.num_classes));
  }

  TrainResult<T> res;
  res.params = init_params<T>(cfg, seed);
  Adam<T> adam(res.params, opt);
  std::mt19937_64 shuffle_rng(seed + 1);
  std::mt19937_64 aux_rng(seed + 2);

  ParamStore<T> grads;
  for (const auto& [name, t] : res.params) grads.emplace(name, Tensor<T>(t.shape()));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const T inv_batch = T(1) / T(end - start);
      for (auto& [name, gt] : grads) gt.fill(T(0));
      LossRecord rec{epoch, step, 0, 0, 0, 0};
      for (std::size_t b = start; b < end; ++b) {
        const synth::Sample* sample = &data[order[b]];
        synth::Sample flipped;
        if (opt.hflip && std::bernoulli_distribution(0.5)(aux_rng)) {
          flipped = synth::hflip(*sample);
          sample = &flipped;
        }
        Graph<T> g;
        auto pv = bind_params(g, res.params, true);
        auto out = run_model(g, pv, sample->image.template cast<T>(), cfg,
                             cfg.attn_dropout > 0 ? &aux_rng : nullptr);
        auto terms = total_loss(out, sample->template label_vector<T>(), cfg);
        const double total = double(terms.total.value()[0]);
        if (!std::isfinite(total)) {
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step));
        }
        g.backward(scale(terms.total, inv_batch));
        for (auto& [name, gt] : grads) {
          const Var<T>& v = pv.at(name);
          if (!g.has_grad(v.id)) continue;
          const auto& src = g.grad(v.id);
          for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += src[i];
        }
        rec.total += total;
        rec.cls_class += terms.cls_class;
        rec.cls_patch += terms.cls_patch;
        rec.cct += terms.cct;
      }
      const double n = double(end - start);
      rec.total /= n;
      rec.cls_class /= n;
      rec.cls_patch /= n;
      rec.cct /= n;
      adam.step(res.params, grads);
      res.curve.push_back(rec);
      if (progress) progress(rec);
      ++step;
    }
  }
  return res;
}

}  // namespace mct
