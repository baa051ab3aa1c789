#pragma once

// Seed-quality metrics: per-class IoU / mIoU, foreground FP and FN rates, and
// threshold-sweep pIoU / PxAP. Counts are integers accumulated per image, so
// results do not depend on evaluation order.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mct/error.hpp"
#include "mct/tensor.hpp"

namespace mct {

using LabelMask = std::vector<std::uint8_t>;

/// Per-pixel class from C x H x W maps: argmax over present classes (lowest
/// index wins ties) when the best score reaches tau, otherwise background 0.
template <std::floating_point T>
LabelMask seed_prediction(const Tensor<T>& maps, const std::vector<std::uint8_t>& present,
                          double tau) {
  require_rank(maps.shape(), 3, "seed_prediction");
  const std::size_t c = maps.dim(0), px = maps.dim(1) * maps.dim(2);
  if (!present.empty() && present.size() != c) {
    throw DimensionError("seed_prediction: class filter length mismatch");
  }
  LabelMask out(px, 0);
  for (std::size_t i = 0; i < px; ++i) {
    bool any = false;
    T best = 0;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (!present.empty() && !present[k]) continue;
      const T v = maps[k * px + i];
      if (!any || v > best) {
        best = v;
        arg = k;
        any = true;
      }
    }
    if (any && double(best) >= tau) out[i] = std::uint8_t(arg + 1);
  }
  return out;
}

/// (C+1) x (C+1) pixel confusion counts, rows = ground truth.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : n_(num_classes + 1), counts_(n_ * n_, 0) {}

  void add(const LabelMask& pred, const LabelMask& gt) {
    if (pred.size() != gt.size()) {
      throw DimensionError("confusion: prediction has " + std::to_string(pred.size()) +
                           " pixels, ground truth " + std::to_string(gt.size()));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] >= n_ || gt[i] >= n_) throw DimensionError("confusion: class id out of range");
      ++counts_[std::size_t(gt[i]) * n_ + pred[i]];
    }
  }

  std::size_t size() const { return n_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<double> per_class;  // index 0 = background
  std::vector<bool> valid;        // false when the class is absent from pred and gt
  double miou = 0;
};

inline IouResult compute_iou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.size();
  IouResult r;
  r.per_class.assign(n, 0.0);
  r.valid.assign(n, false);
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t gt_c = 0, pred_c = 0;
    for (std::size_t k = 0; k < n; ++k) {
      gt_c += cm.at(c, k);
      pred_c += cm.at(k, c);
    }
    const std::uint64_t uni = gt_c + pred_c - tp;
    if (uni == 0) continue;
    r.valid[c] = true;
    r.per_class[c] = double(tp) / double(uni);
    sum += r.per_class[c];
    ++count;
  }
  r.miou = count ? sum / double(count) : 0.0;
  return r;
}

/// Convenience over a single split of masks.
inline IouResult miou(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& gt,
                      std::size_t num_classes) {
  if (pred.size() != gt.size()) throw DimensionError("miou: split sizes differ");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(pred[i], gt[i]);
  return compute_iou(cm);
}

struct FpFn {
  double fp = 0;
  double fn = 0;
};

/// Foreground error rates normalized by total pixels: a pixel predicted as
/// class c >= 1 with a different ground truth is a false positive of c; a
/// ground-truth pixel of class c >= 1 predicted otherwise is a false negative.
inline FpFn compute_fp_fn(const ConfusionMatrix& cm) {
  const std::size_t n = cm.size();
  std::uint64_t fp = 0, fn = 0;
  for (std::size_t g = 0; g < n; ++g)
    for (std::size_t p = 0; p < n; ++p) {
      if (g == p) continue;
      const auto v = cm.at(g, p);
      if (p >= 1) fp += v;
      if (g >= 1) fn += v;
    }
  const double total = double(cm.total());
  if (total == 0) return {};
  return {double(fp) / total, double(fn) / total};
}

inline FpFn fp_fn(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& gt,
                  std::size_t num_classes) {
  if (pred.size() != gt.size()) throw DimensionError("fp_fn: split sizes differ");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(pred[i], gt[i]);
  return compute_fp_fn(cm);
}

// ---------------------------------------------------------------------------
// Threshold sweep for pIoU / PxAP.

inline constexpr std::size_t kSweepPoints = 101;

inline const std::vector<double>& sweep_thresholds() {
  static const std::vector<double> t = [] {
    std::vector<double> v(kSweepPoints);
    for (std::size_t k = 0; k < kSweepPoints; ++k) v[k] = double(k) / 100.0;
    return v;
  }();
  return t;
}

struct PxapResult {
  std::vector<double> piou_per_class;
  std::vector<double> pxap_per_class;
  std::vector<bool> valid;           // false = class had no positive pixels
  std::vector<std::size_t> skipped;  // classes skipped for empty ground truth
  double piou = 0;
  double pxap = 0;
};

/// Per-class counts of (score >= t) against a binary ground truth for every
/// threshold t in {0.00, 0.01, ..., 1.00}.
class ThresholdSweep {
 public:
  explicit ThresholdSweep(std::size_t num_classes)
      : classes_(num_classes),
        tp_(num_classes * kSweepPoints, 0),
        fp_(num_classes * kSweepPoints, 0),
        pos_(num_classes, 0) {}

  /// `scores` and `positive` cover the same pixels of one class map.
  template <std::floating_point T>
  void add(std::size_t cls, std::span<const T> scores, const std::vector<std::uint8_t>& positive) {
    if (cls >= classes_) throw DimensionError("ThresholdSweep: class out of range");
    if (scores.size() != positive.size()) throw DimensionError("ThresholdSweep: size mismatch");
    const auto& th = sweep_thresholds();
    // hist[k] = pixels whose highest passed threshold index is k
    std::vector<std::uint64_t> hist_pos(kSweepPoints + 1, 0), hist_neg(kSweepPoints + 1, 0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const double s = double(scores[i]);
      // number of thresholds t_k with s >= t_k
      const std::size_t passed =
          std::size_t(std::upper_bound(th.begin(), th.end(), s) - th.begin());
      (positive[i] ? hist_pos : hist_neg)[passed] += 1;
      if (positive[i]) ++pos_[cls];
    }
    // count(score >= t_k) = sum over passed > k
    std::uint64_t cum_pos = 0, cum_neg = 0;
    for (std::size_t k = kSweepPoints; k-- > 0;) {
      cum_pos += hist_pos[k + 1];
      cum_neg += hist_neg[k + 1];
      tp_[cls * kSweepPoints + k] += cum_pos;
      fp_[cls * kSweepPoints + k] += cum_neg;
    }
  }

  std::uint64_t tp(std::size_t cls, std::size_t k) const { return tp_[cls * kSweepPoints + k]; }
  std::uint64_t fp(std::size_t cls, std::size_t k) const { return fp_[cls * kSweepPoints + k]; }
  std::uint64_t positives(std::size_t cls) const { return pos_[cls]; }

  PxapResult result() const {
    PxapResult r;
    r.piou_per_class.assign(classes_, 0.0);
    r.pxap_per_class.assign(classes_, 0.0);
    r.valid.assign(classes_, false);
    double sum_piou = 0, sum_pxap = 0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      if (pos_[c] == 0) {
        r.skipped.push_back(c);
        continue;
      }
      r.valid[c] = true;
      std::vector<double> precision(kSweepPoints + 1), recall(kSweepPoints + 1);
      double best = 0;
      for (std::size_t k = 0; k < kSweepPoints; ++k) {
        const double tpv = double(tp(c, k)), fpv = double(fp(c, k));
        const double fnv = double(pos_[c]) - tpv;
        best = std::max(best, tpv / (tpv + fpv + fnv));
        precision[k] = (tpv + fpv) > 0 ? tpv / (tpv + fpv) : 1.0;
        recall[k] = tpv / double(pos_[c]);
      }
      precision[kSweepPoints] = 1.0;
      recall[kSweepPoints] = 0.0;
      double area = 0;
      for (std::size_t k = 0; k < kSweepPoints; ++k) {
        area += (recall[k] - recall[k + 1]) * (precision[k] + precision[k + 1]) / 2.0;
      }
      r.piou_per_class[c] = best;
      r.pxap_per_class[c] = area;
      sum_piou += best;
      sum_pxap += area;
      ++used;
    }
    if (used) {
      r.piou = sum_piou / double(used);
      r.pxap = sum_pxap / double(used);
    }
    return r;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> tp_, fp_;
  std::vector<std::uint64_t> pos_;
};

/// pIoU / PxAP for one C x H x W score tensor against binary per-class masks.
template <std::floating_point T>
PxapResult pxap_piou(const Tensor<T>& scores, const std::vector<LabelMask>& gt_per_class) {
  require_rank(scores.shape(), 3, "pxap_piou");
  const std::size_t c = scores.dim(0), px = scores.dim(1) * scores.dim(2);
  if (gt_per_class.size() != c) throw DimensionError("pxap_piou: need one mask per class");
  ThresholdSweep sweep(c);
  for (std::size_t k = 0; k < c; ++k) {
    sweep.add<T>(k, scores.data().subspan(k * px, px), gt_per_class[k]);
  }
  return sweep.result();
}

// ---------------------------------------------------------------------------

struct MetricReport {
  std::string label;
  IouResult iou;
  FpFn rates;
  PxapResult loc;

  static std::string csv_header(std::size_t num_classes) {
    std::string h = "label,miou,fp,fn,piou,pxap,iou_background";
    for (std::size_t c = 0; c < num_classes; ++c) h += ",iou_class" + std::to_string(c);
    return h;
  }

  std::string csv_row() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << label << ',' << iou.miou << ',' << rates.fp << ',' << rates.fn << ',' << loc.piou << ','
       << loc.pxap;
    for (std::size_t c = 0; c < iou.per_class.size(); ++c) {
      os << ',';
      if (iou.valid[c]) os << iou.per_class[c];
      else os << "nan";
    }
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "== " << label << " ==\n";
    os << "  mIoU  " << std::setw(6) << 100 * iou.miou << "   FP " << std::setw(6)
       << 100 * rates.fp << "   FN " << std::setw(6) << 100 * rates.fn << "\n";
    os << "  pIoU  " << std::setw(6) << 100 * loc.piou << "   PxAP " << std::setw(6)
       << 100 * loc.pxap << "\n";
    for (std::size_t c = 0; c < iou.per_class.size(); ++c) {
      os << "  " << (c == 0 ? std::string("background") : "class " + std::to_string(c - 1))
         << ": ";
      if (iou.valid[c]) os << 100 * iou.per_class[c] << "\n";
      else os << "n/a\n";
    }
    return os.str();
  }
};

}  // namespace mct
