#pragma once

// Forensic evaluation metrics. Binary scores are fake-class probabilities;
// a sample is flagged fake when score >= threshold. Positives are fake,
// negatives are real:
//   FAR = share of real samples flagged fake
//   FRR = share of fake samples passed as real

#include <algorithm>
#include <cstddef>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"

namespace capsfor {

/// Square confusion matrix; rows are true classes, columns predictions.
class Confusion {
 public:
  explicit Confusion(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes < 2) throw ParameterError("confusion matrix needs at least two classes");
  }

  void add(std::size_t truth, std::size_t predicted, std::size_t n = 1) {
    if (truth >= classes_ || predicted >= classes_) throw ParameterError("class index out of range in confusion matrix");
    counts_[truth * classes_ + predicted] += n;
  }

  std::size_t classes() const { return classes_; }
  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * classes_ + predicted); }
  std::size_t total() const {
    std::size_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::size_t correct() const {
    std::size_t t = 0;
    for (std::size_t k = 0; k < classes_; ++k) t += at(k, k);
    return t;
  }
  std::size_t row_total(std::size_t truth) const {
    std::size_t t = 0;
    for (std::size_t p = 0; p < classes_; ++p) t += at(truth, p);
    return t;
  }
  const std::vector<std::size_t>& counts() const { return counts_; }

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

/// (TP + TN) / (TP + TN + FP + FN).
inline double accuracy(std::size_t tp, std::size_t tn, std::size_t fp, std::size_t fn) {
  const std::size_t total = tp + tn + fp + fn;
  if (total == 0) throw ParameterError("accuracy of an empty confusion matrix");
  return static_cast<double>(tp + tn) / static_cast<double>(total);
}

/// trace / total; for two classes identical to the TP/TN form.
inline double accuracy(const Confusion& c) {
  if (c.total() == 0) throw ParameterError("accuracy of an empty confusion matrix");
  return static_cast<double>(c.correct()) / static_cast<double>(c.total());
}

/// Per-class recall (diagonal over row totals); classes without samples give 0.
inline std::vector<double> per_class_accuracy(const Confusion& c) {
  std::vector<double> out(c.classes(), 0.0);
  for (std::size_t k = 0; k < c.classes(); ++k) {
    const std::size_t row = c.row_total(k);
    if (row) out[k] = static_cast<double>(c.at(k, k)) / static_cast<double>(row);
  }
  return out;
}

struct ErrorRates {
  double far = 0;
  double frr = 0;
};

inline ErrorRates error_rates(std::span<const double> pos, std::span<const double> neg, double threshold) {
  if (pos.empty() || neg.empty()) throw ParameterError("error rates need both fake and real scores");
  ErrorRates r;
  for (double s : neg) r.far += s >= threshold ? 1.0 : 0.0;
  for (double s : pos) r.frr += s < threshold ? 1.0 : 0.0;
  r.far /= static_cast<double>(neg.size());
  r.frr /= static_cast<double>(pos.size());
  return r;
}

inline double hter(double far, double frr) { return (far + frr) / 2.0; }

struct RocPoint {
  double threshold;
  double far;
  double frr;
  double tpr() const { return 1.0 - frr; }
};

/**
 * Full threshold sweep. Points run from threshold +inf (nothing flagged,
 * ROC point (0,0)) down through every distinct score to the minimum
 * (everything flagged, ROC point (1,1)).
 */
inline std::vector<RocPoint> roc(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw ParameterError("ROC needs both fake and real scores");
  std::vector<double> p(pos.begin(), pos.end()), n(neg.begin(), neg.end());
  std::sort(p.begin(), p.end());
  std::sort(n.begin(), n.end());
  std::vector<double> thresholds;
  thresholds.reserve(p.size() + n.size());
  std::merge(p.begin(), p.end(), n.begin(), n.end(), std::back_inserter(thresholds));
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<RocPoint> out;
  out.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  const double np = static_cast<double>(p.size()), nn = static_cast<double>(n.size());
  for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
    const double t = *it;
    // Counts of scores >= t via the sorted arrays.
    const auto neg_above = static_cast<double>(n.end() - std::lower_bound(n.begin(), n.end(), t));
    const auto pos_below = static_cast<double>(std::lower_bound(p.begin(), p.end(), t) - p.begin());
    out.push_back({t, neg_above / nn, pos_below / np});
  }
  return out;
}

/**
 * Equal error rate: the sweep point where FAR - FRR changes sign, linearly
 * interpolated between the two bracketing thresholds.
 */
inline double eer(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw ParameterError("EER needs both fake and real scores");
  const std::vector<RocPoint> pts = roc(pos, neg);
  // Walk from the lowest threshold (FAR = 1, FRR = 0) upwards.
  for (std::size_t k = pts.size() - 1; k-- > 0;) {
    const RocPoint& lo = pts[k + 1];
    const RocPoint& hi = pts[k];
    const double d_lo = lo.far - lo.frr, d_hi = hi.far - hi.frr;
    if (d_hi > 0) continue;
    if (d_hi == 0) return hi.far;
    const double lambda = d_lo / (d_lo - d_hi);
    return lo.far + lambda * (hi.far - lo.far);
  }
  return 0.0;  // unreachable: the +inf point has FAR - FRR = -1
}

}  // namespace capsfor
