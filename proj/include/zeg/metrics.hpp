#pragma once

// Generalised zero-shot segmentation metrics over a pixel confusion matrix
// (rows = ground truth, columns = prediction).

#include "zeg/data.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace zeg {

class EmptyEvaluation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(Index classes) : counts_(Counts::Zero(classes, classes)) {}

  Index classes() const { return counts_.rows(); }
  const Counts& counts() const { return counts_; }
  Counts& counts() { return counts_; }
  std::int64_t total() const { return counts_.sum(); }

  /// Adds one (prediction, label) map pair, skipping ignored pixels.
  void accumulate(const std::vector<Index>& predicted, const std::vector<std::uint8_t>& labels,
                  std::uint8_t ignore_index = kIgnoreLabel);

  /// Element-wise sum; associative and commutative.
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix& o) const { return counts_ == o.counts_; }

 private:
  Counts counts_;
};

struct EvalReport {
  double pixel_accuracy = 0;
  std::vector<double> iou;    // per class; 0 where excluded
  std::vector<bool> present;  // false for zero-union classes
  double miou_seen = 0;
  double miou_unseen = 0;
  double miou = 0;
  double hiou = 0;

  bool operator==(const EvalReport&) const = default;
};

EvalReport compute(const ConfusionMatrix& cm, const std::vector<bool>& seen_mask);

inline double harmonic_mean(double s, double u) { return s + u > 0 ? 2 * s * u / (s + u) : 0.0; }

/// Flat key-value view with values in percent (iou.<name>, miou.seen, ...).
std::map<std::string, std::string> report_fields(const EvalReport& r, const std::vector<std::string>& class_names);

}  // namespace zeg
