#include "zeg/metrics.hpp"

#include "zeg/kv.hpp"

namespace zeg {

void ConfusionMatrix::accumulate(const std::vector<Index>& predicted, const std::vector<std::uint8_t>& labels,
                                 std::uint8_t ignore_index) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("confusion matrix: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  const Index c = classes();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == ignore_index) continue;
    const Index gt = labels[i];
    const Index pred = predicted[i];
    if (gt >= c) throw ShapeError("confusion matrix: label " + std::to_string(gt) + " out of range");
    if (pred < 0 || pred >= c) throw ShapeError("confusion matrix: prediction " + std::to_string(pred) + " out of range");
    ++counts_(gt, pred);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes() != classes()) throw ShapeError("confusion matrix: merging different class counts");
  counts_ += other.counts_;
}

EvalReport compute(const ConfusionMatrix& cm, const std::vector<bool>& seen_mask) {
  const Index c = cm.classes();
  if (static_cast<Index>(seen_mask.size()) != c) throw ShapeError("compute: seen mask length differs from class count");
  const std::int64_t total = cm.total();
  if (total == 0) throw EmptyEvaluation("compute: confusion matrix is empty");
  const auto& m = cm.counts();
  EvalReport r;
  r.pixel_accuracy = static_cast<double>(m.trace()) / static_cast<double>(total);
  r.iou.assign(static_cast<std::size_t>(c), 0.0);
  r.present.assign(static_cast<std::size_t>(c), false);
  double sum_s = 0, sum_u = 0, sum_all = 0;
  Index n_s = 0, n_u = 0, n_all = 0;
  for (Index k = 0; k < c; ++k) {
    const std::int64_t diag = m(k, k);
    const std::int64_t uni = m.row(k).sum() + m.col(k).sum() - diag;
    if (uni == 0) continue;
    const double iou = static_cast<double>(diag) / static_cast<double>(uni);
    r.iou[static_cast<std::size_t>(k)] = iou;
    r.present[static_cast<std::size_t>(k)] = true;
    sum_all += iou;
    ++n_all;
    if (seen_mask[static_cast<std::size_t>(k)]) {
      sum_s += iou;
      ++n_s;
    } else {
      sum_u += iou;
      ++n_u;
    }
  }
  r.miou_seen = n_s > 0 ? sum_s / static_cast<double>(n_s) : 0.0;
  r.miou_unseen = n_u > 0 ? sum_u / static_cast<double>(n_u) : 0.0;
  r.miou = n_all > 0 ? sum_all / static_cast<double>(n_all) : 0.0;
  r.hiou = harmonic_mean(r.miou_seen, r.miou_unseen);
  return r;
}

std::map<std::string, std::string> report_fields(const EvalReport& r, const std::vector<std::string>& class_names) {
  std::map<std::string, std::string> kv;
  kv["pacc"] = format_double(100 * r.pixel_accuracy);
  kv["miou.seen"] = format_double(100 * r.miou_seen);
  kv["miou.unseen"] = format_double(100 * r.miou_unseen);
  kv["miou.all"] = format_double(100 * r.miou);
  kv["hiou"] = format_double(100 * r.hiou);
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    const std::string name = k < class_names.size() ? class_names[k] : std::to_string(k);
    kv["iou." + name] = r.present[k] ? format_double(100 * r.iou[k]) : "nan";
  }
  return kv;
}

}  // namespace zeg
