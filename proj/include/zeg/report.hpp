#pragma once

// Run reports and training histories as plain text.
//
// A report is a flat key=value record:
//   run.name, run.seed, run.status, run.error, run.wall_time_s
//   eval.pacc, eval.miou.seen, eval.miou.unseen, eval.miou.all, eval.hiou
//   eval.classes, eval.seen, eval.iou.<class>   (fractions, "nan" when absent)
//   config.<key>                                 (resolved training config)

#include "zeg/kv.hpp"
#include "zeg/metrics.hpp"
#include "zeg/trainer.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace zeg {

struct RunReport {
  std::string name;
  std::uint64_t seed = 0;
  /// "ok" or "failed"; a failed run carries `error` and no evaluation.
  std::string status = "ok";
  std::string error;
  double wall_time_s = 0;
  std::vector<std::string> class_names;
  std::vector<bool> seen;
  std::optional<EvalReport> eval;
  KeyValues config;

  bool ok() const { return status == "ok"; }

  KeyValues to_kv() const;
  static RunReport from_kv(const KeyValues& kv, const std::string& source = "report");
  bool operator==(const RunReport&) const = default;
};

std::string report_text(const RunReport& r);
RunReport parse_report(const std::string& text, const std::string& source = "report");
void save_report(const RunReport& r, const std::string& path);
RunReport load_report(const std::string& path);

/// Compares everything except the wall-clock time.
bool same_outcome(const RunReport& a, const RunReport& b);

/// One line per record: "iter phase loss lr".
std::string history_line(const HistoryRecord& r);
void append_history(const std::string& path, const HistoryRecord& r);
void write_history(const std::string& path, const History& h);
History read_history(const std::string& path);

}  // namespace zeg
