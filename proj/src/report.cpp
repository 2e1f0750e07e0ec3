#include "zeg/report.hpp"

#include "zeg/io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace zeg {

namespace {

std::string fraction(double v) { return std::isnan(v) ? "nan" : format_double(v); }

double parse_fraction(const std::string& key, const std::string& v) {
  return v == "nan" ? std::nan("") : parse_double(key, v);
}

}  // namespace

KeyValues RunReport::to_kv() const {
  KeyValues kv;
  kv["run.name"] = name;
  kv["run.seed"] = std::to_string(seed);
  kv["run.status"] = status;
  if (!error.empty()) kv["run.error"] = error;
  kv["run.wall_time_s"] = format_double(wall_time_s);
  kv["eval.classes"] = join(class_names, ',');
  std::string flags;
  for (bool s : seen) flags.push_back(s ? '1' : '0');
  kv["eval.seen"] = flags;
  if (eval) {
    kv["eval.pacc"] = fraction(eval->pixel_accuracy);
    kv["eval.miou.seen"] = fraction(eval->miou_seen);
    kv["eval.miou.unseen"] = fraction(eval->miou_unseen);
    kv["eval.miou.all"] = fraction(eval->miou);
    kv["eval.hiou"] = fraction(eval->hiou);
    for (std::size_t k = 0; k < eval->iou.size(); ++k) {
      kv["eval.iou." + class_names.at(k)] = eval->present[k] ? fraction(eval->iou[k]) : "nan";
    }
  }
  for (const auto& [k, v] : config) kv["config." + k] = v;
  return kv;
}

RunReport RunReport::from_kv(const KeyValues& kv, const std::string& source) {
  RunReport r;
  r.name = require(kv, "run.name", source);
  r.seed = parse_uint("run.seed", require(kv, "run.seed", source));
  r.status = require(kv, "run.status", source);
  if (r.status != "ok" && r.status != "failed") throw FormatError(source + ": unknown run status '" + r.status + "'");
  if (auto it = kv.find("run.error"); it != kv.end()) r.error = it->second;
  r.wall_time_s = parse_double("run.wall_time_s", require(kv, "run.wall_time_s", source));
  r.class_names = split(require(kv, "eval.classes", source), ',');
  const std::string& flags = require(kv, "eval.seen", source);
  if (flags.size() != r.class_names.size()) throw FormatError(source + ": eval.seen does not match eval.classes");
  for (char c : flags) {
    if (c != '0' && c != '1') throw FormatError(source + ": eval.seen must be a string of 0/1 flags");
    r.seen.push_back(c == '1');
  }
  if (kv.count("eval.pacc")) {
    EvalReport e;
    e.pixel_accuracy = parse_fraction("eval.pacc", kv.at("eval.pacc"));
    e.miou_seen = parse_fraction("eval.miou.seen", require(kv, "eval.miou.seen", source));
    e.miou_unseen = parse_fraction("eval.miou.unseen", require(kv, "eval.miou.unseen", source));
    e.miou = parse_fraction("eval.miou.all", require(kv, "eval.miou.all", source));
    e.hiou = parse_fraction("eval.hiou", require(kv, "eval.hiou", source));
    for (const auto& name : r.class_names) {
      const std::string key = "eval.iou." + name;
      const std::string& v = require(kv, key, source);
      e.present.push_back(v != "nan");
      e.iou.push_back(v == "nan" ? 0.0 : parse_double(key, v));
    }
    r.eval = e;
  }
  for (const auto& [k, v] : kv) {
    if (k.rfind("config.", 0) == 0) r.config[k.substr(7)] = v;
  }
  return r;
}

std::string report_text(const RunReport& r) { return to_text(r.to_kv()); }

RunReport parse_report(const std::string& text, const std::string& source) {
  return RunReport::from_kv(parse_text(text, source), source);
}

void save_report(const RunReport& r, const std::string& path) { write_file_atomic(path, report_text(r)); }

RunReport load_report(const std::string& path) { return parse_report(read_file(path), path); }

bool same_outcome(const RunReport& a, const RunReport& b) {
  RunReport x = a, y = b;
  x.wall_time_s = y.wall_time_s = 0;
  return x == y;
}

std::string history_line(const HistoryRecord& r) {
  return std::to_string(r.iter) + " " + r.phase + " " + format_double(r.loss) + " " + format_double(r.lr);
}

void append_history(const std::string& path, const HistoryRecord& r) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path);
  out << history_line(r) << "\n";
}

void write_history(const std::string& path, const History& h) {
  std::string text;
  for (const auto& r : h) text += history_line(r) + "\n";
  write_file_atomic(path, text);
}

History read_history(const std::string& path) {
  std::istringstream in(read_file(path));
  History h;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::istringstream fields(line);
    HistoryRecord r;
    std::string loss, lr, extra;
    if (!(fields >> r.iter >> r.phase >> loss >> lr) || (fields >> extra)) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'iter phase loss lr'");
    }
    r.loss = parse_double("loss", loss);
    r.lr = parse_double("lr", lr);
    h.push_back(r);
  }
  return h;
}

}  // namespace zeg
