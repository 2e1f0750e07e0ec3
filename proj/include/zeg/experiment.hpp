#pragma once

// World directories, single training runs and ablation plans.
//
// A world directory holds everything a run needs:
//   world.txt               world, split, generation and pre-training settings
//   train-inductive.zegd    seen objects only
//   train-transductive.zegd all objects, unseen pixels ignored
//   train-supervised.zegd   all objects, all labelled
//   test.zegd
//   embeddings.zege         class text embeddings
//   encoder.zegw            pre-trained image encoder
//
// Plan files are line based:
//   kind=table4             optional layout hint (table5 adds a dim column)
//   seeds=0,1,2
//   world=<dir>             optional; the command line wins
//   default.<key>=<value>   applied to every run before its own keys
//   run <name>: key=value key=value ...

#include "zeg/config.hpp"
#include "zeg/data.hpp"
#include "zeg/io.hpp"
#include "zeg/report.hpp"
#include "zeg/text_query.hpp"
#include "zeg/trainer.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace zeg {

struct GenDataOptions {
  WorldSpec world;
  Index train_samples = 512;
  Index test_samples = 128;
  std::uint64_t data_seed = 0;
  Index templates = 1;
  EncoderConfig encoder;
  PretrainConfig pretrain;
};

struct WorldBundle {
  std::string dir;
  WorldSpec world;
  SplitSpec split;
  Dataset train_inductive;
  Dataset train_transductive;
  Dataset train_supervised;
  Dataset test;
  ClassEmbeddingBank bank;
  EncoderConfig encoder;
  WeightFile encoder_weights;

  const Dataset& training_set(TrainMode mode) const;
};

KeyValues encoder_config_kv(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_kv(const KeyValues& kv, const std::string& source);

/// Generates data, synthesises embeddings, pre-trains the encoder and writes
/// the world directory. Returns the loaded bundle.
WorldBundle generate_world(const GenDataOptions& opts, const std::string& dir, const LogCallback& on_log = {});
WorldBundle load_world(const std::string& dir);

struct RunSpec {
  std::string name;
  TrainConfig config;
  /// Re-synthesise the bank with this many templates (synthetic worlds only).
  std::optional<Index> templates;

  KeyValues to_kv() const;
};

struct RunFiles {
  std::string checkpoint;
  std::string history;
  std::string report;
};

/// Trains one configuration with `seed` and evaluates the checkpoint as it
/// would be reloaded from disk. Failures are reported, not thrown. Files are
/// written only for non-empty paths.
RunReport run_one(const WorldBundle& world, const RunSpec& spec, std::uint64_t seed, const RunFiles& files = {},
                  const LogCallback& on_log = {});

/// Evaluates a checkpoint (with its config echo) against `data`.
RunReport evaluate_checkpoint(const WeightFile& checkpoint, const Dataset& data, const ClassEmbeddingBank& bank,
                              const std::string& name = "eval");

struct ExperimentPlan {
  std::string kind = "generic";
  std::string world;
  std::vector<std::uint64_t> seeds{0};
  std::vector<RunSpec> runs;
};

/// Parses and validates every run before returning.
ExperimentPlan parse_plan(const std::string& text, const std::string& source = "plan");
std::string plan_text(const ExperimentPlan& plan);
std::vector<std::string> preset_plan_names();
ExperimentPlan preset_plan(const std::string& name);

struct CellSummary {
  std::string name;
  std::string dim;  // query width relative to d, e.g. "2d"
  Index ok = 0;
  Index total = 0;
  double pacc = 0, miou_seen = 0, miou_unseen = 0, hiou = 0;  // medians over successful seeds
  std::vector<std::string> errors;
};

struct AblationResult {
  std::string kind;
  std::vector<CellSummary> rows;
  std::vector<RunReport> reports;

  bool all_ok() const;
};

double median(std::vector<double> v);
CellSummary summarize(const std::string& name, const std::vector<RunReport>& reports);

using ProgressCallback = std::function<void(const RunReport&)>;

/// Runs every (run, seed) pair. With a non-empty `out_dir`, per-run files go
/// to <out_dir>/runs/ and a finished report whose config matches is reused.
AblationResult run_plan(const ExperimentPlan& plan, const WorldBundle& world, const std::string& out_dir = {},
                        const ProgressCallback& progress = {});

std::string format_table(const AblationResult& result);
std::string format_csv(const AblationResult& result);

}  // namespace zeg
