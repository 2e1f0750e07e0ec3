#include "zeg/experiment.hpp"

#include "zeg/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

namespace zeg {

namespace fs = std::filesystem;

namespace {

const char* kWorldFile = "world.txt";
const char* kEmbeddingsFile = "embeddings.zege";
const char* kEncoderFile = "encoder.zegw";

std::string dataset_file(LabelRegime r) {
  switch (r) {
    case LabelRegime::Inductive:
      return "train-inductive.zegd";
    case LabelRegime::Transductive:
      return "train-transductive.zegd";
    case LabelRegime::Supervised:
      return "train-supervised.zegd";
    case LabelRegime::Test:
      return "test.zegd";
  }
  return "";
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

}  // namespace

const Dataset& WorldBundle::training_set(TrainMode mode) const {
  switch (mode) {
    case TrainMode::Inductive:
      return train_inductive;
    case TrainMode::TransductiveAll:
    case TrainMode::TransductiveUnseenOnly:
      return train_transductive;
    case TrainMode::Supervised:
      return train_supervised;
  }
  return train_inductive;
}

KeyValues encoder_config_kv(const EncoderConfig& cfg) {
  return {{"encoder.image_size", std::to_string(cfg.image_size)}, {"encoder.patch_size", std::to_string(cfg.patch_size)},
          {"encoder.channels", std::to_string(cfg.channels)},     {"encoder.depth", std::to_string(cfg.depth)},
          {"encoder.width", std::to_string(cfg.width)},           {"encoder.heads", std::to_string(cfg.heads)},
          {"encoder.mlp_ratio", std::to_string(cfg.mlp_ratio)}};
}

EncoderConfig encoder_config_from_kv(const KeyValues& kv, const std::string& source) {
  auto get = [&](const char* key) { return parse_int(key, require(kv, key, source)); };
  EncoderConfig cfg;
  cfg.image_size = get("encoder.image_size");
  cfg.patch_size = get("encoder.patch_size");
  cfg.channels = get("encoder.channels");
  cfg.depth = get("encoder.depth");
  cfg.width = get("encoder.width");
  cfg.heads = get("encoder.heads");
  cfg.mlp_ratio = get("encoder.mlp_ratio");
  cfg.validate();
  return cfg;
}

WorldBundle generate_world(const GenDataOptions& opts, const std::string& dir, const LogCallback& on_log) {
  opts.world.validate();
  if (opts.train_samples < 0 || opts.test_samples < 0) throw ConfigError("sample counts must be non-negative");
  if (opts.encoder.width != opts.world.embed_dim || opts.encoder.image_size != opts.world.image_size) {
    throw ConfigError("encoder width/image size must match the world's embed_dim/image_size");
  }
  const SplitSpec split = make_split(opts.world);
  fs::create_directories(dir);

  KeyValues meta = opts.world.to_kv();
  auto ids = [](const std::vector<Index>& v) {
    std::vector<std::string> s;
    for (Index i : v) s.push_back(std::to_string(i));
    return join(s, ',');
  };
  meta["split.seen"] = ids(split.seen);
  meta["split.unseen"] = ids(split.unseen);
  meta["data.train_samples"] = std::to_string(opts.train_samples);
  meta["data.test_samples"] = std::to_string(opts.test_samples);
  meta["data.seed"] = std::to_string(opts.data_seed);
  meta["embeddings.templates"] = std::to_string(opts.templates);
  for (const auto& [k, v] : opts.pretrain.to_kv()) meta[k] = v;
  for (const auto& [k, v] : encoder_config_kv(opts.encoder)) meta[k] = v;

  const std::uint64_t train_seed = mix_seed(opts.data_seed, 1), test_seed = mix_seed(opts.data_seed, 2);
  for (auto regime : {LabelRegime::Inductive, LabelRegime::Transductive, LabelRegime::Supervised}) {
    save_dataset(generate(opts.world, split, opts.train_samples, train_seed, regime), path_in(dir, dataset_file(regime)));
  }
  save_dataset(generate(opts.world, split, opts.test_samples, test_seed, LabelRegime::Test),
               path_in(dir, dataset_file(LabelRegime::Test)));
  save_embeddings(synthesize_bank(opts.world, split, opts.templates), path_in(dir, kEmbeddingsFile));

  // The pre-training set labels every class: it plays the role of the
  // image-text corpus the backbone saw before any zero-shot split existed.
  const Dataset corpus =
      generate(opts.world, split, opts.pretrain.samples, mix_seed(opts.data_seed, 3), LabelRegime::Supervised);
  Encoder<float> encoder(opts.encoder, opts.pretrain.seed);
  pretrain_encoder(encoder, corpus, opts.pretrain, on_log);
  save_weights(to_weight_file(encoder.parameters(), to_text(encoder_config_kv(opts.encoder))), path_in(dir, kEncoderFile));

  write_file_atomic(path_in(dir, kWorldFile), to_text(meta));
  return load_world(dir);
}

WorldBundle load_world(const std::string& dir) {
  const std::string meta_path = path_in(dir, kWorldFile);
  if (!fs::exists(meta_path)) throw FormatError(dir + ": not a world directory (missing " + kWorldFile + ")");
  WorldBundle b;
  b.dir = dir;
  const KeyValues meta = parse_text(read_file(meta_path), meta_path);
  b.world = WorldSpec::from_kv(meta);
  auto ids = [&](const std::string& key) {
    std::vector<Index> out;
    for (const auto& s : split(require(meta, key, meta_path), ',')) out.push_back(parse_int(key, s));
    return out;
  };
  b.split.seen = ids("split.seen");
  b.split.unseen = ids("split.unseen");
  b.train_inductive = load_dataset(path_in(dir, dataset_file(LabelRegime::Inductive)));
  b.train_transductive = load_dataset(path_in(dir, dataset_file(LabelRegime::Transductive)));
  b.train_supervised = load_dataset(path_in(dir, dataset_file(LabelRegime::Supervised)));
  b.test = load_dataset(path_in(dir, dataset_file(LabelRegime::Test)));
  b.bank = load_embeddings(path_in(dir, kEmbeddingsFile));
  b.encoder_weights = load_weights(path_in(dir, kEncoderFile));
  b.encoder = encoder_config_from_kv(parse_text(b.encoder_weights.config_echo, kEncoderFile), kEncoderFile);
  if (b.bank.num_classes() != b.world.num_classes()) {
    throw FormatError(dir + ": embeddings have " + std::to_string(b.bank.num_classes()) + " classes, world has " +
                      std::to_string(b.world.num_classes()));
  }
  return b;
}

KeyValues RunSpec::to_kv() const {
  KeyValues kv = config.to_kv();
  if (templates) kv["templates"] = std::to_string(*templates);
  return kv;
}

namespace {

/// Echo stored inside checkpoints: training config, encoder config and the
/// bank geometry it was trained against.
std::string checkpoint_echo(const TrainConfig& cfg, const EncoderConfig& enc, const ClassEmbeddingBank& bank) {
  KeyValues kv = cfg.to_kv();
  for (const auto& [k, v] : encoder_config_kv(enc)) kv[k] = v;
  kv["bank.classes"] = std::to_string(bank.num_classes());
  kv["bank.dim"] = std::to_string(bank.dim());
  return to_text(kv);
}

template <typename S>
Evaluation evaluate_weights(const WeightFile& file, const TrainConfig& cfg, const EncoderConfig& enc_cfg,
                            const Dataset& data, const ClassEmbeddingBank& bank) {
  Encoder<S> encoder(enc_cfg, 0);
  SegModel<S> model(model_config(cfg, enc_cfg, bank.dim()), std::move(encoder), cfg.seed);
  assign_weights(file, model.parameters());
  return evaluate(model, data, bank);
}

template <typename S>
WeightFile train_weights(const WorldBundle& world, const TrainConfig& cfg, const ClassEmbeddingBank& bank,
                         const LogCallback& on_log) {
  Encoder<S> encoder(world.encoder, 0);
  assign_weights(world.encoder_weights, encoder.parameters());
  SegModel<S> model(model_config(cfg, world.encoder, bank.dim()), std::move(encoder), cfg.seed);
  train(model, cfg, world.training_set(cfg.mode), bank, on_log);
  return to_weight_file(model.parameters(), checkpoint_echo(cfg, world.encoder, bank));
}

ClassEmbeddingBank bank_for(const WorldBundle& world, const RunSpec& spec) {
  if (!spec.templates) return world.bank;
  return synthesize_bank(world.world, world.split, *spec.templates);
}

}  // namespace

RunReport run_one(const WorldBundle& world, const RunSpec& spec, std::uint64_t seed, const RunFiles& files,
                  const LogCallback& on_log) {
  const auto start = std::chrono::steady_clock::now();
  RunReport report;
  report.name = spec.name;
  report.seed = seed;
  report.class_names = world.bank.names();
  report.seen = world.bank.seen_mask();
  TrainConfig cfg = spec.config;
  cfg.seed = seed;
  report.config = RunSpec{spec.name, cfg, spec.templates}.to_kv();
  try {
    cfg.validate();
    const ClassEmbeddingBank bank = bank_for(world, spec);
    History history;
    auto log = [&](const HistoryRecord& r) {
      history.push_back(r);
      if (!files.history.empty()) append_history(files.history, r);
      if (on_log) on_log(r);
    };
    if (!files.history.empty()) write_file_atomic(files.history, "");
    WeightFile weights = cfg.precision == Precision::Double ? train_weights<double>(world, cfg, bank, log)
                                                            : train_weights<float>(world, cfg, bank, log);
    // Evaluate what a reload of the checkpoint would see.
    const std::string bytes = encode_weights(weights);
    if (!files.checkpoint.empty()) write_file_atomic(files.checkpoint, bytes);
    const WeightFile reloaded = decode_weights(bytes, spec.name);
    const Evaluation ev = cfg.precision == Precision::Double
                              ? evaluate_weights<double>(reloaded, cfg, world.encoder, world.test, bank)
                              : evaluate_weights<float>(reloaded, cfg, world.encoder, world.test, bank);
    report.eval = ev.report;
  } catch (const std::exception& e) {
    report.status = "failed";
    report.error = e.what();
  }
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!files.report.empty()) save_report(report, files.report);
  return report;
}

RunReport evaluate_checkpoint(const WeightFile& checkpoint, const Dataset& data, const ClassEmbeddingBank& bank,
                              const std::string& name) {
  const auto start = std::chrono::steady_clock::now();
  const KeyValues echo = parse_text(checkpoint.config_echo, "checkpoint config");
  const Index classes = parse_int("bank.classes", require(echo, "bank.classes", "checkpoint config"));
  const Index dim = parse_int("bank.dim", require(echo, "bank.dim", "checkpoint config"));
  if (classes != bank.num_classes() || dim != bank.dim()) {
    throw ConfigError("checkpoint was trained against " + std::to_string(classes) + " classes of width " +
                      std::to_string(dim) + ", but the embeddings have " + std::to_string(bank.num_classes()) +
                      " classes of width " + std::to_string(bank.dim()));
  }
  if (data.world.num_classes() != bank.num_classes()) {
    throw ConfigError("dataset world has " + std::to_string(data.world.num_classes()) + " classes, embeddings have " +
                      std::to_string(bank.num_classes()));
  }
  KeyValues train_kv;
  for (const auto& [k, v] : echo)
    if (k.rfind("encoder.", 0) != 0 && k.rfind("bank.", 0) != 0) train_kv[k] = v;
  const TrainConfig cfg = TrainConfig::from_kv(train_kv);
  const EncoderConfig enc = encoder_config_from_kv(echo, "checkpoint config");
  RunReport report;
  report.name = name;
  report.seed = cfg.seed;
  report.class_names = bank.names();
  report.seen = bank.seen_mask();
  report.config = cfg.to_kv();
  const Evaluation ev = cfg.precision == Precision::Double ? evaluate_weights<double>(checkpoint, cfg, enc, data, bank)
                                                           : evaluate_weights<float>(checkpoint, cfg, enc, data, bank);
  report.eval = ev.report;
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------------------
// Plans

namespace {

/// "key=value key=value" into ordered pairs.
std::vector<std::pair<std::string, std::string>> parse_assignments(const std::string& text, const std::string& where) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError(where + ": expected key=value, got '" + tok + "'");
    out.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
  }
  return out;
}

}  // namespace

ExperimentPlan parse_plan(const std::string& text, const std::string& source) {
  ExperimentPlan plan;
  KeyValues defaults;
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> raw;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    const std::string where = source + ":" + std::to_string(lineno);
    if (t.empty() || t[0] == '#') continue;
    if (t.rfind("run ", 0) == 0) {
      const auto colon = t.find(':');
      if (colon == std::string::npos) throw FormatError(where + ": expected 'run <name>: key=value ...'");
      const std::string name = trim(t.substr(4, colon - 4));
      if (name.empty() || name.find_first_of(" \t/") != std::string::npos) {
        throw FormatError(where + ": run names must be non-empty without spaces or slashes");
      }
      raw.emplace_back(name, parse_assignments(t.substr(colon + 1), where));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError(where + ": expected key=value or a run line");
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (key == "kind") {
      plan.kind = value;
    } else if (key == "world") {
      plan.world = value;
    } else if (key == "seeds") {
      plan.seeds.clear();
      for (const auto& s : split(value, ',')) plan.seeds.push_back(parse_uint("seeds", trim(s)));
      if (plan.seeds.empty()) throw FormatError(where + ": seeds list is empty");
    } else if (key.rfind("default.", 0) == 0) {
      defaults[key.substr(8)] = value;
    } else {
      throw FormatError(where + ": unknown plan key '" + key + "'");
    }
  }

  std::set<std::string> names;
  std::vector<std::string> errors;
  for (const auto& [name, assignments] : raw) {
    if (!names.insert(name).second) {
      errors.push_back("duplicate run name '" + name + "'");
      continue;
    }
    RunSpec spec;
    spec.name = name;
    KeyValues kv = defaults;
    for (const auto& [k, v] : assignments) kv[k] = v;
    try {
      if (auto it = kv.find("templates"); it != kv.end()) {
        spec.templates = parse_int("templates", it->second);
        if (*spec.templates < 1) throw ConfigError("templates must be at least 1");
        kv.erase(it);
      }
      spec.config.apply(kv);
      spec.config.validate();
    } catch (const ConfigError& e) {
      errors.push_back("run '" + name + "': " + e.what());
      continue;
    }
    plan.runs.push_back(std::move(spec));
  }
  if (raw.empty()) errors.push_back("plan defines no runs");
  if (!errors.empty()) {
    std::string msg = source + ": invalid plan:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return plan;
}

std::string plan_text(const ExperimentPlan& plan) {
  std::string out = "kind=" + plan.kind + "\n";
  if (!plan.world.empty()) out += "world=" + plan.world + "\n";
  std::vector<std::string> seeds;
  for (auto s : plan.seeds) seeds.push_back(std::to_string(s));
  out += "seeds=" + join(seeds, ',') + "\n";
  const KeyValues base = TrainConfig{}.to_kv();
  for (const auto& run : plan.runs) {
    out += "run " + run.name + ":";
    for (const auto& [k, v] : run.to_kv()) {
      if (k == "seed") continue;
      auto it = base.find(k);
      if (it == base.end() || it->second != v) out += " " + k + "=" + v;
    }
    out += "\n";
  }
  return out;
}

std::vector<std::string> preset_plan_names() { return {"table4", "table5", "prompt-tokens", "prompt-depth", "templates"}; }

ExperimentPlan preset_plan(const std::string& name) {
  ExperimentPlan plan;
  plan.kind = name;
  plan.seeds = {0, 1, 2};
  auto add = [&](std::string run, const TrainConfig& cfg, std::optional<Index> templates = std::nullopt) {
    plan.runs.push_back({std::move(run), cfg, templates});
  };
  if (name == "table4") {
    for (auto regime : {Regime::Fix, Regime::FT, Regime::DPT}) {
      const std::string base = regime == Regime::Fix ? "Baseline-Fix" : regime == Regime::FT ? "Baseline-FT" : "Baseline-DPT";
      for (int variant = 0; variant < 4; ++variant) {
        TrainConfig cfg;
        cfg.regime = regime;
        const bool nel = variant == 1 || variant == 3, rd = variant >= 2;
        cfg.loss.mode = nel ? LossMode::NELPlus : LossMode::EL;
        cfg.format = rd ? QueryFormat::CAT_TG_T : QueryFormat::T;
        add(base + (nel ? "+NEL" : "") + (rd ? "+RD" : ""), cfg);
      }
    }
  } else if (name == "table5") {
    for (auto f : all_query_formats()) {
      TrainConfig cfg;
      cfg.format = f;
      add(query_format_name(f), cfg);
    }
  } else if (name == "prompt-tokens") {
    for (Index m : {1, 5, 10, 20, 35}) {
      TrainConfig cfg;
      cfg.prompts.tokens = m;
      add("tokens-" + std::to_string(m), cfg);
    }
  } else if (name == "prompt-depth") {
    const std::vector<std::pair<Index, Index>> ranges{{1, 1}, {1, 2}, {1, 3}, {1, 5}, {1, 6}, {6, 6}, {4, 6}, {2, 6}};
    for (auto [a, b] : ranges) {
      TrainConfig cfg;
      cfg.prompts.first_layer = a;
      cfg.prompts.last_layer = b;
      add("layers-" + std::to_string(a) + ".." + std::to_string(b), cfg);
    }
  } else if (name == "templates") {
    add("single", TrainConfig{}, 1);
    add("multiple", TrainConfig{}, 15);
  } else {
    throw ConfigError("unknown preset plan '" + name + "' (expected " + join(preset_plan_names(), ',') + ")");
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Ablation

bool AblationResult::all_ok() const {
  return std::all_of(reports.begin(), reports.end(), [](const RunReport& r) { return r.ok(); });
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

CellSummary summarize(const std::string& name, const std::vector<RunReport>& reports) {
  CellSummary c;
  c.name = name;
  c.total = static_cast<Index>(reports.size());
  std::vector<double> pacc, s, u, h;
  for (const auto& r : reports) {
    if (!r.ok() || !r.eval) {
      c.errors.push_back("seed " + std::to_string(r.seed) + ": " + r.error);
      continue;
    }
    ++c.ok;
    pacc.push_back(r.eval->pixel_accuracy);
    s.push_back(r.eval->miou_seen);
    u.push_back(r.eval->miou_unseen);
    h.push_back(r.eval->hiou);
  }
  c.pacc = median(pacc);
  c.miou_seen = median(s);
  c.miou_unseen = median(u);
  c.hiou = median(h);
  return c;
}

AblationResult run_plan(const ExperimentPlan& plan, const WorldBundle& world, const std::string& out_dir,
                        const ProgressCallback& progress) {
  AblationResult result;
  result.kind = plan.kind;
  const std::string runs_dir = out_dir.empty() ? std::string() : path_in(out_dir, "runs");
  if (!runs_dir.empty()) fs::create_directories(runs_dir);
  for (const auto& spec : plan.runs) {
    std::vector<RunReport> cell;
    for (auto seed : plan.seeds) {
      RunFiles files;
      RunReport report;
      bool cached = false;
      if (!runs_dir.empty()) {
        const std::string stem = path_in(runs_dir, spec.name + ".seed" + std::to_string(seed));
        files = {stem + ".zegw", stem + ".history", stem + ".report"};
        if (fs::exists(files.report)) {
          try {
            RunReport old = load_report(files.report);
            TrainConfig cfg = spec.config;
            cfg.seed = seed;
            if (old.ok() && old.config == RunSpec{spec.name, cfg, spec.templates}.to_kv()) {
              report = std::move(old);
              cached = true;
            }
          } catch (const std::exception&) {
            // Unreadable reports are simply recomputed.
          }
        }
      }
      if (!cached) report = run_one(world, spec, seed, files);
      if (progress) progress(report);
      cell.push_back(report);
      result.reports.push_back(std::move(report));
    }
    CellSummary summary = summarize(spec.name, cell);
    const Index mult = query_multiplier(spec.config.format);
    summary.dim = mult == 1 ? "d" : std::to_string(mult) + "d";
    result.rows.push_back(std::move(summary));
  }
  return result;
}

namespace {

std::string pct(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100 * v);
  return buf;
}

}  // namespace

std::string format_table(const AblationResult& result) {
  const bool dims = result.kind == "table5";
  std::size_t width = 4;
  for (const auto& r : result.rows) width = std::max(width, r.name.size());
  std::ostringstream out;
  auto cell = [&](const std::string& s, std::size_t w) {
    out << s;
    for (std::size_t i = s.size(); i < w; ++i) out << ' ';
  };
  cell("name", width + 2);
  if (dims) cell("dim", 5);
  out << "pAcc    mIoU(S) mIoU(U) hIoU    runs\n";
  for (const auto& r : result.rows) {
    cell(r.name, width + 2);
    if (dims) cell(r.dim, 5);
    cell(pct(r.pacc), 8);
    cell(pct(r.miou_seen), 8);
    cell(pct(r.miou_unseen), 8);
    cell(pct(r.hiou), 8);
    out << r.ok << "/" << r.total << "\n";
  }
  for (const auto& r : result.rows)
    for (const auto& e : r.errors) out << "! " << r.name << " " << e << "\n";
  return out.str();
}

std::string format_csv(const AblationResult& result) {
  std::string out = "name,dim,pacc,miou_seen,miou_unseen,hiou,runs_ok,runs_total\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : format_double(100 * v); };
  for (const auto& r : result.rows) {
    out += r.name + "," + r.dim + "," + num(r.pacc) + "," + num(r.miou_seen) + "," + num(r.miou_unseen) + "," +
           num(r.hiou) + "," + std::to_string(r.ok) + "," + std::to_string(r.total) + "\n";
  }
  return out;
}

}  // namespace zeg
