// zegseg: generate a synthetic world, train, evaluate and run ablation plans.

#include "zeg/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace zeg;

namespace {

/// Training flags shared by train and ablate. Only flags that were given end
/// up in the override map, so config files and plan defaults stay in force.
struct TrainFlags {
  std::string config_file;
  KeyValues values;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "key=value file; flags override it")->check(CLI::ExistingFile);
    for (const auto& [flag, help] : std::vector<std::pair<std::string, std::string>>{
             {"iters", "training iterations"},
             {"batch", "images per step"},
             {"lr", "learning rate"},
             {"wd", "weight decay"},
             {"warmup", "linear warmup iterations"},
             {"regime", "fix, ft or dpt"},
             {"loss", "el, nel-plain or nel-plus"},
             {"query-format", "class query layout, e.g. cat-tg-t"},
             {"alpha", "focal weight"},
             {"beta", "dice weight"},
             {"gamma", "focal exponent"},
             {"prompt-tokens", "prompt tokens per layer"},
             {"prompt-layers", "layer range a..b (1-based)"},
             {"decoder-layers", "decoder depth"},
             {"decoder-width", "decoder width"},
             {"decoder-heads", "decoder heads"},
             {"mode", "inductive, transductive-all, transductive-unseen-only or supervised"},
             {"threshold", "pseudo-label confidence threshold or none"},
             {"self-training-iters", "length of the self-training phase or auto"},
             {"precision", "float or double"},
             {"log-every", "history interval"},
         }) {
      app->add_option_function<std::string>(
          "--" + flag, [this, flag](const std::string& v) { values[flag] = v; }, help);
    }
  }

  KeyValues resolve() const {
    KeyValues kv;
    if (!config_file.empty()) kv = parse_text(read_file(config_file), config_file);
    for (const auto& [k, v] : values) kv[k] = v;
    return kv;
  }
};

void print_report(const RunReport& r) {
  if (!r.ok()) {
    std::printf("%s seed %llu: FAILED: %s\n", r.name.c_str(), static_cast<unsigned long long>(r.seed), r.error.c_str());
    return;
  }
  const auto& e = *r.eval;
  std::printf("%s seed %llu: pAcc %.2f  mIoU(S) %.2f  mIoU(U) %.2f  hIoU %.2f  (%.1fs)\n", r.name.c_str(),
              static_cast<unsigned long long>(r.seed), 100 * e.pixel_accuracy, 100 * e.miou_seen, 100 * e.miou_unseen,
              100 * e.hiou, r.wall_time_s);
}

void write_iou_csv(const RunReport& r, const std::string& path) {
  if (!r.eval) return;
  std::string out = "class,seen,iou\n";
  for (std::size_t k = 0; k < r.class_names.size(); ++k) {
    out += r.class_names[k] + "," + (r.seen[k] ? "1" : "0") + "," +
           (r.eval->present[k] ? format_double(100 * r.eval->iou[k]) : std::string()) + "\n";
  }
  write_file_atomic(path, out);
}

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot segmentation on a synthetic compositional world"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate datasets, embeddings and the pre-trained encoder");
  GenDataOptions gen_opts;
  std::string gen_out, gen_config;
  Index gen_unseen = gen_opts.world.n_unseen;
  bool gen_background = false;
  gen->add_option("--out,--world", gen_out, "output world directory")->required();
  gen->add_option("--config", gen_config, "key=value file with world.*, pretrain.* and data.* keys")
      ->check(CLI::ExistingFile);
  gen->add_option("--seed", gen_opts.data_seed, "data seed");
  gen->add_option("--world-seed", gen_opts.world.seed, "seed for the split and attribute vectors");
  gen->add_option("--unseen", gen_unseen, "number of unseen classes");
  gen->add_option("--train", gen_opts.train_samples, "training images per set");
  gen->add_option("--test", gen_opts.test_samples, "test images");
  gen->add_option("--templates", gen_opts.templates, "text templates averaged per class");
  gen->add_flag("--background", gen_background, "make background a class");
  gen->add_option("--pretrain-iters", gen_opts.pretrain.iters, "encoder pre-training iterations");
  gen->add_option("--pretrain-samples", gen_opts.pretrain.samples, "encoder pre-training corpus size");

  // train
  auto* train_cmd = app.add_subcommand("train", "train one configuration and evaluate it on the test set");
  std::string train_world, train_out, train_name = "run";
  std::uint64_t train_seed = 0;
  TrainFlags train_flags;
  train_cmd->add_option("--world", train_world, "world directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--seed", train_seed, "run seed");
  train_cmd->add_option("--name", train_name, "run name");
  train_flags.add(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_world, eval_data, eval_emb, eval_out;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--world", eval_world, "world directory (test set and embeddings)")
      ->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--data", eval_data, "dataset file (overrides the world test set)")->check(CLI::ExistingFile);
  eval_cmd->add_option("--embeddings", eval_emb, "embedding file (overrides the world embeddings)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_out, "report file");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run every configuration of a plan over its seeds");
  std::string ablate_plan, ablate_preset, ablate_world, ablate_out, ablate_seeds;
  TrainFlags ablate_flags;
  ablate->add_option("--plan", ablate_plan, "plan file")->check(CLI::ExistingFile);
  ablate->add_option("--preset", ablate_preset, "built-in plan name");
  ablate->add_option("--world", ablate_world, "world directory (overrides the plan)");
  ablate->add_option("--out", ablate_out, "output directory")->required();
  ablate->add_option("--seeds", ablate_seeds, "comma-separated seeds (overrides the plan)");
  ablate_flags.add(ablate);

  // plan
  auto* plan_cmd = app.add_subcommand("plan", "print a built-in plan");
  std::string plan_name;
  plan_cmd->add_option("name", plan_name, "table4, table5, prompt-tokens, prompt-depth or templates")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      if (!gen_config.empty()) {
        const KeyValues kv = parse_text(read_file(gen_config), gen_config);
        gen_opts.world = WorldSpec::from_kv(kv);
        for (const auto& [k, v] : kv) {
          if (k == "pretrain.iters") gen_opts.pretrain.iters = parse_int(k, v);
          else if (k == "pretrain.batch") gen_opts.pretrain.batch = parse_int(k, v);
          else if (k == "pretrain.samples") gen_opts.pretrain.samples = parse_int(k, v);
          else if (k == "pretrain.lr") gen_opts.pretrain.lr = parse_double(k, v);
          else if (k == "pretrain.wd") gen_opts.pretrain.wd = parse_double(k, v);
          else if (k == "pretrain.tau") gen_opts.pretrain.tau = parse_double(k, v);
          else if (k == "pretrain.dense_weight") gen_opts.pretrain.dense_weight = parse_double(k, v);
          else if (k == "pretrain.seed") gen_opts.pretrain.seed = parse_uint(k, v);
          else if (k == "data.train_samples") gen_opts.train_samples = parse_int(k, v);
          else if (k == "data.test_samples") gen_opts.test_samples = parse_int(k, v);
          else if (k == "data.seed") gen_opts.data_seed = parse_uint(k, v);
          else if (k == "embeddings.templates") gen_opts.templates = parse_int(k, v);
          else if (k.rfind("world.", 0) != 0) throw ConfigError(gen_config + ": unknown key '" + k + "'");
        }
        // Command-line flags still win.
        for (auto* opt : gen->get_options()) {
          if (opt->count() == 0) continue;
          const std::string n = opt->get_name();
          if (n == "--seed") gen_opts.data_seed = opt->as<std::uint64_t>();
          if (n == "--train") gen_opts.train_samples = opt->as<Index>();
          if (n == "--test") gen_opts.test_samples = opt->as<Index>();
          if (n == "--templates") gen_opts.templates = opt->as<Index>();
          if (n == "--pretrain-iters") gen_opts.pretrain.iters = opt->as<Index>();
          if (n == "--pretrain-samples") gen_opts.pretrain.samples = opt->as<Index>();
          if (n == "--world-seed") gen_opts.world.seed = opt->as<std::uint64_t>();
          if (n == "--unseen") gen_unseen = opt->as<Index>();
        }
        if (gen->count("--unseen") == 0) gen_unseen = gen_opts.world.n_unseen;
      }
      gen_opts.world.n_unseen = gen_unseen;
      if (gen_background) gen_opts.world.background_class = true;
      gen_opts.encoder.image_size = gen_opts.world.image_size;
      gen_opts.encoder.width = gen_opts.world.embed_dim;
      const WorldBundle w = generate_world(gen_opts, gen_out, [](const HistoryRecord& r) {
        std::printf("pretrain %lld loss %.4f\n", static_cast<long long>(r.iter), r.loss);
      });
      std::printf("world %s: %lld classes, %zu seen / %zu unseen\n", gen_out.c_str(),
                  static_cast<long long>(w.world.num_classes()), w.split.seen.size(), w.split.unseen.size());
      std::printf("seen:  ");
      for (Index c : w.split.seen) std::printf(" %s", w.world.class_name(c).c_str());
      std::printf("\nunseen:");
      for (Index c : w.split.unseen) std::printf(" %s", w.world.class_name(c).c_str());
      std::printf("\ntrain %lld images per set, test %lld images\n", static_cast<long long>(w.train_inductive.size()),
                  static_cast<long long>(w.test.size()));
      return 0;
    }

    if (*train_cmd) {
      RunSpec spec;
      spec.name = train_name;
      KeyValues kv = train_flags.resolve();
      if (auto it = kv.find("templates"); it != kv.end()) {
        spec.templates = parse_int("templates", it->second);
        kv.erase(it);
      }
      kv.erase("seed");
      spec.config.apply(kv);
      spec.config.seed = train_seed;
      spec.config.validate();
      const WorldBundle world = load_world(train_world);
      fs::create_directories(train_out);
      RunFiles files{in_dir(train_out, "checkpoint.zegw"), in_dir(train_out, "history.txt"),
                     in_dir(train_out, "report.txt")};
      const RunReport r = run_one(world, spec, train_seed, files, [](const HistoryRecord& h) {
        std::printf("iter %lld %s loss %.5f\n", static_cast<long long>(h.iter), h.phase.c_str(), h.loss);
      });
      write_iou_csv(r, in_dir(train_out, "iou.csv"));
      print_report(r);
      return r.ok() ? 0 : 1;
    }

    if (*eval_cmd) {
      if (eval_world.empty() && (eval_data.empty() || eval_emb.empty())) {
        throw ConfigError("eval needs --world, or both --data and --embeddings");
      }
      const Dataset data = !eval_data.empty() ? load_dataset(eval_data) : load_dataset(in_dir(eval_world, "test.zegd"));
      const ClassEmbeddingBank bank =
          !eval_emb.empty() ? load_embeddings(eval_emb) : load_embeddings(in_dir(eval_world, "embeddings.zege"));
      const RunReport r = evaluate_checkpoint(load_weights(eval_ckpt), data, bank, fs::path(eval_ckpt).stem().string());
      if (!eval_out.empty()) save_report(r, eval_out);
      print_report(r);
      return 0;
    }

    if (*ablate) {
      if (ablate_plan.empty() == ablate_preset.empty()) throw ConfigError("ablate needs exactly one of --plan or --preset");
      ExperimentPlan plan = ablate_plan.empty() ? preset_plan(ablate_preset) : parse_plan(read_file(ablate_plan), ablate_plan);
      if (!ablate_world.empty()) plan.world = ablate_world;
      if (plan.world.empty()) throw ConfigError("no world directory: pass --world or set world= in the plan");
      if (!ablate_seeds.empty()) {
        plan.seeds.clear();
        for (const auto& s : split(ablate_seeds, ',')) plan.seeds.push_back(parse_uint("seeds", trim(s)));
      }
      const KeyValues overrides = ablate_flags.resolve();
      for (auto& run : plan.runs) {
        run.config.apply(overrides);
        run.config.validate();
      }
      const WorldBundle world = load_world(plan.world);
      fs::create_directories(ablate_out);
      write_file_atomic(in_dir(ablate_out, "plan.txt"), plan_text(plan));
      const AblationResult result = run_plan(plan, world, ablate_out, print_report);
      const std::string table = format_table(result);
      write_file_atomic(in_dir(ablate_out, "table.txt"), table);
      write_file_atomic(in_dir(ablate_out, "table.csv"), format_csv(result));
      std::cout << "\n" << table;
      return result.all_ok() ? 0 : 1;
    }

    if (*plan_cmd) {
      std::cout << plan_text(preset_plan(plan_name));
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
