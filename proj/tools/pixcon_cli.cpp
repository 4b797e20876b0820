#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pixcon/config.hpp"
#include "pixcon/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace pixcon;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Values given on the command line for one subcommand, by key.
struct Flags {
  std::string config_path;
  std::map<std::string, std::string> values;
};

std::string describe(const ConfigKey& k) {
  std::string s = k.help + " [default: " + (k.default_value.empty() ? "none" : k.default_value);
  if (!k.full_scale_value.empty()) s += "; full-scale: " + k.full_scale_value;
  return s + "]";
}

void add_config_flags(CLI::App* sub, Flags& flags) {
  sub->add_option("--config", flags.config_path, "Config file of 'key = value' lines");
  for (const auto& k : config_keys()) {
    sub->add_option("--" + k.name, flags.values[k.name], describe(k));
  }
}

// Defaults, then the config file, then explicit flags.
Config resolve(const CLI::App* sub, const Flags& flags) {
  Config c;
  if (!flags.config_path.empty()) c.load_file(flags.config_path);
  for (const auto& [key, value] : flags.values) {
    if (sub->count("--" + key) > 0) c.set(key, value);
  }
  return c;
}

void progress(const Config& c, const std::string& line) {
  if (c.flag("verbose")) std::cerr << line << "\n";
}

std::optional<std::uint8_t> background(const Config& c) {
  if (c.text("background_class") == "none") return std::nullopt;
  return static_cast<std::uint8_t>(c.count("background_class"));
}

Dataset load(const Config& c) { return load_dataset(c.text("data"), c.count("num_classes"), background(c)); }

fs::path out_dir(const Config& c) {
  fs::path p = c.text("out");
  fs::create_directories(p);
  return p;
}

ModelParams require_checkpoint(const Config& c) {
  if (c.text("checkpoint").empty()) throw UsageError("--checkpoint is required");
  return load_checkpoint(c.text("checkpoint"));
}

const std::vector<LabeledImage>& pick_split(const Dataset& ds, const Config& c) {
  const std::string& s = c.text("split");
  if (s == "train") return ds.train;
  if (s == "val") return ds.val;
  throw UsageError("--split must be train or val, got '" + s + "'");
}

void write_run(const fs::path& dir, const std::string& name, const ModelParams& params,
               const std::vector<MetricsRow>& log, std::size_t classes) {
  save_checkpoint(dir / (name + ".ckpt"), params);
  write_metrics_csv(dir / (name + "_metrics.csv"), log, classes);
}

void write_eval(const fs::path& path, const Metrics& m) {
  std::ofstream out(path);
  out << "class,iou\n";
  const auto iou = m.per_class_iou();
  for (std::size_t c = 0; c < iou.size(); ++c) out << c << "," << (iou[c] ? format_double(*iou[c]) : "") << "\n";
  out << "mean," << format_double(m.miou()) << "\n";
}

int cmd_gen_data(const Config& c) {
  const SynthConfig s = synth_config(c);
  Dataset ds = generate_synthetic_dataset(s, c.count("n"), c.count("n_val"), c.text("data"));
  ds.background_class = background(c);
  save_dataset(ds);
  progress(c, "wrote " + std::to_string(ds.train.size()) + " train and " + std::to_string(ds.val.size()) +
                  " val images to " + c.text("data"));
  return 0;
}

int cmd_pretrain(const Config& c) {
  const Dataset ds = load(c);
  const TrainConfig cfg = pretrain_config(c);
  TrainResult r = pretrain(ds.train, cfg);
  write_run(out_dir(c), "pretrain", r.params, r.log, ds.num_classes);
  return 0;
}

int cmd_finetune(const Config& c) {
  const Dataset ds = load(c);
  TrainResult r = finetune(ds.train, ds.val, require_checkpoint(c), finetune_config(c));
  write_run(out_dir(c), "finetune", r.params, r.log, ds.num_classes);
  return 0;
}

int cmd_train_ce(const Config& c) {
  const Dataset ds = load(c);
  TrainResult r = train_ce_only(ds.train, ds.val, ce_config(c));
  write_run(out_dir(c), "ce_only", r.params, r.log, ds.num_classes);
  return 0;
}

int cmd_train_joint(const Config& c) {
  const Dataset ds = load(c);
  TrainResult r = train_joint(ds.train, ds.val, joint_config(c));
  write_run(out_dir(c), "joint", r.params, r.log, ds.num_classes);
  return 0;
}

int cmd_pseudo_label(const Config& c) {
  const Dataset ds = load(c);
  const ModelParams params = require_checkpoint(c);
  const PseudoLabelConfig pl = pseudo_label_config(c);
  const ModelSpec spec = model_spec(c);
  std::vector<LabeledImage> items;
  std::vector<LabelMap> maps;
  for (const auto& item : pick_split(ds, c)) {
    items.push_back({item.pixels, pseudo_label(params, spec.encoder, item.pixels, pl), item.id});
    maps.push_back(items.back().labels);
  }
  write_pseudo_labels(fs::path(c.text("data")) / "pseudo_labels", items);
  progress(c, "pseudo-label coverage " + format_double(pseudo_coverage(maps)));
  return 0;
}

int cmd_semisup(const Config& c) {
  const Dataset ds = load(c);
  const std::size_t n = std::min(c.count("labeled"), ds.train.size());
  std::span<const LabeledImage> all(ds.train);
  SemisupResult r =
      semisup_train(all.first(n), all.subspan(n), ds.val, pipeline_config(c), pseudo_label_config(c));
  const fs::path dir = out_dir(c);
  write_run(dir, "semisup_round1", r.round1.params, r.round1.log, ds.num_classes);
  write_run(dir, "semisup_round2", r.round2.params, r.round2.log, ds.num_classes);
  write_pseudo_labels(dir / "pseudo_labels", r.pseudo_labeled);
  progress(c, "round1 mIoU " + format_double(r.round1.metrics.miou()) + ", round2 mIoU " +
                  format_double(r.round2.metrics.miou()) + ", coverage " + format_double(r.coverage));
  return 0;
}

int cmd_eval(const Config& c) {
  const Dataset ds = load(c);
  const Metrics m = evaluate(require_checkpoint(c), model_spec(c).encoder, pick_split(ds, c), ds.num_classes);
  write_eval(out_dir(c) / "eval.csv", m);
  progress(c, "mIoU " + format_double(m.miou()));
  return 0;
}

int cmd_dump_embeddings(const Config& c) {
  const Dataset ds = load(c);
  const auto bags = embedding_bags(require_checkpoint(c), model_spec(c).encoder, pick_split(ds, c));
  std::ofstream out(out_dir(c) / "embeddings.csv");
  write_embedding_csv(out, bags);
  try {
    const EmbeddingStats s = embedding_stats(pool_bags(bags));
    progress(c, "intra " + format_double(s.intra) + " inter " + format_double(s.inter));
  } catch (const Error& e) {
    // Too few labelled pixels for the statistic; the CSV is still complete.
    progress(c, std::string("no similarity statistic: ") + e.what());
  }
  return 0;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_sweep(const Config& base) {
  const Dataset ds = load(base);
  const auto budgets = base.counts("budgets");
  const auto variants = base.words("variants");
  const std::size_t seeds = base.count("seeds");
  const std::uint64_t seed0 = base.u64("seed");
  for (const auto& v : variants) parse_method(v);
  for (auto b : budgets) {
    if (b == 0 || b > ds.train.size()) {
      throw UsageError("budget " + std::to_string(b) + " exceeds the " + std::to_string(ds.train.size()) +
                       " training images");
    }
  }

  std::ofstream out(out_dir(base) / "sweep.csv");
  out << "row,variant,budget,seed,miou\n";
  std::vector<std::string> summary;
  for (const auto& variant : variants) {
    for (auto budget : budgets) {
      std::vector<double> scores;
      for (std::size_t s = 0; s < seeds; ++s) {
        Config c = base;
        c.set("method", variant);
        c.set("seed", std::to_string(seed0 + s));
        const PipelineResult r = run_pipeline(std::span(ds.train).first(budget), ds.val, pipeline_config(c));
        scores.push_back(r.metrics.miou());
        out << "run," << variant << "," << budget << "," << seed0 + s << "," << format_double(scores.back())
            << "\n";
        out.flush();
        progress(base, variant + " budget " + std::to_string(budget) + " seed " + std::to_string(seed0 + s) +
                           " mIoU " + format_double(scores.back()));
      }
      summary.push_back("median," + variant + "," + std::to_string(budget) + ",," + format_double(median(scores)));
    }
  }
  for (const auto& line : summary) out << line << "\n";
  return 0;
}

int cmd_grad_check(const Config& c) {
  bool ok = true;
  for (const auto& r : check_loss_gradients(c.u64("seed"))) {
    std::cout << r.loss << "," << format_double(r.max_rel_error) << "\n";
    ok = ok && r.max_rel_error <= 1e-4;
  }
  return ok ? 0 : 1;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ManifestError*>(&e)) return "manifest";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const PreconditionError*>(&e)) return "precondition";
  if (dynamic_cast<const NumericDomainError*>(&e)) return "numeric";
  if (dynamic_cast<const NonFiniteGradientError*>(&e)) return "nonfinite-gradient";
  if (dynamic_cast<const Error*>(&e)) return "pipeline";
  return "internal";
}

// One line: error<TAB>kind<TAB>message, with newlines flattened.
void report(const std::string& kind, std::string message) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  std::cerr << "error\t" << kind << "\t" << message << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pixel-wise contrastive pretraining for semantic segmentation"};
  app.require_subcommand(1, 1);

  struct Entry {
    const char* name;
    const char* help;
    std::function<int(const Config&)> run;
  };
  const std::vector<Entry> entries{
      {"gen-data", "Generate the synthetic shapes dataset", cmd_gen_data},
      {"pretrain", "Contrastive pretraining of encoder and projection head", cmd_pretrain},
      {"finetune", "Replace the projection head with a classifier and train with cross-entropy", cmd_finetune},
      {"train-ce", "Cross-entropy training from scratch", cmd_train_ce},
      {"train-joint", "Single-stage cross-entropy plus contrastive training", cmd_train_joint},
      {"pseudo-label", "Write thresholded pseudo-labels for a split", cmd_pseudo_label},
      {"semisup", "Supervised round, pseudo-labels, then a second round on the union", cmd_semisup},
      {"eval", "Per-class IoU and mIoU of a checkpoint", cmd_eval},
      {"dump-embeddings", "Projection-head embeddings of a split as CSV", cmd_dump_embeddings},
      {"sweep", "Methods x label budgets x seeds, final mIoU per run plus medians", cmd_sweep},
      {"grad-check", "Finite-difference check of every loss gradient", cmd_grad_check},
  };

  std::vector<Flags> flags(entries.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    subs.push_back(app.add_subcommand(entries[i].name, entries[i].help));
    add_config_flags(subs.back(), flags[i]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report("usage", e.what());
    return 2;
  }

  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    Config cfg;
    try {
      cfg = resolve(subs[i], flags[i]);
    } catch (const std::exception& e) {
      report("usage", e.what());
      return 2;
    }
    try {
      return entries[i].run(cfg);
    } catch (const UsageError& e) {
      report("usage", e.what());
      return 2;
    } catch (const ConfigError& e) {
      report("usage", e.what());
      return 2;
    } catch (const std::exception& e) {
      report(error_kind(e), e.what());
      return 1;
    }
  }
  return 2;
}
