// SPDX-License-Identifier: Apache-2.0
// Command-line front end: data generation, model initialization, calibration,
// training, evaluation and report rendering.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure, 1 other.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "p4q/container.hpp"
#include "p4q/data.hpp"
#include "p4q/encoders.hpp"
#include "p4q/error.hpp"
#include "p4q/harness.hpp"
#include "p4q/pipeline.hpp"

namespace fs = std::filesystem;
using namespace p4q;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// Settings gathered from an optional `--config` file, overridden by flags
/// that were given explicitly.
class Settings {
 public:
  void load_file(const std::string& path) {
    if (!path.empty()) kv_ = KeyValues::load(path);
  }
  template <typename T>
  void flag(CLI::App& app, const std::string& name, const std::string& key, T& target) {
    if (app.count(name) > 0) set(key, target);
  }
  const KeyValues& kv() const { return kv_; }

 private:
  void set(const std::string& key, const std::string& v) { kv_.set(key, v); }
  void set(const std::string& key, double v) { kv_.set(key, v); }
  void set(const std::string& key, long long v) { kv_.set(key, v); }
  void set(const std::string& key, std::size_t v) { kv_.set(key, static_cast<long long>(v)); }
  void set(const std::string& key, int v) { kv_.set(key, static_cast<long long>(v)); }

  KeyValues kv_;
};

Dataset load_split_or_empty(const fs::path& dir, const std::string& split) {
  if (!fs::exists(dir / (split + ".manifest"))) return {};
  return load_split(dir, split);
}

Model load_model(const fs::path& ckpt) {
  const ModelConfig cfg = load_checkpoint_config(ckpt);
  return Model(cfg, load_checkpoint(ckpt, cfg));
}

std::vector<BitPlan> report_plans() {
  return {BitPlan::uniform(kDisabledBits), BitPlan::uniform(8), BitPlan::parse("4-4-8"), BitPlan::parse("3-3-8"),
          BitPlan::parse("2-2-8")};
}

// ---- subcommands -----------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t classes = 8;
  std::size_t per_class = 64;
  std::size_t val_per_class = 16;
  std::string out;
};

void run_synth(const SynthArgs& a) {
  const Dataset train = synth_dataset(a.seed, a.classes, a.per_class);
  const Dataset val = synth_dataset(derive_seed(a.seed, 100), a.classes, a.val_per_class);
  save_split(train, a.out, "train");
  save_split(val, a.out, "val");
  std::printf("wrote %zu train and %zu val images to %s\n", train.size(), val.size(), a.out.c_str());
}

struct InitArgs {
  std::uint64_t seed = 0;
  std::string config;
  std::string data;
  std::string template_text = "a photo of a";
  std::string out;
};

void run_init(const InitArgs& a) {
  const ModelConfig cfg = a.config.empty() ? ModelConfig::toy() : ModelConfig::from_kv(KeyValues::load(a.config));
  cfg.validate();
  EncoderWeights w = init_weights(cfg, a.seed);
  if (!a.data.empty()) align_image_projection(w, cfg, load_split(a.data, "train"), a.template_text);
  save_checkpoint(w, cfg, a.out);
  std::printf("wrote %zu parameters to %s (checksum %016llx)\n", w.parameter_count(), a.out.c_str(),
              static_cast<unsigned long long>(w.checksum()));
}

struct CalibArgs {
  std::string config;
  std::string model;
  std::string data;
  std::string method = "omse";
  std::string bits = "8,8,8";
  std::size_t batches = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  std::string template_text = "a photo of a";
  std::string out;
};

void run_calibrate(CLI::App& app, const CalibArgs& a) {
  Settings s;
  s.load_file(a.config);
  auto method = a.method, bits = a.bits, tmpl = a.template_text;
  auto batches = a.batches, batch_size = a.batch_size;
  auto seed = a.seed;
  s.flag(app, "--method", "calib_method", method);
  s.flag(app, "--bits", "bits", bits);
  s.flag(app, "--batches", "calibration_batches", batches);
  s.flag(app, "--batch-size", "batch_size", batch_size);
  s.flag(app, "--seed", "seed", seed);
  s.flag(app, "--template", "template", tmpl);
  const KeyValues& kv = s.kv();
  const Model model = load_model(a.model);
  const Dataset train = load_split(a.data, "train");
  const BitPlan plan = BitPlan::parse(kv.get_or("bits", bits));
  const auto text = describe_classes(template_prompt(model, kv.get_or("template", tmpl)),
                                     class_embeddings(model, train.class_names), model.config().context_length);
  std::vector<std::string> warnings;
  const QuantSiteMap sites =
      run_calibration(model, train, text, parse_calib_method(kv.get_or("calib_method", method)), plan,
                      static_cast<std::size_t>(kv.get_int("calibration_batches", static_cast<long long>(batches))),
                      static_cast<std::size_t>(kv.get_int("batch_size", static_cast<long long>(batch_size))),
                      static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(seed))), &warnings);
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  sites.save(a.out);
  std::printf("calibrated %zu sites for plan %s into %s\n", sites.size(), plan.str().c_str(), a.out.c_str());
}

struct TrainArgs {
  std::string config;
  std::string model;
  std::string sites;
  std::string data;
  std::string mode = "both";
  std::size_t epochs = 50;
  std::size_t batch = 128;
  std::size_t m = 16;
  double alpha = 0.2;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  std::string out;
  std::string metrics;
};

void run_train(CLI::App& app, const TrainArgs& a) {
  Settings s;
  s.load_file(a.config);
  auto epochs = a.epochs, batch = a.batch, m = a.m;
  auto alpha = a.alpha, lambda = a.lambda;
  auto seed = a.seed;
  s.flag(app, "--epochs", "epochs", epochs);
  s.flag(app, "--batch", "batch_size", batch);
  s.flag(app, "--m", "M", m);
  s.flag(app, "--alpha", "alpha", alpha);
  s.flag(app, "--lambda", "lambda", lambda);
  s.flag(app, "--seed", "seed", seed);
  TrainConfig cfg = TrainConfig::from_kv(s.kv());
  apply_mode(cfg, parse_ablation_mode(app.count("--mode") ? a.mode : s.kv().get_or("mode", a.mode)));
  cfg.validate();

  const Model teacher = load_model(a.model);
  const QuantSiteMap sites = QuantSiteMap::load(a.sites);
  const Model student = teacher.quantized(sites);
  const Dataset train_set = load_split(a.data, "train");
  const Dataset val_set = load_split_or_empty(a.data, "val");
  const TrainContext ctx = make_context(teacher, student, sites, train_set, val_set, cfg.template_text);
  Adaptation adaptation = initial_adaptation(ctx, cfg);
  const TrainResult r = train(ctx, adaptation, cfg);
  adaptation.save(a.out);
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  write_text_file(metrics_path, metrics_csv(r.metrics));
  if (!r.metrics.empty()) {
    const auto& last = r.metrics.back();
    std::printf("epoch %zu  loss %.6f  train top1 %.2f  val top1 %.2f\n", last.epoch, last.loss_total,
                last.train_top1, last.val_top1);
  }
  std::printf("wrote %s and %s\n", a.out.c_str(), metrics_path.c_str());
}

struct EvalArgs {
  std::string model;
  std::string sites;
  std::string adapt;
  std::string data;
  std::string split = "val";
  std::string template_text = "a photo of a";
  std::string report;
};

void run_eval(const EvalArgs& a) {
  const Model teacher = load_model(a.model);
  const QuantSiteMap sites = a.sites.empty() ? QuantSiteMap::identity(teacher.config()) : QuantSiteMap::load(a.sites);
  const Model student = teacher.quantized(sites);
  const Dataset split = load_split(a.data, a.split);
  const TrainContext ctx = make_context(teacher, student, sites, Dataset{{}, {}, split.class_names}, split,
                                        a.template_text);
  Adaptation adaptation;
  if (a.adapt.empty())
    adaptation.prompt = ctx.template_prompt;
  else
    adaptation = Adaptation::load(a.adapt);
  const EvalResult r = evaluate(ctx, adaptation, ctx.val);

  fs::create_directories(a.report);
  const fs::path dir(a.report);
  KeyValues summary;
  summary.set("split", a.split);
  summary.set("samples", static_cast<long long>(split.size()));
  summary.set("classes", static_cast<long long>(split.num_classes()));
  summary.set("top1", r.top1);
  summary.set("top5", r.top5);
  const auto groups = paired_groups(split.labels, split.num_classes());
  if (!groups.empty()) {
    summary.set("diag_argmax_rate", paired_diag_argmax_rate(r.image_features, r.text_features, split.labels));
    const SimilarityMatrix grid = similarity_matrix(gather_rows(r.image_features, groups.front()), r.text_features);
    write_text_file(dir / "similarity.csv", similarity_csv(grid));
  }
  summary.save(dir / "summary.txt");
  TensorFile features;
  features.add("image", r.image_features);
  features.add("text", r.text_features);
  features.save(dir / "features.p4q");
  teacher.config().to_kv().save(dir / "model.config");
  std::printf("top1 %.2f  top5 %.2f  (%zu samples) -> %s\n", r.top1, r.top5, split.size(), a.report.c_str());
}

void run_report(const std::string& in, std::size_t bins) {
  const fs::path dir(in);
  if (fs::exists(dir / "similarity.csv")) {
    const SimilarityMatrix grid = parse_similarity_csv(read_text_file(dir / "similarity.csv"));
    write_text_file(dir / "similarity.pgm", similarity_pgm(grid));
  }
  if (fs::exists(dir / "features.p4q")) {
    const TensorFile f = TensorFile::load(dir / "features.p4q");
    std::vector<NamedHistogram> hists;
    for (const char* name : {"image", "text"}) {
      const Tensor t = f.get(name).tensor();
      hists.push_back({name, feature_histogram(t.values(), bins)});
    }
    write_text_file(dir / "histogram.csv", histogram_csv(hists));
  }
  if (fs::exists(dir / "model.config")) {
    const ModelConfig cfg = ModelConfig::from_kv(KeyValues::load(dir / "model.config"));
    write_text_file(dir / "cost_table.csv", cost_table_csv(cfg, report_plans()));
  }
  std::printf("rendered report files in %s\n", in.c_str());
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return kExitData;
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return kExitUsage;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt and adapter tuning for low-bit two-tower image-text models"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "Render the procedural shape dataset (train and val splits)");
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_option("--classes", synth.classes)->check(CLI::Range(1, static_cast<int>(kMaxSynthClasses)));
  c_synth->add_option("--per-class", synth.per_class);
  c_synth->add_option("--val-per-class", synth.val_per_class);
  c_synth->add_option("--out", synth.out)->required();

  InitArgs init;
  auto* c_init = app.add_subcommand("init-model", "Write a seeded model checkpoint");
  c_init->add_option("--seed", init.seed);
  c_init->add_option("--config", init.config, "Model config file (key = value)");
  c_init->add_option("--data", init.data, "Fit the image projection to template text features on this data");
  c_init->add_option("--template", init.template_text);
  c_init->add_option("--out", init.out)->required();

  CalibArgs calib;
  auto* c_calib = app.add_subcommand("calibrate", "Fit quantization sites from calibration batches");
  c_calib->add_option("--config", calib.config);
  c_calib->add_option("--model", calib.model)->required();
  c_calib->add_option("--data", calib.data)->required();
  c_calib->add_option("--method", calib.method)->check(CLI::IsMember({"omse", "minmax", "ema", "percentile"}));
  c_calib->add_option("--bits", calib.bits, "W,A,ATTN bit-widths");
  c_calib->add_option("--batches", calib.batches);
  c_calib->add_option("--batch-size", calib.batch_size);
  c_calib->add_option("--seed", calib.seed);
  c_calib->add_option("--template", calib.template_text);
  c_calib->add_option("--out", calib.out)->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train prompt tokens and the adapter");
  c_train->add_option("--config", tr.config);
  c_train->add_option("--model", tr.model)->required();
  c_train->add_option("--sites", tr.sites)->required();
  c_train->add_option("--data", tr.data)->required();
  c_train->add_option("--mode", tr.mode)->check(CLI::IsMember({"baseline", "prompt", "adapter", "both"}));
  c_train->add_option("--epochs", tr.epochs);
  c_train->add_option("--batch", tr.batch);
  c_train->add_option("--m", tr.m);
  c_train->add_option("--alpha", tr.alpha);
  c_train->add_option("--lambda", tr.lambda);
  c_train->add_option("--seed", tr.seed);
  c_train->add_option("--out", tr.out)->required();
  c_train->add_option("--metrics", tr.metrics, "Metrics CSV path (default: OUT.metrics.csv)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a model and write a report directory");
  c_eval->add_option("--model", ev.model)->required();
  c_eval->add_option("--sites", ev.sites);
  c_eval->add_option("--adapt", ev.adapt);
  c_eval->add_option("--data", ev.data)->required();
  c_eval->add_option("--split", ev.split);
  c_eval->add_option("--template", ev.template_text);
  c_eval->add_option("--report", ev.report)->required();

  std::string report_in;
  std::size_t bins = 32;
  auto* c_report = app.add_subcommand("report", "Render similarity PGM, histogram CSV and cost table");
  c_report->add_option("--in", report_in)->required();
  c_report->add_option("--bins", bins);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (c_synth->parsed()) run_synth(synth);
    if (c_init->parsed()) run_init(init);
    if (c_calib->parsed()) run_calibrate(*c_calib, calib);
    if (c_train->parsed()) run_train(*c_train, tr);
    if (c_eval->parsed()) run_eval(ev);
    if (c_report->parsed()) run_report(report_in, bins);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
