// SPDX-License-Identifier: Apache-2.0
// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. Every tolerance and budget is pinned below.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "p4q/error.hpp"
#include "p4q/pipeline.hpp"
#include "test_util.hpp"

namespace {

using namespace p4q;
using Clock = std::chrono::steady_clock;

// ---- pinned tolerances and budgets -----------------------------------------------------

constexpr int kLawCasesPerBitWidth = 10000;
constexpr double kLawBudgetSeconds = 10.0;
constexpr double kGradientRelTol = 1e-4;
constexpr int kGradientConfigs = 50;
constexpr double kGradientBudgetSeconds = 120.0;
constexpr double kLnKTol = 1e-10;
constexpr double kDisabledPathTol = 1e-12;
constexpr double kTrendMarginPoints = 10.0;
constexpr double kTrendBudgetSeconds = 600.0;
constexpr std::size_t kTrendEpochs = 30;
constexpr std::size_t kTrendClasses = 8;
constexpr std::size_t kTrainPerClass = 64;
constexpr std::size_t kValPerClass = 16;
constexpr std::size_t kHistogramBins = 64;
constexpr double kSizeRatioLo = 3.7;
constexpr double kSizeRatioHi = 4.0;
constexpr std::size_t kDeterminismEpochs = 5;
constexpr std::array<std::uint64_t, 3> kSeeds = {0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---- 1: quantizer laws -----------------------------------------------------------------

Outcome quantizer_laws() {
  const auto t0 = Clock::now();
  std::size_t failures = 0;
  for (int bits : {2, 3, 4, 8}) {
    Rng rng(static_cast<std::uint64_t>(bits) * 7919);
    for (int trial = 0; trial < kLawCasesPerBitWidth; ++trial) {
      const bool is_signed = rng.below(2) == 1;
      const double s = std::exp(rng.uniform(std::log(1e-4), std::log(10.0)));
      const QuantParams p = is_signed ? QuantParams::per_tensor(bits, Signedness::Signed, s, 0)
                                      : QuantParams::per_tensor(bits, Signedness::Unsigned, s,
                                                                static_cast<std::int64_t>(rng.below(1ULL << bits)));
      const double span = s * static_cast<double>(p.qmax() - p.qmin() + 4);
      const Tensor x = test::random_uniform(rng, {2}, -span, span);
      const IntTensor q = quantize(x, p);
      const Tensor back = dequantize(q, p);
      for (std::size_t i = 0; i < 2; ++i)
        if (q.data[i] > p.qmin() && q.data[i] < p.qmax() && std::abs(back.value(i) - x.value(i)) > s / 2.0 * (1.0 + 1e-12))
          ++failures;
      const bool ordered = x.value(0) <= x.value(1);
      if (ordered ? q.data[0] > q.data[1] : q.data[0] < q.data[1]) ++failures;
      const Tensor once = fake_quant(x, p);
      const Tensor twice = fake_quant(once, p);
      if (!std::equal(once.values().begin(), once.values().end(), twice.values().begin())) ++failures;
      Tensor leaf = x.detach();
      leaf.set_requires_grad(true);
      const auto g = test::tape_gradient(leaf, [&] { return sum(fake_quant(leaf, p)); });
      for (std::size_t i = 0; i < 2; ++i) {
        const double code = round_half_away(x.value(i) / s) + static_cast<double>(p.zero_point[0]);
        const bool inside = code >= static_cast<double>(p.qmin()) && code <= static_cast<double>(p.qmax());
        if (g[i] != (inside ? 1.0 : 0.0)) ++failures;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < kLawBudgetSeconds,
          std::to_string(failures) + " failures over 4x" + std::to_string(kLawCasesPerBitWidth) + " cases, " +
              fmt("%.2f s", secs)};
}

// ---- 2: OMSE hand cases ------------------------------------------------------------------

Outcome omse_hand_cases() {
  Calibrator a, b;
  a.observe(Tensor::vector({-1.0, 1.0}));
  b.observe(Tensor::vector({-2.0, 2.0}));
  const QuantParams pa = a.omse(8, Signedness::Unsigned).params;
  const QuantParams pb = b.omse(4, Signedness::Unsigned).params;
  const bool ok = pa.scale[0] == 2.0 / 255.0 && pa.zero_point[0] == 0 && pb.scale[0] == 4.0 / 15.0 &&
                  pb.zero_point[0] == 2;
  return {ok, "s=" + fmt("%.17g", pa.scale[0]) + " zp=" + std::to_string(pa.zero_point[0]) +
                  "; s=" + fmt("%.17g", pb.scale[0]) + " zp=" + std::to_string(pb.zero_point[0])};
}

// ---- 3: gradient checks ------------------------------------------------------------------

ModelConfig gradient_config() {
  ModelConfig c;
  c.image_width = 16;
  c.text_width = 16;
  c.embed_dim = 16;
  c.image_layers = 2;
  c.text_layers = 2;
  c.image_heads = 2;
  c.text_heads = 2;
  c.patch_size = 8;
  c.vocab_size = 64;
  c.context_length = 16;
  c.mlp_ratio = 2;
  return c;
}

double norm_relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / denom;
}

Outcome gradient_checks() {
  const auto t0 = Clock::now();
  const ModelConfig cfg = gradient_config();
  double worst = 0.0;
  for (int c = 0; c < kGradientConfigs; ++c) {
    Rng rng(static_cast<std::uint64_t>(c) + 1000);
    const Model model(cfg, init_weights(cfg, static_cast<std::uint64_t>(c)));
    const std::size_t k = 2 + rng.below(4), n = 3 + rng.below(4), m = 1 + rng.below(4);
    const auto classes = class_embeddings(model, synth_class_names(k));
    PromptTokens prompt = PromptTokens::random(cfg.text_width, m, rng.next_u64(),
                                               static_cast<ClassTokenPosition>(rng.below(3)));
    prompt.P = scale(prompt.P.detach(), 10.0).detach().set_requires_grad(true);
    QAdapterParams ad = QAdapterParams::init(cfg.embed_dim, cfg.embed_dim / 4, rng.uniform(0.05, 0.95), kDisabledBits,
                                             rng.next_u64());
    ad.h2_w = test::random_tensor(rng, ad.h2_w.shape(), 0.3).set_requires_grad(true);
    ad.h1_b = test::random_tensor(rng, ad.h1_b.shape(), 0.1).set_requires_grad(true);
    ad.h2_b = test::random_tensor(rng, ad.h2_b.shape(), 0.1).set_requires_grad(true);
    const Tensor z = test::random_tensor(rng, {n, cfg.embed_dim});
    const Tensor zfp = add(z, test::random_tensor(rng, {n, cfg.embed_dim}, 0.1));
    std::vector<std::size_t> labels(n);
    for (auto& y : labels) y = rng.below(k);
    const double lambda = rng.uniform(0.0, 2.0);
    const double tau = rng.uniform(0.05, 1.0);
    const DistillForm form = rng.below(2) == 0 ? DistillForm::AsWritten : DistillForm::TeacherWeighted;

    // Teacher targets are constants of the loss.
    PromptTokens frozen;
    frozen.P = prompt.P.detach();
    frozen.position = prompt.position;
    FpHook teacher_hook;
    const Tensor wt = text_features(model, frozen, classes, teacher_hook);
    auto loss = [&] {
      FpHook fp;
      const Tensor v = qadapter_forward(z, ad);
      const Tensor ws = text_features(model, prompt, classes, fp);
      return joint_loss({similarity_logits(v, ws, tau), similarity_logits(zfp, wt, tau), labels}, lambda, form).total;
    };
    for (Tensor* p : {&prompt.P, &ad.h1_w, &ad.h1_b, &ad.h2_w, &ad.h2_b})
      worst = std::max(worst, norm_relative_error(test::tape_gradient(*p, loss), test::numeric_gradient(*p, loss)));
  }
  const double secs = seconds_since(t0);
  return {worst <= kGradientRelTol && secs < kGradientBudgetSeconds,
          "max rel err " + fmt("%.3g", worst) + " over " + std::to_string(kGradientConfigs) + " configs, " +
              fmt("%.1f s", secs)};
}

// ---- 4: loss identities ---------------------------------------------------------------------

Outcome loss_identities() {
  bool ok = true;
  double worst_lnk = 0.0;
  for (std::size_t k : {2u, 5u, 8u, 100u}) {
    const std::vector<std::size_t> y(4, k - 1);
    const double lc = classification_loss(Tensor({4, k}, 1.7), y).item();
    worst_lnk = std::max(worst_lnk, std::abs(lc - std::log(static_cast<double>(k))));
  }
  ok = ok && worst_lnk <= kLnKTol;
  Rng rng(4);
  const Tensor s = test::random_tensor(rng, {5, 6});
  const std::vector<std::size_t> y = {0, 1, 2, 3, 4};
  Tensor t({5, 6}, 0.0);
  for (std::size_t i = 0; i < 5; ++i) t.mutable_values()[i * 6 + y[i]] = 1e4;
  const double ld = distillation_loss({s, t, y}).item();
  ok = ok && ld == 0.0;
  const BatchPredictions b{s, test::random_tensor(rng, {5, 6}), y};
  const LossTerms base = joint_loss(b, 0.0);
  for (double lambda : {0.0, 0.5, 1.0, 2.0, 4.0})
    ok = ok && joint_loss(b, lambda).total.item() == base.classification.item() + lambda * base.distillation.item();
  return {ok, "|L_c - ln K| max " + fmt("%.3g", worst_lnk) + ", L_dist(p_t=1) " + fmt("%.3g", ld)};
}

// ---- 5: disabled quantization -----------------------------------------------------------

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.value(i) - b.value(i)));
  return d;
}

Outcome disabled_quantization() {
  ModelConfig cfg = gradient_config();
  cfg.context_length = 24;
  const Dataset train_set = synth_dataset(21, 4, 8), val_set = synth_dataset(22, 4, 4);
  EncoderWeights w = init_weights(cfg, 21);
  align_image_projection(w, cfg, train_set, "a photo of a");
  const Model fp(cfg, w);
  const std::vector<std::string> names = train_set.class_names;
  const auto classes = class_embeddings(fp, names);
  const auto descriptions = describe_classes(template_prompt(fp, "a photo of a"), classes, cfg.context_length);
  const QuantSiteMap sites =
      run_calibration(fp, train_set, descriptions, CalibMethod::Omse, BitPlan::uniform(32), 2, 8, 21);
  const Model student = fp.quantized(sites);

  FpHook fh;
  QuantHook qh(sites);
  const Tensor images = train_set.stack_all();
  double d = max_abs_diff(fp.encode_images(images, fh), student.encode_images(images, qh));
  const PromptTokens tp = template_prompt(fp, "a photo of a");
  d = std::max(d, max_abs_diff(text_features(fp, tp, classes, fh), text_features(student, tp, classes, qh)));

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.M = 2;
  tc.adapter_bits = kDisabledBits;
  tc.seed = 21;
  const TrainContext qctx = make_context(fp, student, sites, train_set, val_set, "a photo of a");
  const QuantSiteMap none = QuantSiteMap::identity(cfg);
  const TrainContext plain = make_context(fp, fp, none, train_set, val_set, "a photo of a");
  Adaptation a = initial_adaptation(qctx, tc), b = initial_adaptation(plain, tc);
  const TrainResult ra = train(qctx, a, tc), rb = train(plain, b, tc);
  double dp = max_abs_diff(a.prompt.P, b.prompt.P);
  for (auto [pa, pb] : {std::pair{&a.adapter->h1_w, &b.adapter->h1_w}, {&a.adapter->h2_w, &b.adapter->h2_w}})
    dp = std::max(dp, max_abs_diff(*pa, *pb));
  for (std::size_t i = 0; i < ra.metrics.size(); ++i)
    dp = std::max(dp, std::abs(ra.metrics[i].loss_total - rb.metrics[i].loss_total));
  return {d <= kDisabledPathTol && dp <= kDisabledPathTol,
          "feature diff " + fmt("%.3g", d) + ", trained-state diff " + fmt("%.3g", dp)};
}

// ---- 6, 7, 8: trend runs on the synthetic set ------------------------------------------

const std::array<BitPlan, 4> kTrendPlans = {BitPlan{8, 8, 8}, BitPlan{4, 4, 8}, BitPlan{3, 3, 8}, BitPlan{2, 2, 8}};
constexpr std::size_t kHeadlinePlan = 1;

struct HistogramGap {
  double baseline = 0.0;
  double trained = 0.0;
};

struct SeedTrend {
  std::array<double, 4> baseline{};
  std::array<double, 4> both{};
  double prompt_only = 0.0;
  double adapter_only = 0.0;
  double diag_baseline = 0.0;
  double diag_trained = 0.0;
  HistogramGap hist;
  double ablation_seconds = 0.0;
};

Model trend_model(const Dataset& train, std::uint64_t seed) {
  const ModelConfig cfg = ModelConfig::toy();
  EncoderWeights w = init_weights(cfg, seed);
  align_image_projection(w, cfg, train, "a photo of a");
  return Model(cfg, std::move(w));
}

TrainConfig trend_config(std::uint64_t seed, AblationMode mode) {
  TrainConfig c;
  c.epochs = kTrendEpochs;
  c.seed = seed;
  apply_mode(c, mode);
  return c;
}

double histogram_gap(const Tensor& features, const FeatureHistogram& ref) {
  const FeatureHistogram h = feature_histogram(features.values(), kHistogramBins);
  return std::abs(h.mean - ref.mean) + std::abs(h.stddev - ref.stddev);
}

SeedTrend run_seed(std::uint64_t seed) {
  SeedTrend out;
  const Dataset train = synth_dataset(seed, kTrendClasses, kTrainPerClass);
  const Dataset val = synth_dataset(derive_seed(seed, 100), kTrendClasses, kValPerClass);
  Experiment ex(trend_model(train, seed), train, val, TrainConfig{}.calibration_batches, TrainConfig{}.batch_size, seed);

  const auto t0 = Clock::now();
  const RunResult base = ex.run(kTrendPlans[kHeadlinePlan], trend_config(seed, AblationMode::Baseline));
  const RunResult prompt = ex.run(kTrendPlans[kHeadlinePlan], trend_config(seed, AblationMode::PromptOnly));
  const RunResult adapter = ex.run(kTrendPlans[kHeadlinePlan], trend_config(seed, AblationMode::AdapterOnly));
  const RunResult both = ex.run(kTrendPlans[kHeadlinePlan], trend_config(seed, AblationMode::Both));
  out.ablation_seconds = seconds_since(t0);
  out.baseline[kHeadlinePlan] = base.val.top1;
  out.both[kHeadlinePlan] = both.val.top1;
  out.prompt_only = prompt.val.top1;
  out.adapter_only = adapter.val.top1;

  const TrainContext& ctx = ex.context(kTrendPlans[kHeadlinePlan]);
  out.diag_baseline = paired_diag_argmax_rate(base.val.image_features, base.val.text_features, ctx.val.labels);
  out.diag_trained = paired_diag_argmax_rate(both.val.image_features, both.val.text_features, ctx.val.labels);
  const FeatureHistogram ref = feature_histogram(ctx.val.fp.values(), kHistogramBins);
  out.hist = {histogram_gap(base.val.image_features, ref), histogram_gap(both.val.image_features, ref)};

  for (std::size_t i = 0; i < kTrendPlans.size(); ++i) {
    if (i == kHeadlinePlan) continue;
    out.baseline[i] = ex.run(kTrendPlans[i], trend_config(seed, AblationMode::Baseline)).val.top1;
    out.both[i] = ex.run(kTrendPlans[i], trend_config(seed, AblationMode::Both)).val.top1;
  }
  std::printf("  seed %llu: baseline", static_cast<unsigned long long>(seed));
  for (std::size_t i = 0; i < kTrendPlans.size(); ++i)
    std::printf(" %s=%.2f", kTrendPlans[i].str().c_str(), out.baseline[i]);
  std::printf(" | both");
  for (std::size_t i = 0; i < kTrendPlans.size(); ++i) std::printf(" %s=%.2f", kTrendPlans[i].str().c_str(), out.both[i]);
  std::printf(" | prompt=%.2f adapter=%.2f | diag %.3f->%.3f | hist gap %.4f->%.4f\n", out.prompt_only,
              out.adapter_only, out.diag_baseline, out.diag_trained, out.hist.baseline, out.hist.trained);
  std::fflush(stdout);
  return out;
}

template <class F>
double median_of(const std::vector<SeedTrend>& runs, F field) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(field(r));
  return median(v);
}

Outcome trend_ablation(const std::vector<SeedTrend>& runs) {
  const double base = median_of(runs, [](const SeedTrend& r) { return r.baseline[kHeadlinePlan]; });
  const double both = median_of(runs, [](const SeedTrend& r) { return r.both[kHeadlinePlan]; });
  const double prompt = median_of(runs, [](const SeedTrend& r) { return r.prompt_only; });
  const double adapter = median_of(runs, [](const SeedTrend& r) { return r.adapter_only; });
  double secs = 0.0;
  for (const auto& r : runs) secs += r.ablation_seconds;
  const bool ok = both >= prompt && both >= adapter && prompt >= base + kTrendMarginPoints &&
                  adapter >= base + kTrendMarginPoints && both >= base + kTrendMarginPoints && secs < kTrendBudgetSeconds;
  return {ok, "median top1 baseline " + fmt("%.2f", base) + ", prompt " + fmt("%.2f", prompt) + ", adapter " +
                  fmt("%.2f", adapter) + ", both " + fmt("%.2f", both) + ", " + fmt("%.0f s", secs)};
}

Outcome trend_bit_widths(const std::vector<SeedTrend>& runs) {
  std::array<double, 4> base{}, gain{};
  for (std::size_t i = 0; i < kTrendPlans.size(); ++i) {
    base[i] = median_of(runs, [i](const SeedTrend& r) { return r.baseline[i]; });
    gain[i] = median_of(runs, [i](const SeedTrend& r) { return r.both[i]; }) - base[i];
  }
  bool ok = true;
  for (std::size_t i = 1; i < kTrendPlans.size(); ++i) ok = ok && base[i] <= base[i - 1];
  for (std::size_t i = 0; i + 1 < kTrendPlans.size(); ++i) ok = ok && gain.back() > gain[i];
  std::string detail = "median baseline";
  for (std::size_t i = 0; i < kTrendPlans.size(); ++i) detail += " " + kTrendPlans[i].str() + "=" + fmt("%.2f", base[i]);
  detail += "; gain";
  for (std::size_t i = 0; i < kTrendPlans.size(); ++i) detail += " " + kTrendPlans[i].str() + "=" + fmt("%+.2f", gain[i]);
  return {ok, detail};
}

Outcome trend_diagnostics(const std::vector<SeedTrend>& runs) {
  const double d0 = median_of(runs, [](const SeedTrend& r) { return r.diag_baseline; });
  const double d1 = median_of(runs, [](const SeedTrend& r) { return r.diag_trained; });
  const double h0 = median_of(runs, [](const SeedTrend& r) { return r.hist.baseline; });
  const double h1 = median_of(runs, [](const SeedTrend& r) { return r.hist.trained; });
  return {d1 > d0 && h1 < h0, "diag_argmax_rate " + fmt("%.3f", d0) + " -> " + fmt("%.3f", d1) +
                                   ", |dmean|+|dstd| to full precision " + fmt("%.4f", h0) + " -> " + fmt("%.4f", h1)};
}

// ---- 9: cost model -----------------------------------------------------------------------

Outcome cost_model() {
  const ModelConfig vit = ModelConfig::vitb32_like();
  const SizeEstimate s = estimate_size(vit, BitPlan{8, 8, 8});
  const FlopsEstimate f = estimate_flops(vit, BitPlan{8, 8, 8});
  const bool ok = s.ratio >= kSizeRatioLo && s.ratio <= kSizeRatioHi &&
                  f.scaled_macs == static_cast<double>(f.raw_macs) / 4.0;
  return {ok, "size ratio " + fmt("%.4f", s.ratio) + ", scaled/raw " +
                  fmt("%.17g", f.scaled_macs / static_cast<double>(f.raw_macs))};
}

// ---- 10: determinism ---------------------------------------------------------------------

struct RunBytes {
  std::string sites;
  std::string adaptation;
  std::string metrics;
};

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RunBytes full_run(const std::filesystem::path& dir) {
  const std::uint64_t seed = 7;
  const Dataset train = synth_dataset(seed, kTrendClasses, kTrainPerClass / 4);
  const Dataset val = synth_dataset(derive_seed(seed, 100), kTrendClasses, kValPerClass / 4);
  Experiment ex(trend_model(train, seed), train, val, TrainConfig{}.calibration_batches, 32, seed);
  TrainConfig tc = trend_config(seed, AblationMode::Both);
  tc.epochs = kDeterminismEpochs;
  const RunResult r = ex.run(BitPlan{4, 4, 8}, tc);
  RunBytes b;
  std::ostringstream sites;
  ex.sites(BitPlan{4, 4, 8}).write(sites);
  b.sites = sites.str();
  r.adaptation.save(dir / "adapt.bin");
  b.adaptation = file_bytes(dir / "adapt.bin");
  b.metrics = metrics_csv(r.metrics);
  return b;
}

Outcome determinism() {
  const auto root = std::filesystem::temp_directory_path() / ("p4q_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(root / "a");
  std::filesystem::create_directories(root / "b");
  const RunBytes a = full_run(root / "a"), b = full_run(root / "b");
  std::filesystem::remove_all(root);
  const bool ok = !a.adaptation.empty() && a.sites == b.sites && a.adaptation == b.adaptation && a.metrics == b.metrics;
  return {ok, std::to_string(a.sites.size()) + " sidecar bytes, " + std::to_string(a.adaptation.size()) +
                  " checkpoint bytes, " + std::to_string(a.metrics.size()) + " metrics bytes compared"};
}

// ---- driver ----------------------------------------------------------------------------

int report(int id, const char* name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  std::printf("criterion %d %s: %s (%s)\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
  return o.pass ? 0 : 1;
}

}  // namespace

int main() {
  int failures = 0;
  failures += report(1, "quantizer laws", quantizer_laws);
  failures += report(2, "omse hand cases", omse_hand_cases);
  failures += report(3, "gradient checks", gradient_checks);
  failures += report(4, "loss identities", loss_identities);
  failures += report(5, "disabled quantization", disabled_quantization);

  std::vector<SeedTrend> runs;
  std::string trend_error;
  try {
    for (std::uint64_t seed : kSeeds) runs.push_back(run_seed(seed));
  } catch (const std::exception& e) {
    trend_error = e.what();
  }
  auto trend = [&](Outcome (*f)(const std::vector<SeedTrend>&)) {
    return [&, f]() -> Outcome {
      if (!trend_error.empty()) return {false, "exception: " + trend_error};
      return f(runs);
    };
  };
  failures += report(6, "ablation trend", trend(trend_ablation));
  failures += report(7, "bit-width ordering", trend(trend_bit_widths));
  failures += report(8, "alignment diagnostics", trend(trend_diagnostics));
  failures += report(9, "cost model", cost_model);
  failures += report(10, "determinism", determinism);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
