// SPDX-License-Identifier: Apache-2.0
#include "p4q/pipeline.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "p4q/error.hpp"
#include "p4q/rng.hpp"

namespace p4q {

// ---- config -----------------------------------------------------------------------

namespace {

std::string to_string(TeacherPrompt t) { return t == TeacherPrompt::Template ? "template" : "same"; }

TeacherPrompt parse_teacher_prompt(const std::string& s) {
  if (s == "same") return TeacherPrompt::SamePrompt;
  if (s == "template") return TeacherPrompt::Template;
  throw ParameterError("teacher prompt must be same or template, got '" + s + "'");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

LrSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "cosine") return LrSchedule::Cosine;
  throw ParameterError("schedule must be constant or cosine, got '" + s + "'");
}

std::size_t get_size(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  const long long v = kv.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw ParameterError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

void TrainConfig::validate(bool allow_zero_epochs) const {
  if (epochs == 0 && !allow_zero_epochs) throw ParameterError("epochs must be at least 1");
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  if (!(prompt_lr > 0.0) || !(adapter_lr > 0.0)) throw ParameterError("learning rates must be positive");
  if (!(prompt_weight_decay >= 0.0) || !(adapter_weight_decay >= 0.0))
    throw ParameterError("weight decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ParameterError("AdamW betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ParameterError("AdamW eps must be positive");
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be non-negative");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must lie in [0, 1]");
  if (!(adapter_bits == 2 || adapter_bits == 3 || adapter_bits == 4 || adapter_bits == 8 ||
        adapter_bits == kDisabledBits))
    throw ParameterError("adapter_bits must be one of 2, 3, 4, 8, 32");
  if (calibration_batches == 0) throw ParameterError("calibration_batches must be at least 1");
  if (!(grad_clip >= 0.0)) throw ParameterError("grad_clip must be non-negative");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv.set("epochs", static_cast<long long>(epochs));
  kv.set("batch_size", static_cast<long long>(batch_size));
  kv.set("prompt_lr", prompt_lr);
  kv.set("prompt_weight_decay", prompt_weight_decay);
  kv.set("adapter_lr", adapter_lr);
  kv.set("adapter_weight_decay", adapter_weight_decay);
  kv.set("beta1", beta1);
  kv.set("beta2", beta2);
  kv.set("adam_eps", adam_eps);
  kv.set("lambda", lambda);
  kv.set("M", static_cast<long long>(M));
  kv.set("alpha", alpha);
  kv.set("adapter_bits", static_cast<long long>(adapter_bits));
  kv.set("adapter_hidden", static_cast<long long>(adapter_hidden));
  kv.set("train_prompt", static_cast<long long>(train_prompt ? 1 : 0));
  kv.set("use_adapter", static_cast<long long>(use_adapter ? 1 : 0));
  kv.set("seed", static_cast<long long>(seed));
  kv.set("calibration_batches", static_cast<long long>(calibration_batches));
  kv.set("calib_method", to_string(calib_method));
  kv.set("distill_form", to_string(distill_form));
  kv.set("teacher_prompt", to_string(teacher_prompt));
  kv.set("template", template_text);
  kv.set("class_token_position", to_string(class_token_position));
  kv.set("schedule", to_string(schedule));
  kv.set("grad_clip", grad_clip);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  c.epochs = get_size(kv, "epochs", c.epochs);
  c.batch_size = get_size(kv, "batch_size", c.batch_size);
  c.prompt_lr = kv.get_double("prompt_lr", c.prompt_lr);
  c.prompt_weight_decay = kv.get_double("prompt_weight_decay", c.prompt_weight_decay);
  c.adapter_lr = kv.get_double("adapter_lr", c.adapter_lr);
  c.adapter_weight_decay = kv.get_double("adapter_weight_decay", c.adapter_weight_decay);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.lambda = kv.get_double("lambda", c.lambda);
  c.M = get_size(kv, "M", c.M);
  c.alpha = kv.get_double("alpha", c.alpha);
  c.adapter_bits = static_cast<int>(kv.get_int("adapter_bits", c.adapter_bits));
  c.adapter_hidden = get_size(kv, "adapter_hidden", c.adapter_hidden);
  c.train_prompt = kv.get_int("train_prompt", c.train_prompt ? 1 : 0) != 0;
  c.use_adapter = kv.get_int("use_adapter", c.use_adapter ? 1 : 0) != 0;
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.calibration_batches = get_size(kv, "calibration_batches", c.calibration_batches);
  c.calib_method = parse_calib_method(kv.get_or("calib_method", to_string(c.calib_method)));
  c.distill_form = parse_distill_form(kv.get_or("distill_form", to_string(c.distill_form)));
  c.teacher_prompt = parse_teacher_prompt(kv.get_or("teacher_prompt", to_string(c.teacher_prompt)));
  c.template_text = kv.get_or("template", c.template_text);
  c.class_token_position =
      parse_class_token_position(kv.get_or("class_token_position", to_string(c.class_token_position)));
  c.schedule = parse_schedule(kv.get_or("schedule", to_string(c.schedule)));
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  return c;
}

// ---- optimizers ---------------------------------------------------------------------

namespace {

void check_grad_shape(const Tensor& p, std::span<const double> grad) {
  if (!p.defined()) throw DimensionError("optimizer step on an undefined parameter");
  if (grad.size() != p.size())
    throw DimensionError("gradient of " + std::to_string(grad.size()) + " values for a parameter of shape " +
                         shape_str(p.shape()));
}

}  // namespace

void sgd_step(Tensor& p, std::span<const double> grad, double lr, double weight_decay) {
  check_grad_shape(p, grad);
  auto v = p.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (grad[i] + weight_decay * v[i]);
}

void adamw_step(Tensor& p, std::span<const double> grad, AdamState& state, const AdamWConfig& cfg) {
  check_grad_shape(p, grad);
  if (state.m.empty() && state.v.empty() && state.step == 0) {
    state.m.assign(p.size(), 0.0);
    state.v.assign(p.size(), 0.0);
  }
  if (state.m.size() != p.size() || state.v.size() != p.size())
    throw DimensionError("AdamW moments are shaped for a different parameter");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto v = p.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] *= 1.0 - cfg.lr * cfg.weight_decay;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// ---- calibration ---------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed ^ (tag * 0x9E3779B97F4A7C15ULL);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

CalibrationStats collect_calibration(const Model& fp, const Dataset& train, const std::vector<Tensor>& text_sequences,
                                     std::size_t batches, std::size_t batch_size, std::uint64_t seed) {
  if (train.size() == 0) throw DataError("calibration needs a non-empty dataset");
  if (batches == 0 || batch_size == 0) throw ParameterError("calibration batches and batch size must be positive");
  CalibrationStats stats(fp.config());
  stats.observe_weights(fp.weights());
  const auto order = shuffled_indices(train.size(), derive_seed(seed, 3));
  const std::size_t bs = std::min(batch_size, train.size());
  ObserveHook hook(stats);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<std::size_t> idx(bs);
    for (auto& i : idx) {
      i = order[pos];
      pos = (pos + 1) % order.size();
    }
    fp.encode_images(train.stack(idx), hook);
    if (!text_sequences.empty()) fp.encode_text(text_sequences, hook);
    stats.close_batch();
  }
  return stats;
}

QuantSiteMap run_calibration(const Model& fp, const Dataset& train, const std::vector<Tensor>& text_sequences,
                             CalibMethod method, const BitPlan& plan, std::size_t batches, std::size_t batch_size,
                             std::uint64_t seed, std::vector<std::string>* warnings) {
  if (train.size() == 0) throw DataError("calibration needs a non-empty dataset");
  plan.validate();
  if (plan.disabled()) return QuantSiteMap::identity(fp.config());
  return collect_calibration(fp, train, text_sequences, batches, batch_size, seed).finalize(method, plan, warnings);
}

// ---- text helpers --------------------------------------------------------------------

std::vector<Tensor> class_embeddings(const Model& model, const std::vector<std::string>& class_names) {
  const Tokenizer tok(model.config().vocab_size);
  std::vector<Tensor> out;
  out.reserve(class_names.size());
  for (const auto& name : class_names) {
    const auto ids = tok.encode(name);
    if (ids.empty()) throw DataError("class name '" + name + "' has no tokens");
    out.push_back(model.token_embeddings(ids));
  }
  return out;
}

PromptTokens template_prompt(const Model& model, const std::string& text, ClassTokenPosition position) {
  const Tokenizer tok(model.config().vocab_size);
  const auto ids = tok.encode(text);
  if (ids.empty()) {
    PromptTokens p;
    p.position = position;
    return p;
  }
  return PromptTokens::fixed(model.token_embeddings(ids), position);
}

std::vector<Tensor> describe_classes(const PromptTokens& prompt, const std::vector<Tensor>& class_embeddings,
                                     std::size_t context_length) {
  std::vector<Tensor> out;
  out.reserve(class_embeddings.size());
  for (const auto& c : class_embeddings) out.push_back(build_text_description(prompt, c, context_length));
  return out;
}

Tensor text_features(const Model& model, const PromptTokens& prompt, const std::vector<Tensor>& class_embeddings,
                     SiteHook& hook) {
  return model.encode_text(describe_classes(prompt, class_embeddings, model.config().context_length), hook);
}

namespace {

std::vector<std::size_t> nonzero_rows(const Tensor& t) {
  std::vector<std::size_t> out;
  const std::size_t c = t.cols();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const auto r = t.values().subspan(i * c, c);
    if (std::any_of(r.begin(), r.end(), [](double x) { return x != 0.0; })) out.push_back(i);
  }
  return out;
}

/// Rows of `part` placed at positions `keep` of an `n`-row result, zeros elsewhere.
Tensor scatter_rows(const Tensor& part, const std::vector<std::size_t>& keep, std::size_t n) {
  if (keep.size() == n) return part;
  std::vector<std::size_t> index(n, keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) index[keep[i]] = i;
  return gather_rows(concat_rows({part, Tensor({1, part.cols()}, 0.0)}), index);
}

}  // namespace

Tensor guarded_similarity_logits(const Tensor& v, const Tensor& w, double tau, std::size_t* degenerate) {
  if (v.rank() != 2 || w.rank() != 2) throw DimensionError("similarity needs [n × E] and [K × E] features");
  if (v.dim(1) != w.dim(1)) throw DimensionError("image and text features differ in width");
  const auto rv = nonzero_rows(v), rw = nonzero_rows(w);
  if (degenerate) *degenerate = v.rows() - rv.size();
  if (rv.size() == v.rows() && rw.size() == w.rows()) return similarity_logits(v, w, tau);
  if (rv.empty() || rw.empty()) return Tensor({v.rows(), w.rows()}, 0.0);
  const Tensor sub = similarity_logits(gather_rows(v, rv), gather_rows(w, rw), tau);
  const Tensor cols = scatter_rows(transpose(sub), rw, w.rows());
  return scatter_rows(transpose(cols), rv, v.rows());
}

Tensor encode_dataset(const Model& model, const Dataset& data, SiteHook& hook, std::size_t chunk) {
  if (data.size() == 0) throw DataError("cannot encode an empty dataset");
  if (chunk == 0) throw ParameterError("chunk size must be positive");
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    parts.push_back(model.encode_images(data.stack(idx), hook));
  }
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

namespace {

/// Full-precision pass that records the input of one site.
class CaptureHook final : public SiteHook {
 public:
  explicit CaptureHook(std::string site) : site_(std::move(site)) {}
  Tensor apply(const std::string& site, const Tensor& x) override {
    if (site == site_) captured.push_back(x);
    return x;
  }
  const QuantParams* probs_params(const std::string&) override { return nullptr; }
  Calibrator* probs_observer(const std::string&) override { return nullptr; }

  std::vector<Tensor> captured;

 private:
  std::string site_;
};

}  // namespace

void align_image_projection(EncoderWeights& weights, const ModelConfig& cfg, const Dataset& data,
                            const std::string& template_text, double ridge) {
  data.validate();
  if (data.size() == 0) throw DataError("projection alignment needs a non-empty dataset");
  if (!(ridge > 0.0)) throw ParameterError("ridge strength must be positive");
  const Model model(cfg, weights);
  CaptureHook capture("image.proj.in");
  encode_dataset(model, data, capture);
  const Tensor x = concat_rows(capture.captured);
  FpHook fp;
  const Tensor targets =
      text_features(model, template_prompt(model, template_text), class_embeddings(model, data.class_names), fp);

  const std::size_t n = x.rows(), d = x.cols(), e = cfg.embed_dim;
  // Augmented design [x 1] so the bias is fitted jointly.
  Eigen::MatrixXd a(n, d + 1), y(n, e);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) a(i, j) = x.at(i, j);
    a(i, d) = 1.0;
    for (std::size_t j = 0; j < e; ++j) y(i, j) = targets.at(data.labels[i], j);
  }
  Eigen::MatrixXd gram = a.transpose() * a;
  const double strength = ridge * gram.trace() / static_cast<double>(d + 1);
  gram.diagonal().array() += strength;
  const Eigen::MatrixXd sol = gram.ldlt().solve(a.transpose() * y);
  if (!sol.allFinite()) throw NumericError("projection alignment produced non-finite weights");

  std::vector<double> w(d * e), b(e);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < e; ++j) w[i * e + j] = sol(i, j);
  for (std::size_t j = 0; j < e; ++j) b[j] = sol(d, j);
  weights.replace("image.proj.w", Tensor({d, e}, std::move(w)));
  weights.replace("image.proj.b", Tensor({e}, std::move(b)));
}

// ---- training ---------------------------------------------------------------------------

namespace {

void check_context(const TrainContext& ctx) {
  if (!ctx.teacher || !ctx.student || !ctx.sites) throw StateError("training context is missing its models or sites");
  if (ctx.class_embeddings.empty()) throw StateError("training context has no classes");
}

PromptTokens detached(const PromptTokens& p) {
  PromptTokens out;
  out.position = p.position;
  if (p.length() > 0) out.P = p.P.detach();
  return out;
}

Tensor adapted(const Tensor& z, const Adaptation& a) { return a.adapter ? qadapter_forward(z, *a.adapter) : z; }

bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

double lr_at(double base, LrSchedule schedule, std::size_t step, std::size_t total) {
  if (schedule == LrSchedule::Constant || total == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::size_t correct_top1(const Tensor& logits, std::span<const std::size_t> labels) {
  std::size_t correct = 0;
  const std::size_t k = logits.cols();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (best == labels[i]) ++correct;
  }
  return correct;
}

}  // namespace

TrainContext make_context(const Model& teacher, const Model& student, const QuantSiteMap& sites, const Dataset& train,
                          const Dataset& val, const std::string& template_text, const Tensor* fp_train,
                          const Tensor* fp_val) {
  if (!(teacher.config() == student.config())) throw DimensionError("teacher and student configs differ");
  train.validate();
  val.validate();
  TrainContext ctx;
  ctx.teacher = &teacher;
  ctx.student = &student;
  ctx.sites = &sites;
  ctx.class_embeddings = class_embeddings(teacher, train.class_names);
  ctx.template_prompt = template_prompt(teacher, template_text);
  FpHook fp;
  QuantHook q(sites);
  if (train.size() > 0)
    ctx.train = {fp_train ? *fp_train : encode_dataset(teacher, train, fp), encode_dataset(student, train, q),
                 train.labels};
  if (val.size() > 0)
    ctx.val = {fp_val ? *fp_val : encode_dataset(teacher, val, fp), encode_dataset(student, val, q), val.labels};
  return ctx;
}

EvalResult evaluate(const TrainContext& ctx, const Adaptation& adaptation, const FeatureSet& split) {
  check_context(ctx);
  EvalResult r;
  QuantHook hook(*ctx.sites);
  r.text_features = text_features(*ctx.student, detached(adaptation.prompt), ctx.class_embeddings, hook);
  if (split.size() == 0) return r;
  r.image_features = adapted(split.q, adaptation);
  r.logits = guarded_similarity_logits(r.image_features, r.text_features, ctx.student->config().tau, &r.degenerate);
  r.top1 = topk_accuracy(r.logits, split.labels, 1);
  r.top5 = topk_accuracy(r.logits, split.labels, std::min<std::size_t>(5, r.logits.cols()));
  return r;
}

Adaptation initial_adaptation(const TrainContext& ctx, const TrainConfig& cfg) {
  check_context(ctx);
  const ModelConfig& mc = ctx.student->config();
  Adaptation a;
  if (cfg.train_prompt) {
    a.prompt = PromptTokens::random(mc.text_width, cfg.M, derive_seed(cfg.seed, 1), cfg.class_token_position);
  } else {
    a.prompt = ctx.template_prompt;
    a.prompt.position = cfg.class_token_position;
  }
  if (cfg.use_adapter) {
    const std::size_t hidden = cfg.adapter_hidden > 0 ? cfg.adapter_hidden : std::max<std::size_t>(1, mc.embed_dim / 4);
    a.adapter = QAdapterParams::init(mc.embed_dim, hidden, cfg.alpha, cfg.adapter_bits, derive_seed(cfg.seed, 2));
    if (ctx.train.size() > 0) refresh_activation_params(*a.adapter, ctx.train.q);
  }
  return a;
}

TrainResult train(const TrainContext& ctx, Adaptation& adaptation, const TrainConfig& cfg) {
  cfg.validate(/*allow_zero_epochs=*/true);
  check_context(ctx);
  TrainResult result;
  if (cfg.epochs == 0) return result;
  const std::size_t n = ctx.train.size();
  if (n == 0) throw DataError("training needs a non-empty train split");
  const ModelConfig& mc = ctx.student->config();
  const double tau = mc.tau;
  const bool learn_prompt = adaptation.prompt.learnable();

  QuantHook qhook(*ctx.sites);
  FpHook fphook;
  // Text features that do not depend on trainable state are computed once.
  Tensor fixed_student_text;
  if (!learn_prompt) fixed_student_text = text_features(*ctx.student, adaptation.prompt, ctx.class_embeddings, qhook);
  Tensor fixed_teacher_text;
  if (cfg.teacher_prompt == TeacherPrompt::Template)
    fixed_teacher_text = text_features(*ctx.teacher, ctx.template_prompt, ctx.class_embeddings, fphook);
  else if (!learn_prompt)
    fixed_teacher_text = text_features(*ctx.teacher, adaptation.prompt, ctx.class_embeddings, fphook);

  std::vector<Tensor*> adapter_params;
  if (adaptation.adapter) adapter_params = adaptation.adapter->parameters();
  result.optimizer.adapter.resize(adapter_params.size());

  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(n, cfg.seed ^ static_cast<std::uint64_t>(epoch));
    std::vector<double> epoch_c, epoch_d;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t bs = std::min(cfg.batch_size, n - start);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(start + bs));
      std::vector<std::size_t> labels(bs);
      for (std::size_t i = 0; i < bs; ++i) labels[i] = ctx.train.labels[idx[i]];

      Tape tape;
      TapeScope scope(tape);
      const Tensor zq = gather_rows(ctx.train.q, idx);
      const Tensor zfp = gather_rows(ctx.train.fp, idx);
      if (adaptation.adapter) refresh_activation_params(*adaptation.adapter, zq);
      const Tensor v = adapted(zq, adaptation);
      const Tensor ws =
          learn_prompt ? text_features(*ctx.student, adaptation.prompt, ctx.class_embeddings, qhook) : fixed_student_text;
      const Tensor wt = fixed_teacher_text.defined()
                            ? fixed_teacher_text
                            : text_features(*ctx.teacher, detached(adaptation.prompt), ctx.class_embeddings, fphook);
      BatchPredictions batch{guarded_similarity_logits(v, ws, tau), similarity_logits(zfp, wt, tau), labels};
      const LossTerms terms = joint_loss(batch, cfg.lambda, cfg.distill_form);

      if (!std::isfinite(terms.total.item())) {
        const std::pair<const char*, const Tensor*> probes[] = {
            {"adapted image features", &v},   {"student text features", &ws},
            {"teacher text features", &wt},   {"student logits", &batch.student_logits},
            {"teacher logits", &batch.teacher_logits}, {"classification loss", &terms.classification},
            {"distillation loss", &terms.distillation}};
        std::string first = "total loss";
        for (const auto& [name, t] : probes)
          if (!all_finite(*t)) {
            first = name;
            break;
          }
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                           "; first non-finite tensor: " + first);
      }

      const auto tc = terms.classification_terms.values(), td = terms.distillation_terms.values();
      epoch_c.insert(epoch_c.end(), tc.begin(), tc.end());
      epoch_d.insert(epoch_d.end(), td.begin(), td.end());
      correct += correct_top1(batch.student_logits, labels);

      if (!terms.total.requires_grad()) continue;
      tape.backward(terms.total);

      // Gathered gradients, prompt first then the adapter tensors in order.
      std::vector<Tensor*> params;
      if (learn_prompt) params.push_back(&adaptation.prompt.P);
      params.insert(params.end(), adapter_params.begin(), adapter_params.end());
      std::vector<std::vector<double>> grads(params.size());
      double sq = 0.0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->has_grad()) {
          const auto g = params[i]->grad();
          grads[i].assign(g.begin(), g.end());
        } else {
          grads[i].assign(params[i]->size(), 0.0);
        }
        for (double g : grads[i]) sq += g * g;
      }
      if (!std::isfinite(sq)) throw NumericError("non-finite gradient at epoch " + std::to_string(epoch));
      if (cfg.grad_clip > 0.0) {
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip)
          for (auto& g : grads)
            for (double& x : g) x *= cfg.grad_clip / norm;
      }

      std::size_t gi = 0;
      if (learn_prompt) {
        sgd_step(adaptation.prompt.P, grads[gi++], lr_at(cfg.prompt_lr, cfg.schedule, step, total_steps),
                 cfg.prompt_weight_decay);
        ++result.optimizer.prompt_steps;
      }
      const AdamWConfig adam{lr_at(cfg.adapter_lr, cfg.schedule, step, total_steps), cfg.beta1, cfg.beta2,
                             cfg.adam_eps, cfg.adapter_weight_decay};
      for (std::size_t i = 0; i < adapter_params.size(); ++i)
        adamw_step(*adapter_params[i], grads[gi++], result.optimizer.adapter[i], adam);
      for (Tensor* p : params) p->zero_grad();
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.loss_c = sorted_mean(Tensor(Shape{n}, std::move(epoch_c))).item();
    m.loss_dist = sorted_mean(Tensor(Shape{n}, std::move(epoch_d))).item();
    m.loss_total = m.loss_c + cfg.lambda * m.loss_dist;
    m.train_top1 = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    m.val_top1 = ctx.val.size() > 0 ? evaluate(ctx, adaptation, ctx.val).top1 : 0.0;
    result.metrics.push_back(m);
  }
  return result;
}

// ---- experiments ---------------------------------------------------------------------------

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::Baseline: return "baseline";
    case AblationMode::PromptOnly: return "prompt";
    case AblationMode::AdapterOnly: return "adapter";
    case AblationMode::Both: return "both";
  }
  return "?";
}

AblationMode parse_ablation_mode(const std::string& s) {
  if (s == "baseline") return AblationMode::Baseline;
  if (s == "prompt") return AblationMode::PromptOnly;
  if (s == "adapter") return AblationMode::AdapterOnly;
  if (s == "both") return AblationMode::Both;
  throw ParameterError("mode must be baseline, prompt, adapter or both, got '" + s + "'");
}

void apply_mode(TrainConfig& cfg, AblationMode mode) {
  cfg.train_prompt = mode == AblationMode::PromptOnly || mode == AblationMode::Both;
  cfg.use_adapter = mode == AblationMode::AdapterOnly || mode == AblationMode::Both;
}

Experiment::Experiment(Model fp, Dataset train, Dataset val, std::size_t calibration_batches,
                       std::size_t calibration_batch, std::uint64_t seed, const std::string& template_text)
    : fp_(std::move(fp)),
      train_(std::move(train)),
      val_(std::move(val)),
      template_text_(template_text),
      stats_(fp_.config()) {
  train_.validate();
  val_.validate();
  if (train_.size() == 0) throw DataError("experiment needs a non-empty train split");
  if (val_.size() > 0 && val_.class_names != train_.class_names)
    throw DataError("train and val splits name different classes");
  const auto cls = class_embeddings(fp_, train_.class_names);
  const auto text = describe_classes(template_prompt(fp_, template_text_), cls, fp_.config().context_length);
  stats_ = collect_calibration(fp_, train_, text, calibration_batches, calibration_batch, seed);
  FpHook hook;
  fp_train_ = encode_dataset(fp_, train_, hook);
  if (val_.size() > 0) fp_val_ = encode_dataset(fp_, val_, hook);
}

const TrainContext& Experiment::context(const BitPlan& plan, CalibMethod method) {
  plan.validate();
  const std::string key = plan.str() + "/" + to_string(method);
  auto it = plans_.find(key);
  if (it != plans_.end()) return it->second->ctx;

  auto state = std::make_unique<PlanState>();
  state->sites = plan.disabled() ? QuantSiteMap::identity(fp_.config()) : stats_.finalize(method, plan);
  state->student = std::make_unique<Model>(fp_.quantized(state->sites));
  state->ctx = make_context(fp_, *state->student, state->sites, train_, val_, template_text_, &fp_train_,
                            val_.size() > 0 ? &fp_val_ : nullptr);
  return plans_.emplace(key, std::move(state)).first->second->ctx;
}

const QuantSiteMap& Experiment::sites(const BitPlan& plan, CalibMethod method) { return *context(plan, method).sites; }

RunResult Experiment::run(const BitPlan& plan, const TrainConfig& cfg) {
  cfg.validate(/*allow_zero_epochs=*/true);
  const TrainContext& ctx = context(plan, cfg.calib_method);
  RunResult r;
  r.adaptation = initial_adaptation(ctx, cfg);
  if (cfg.train_prompt || cfg.use_adapter) r.metrics = train(ctx, r.adaptation, cfg).metrics;
  r.val = evaluate(ctx, r.adaptation, ctx.val);
  return r;
}

}  // namespace p4q
