// SPDX-License-Identifier: Apache-2.0
#pragma once

// Calibration, optimizers and the training loop.
//
// A run proceeds as: collect calibration statistics on the full-precision model,
// finalize them for a bit plan, fake-quantize the weights, cache image features
// of both the teacher (full precision) and the student (quantized), then train
// the prompt with SGD and the adapter with AdamW against the joint loss.
// The image tower is frozen and sees no trainable input, so its features are
// computed once per bit plan.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "p4q/adaptation.hpp"
#include "p4q/config.hpp"
#include "p4q/data.hpp"
#include "p4q/encoders.hpp"
#include "p4q/harness.hpp"
#include "p4q/objective.hpp"
#include "p4q/quant.hpp"

namespace p4q {

/// Which prompt the teacher's text features come from.
enum class TeacherPrompt : std::uint8_t { SamePrompt, Template };
enum class LrSchedule : std::uint8_t { Constant, Cosine };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  double prompt_lr = 5e-4;
  double prompt_weight_decay = 0.0;
  double adapter_lr = 1e-3;
  double adapter_weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda = 1.0;
  std::size_t M = 16;
  double alpha = 0.2;
  int adapter_bits = 8;
  /// 0 selects embed_dim / 4.
  std::size_t adapter_hidden = 0;
  bool train_prompt = true;
  bool use_adapter = true;
  std::uint64_t seed = 0;
  std::size_t calibration_batches = 10;
  CalibMethod calib_method = CalibMethod::Omse;
  DistillForm distill_form = DistillForm::AsWritten;
  TeacherPrompt teacher_prompt = TeacherPrompt::SamePrompt;
  std::string template_text = "a photo of a";
  ClassTokenPosition class_token_position = ClassTokenPosition::End;
  LrSchedule schedule = LrSchedule::Constant;
  /// Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;

  /// Throws ParameterError on invalid values. Zero epochs are accepted only
  /// where a run may legitimately skip training.
  void validate(bool allow_zero_epochs = false) const;
  KeyValues to_kv() const;
  /// Starts from defaults and applies the keys present in `kv`.
  static TrainConfig from_kv(const KeyValues& kv);
};

// ---- optimizers ---------------------------------------------------------------------

/// p ← p − lr·(g + wd·p)
void sgd_step(Tensor& p, std::span<const double> grad, double lr, double weight_decay);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

/// Decoupled weight decay, then the bias-corrected adaptive-moment update:
///   p ← p·(1 − lr·wd);  p ← p − lr·m̂ / (√v̂ + eps)
void adamw_step(Tensor& p, std::span<const double> grad, AdamState& state, const AdamWConfig& cfg);

/// Optimizer state of one run: plain SGD on the prompt, AdamW per adapter tensor.
struct OptimizerState {
  std::size_t prompt_steps = 0;
  std::vector<AdamState> adapter;
};

// ---- calibration ---------------------------------------------------------------------

/// Derives an independent stream seed from a run seed and a purpose tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

/// Observes `batches` image batches (drawn without replacement from a seeded
/// shuffle of `train`, wrapping when exhausted) and the given text sequences
/// once per batch, all through the full-precision model. Weight sites observe
/// the static weights.
CalibrationStats collect_calibration(const Model& fp, const Dataset& train, const std::vector<Tensor>& text_sequences,
                                     std::size_t batches, std::size_t batch_size, std::uint64_t seed);

/// collect_calibration + finalize. A fully disabled plan returns identity sites
/// without running the model.
QuantSiteMap run_calibration(const Model& fp, const Dataset& train, const std::vector<Tensor>& text_sequences,
                             CalibMethod method, const BitPlan& plan, std::size_t batches, std::size_t batch_size,
                             std::uint64_t seed, std::vector<std::string>* warnings = nullptr);

// ---- text helpers --------------------------------------------------------------------

/// Token-embedding rows of each class name, [c × D].
std::vector<Tensor> class_embeddings(const Model& model, const std::vector<std::string>& class_names);
/// Fixed prompt tokens spelled by `text`.
PromptTokens template_prompt(const Model& model, const std::string& text,
                             ClassTokenPosition position = ClassTokenPosition::End);
std::vector<Tensor> describe_classes(const PromptTokens& prompt, const std::vector<Tensor>& class_embeddings,
                                     std::size_t context_length);
/// Text features [K × E] of every class description under `hook`.
Tensor text_features(const Model& model, const PromptTokens& prompt, const std::vector<Tensor>& class_embeddings,
                     SiteHook& hook);

/// similarity_logits, except that a zero-norm row on either side gets cosine 0
/// against everything instead of raising. Low-bit encoders can quantize a
/// whole feature to zero; such a sample then scores every class equally.
/// `degenerate` receives the number of zero-norm image rows.
Tensor guarded_similarity_logits(const Tensor& v, const Tensor& w, double tau, std::size_t* degenerate = nullptr);

/// Image features of a whole split, encoded in chunks of `chunk` images.
Tensor encode_dataset(const Model& model, const Dataset& data, SiteHook& hook, std::size_t chunk = 64);

/// Replaces image.proj with the ridge-regression map from full-precision pooled
/// image features to the full-precision text feature of each image's class
/// under `template_text`. Gives a randomly initialized model a zero-shot
/// classifier to quantize.
void align_image_projection(EncoderWeights& weights, const ModelConfig& cfg, const Dataset& data,
                            const std::string& template_text, double ridge = 1e-3);

// ---- training ---------------------------------------------------------------------------

struct FeatureSet {
  /// Teacher image features [n × E].
  Tensor fp;
  /// Dequantized student image features [n × E].
  Tensor q;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

struct TrainContext {
  const Model* teacher = nullptr;
  const Model* student = nullptr;
  const QuantSiteMap* sites = nullptr;
  std::vector<Tensor> class_embeddings;
  /// Fixed template tokens, used by the template teacher.
  PromptTokens template_prompt;
  FeatureSet train;
  FeatureSet val;
};

/// Context for training `student` (built by Model::quantized(sites)) against
/// `teacher`. Encodes both splits with both models unless full-precision
/// features are supplied. The models and sites must outlive the context.
TrainContext make_context(const Model& teacher, const Model& student, const QuantSiteMap& sites, const Dataset& train,
                          const Dataset& val, const std::string& template_text, const Tensor* fp_train = nullptr,
                          const Tensor* fp_val = nullptr);

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  /// Samples whose adapted feature has zero norm.
  std::size_t degenerate = 0;
  /// Student logits [n × K].
  Tensor logits;
  /// Adapted image features [n × E] and class text features [K × E].
  Tensor image_features;
  Tensor text_features;
};

/// Student predictions of `split` under `adaptation`.
EvalResult evaluate(const TrainContext& ctx, const Adaptation& adaptation, const FeatureSet& split);

/// Builds the initial adaptation for `cfg`: learnable prompt or template
/// tokens, and an adapter whose activation params come from the train features.
Adaptation initial_adaptation(const TrainContext& ctx, const TrainConfig& cfg);

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  OptimizerState optimizer;
};

/// Trains `adaptation` in place. Throws NumericError on a non-finite loss.
TrainResult train(const TrainContext& ctx, Adaptation& adaptation, const TrainConfig& cfg);

// ---- experiments ---------------------------------------------------------------------------

enum class AblationMode : std::uint8_t { Baseline, PromptOnly, AdapterOnly, Both };

std::string to_string(AblationMode m);
AblationMode parse_ablation_mode(const std::string& s);
/// Sets train_prompt / use_adapter for the mode.
void apply_mode(TrainConfig& cfg, AblationMode mode);

struct RunResult {
  Adaptation adaptation;
  std::vector<EpochMetrics> metrics;
  EvalResult val;
};

/// Shares everything that does not depend on the trained state across runs:
/// calibration statistics, full-precision features, and per-plan quantized
/// models with their cached features.
class Experiment {
 public:
  Experiment(Model fp, Dataset train, Dataset val, std::size_t calibration_batches, std::size_t calibration_batch,
             std::uint64_t seed, const std::string& template_text = "a photo of a");

  const Model& teacher() const { return fp_; }
  const Dataset& train_set() const { return train_; }
  const Dataset& val_set() const { return val_; }
  const CalibrationStats& calibration() const { return stats_; }

  /// Context for a bit plan; built on first use.
  const TrainContext& context(const BitPlan& plan, CalibMethod method = CalibMethod::Omse);
  const QuantSiteMap& sites(const BitPlan& plan, CalibMethod method = CalibMethod::Omse);

  RunResult run(const BitPlan& plan, const TrainConfig& cfg);

 private:
  struct PlanState {
    QuantSiteMap sites;
    std::unique_ptr<Model> student;
    TrainContext ctx;
  };

  Model fp_;
  Dataset train_;
  Dataset val_;
  std::string template_text_;
  CalibrationStats stats_;
  Tensor fp_train_;
  Tensor fp_val_;
  std::map<std::string, std::unique_ptr<PlanState>> plans_;
};

}  // namespace p4q
