// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evaluation metrics, feature diagnostics, cost estimates and report files.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "p4q/encoders.hpp"
#include "p4q/tensor.hpp"

namespace p4q {

/// Percentage of rows whose label ranks among the k largest entries. A class
/// outranks the label when its score is larger, or equal with a lower index.
double topk_accuracy(const Tensor& scores, std::span<const std::size_t> labels, std::size_t k);

struct SimilarityMatrix {
  std::size_t n = 0;
  /// Row-major n×n cosines, row i = image i, column j = text j.
  std::vector<double> values;
  /// Fraction of rows whose first maximum sits on the diagonal.
  double diag_argmax_rate = 0.0;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

/// Cosine grid between paired image and text features ([n × E] each).
SimilarityMatrix similarity_matrix(const Tensor& image_features, const Tensor& text_features);

/// Pairs images with class texts: group g holds the index of the g-th sample
/// of each class, in class order. Only groups every class reaches are formed.
std::vector<std::vector<std::size_t>> paired_groups(std::span<const std::size_t> labels, std::size_t classes);

/// diag_argmax_rate of the K×K grid between the images of each paired group
/// and the K class text features, averaged over groups.
double paired_diag_argmax_rate(const Tensor& image_features, const Tensor& text_features,
                               std::span<const std::size_t> labels);

struct FeatureHistogram {
  std::vector<std::uint64_t> counts;
  double lo = 0.0;
  double hi = 0.0;
  /// Population statistics of the binned values.
  double mean = 0.0;
  double stddev = 0.0;
};

/// `bins` equal-width bins over [min, max]; the maximum lands in the last bin.
FeatureHistogram feature_histogram(std::span<const double> features, std::size_t bins);

// ---- cost model -------------------------------------------------------------------

struct SizedTensor {
  std::string name;
  Shape shape;
  /// Stored at the weight bit-width with per-channel params along axis 1.
  bool quantized = false;
};

struct SizeOptions {
  /// Count the patch and token embedding tables as quantized weights.
  bool quantize_embeddings = true;
  /// Add one f32 scale and one i32 zero-point per output channel.
  bool per_channel_overhead = true;
};

struct SizeEstimate {
  std::size_t parameters = 0;
  std::size_t fp_bytes = 0;
  std::size_t q_bytes = 0;
  double ratio = 1.0;
};

/// Tensors of `cfg` with their quantization flag under `options`.
std::vector<SizedTensor> sized_tensors(const ModelConfig& cfg, const SizeOptions& options = {});

/// fp = 4 bytes per parameter. Quantized tensors take ⌈count·w_bits/8⌉ bytes
/// plus their per-channel overhead; every other tensor stays at 4 bytes.
SizeEstimate estimate_size(const std::vector<SizedTensor>& tensors, int w_bits, bool per_channel_overhead = true);
SizeEstimate estimate_size(const ModelConfig& cfg, const BitPlan& plan, const SizeOptions& options = {});

/// Multiply-accumulates of one tower forward: input embedding, `layers`
/// blocks over `tokens` tokens, and the output projection of one pooled token.
std::uint64_t tower_macs(std::size_t tokens, std::size_t input_dim, std::size_t width, std::size_t layers,
                         std::size_t mlp_ratio, std::size_t embed_dim);

struct FlopsEstimate {
  /// One image forward plus one full-context text forward.
  std::uint64_t raw_macs = 0;
  /// raw_macs · max(w_bits, a_bits) / 32.
  double scaled_macs = 0.0;
};

FlopsEstimate estimate_flops(const ModelConfig& cfg, const BitPlan& plan);

// ---- report files ---------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_c = 0.0;
  double loss_dist = 0.0;
  double loss_total = 0.0;
  double train_top1 = 0.0;
  double val_top1 = 0.0;
};

/// `epoch,loss_c,loss_dist,loss_total,train_top1,val_top1` with six decimals.
std::string metrics_csv(const std::vector<EpochMetrics>& rows);
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);

/// Plain-text PGM (P2); cosine -1 maps to 0 and +1 to 255.
std::string similarity_pgm(const SimilarityMatrix& m);
std::string similarity_csv(const SimilarityMatrix& m);
SimilarityMatrix parse_similarity_csv(const std::string& text);

struct NamedHistogram {
  std::string name;
  FeatureHistogram histogram;
};

/// One row per bin: `feature,bin,lo,hi,count`, preceded by summary rows
/// `feature,mean,<v>` and `feature,std,<v>`.
std::string histogram_csv(const std::vector<NamedHistogram>& hists);

/// `plan,params,fp_bytes,q_bytes,ratio,raw_macs,scaled_macs` for each plan.
std::string cost_table_csv(const ModelConfig& cfg, const std::vector<BitPlan>& plans);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace p4q
