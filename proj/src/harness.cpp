// SPDX-License-Identifier: Apache-2.0
#include "p4q/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "p4q/config.hpp"
#include "p4q/error.hpp"

namespace p4q {

double topk_accuracy(const Tensor& scores, std::span<const std::size_t> labels, std::size_t k) {
  if (scores.rank() != 2 || scores.dim(0) == 0) throw DimensionError("top-k needs a non-empty [n × K] matrix");
  const std::size_t n = scores.dim(0), classes = scores.dim(1);
  if (k == 0 || k > classes) throw ParameterError("top-k needs 1 <= k <= K");
  if (labels.size() != n) throw DimensionError("top-k needs one label per row");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i];
    if (y >= classes) throw DimensionError("label outside the class range");
    const double sy = scores.at(i, y);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      const double sj = scores.at(i, j);
      if (sj > sy || (sj == sy && j < y)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

SimilarityMatrix similarity_matrix(const Tensor& image_features, const Tensor& text_features) {
  if (image_features.rank() != 2 || text_features.rank() != 2)
    throw DimensionError("similarity matrix needs [n × E] feature matrices");
  if (image_features.dim(0) != text_features.dim(0))
    throw DimensionError("similarity matrix needs as many texts as images");
  if (image_features.dim(1) != text_features.dim(1)) throw DimensionError("image and text features differ in width");
  SimilarityMatrix m;
  m.n = image_features.dim(0);
  const std::size_t e = image_features.dim(1);
  m.values.resize(m.n * m.n);
  std::size_t diag = 0;
  for (std::size_t i = 0; i < m.n; ++i) {
    const auto u = image_features.values().subspan(i * e, e);
    std::size_t best = 0;
    for (std::size_t j = 0; j < m.n; ++j) {
      m.values[i * m.n + j] = cosine_similarity(u, text_features.values().subspan(j * e, e));
      if (m.values[i * m.n + j] > m.values[i * m.n + best]) best = j;
    }
    if (best == i) ++diag;
  }
  m.diag_argmax_rate = m.n ? static_cast<double>(diag) / static_cast<double>(m.n) : 0.0;
  return m;
}

std::vector<std::vector<std::size_t>> paired_groups(std::span<const std::size_t> labels, std::size_t classes) {
  if (classes == 0) throw ParameterError("pairing needs at least one class");
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
    by_class[labels[i]].push_back(i);
  }
  std::size_t groups = by_class[0].size();
  for (const auto& c : by_class) groups = std::min(groups, c.size());
  std::vector<std::vector<std::size_t>> out(groups, std::vector<std::size_t>(classes));
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < classes; ++k) out[g][k] = by_class[k][g];
  return out;
}

double paired_diag_argmax_rate(const Tensor& image_features, const Tensor& text_features,
                               std::span<const std::size_t> labels) {
  if (image_features.rank() != 2 || image_features.dim(0) != labels.size())
    throw DimensionError("one image feature row per label is required");
  const auto groups = paired_groups(labels, text_features.dim(0));
  if (groups.empty()) throw DataError("some class has no sample to pair");
  double total = 0.0;
  for (const auto& g : groups) total += similarity_matrix(gather_rows(image_features, g), text_features).diag_argmax_rate;
  return total / static_cast<double>(groups.size());
}

FeatureHistogram feature_histogram(std::span<const double> features, std::size_t bins) {
  if (bins < 2) throw ParameterError("histogram needs at least 2 bins");
  if (features.empty()) throw DataError("histogram of no features");
  FeatureHistogram h;
  h.counts.assign(bins, 0);
  const auto [mn, mx] = std::minmax_element(features.begin(), features.end());
  h.lo = *mn;
  h.hi = *mx;
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  double sum = 0.0;
  for (double x : features) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((x - h.lo) / width) : 0;
    h.counts[std::min(b, bins - 1)] += 1;
    sum += x;
  }
  const double n = static_cast<double>(features.size());
  h.mean = sum / n;
  double m2 = 0.0;
  for (double x : features) m2 += (x - h.mean) * (x - h.mean);
  h.stddev = std::sqrt(m2 / n);
  return h;
}

// ---- cost model ---------------------------------------------------------------------

std::vector<SizedTensor> sized_tensors(const ModelConfig& cfg, const SizeOptions& options) {
  std::vector<SizedTensor> out;
  for (auto& [name, shape] : weight_layout(cfg)) {
    const bool embedding = name == "image.patch_embed.w" || name == "text.token_embed";
    const bool linear = classify_site(name) == SiteClass::Weight && name != "image.patch_embed.w";
    out.push_back({name, shape, linear || (embedding && options.quantize_embeddings)});
  }
  return out;
}

SizeEstimate estimate_size(const std::vector<SizedTensor>& tensors, int w_bits, bool per_channel_overhead) {
  if (!(w_bits == 2 || w_bits == 3 || w_bits == 4 || w_bits == 8 || w_bits == kDisabledBits))
    throw ParameterError("weight bit-width must be one of 2, 3, 4, 8, 32");
  SizeEstimate s;
  for (const auto& t : tensors) {
    const std::size_t count = shape_size(t.shape);
    s.parameters += count;
    if (t.quantized && w_bits != kDisabledBits) {
      s.q_bytes += (count * static_cast<std::size_t>(w_bits) + 7) / 8;
      if (per_channel_overhead) {
        const std::size_t channels = t.shape.size() >= 2 ? t.shape[1] : 1;
        s.q_bytes += channels * (sizeof(float) + sizeof(std::int32_t));
      }
    } else {
      s.q_bytes += 4 * count;
    }
  }
  s.fp_bytes = 4 * s.parameters;
  s.ratio = s.q_bytes ? static_cast<double>(s.fp_bytes) / static_cast<double>(s.q_bytes) : 1.0;
  return s;
}

SizeEstimate estimate_size(const ModelConfig& cfg, const BitPlan& plan, const SizeOptions& options) {
  cfg.validate();
  plan.validate();
  return estimate_size(sized_tensors(cfg, options), plan.w_bits, options.per_channel_overhead);
}

std::uint64_t tower_macs(std::size_t tokens, std::size_t input_dim, std::size_t width, std::size_t layers,
                         std::size_t mlp_ratio, std::size_t embed_dim) {
  const std::uint64_t t = tokens, w = width, h = width * mlp_ratio;
  const std::uint64_t per_layer = t * w * 3 * w  // qkv
                                  + 2 * t * t * w  // scores and weighted values
                                  + t * w * w      // attention output
                                  + 2 * t * w * h;  // mlp
  return t * input_dim * w + layers * per_layer + w * embed_dim;
}

FlopsEstimate estimate_flops(const ModelConfig& cfg, const BitPlan& plan) {
  cfg.validate();
  plan.validate();
  FlopsEstimate f;
  // The token-embedding lookup performs no multiply-accumulates.
  f.raw_macs = tower_macs(cfg.num_patches(), cfg.patch_dim(), cfg.image_width, cfg.image_layers, cfg.mlp_ratio,
                          cfg.embed_dim) +
               tower_macs(cfg.context_length, 0, cfg.text_width, cfg.text_layers, cfg.mlp_ratio, cfg.embed_dim);
  const double factor = static_cast<double>(std::max(plan.w_bits, plan.a_bits)) / 32.0;
  f.scaled_macs = static_cast<double>(f.raw_macs) * factor;
  return f;
}

// ---- report files -------------------------------------------------------------------

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t c; (c = line.find(',', start)) != std::string::npos; start = c + 1) out.push_back(line.substr(start, c - start));
  out.push_back(line.substr(start));
  return out;
}

}  // namespace

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = "epoch,loss_c,loss_dist,loss_total,train_top1,val_top1\n";
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "," + fixed6(r.loss_c) + "," + fixed6(r.loss_dist) + "," + fixed6(r.loss_total) +
           "," + fixed6(r.train_top1) + "," + fixed6(r.val_top1) + "\n";
  return out;
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "epoch,loss_c,loss_dist,loss_total,train_top1,val_top1")
    throw FormatError("metrics CSV lacks its header");
  std::vector<EpochMetrics> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = csv_fields(trim(line));
    if (f.size() != 6) throw FormatError("metrics CSV row needs 6 fields: '" + line + "'");
    rows.push_back({static_cast<std::size_t>(parse_int(f[0], "epoch")), parse_double(f[1], "loss_c"),
                    parse_double(f[2], "loss_dist"), parse_double(f[3], "loss_total"),
                    parse_double(f[4], "train_top1"), parse_double(f[5], "val_top1")});
  }
  return rows;
}

std::string similarity_pgm(const SimilarityMatrix& m) {
  std::ostringstream out;
  out << "P2\n" << m.n << ' ' << m.n << "\n255\n";
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) {
      const double c = std::clamp(m.at(i, j), -1.0, 1.0);
      out << (j ? " " : "") << static_cast<int>(std::lround((c + 1.0) * 127.5));
    }
    out << '\n';
  }
  return out.str();
}

std::string similarity_csv(const SimilarityMatrix& m) {
  std::string out;
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) out += (j ? "," : "") + g17(m.at(i, j));
    out += "\n";
  }
  return out;
}

SimilarityMatrix parse_similarity_csv(const std::string& text) {
  SimilarityMatrix m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = csv_fields(trim(line));
    if (m.n == 0) m.n = f.size();
    if (f.size() != m.n) throw FormatError("similarity CSV rows differ in length");
    for (const auto& v : f) m.values.push_back(parse_double(v, "cosine"));
  }
  if (m.values.size() != m.n * m.n) throw FormatError("similarity CSV is not square");
  std::size_t diag = 0;
  for (std::size_t i = 0; i < m.n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 0; j < m.n; ++j)
      if (m.at(i, j) > m.at(i, best)) best = j;
    if (best == i) ++diag;
  }
  m.diag_argmax_rate = m.n ? static_cast<double>(diag) / static_cast<double>(m.n) : 0.0;
  return m;
}

std::string histogram_csv(const std::vector<NamedHistogram>& hists) {
  std::string out = "feature,bin,lo,hi,count\n";
  for (const auto& [name, h] : hists) {
    out += name + ",mean," + g17(h.mean) + ",,\n";
    out += name + ",std," + g17(h.stddev) + ",,\n";
    const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      out += name + "," + std::to_string(b) + "," + g17(h.lo + width * static_cast<double>(b)) + "," +
             g17(b + 1 == h.counts.size() ? h.hi : h.lo + width * static_cast<double>(b + 1)) + "," +
             std::to_string(h.counts[b]) + "\n";
  }
  return out;
}

std::string cost_table_csv(const ModelConfig& cfg, const std::vector<BitPlan>& plans) {
  std::string out = "plan,params,fp_bytes,q_bytes,ratio,raw_macs,scaled_macs\n";
  for (const auto& plan : plans) {
    const auto s = estimate_size(cfg, plan);
    const auto f = estimate_flops(cfg, plan);
    out += plan.str() + "," + std::to_string(s.parameters) + "," + std::to_string(s.fp_bytes) + "," +
           std::to_string(s.q_bytes) + "," + fixed6(s.ratio) + "," + std::to_string(f.raw_macs) + "," +
           fixed6(f.scaled_macs) + "\n";
  }
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace p4q
