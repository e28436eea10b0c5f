// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-tower contrastive model: a vision transformer over image patches and a
// text transformer over token embeddings, both ending in a projection into a
// shared feature space.
//
// Both towers use pre-LN blocks:
//
//   x += out(attn(q(ln1 x), k(ln1 x), v(ln1 x)))
//   x += fc2(gelu(fc1(ln2 x)))
//
// Linear layers compute y = x·W + b with W stored [in × out]. The image tower
// mean-pools its patch tokens, the text tower takes the final token of each
// sequence; each then applies a final layer norm and the projection.
//
// Quantization is expressed through named sites. Weights of every linear layer
// are fake-quantized once (Model::quantized), activations are routed through a
// SiteHook on every forward pass so the same code serves the full-precision,
// fake-quantized and calibration-observing passes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "p4q/config.hpp"
#include "p4q/quant.hpp"
#include "p4q/tensor.hpp"

namespace p4q {

/// W-A-Attention bit-widths; 32 disables the site class.
struct BitPlan {
  int w_bits = kDisabledBits;
  int a_bits = kDisabledBits;
  int attn_bits = kDisabledBits;

  /// Accepts "4-4-8" or "4,4,8".
  static BitPlan parse(const std::string& s);
  static BitPlan uniform(int bits) { return {bits, bits, bits}; }
  std::string str() const;
  bool disabled() const { return w_bits == kDisabledBits && a_bits == kDisabledBits && attn_bits == kDisabledBits; }
  void validate() const;

  bool operator==(const BitPlan&) const = default;
};

struct ModelConfig {
  std::size_t image_width = 64;
  std::size_t text_width = 64;
  /// Width of the shared feature space.
  std::size_t embed_dim = 64;
  std::size_t image_layers = 4;
  std::size_t text_layers = 4;
  std::size_t image_heads = 4;
  std::size_t text_heads = 4;
  std::size_t patch_size = 4;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t vocab_size = 512;
  std::size_t context_length = 24;
  std::size_t mlp_ratio = 4;
  double tau = 0.01;
  double ln_eps = 1e-5;
  BitPlan bit_plan;

  static ModelConfig toy();
  /// Dimensions of a ViT-B/32 CLIP model, used only for cost estimates.
  static ModelConfig vitb32_like();

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  /// Throws ParameterError on inconsistent dimensions.
  void validate() const;

  KeyValues to_kv() const;
  static ModelConfig from_kv(const KeyValues& kv);

  bool operator==(const ModelConfig&) const = default;
};

enum class SiteClass : std::uint8_t { Weight, Activation, Attention };

std::string to_string(SiteClass c);
/// `.w` names are weights, `.q/.k/.v/.probs` attention tensors, everything else activations.
SiteClass classify_site(const std::string& name);

struct SiteSpec {
  std::string name;
  SiteClass site_class;
};

/// Every quantization site of the model, in traversal order.
std::vector<SiteSpec> site_layout(const ModelConfig& cfg);
/// Every weight tensor of the model with its shape, in traversal order.
std::vector<std::pair<std::string, Shape>> weight_layout(const ModelConfig& cfg);

// ---- weights -----------------------------------------------------------------

class EncoderWeights {
 public:
  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  /// Throws StateError naming the missing tensor.
  const Tensor& get(const std::string& name) const;
  void replace(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t parameter_count() const;
  /// FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t checksum() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Seeded Gaussian weights (std 0.02) for linear, embedding and projection
/// tensors; layer-norm gains 1, shifts and biases 0.
EncoderWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

/// Writes the container at `path` and the model config to `path` + ".config".
void save_checkpoint(const EncoderWeights& weights, const ModelConfig& cfg, const std::filesystem::path& path);
/// Loads the container and checks every tensor against the layout of `cfg`;
/// the first mismatch raises DimensionError naming that tensor.
EncoderWeights load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg);
ModelConfig load_checkpoint_config(const std::filesystem::path& path);

// ---- tokenizer ------------------------------------------------------------------

/// Whitespace tokenizer. A fixed word list gets stable ids; other words are
/// hashed into the remaining id range. Id 0 is never produced.
class Tokenizer {
 public:
  explicit Tokenizer(std::size_t vocab_size);
  std::size_t id(const std::string& word) const;
  std::vector<std::size_t> encode(const std::string& text) const;

 private:
  std::size_t vocab_size_;
  std::unordered_map<std::string, std::size_t> known_;
};

// ---- quantization sites -------------------------------------------------------------

struct QuantSite {
  std::string name;
  SiteClass site_class = SiteClass::Activation;
  QuantParams params;
};

class QuantSiteMap {
 public:
  void add(QuantSite site);
  const QuantSite* find(const std::string& name) const;
  /// Throws StateError when the site has no params.
  const QuantParams& params(const std::string& name) const;
  const std::vector<QuantSite>& sites() const { return sites_; }
  std::size_t size() const { return sites_.size(); }

  /// Identity params at every site of the layout.
  static QuantSiteMap identity(const ModelConfig& cfg);

  void write(std::ostream& os) const;
  static QuantSiteMap read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static QuantSiteMap load(const std::filesystem::path& path);

 private:
  std::vector<QuantSite> sites_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Per-site calibrators for one model: weights per output channel (axis 1),
/// activation and attention sites per tensor.
class CalibrationStats {
 public:
  explicit CalibrationStats(const ModelConfig& cfg);

  Calibrator* find(const std::string& name);
  const Calibrator& at(const std::string& name) const;
  /// Feeds every weight site from the static weights (one batch each).
  void observe_weights(const EncoderWeights& weights);
  /// Ends one calibration batch on every activation and attention site.
  void close_batch();

  /// Finalizes every site for `plan`. Weight sites are signed, the rest
  /// unsigned; sites at 32 bits get identity params. Degenerate sites are
  /// reported through `warnings` when given.
  QuantSiteMap finalize(CalibMethod method, const BitPlan& plan, std::vector<std::string>* warnings = nullptr) const;

 private:
  std::vector<SiteSpec> layout_;
  std::map<std::string, Calibrator> calibrators_;
};

/// Routes activations through quantization sites.
class SiteHook {
 public:
  virtual ~SiteHook() = default;
  virtual Tensor apply(const std::string& site, const Tensor& x) = 0;
  /// Params applied to attention probabilities inside the fused attention op.
  virtual const QuantParams* probs_params(const std::string& site) = 0;
  /// Calibrator that should see attention probabilities, if any.
  virtual Calibrator* probs_observer(const std::string& site) = 0;
};

/// Full-precision pass: every site is the identity.
class FpHook final : public SiteHook {
 public:
  Tensor apply(const std::string&, const Tensor& x) override { return x; }
  const QuantParams* probs_params(const std::string&) override { return nullptr; }
  Calibrator* probs_observer(const std::string&) override { return nullptr; }
};

/// Fake-quantizes every activation and attention site with finalized params.
class QuantHook final : public SiteHook {
 public:
  explicit QuantHook(const QuantSiteMap& sites) : sites_(sites) {}
  Tensor apply(const std::string& site, const Tensor& x) override;
  const QuantParams* probs_params(const std::string& site) override;
  Calibrator* probs_observer(const std::string&) override { return nullptr; }

 private:
  const QuantSiteMap& sites_;
};

/// Full-precision pass that feeds every site's calibrator. Call
/// CalibrationStats::close_batch() after each calibration batch.
class ObserveHook final : public SiteHook {
 public:
  explicit ObserveHook(CalibrationStats& stats) : stats_(stats) {}
  Tensor apply(const std::string& site, const Tensor& x) override;
  const QuantParams* probs_params(const std::string&) override { return nullptr; }
  Calibrator* probs_observer(const std::string& site) override { return stats_.find(site); }

 private:
  CalibrationStats& stats_;
};

// ---- model ------------------------------------------------------------------------

/// Multi-head self-attention over consecutive row segments of q, k, v
/// ([n × d] each). Each segment attends only within itself. When `probs` is
/// given, the probabilities are fake-quantized before they weight v, with a
/// straight-through backward. `observer` sees the probabilities of every
/// segment and head.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> segments,
                 std::size_t heads, const QuantParams* probs = nullptr, Calibrator* observer = nullptr);

/// Rearranges [B, H, W, C] images (or one [H, W, C] image) into patch rows
/// [B·T × p·p·C], patches in raster order, each flattened as (dy, dx, c).
Tensor patchify(const Tensor& images, std::size_t patch_size);

class Model {
 public:
  Model(ModelConfig cfg, EncoderWeights weights);

  const ModelConfig& config() const { return cfg_; }
  const EncoderWeights& weights() const { return weights_; }

  /// Copy whose weight sites hold dequantize(quantize(w)) under `sites`.
  Model quantized(const QuantSiteMap& sites) const;

  /// Image features [B × embed_dim] for [B, H, W, C] images (or one [H, W, C]
  /// image), including the `image.feature` site.
  Tensor encode_images(const Tensor& images, SiteHook& hook) const;
  /// Text features [K × embed_dim] for K embedded sequences ([len_k × text_width]),
  /// including the `text.input` and `text.feature` sites.
  Tensor encode_text(const std::vector<Tensor>& sequences, SiteHook& hook) const;
  /// Same as above without the output-feature site.
  Tensor encode_images_raw(const Tensor& images, SiteHook& hook) const;
  Tensor encode_text_raw(const std::vector<Tensor>& sequences, SiteHook& hook) const;

  /// Rows of the token-embedding table, [ids × text_width], without gradient.
  Tensor token_embeddings(const std::vector<std::size_t>& ids) const;

 private:
  Tensor block(const std::string& prefix, Tensor x, std::span<const std::size_t> segments, std::size_t heads,
               SiteHook& hook) const;
  Tensor linear(const std::string& prefix, const Tensor& x, SiteHook& hook) const;
  const Tensor& w(const std::string& name) const { return weights_.get(name); }

  ModelConfig cfg_;
  EncoderWeights weights_;
};

/// Full-precision feature of one image.
Tensor encode_image_fp(const Model& model, const Tensor& image);
/// Full-precision feature of one embedded sequence.
Tensor encode_text_fp(const Model& model, const Tensor& sequence);

struct QuantizedFeatures {
  /// Integer codes; empty when the output site is disabled (32 bits).
  IntTensor codes;
  QuantParams params;
  /// (codes - zp) · s, or the unquantized features for a disabled site.
  Tensor dequantized;
};

/// `qmodel` must come from Model::quantized(sites). Runs the fake-quantized
/// encoder and returns integer codes of the output features under the
/// `image.feature` site.
QuantizedFeatures encode_image_q(const Model& qmodel, const QuantSiteMap& sites, const Tensor& images);
QuantizedFeatures encode_text_q(const Model& qmodel, const QuantSiteMap& sites, const std::vector<Tensor>& sequences);

}  // namespace p4q
