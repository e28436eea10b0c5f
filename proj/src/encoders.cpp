// SPDX-License-Identifier: Apache-2.0
#include "p4q/encoders.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "p4q/container.hpp"
#include "p4q/error.hpp"
#include "p4q/kernels.hpp"
#include "p4q/rng.hpp"

namespace p4q {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool valid_plan_bits(int b) { return b == 2 || b == 3 || b == 4 || b == 8 || b == kDisabledBits; }

std::size_t as_size(long long v, const std::string& key) {
  if (v <= 0) throw FormatError("config key '" + key + "' must be positive");
  return static_cast<std::size_t>(v);
}

void append_block_weights(std::vector<std::pair<std::string, Shape>>& out, const std::string& p, std::size_t w,
                          std::size_t hidden) {
  out.push_back({p + ".ln1.g", {w}});
  out.push_back({p + ".ln1.b", {w}});
  out.push_back({p + ".attn.qkv.w", {w, 3 * w}});
  out.push_back({p + ".attn.qkv.b", {3 * w}});
  out.push_back({p + ".attn.out.w", {w, w}});
  out.push_back({p + ".attn.out.b", {w}});
  out.push_back({p + ".ln2.g", {w}});
  out.push_back({p + ".ln2.b", {w}});
  out.push_back({p + ".mlp.fc1.w", {w, hidden}});
  out.push_back({p + ".mlp.fc1.b", {hidden}});
  out.push_back({p + ".mlp.fc2.w", {hidden, w}});
  out.push_back({p + ".mlp.fc2.b", {w}});
}

void append_block_sites(std::vector<SiteSpec>& out, const std::string& p) {
  for (const char* s : {".attn.qkv.w", ".attn.qkv.in", ".attn.q", ".attn.k", ".attn.v", ".attn.probs", ".attn.out.w",
                        ".attn.out.in", ".mlp.fc1.w", ".mlp.fc1.in", ".mlp.fc2.w", ".mlp.fc2.in"}) {
    const std::string name = p + s;
    out.push_back({name, classify_site(name)});
  }
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Words with fixed token ids. Other words hash into the rest of the vocabulary.
const char* const kKnownWords[] = {
    "a",      "an",     "the",    "photo",   "of",      "picture", "image",  "small",  "large",
    "red",    "green",  "blue",   "yellow",  "magenta", "cyan",    "orange", "purple", "white",
    "gray",   "pink",   "brown",  "circle",  "square",  "triangle", "ring",  "cross",  "diamond",
    "bar",    "star",   "dot",    "stripe",  "frame",   "plus",     "disk",
};

}  // namespace

// ---- BitPlan / ModelConfig -------------------------------------------------------

BitPlan BitPlan::parse(const std::string& s) {
  const auto parts = split(s, ",-");
  if (parts.size() != 3) throw ParameterError("bit plan needs three entries W,A,ATTN, got '" + s + "'");
  BitPlan p{static_cast<int>(parse_int(parts[0], "w_bits")), static_cast<int>(parse_int(parts[1], "a_bits")),
            static_cast<int>(parse_int(parts[2], "attn_bits"))};
  p.validate();
  return p;
}

std::string BitPlan::str() const {
  return std::to_string(w_bits) + "-" + std::to_string(a_bits) + "-" + std::to_string(attn_bits);
}

void BitPlan::validate() const {
  for (int b : {w_bits, a_bits, attn_bits})
    if (!valid_plan_bits(b)) throw ParameterError("bit-width " + std::to_string(b) + " not in {2,3,4,8,32}");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::vitb32_like() {
  ModelConfig c;
  c.image_width = 768;
  c.text_width = 512;
  c.embed_dim = 512;
  c.image_layers = 12;
  c.text_layers = 12;
  c.image_heads = 12;
  c.text_heads = 8;
  c.patch_size = 32;
  c.image_size = 224;
  c.vocab_size = 49408;
  c.context_length = 77;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ParameterError(std::string(what) + " must be positive");
  };
  positive(image_width, "image_width");
  positive(text_width, "text_width");
  positive(embed_dim, "embed_dim");
  positive(image_heads, "image_heads");
  positive(text_heads, "text_heads");
  positive(patch_size, "patch_size");
  positive(image_size, "image_size");
  positive(channels, "channels");
  positive(context_length, "context_length");
  positive(mlp_ratio, "mlp_ratio");
  if (image_size % patch_size != 0) throw ParameterError("image_size must be divisible by patch_size");
  if (image_width % image_heads != 0) throw ParameterError("image_width must be divisible by image_heads");
  if (text_width % text_heads != 0) throw ParameterError("text_width must be divisible by text_heads");
  if (vocab_size < std::size(kKnownWords) + 2) throw ParameterError("vocab_size too small for the tokenizer");
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  if (!(ln_eps > 0.0)) throw ParameterError("ln_eps must be positive");
  bit_plan.validate();
}

KeyValues ModelConfig::to_kv() const {
  KeyValues kv;
  kv.set("image_width", static_cast<long long>(image_width));
  kv.set("text_width", static_cast<long long>(text_width));
  kv.set("embed_dim", static_cast<long long>(embed_dim));
  kv.set("image_layers", static_cast<long long>(image_layers));
  kv.set("text_layers", static_cast<long long>(text_layers));
  kv.set("image_heads", static_cast<long long>(image_heads));
  kv.set("text_heads", static_cast<long long>(text_heads));
  kv.set("patch_size", static_cast<long long>(patch_size));
  kv.set("image_size", static_cast<long long>(image_size));
  kv.set("channels", static_cast<long long>(channels));
  kv.set("vocab_size", static_cast<long long>(vocab_size));
  kv.set("context_length", static_cast<long long>(context_length));
  kv.set("mlp_ratio", static_cast<long long>(mlp_ratio));
  kv.set("tau", tau);
  kv.set("ln_eps", ln_eps);
  kv.set("bit_plan", bit_plan.str());
  return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
  ModelConfig c;
  auto sz = [&](const char* key, std::size_t fallback) {
    return as_size(kv.get_int(key, static_cast<long long>(fallback)), key);
  };
  c.image_width = sz("image_width", c.image_width);
  c.text_width = sz("text_width", c.text_width);
  c.embed_dim = sz("embed_dim", c.embed_dim);
  c.image_layers = static_cast<std::size_t>(std::max(0LL, kv.get_int("image_layers", 4)));
  c.text_layers = static_cast<std::size_t>(std::max(0LL, kv.get_int("text_layers", 4)));
  c.image_heads = sz("image_heads", c.image_heads);
  c.text_heads = sz("text_heads", c.text_heads);
  c.patch_size = sz("patch_size", c.patch_size);
  c.image_size = sz("image_size", c.image_size);
  c.channels = sz("channels", c.channels);
  c.vocab_size = sz("vocab_size", c.vocab_size);
  c.context_length = sz("context_length", c.context_length);
  c.mlp_ratio = sz("mlp_ratio", c.mlp_ratio);
  c.tau = kv.get_double("tau", c.tau);
  c.ln_eps = kv.get_double("ln_eps", c.ln_eps);
  if (const auto plan = kv.get("bit_plan")) c.bit_plan = BitPlan::parse(*plan);
  c.validate();
  return c;
}

// ---- layouts -------------------------------------------------------------------

std::string to_string(SiteClass c) {
  switch (c) {
    case SiteClass::Weight: return "weight";
    case SiteClass::Activation: return "activation";
    case SiteClass::Attention: return "attention";
  }
  return "?";
}

SiteClass classify_site(const std::string& name) {
  if (ends_with(name, ".w")) return SiteClass::Weight;
  if (ends_with(name, ".q") || ends_with(name, ".k") || ends_with(name, ".v") || ends_with(name, ".probs"))
    return SiteClass::Attention;
  return SiteClass::Activation;
}

std::vector<SiteSpec> site_layout(const ModelConfig& cfg) {
  std::vector<SiteSpec> out;
  out.push_back({"image.patch_embed.w", SiteClass::Weight});
  out.push_back({"image.patch_embed.in", SiteClass::Activation});
  for (std::size_t l = 0; l < cfg.image_layers; ++l) append_block_sites(out, "image.blocks." + std::to_string(l));
  out.push_back({"image.proj.w", SiteClass::Weight});
  out.push_back({"image.proj.in", SiteClass::Activation});
  out.push_back({"image.feature", SiteClass::Activation});
  out.push_back({"text.input", SiteClass::Activation});
  for (std::size_t l = 0; l < cfg.text_layers; ++l) append_block_sites(out, "text.blocks." + std::to_string(l));
  out.push_back({"text.proj.w", SiteClass::Weight});
  out.push_back({"text.proj.in", SiteClass::Activation});
  out.push_back({"text.feature", SiteClass::Activation});
  return out;
}

std::vector<std::pair<std::string, Shape>> weight_layout(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t iw = cfg.image_width, tw = cfg.text_width;
  out.push_back({"image.patch_embed.w", {cfg.patch_dim(), iw}});
  out.push_back({"image.patch_embed.b", {iw}});
  out.push_back({"image.pos_embed", {cfg.num_patches(), iw}});
  for (std::size_t l = 0; l < cfg.image_layers; ++l)
    append_block_weights(out, "image.blocks." + std::to_string(l), iw, iw * cfg.mlp_ratio);
  out.push_back({"image.ln_post.g", {iw}});
  out.push_back({"image.ln_post.b", {iw}});
  out.push_back({"image.proj.w", {iw, cfg.embed_dim}});
  out.push_back({"image.proj.b", {cfg.embed_dim}});
  out.push_back({"text.token_embed", {cfg.vocab_size, tw}});
  out.push_back({"text.pos_embed", {cfg.context_length, tw}});
  for (std::size_t l = 0; l < cfg.text_layers; ++l)
    append_block_weights(out, "text.blocks." + std::to_string(l), tw, tw * cfg.mlp_ratio);
  out.push_back({"text.ln_final.g", {tw}});
  out.push_back({"text.ln_final.b", {tw}});
  out.push_back({"text.proj.w", {tw, cfg.embed_dim}});
  out.push_back({"text.proj.b", {cfg.embed_dim}});
  return out;
}

// ---- weights -------------------------------------------------------------------

void EncoderWeights::add(const std::string& name, Tensor t) {
  if (contains(name)) throw ParameterError("duplicate weight '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(t));
}

const Tensor& EncoderWeights::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw StateError("model has no weight '" + name + "'");
  return entries_[it->second].second;
}

void EncoderWeights::replace(const std::string& name, Tensor t) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw StateError("model has no weight '" + name + "'");
  if (t.shape() != entries_[it->second].second.shape()) throw DimensionError("replacing '" + name + "' changes its shape");
  entries_[it->second].second = std::move(t);
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

std::uint64_t EncoderWeights::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : entries_) {
    h = fnv1a(h, name.data(), name.size());
    for (std::size_t d : t.shape()) h = fnv1a(h, &d, sizeof d);
    h = fnv1a(h, t.values().data(), t.size() * sizeof(double));
  }
  return h;
}

EncoderWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  EncoderWeights w;
  for (const auto& [name, shape] : weight_layout(cfg)) {
    Tensor t(shape, 0.0);
    auto v = t.mutable_values();
    if (ends_with(name, ".g")) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (!ends_with(name, ".b")) {
      for (double& x : v) x = rng.normal(0.0, 0.02);
    }
    w.add(name, std::move(t));
  }
  return w;
}

void save_checkpoint(const EncoderWeights& weights, const ModelConfig& cfg, const std::filesystem::path& path) {
  TensorFile f;
  for (const auto& [name, t] : weights.entries()) f.add(name, t, DType::F64);
  f.save(path);
  cfg.to_kv().save(path.string() + ".config");
}

ModelConfig load_checkpoint_config(const std::filesystem::path& path) {
  return ModelConfig::from_kv(KeyValues::load(path.string() + ".config"));
}

EncoderWeights load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg) {
  const TensorFile f = TensorFile::load(path);
  const auto layout = weight_layout(cfg);
  EncoderWeights w;
  for (const auto& [name, shape] : layout) {
    if (!f.contains(name)) throw DimensionError("checkpoint lacks tensor '" + name + "'");
    const auto& e = f.get(name);
    if (e.shape != shape)
      throw DimensionError("tensor '" + name + "' has shape " + shape_str(e.shape) + ", config expects " +
                           shape_str(shape));
    w.add(name, e.tensor());
  }
  if (f.size() != layout.size()) throw DimensionError("checkpoint holds tensors the config does not describe");
  return w;
}

// ---- tokenizer -------------------------------------------------------------------

Tokenizer::Tokenizer(std::size_t vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size < std::size(kKnownWords) + 2) throw ParameterError("vocab_size too small for the tokenizer");
  std::size_t id = 1;
  for (const char* word : kKnownWords) known_[word] = id++;
}

std::size_t Tokenizer::id(const std::string& word) const {
  if (const auto it = known_.find(word); it != known_.end()) return it->second;
  const std::size_t first_free = known_.size() + 1;
  const std::uint64_t h = fnv1a(0xcbf29ce484222325ULL, word.data(), word.size());
  return first_free + static_cast<std::size_t>(h % (vocab_size_ - first_free));
}

std::vector<std::size_t> Tokenizer::encode(const std::string& text) const {
  std::vector<std::size_t> ids;
  for (auto& word : split(text, " \t\r\n")) {
    std::string lower = word;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    ids.push_back(id(lower));
  }
  return ids;
}

// ---- site map ----------------------------------------------------------------------

void QuantSiteMap::add(QuantSite site) {
  if (index_.count(site.name)) throw ParameterError("duplicate quantization site '" + site.name + "'");
  site.params.validate();
  index_[site.name] = sites_.size();
  sites_.push_back(std::move(site));
}

const QuantSite* QuantSiteMap::find(const std::string& name) const {
  const auto it = index_.find(name);
  return it == index_.end() ? nullptr : &sites_[it->second];
}

const QuantParams& QuantSiteMap::params(const std::string& name) const {
  const auto* s = find(name);
  if (!s) throw StateError("no quantization params for site '" + name + "'");
  return s->params;
}

QuantSiteMap QuantSiteMap::identity(const ModelConfig& cfg) {
  QuantSiteMap m;
  for (const auto& s : site_layout(cfg)) m.add({s.name, s.site_class, QuantParams::identity()});
  return m;
}

void QuantSiteMap::write(std::ostream& os) const {
  for (const auto& s : sites_) write_quant_record(os, s.name, s.params);
}

QuantSiteMap QuantSiteMap::read(std::istream& is) {
  QuantSiteMap m;
  std::string line;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto [name, params] = parse_quant_record(line);
    m.add({name, classify_site(name), std::move(params)});
  }
  return m;
}

void QuantSiteMap::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  write(out);
}

QuantSiteMap QuantSiteMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read(in);
}

// ---- calibration stats ----------------------------------------------------------------

CalibrationStats::CalibrationStats(const ModelConfig& cfg) : layout_(site_layout(cfg)) {
  for (const auto& s : layout_)
    calibrators_.emplace(s.name, s.site_class == SiteClass::Weight ? Calibrator(1) : Calibrator());
}

Calibrator* CalibrationStats::find(const std::string& name) {
  const auto it = calibrators_.find(name);
  return it == calibrators_.end() ? nullptr : &it->second;
}

const Calibrator& CalibrationStats::at(const std::string& name) const {
  const auto it = calibrators_.find(name);
  if (it == calibrators_.end()) throw StateError("no calibrator for site '" + name + "'");
  return it->second;
}

void CalibrationStats::observe_weights(const EncoderWeights& weights) {
  for (const auto& s : layout_)
    if (s.site_class == SiteClass::Weight) calibrators_.at(s.name).observe(weights.get(s.name));
}

void CalibrationStats::close_batch() {
  for (auto& [name, c] : calibrators_)
    if (classify_site(name) != SiteClass::Weight) c.close_batch();
}

QuantSiteMap CalibrationStats::finalize(CalibMethod method, const BitPlan& plan,
                                        std::vector<std::string>* warnings) const {
  plan.validate();
  QuantSiteMap out;
  for (const auto& s : layout_) {
    const int bits = s.site_class == SiteClass::Weight       ? plan.w_bits
                     : s.site_class == SiteClass::Attention ? plan.attn_bits
                                                            : plan.a_bits;
    if (bits == kDisabledBits) {
      out.add({s.name, s.site_class, QuantParams::identity()});
      continue;
    }
    const Signedness sign = s.site_class == SiteClass::Weight ? Signedness::Signed : Signedness::Unsigned;
    const Calibrator& c = at(s.name);
    if (c.count() == 0) throw StateError("site '" + s.name + "' was never observed");
    auto result = c.finalize(method, bits, sign);
    if (result.degenerate && warnings) warnings->push_back("degenerate range at site " + s.name);
    out.add({s.name, s.site_class, std::move(result.params)});
  }
  return out;
}

// ---- hooks ------------------------------------------------------------------------

Tensor QuantHook::apply(const std::string& site, const Tensor& x) { return fake_quant(x, sites_.params(site)); }

const QuantParams* QuantHook::probs_params(const std::string& site) {
  const auto& p = sites_.params(site);
  return p.enabled() ? &p : nullptr;
}

Tensor ObserveHook::apply(const std::string& site, const Tensor& x) {
  Calibrator* c = stats_.find(site);
  if (!c) throw StateError("no calibrator for site '" + site + "'");
  c->accumulate(x.values(), x.shape());
  return x;
}

// ---- attention ------------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> segments,
                 std::size_t heads, const QuantParams* probs, Calibrator* observer) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("attention: q, k, v must be matrices of equal shape");
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  std::size_t total = 0;
  for (std::size_t len : segments) {
    if (len == 0) throw DimensionError("attention: empty segment");
    total += len;
  }
  if (total != n) throw DimensionError("attention: segments do not cover the rows");
  if (probs && probs->is_per_channel()) throw StateError("attention probabilities need per-tensor params");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  kernels::QuantGrid grid;
  if (probs) {
    grid.scale = probs->scale.data();
    grid.zero_point = probs->zero_point.data();
    grid.lo = probs->qmin();
    grid.hi = probs->qmax();
  }

  const bool record = Tape::active() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  std::vector<double> out(n * d, 0.0);
  // Per (segment, head): softmax output and, when quantized, the fake-quantized
  // probabilities with their clip mask. Kept only when a backward pass will need them.
  std::vector<std::vector<double>> saved_p, saved_pq;
  std::vector<std::vector<std::uint8_t>> saved_mask;

  std::vector<double> s, p, pq;
  std::vector<std::uint8_t> mask;
  std::size_t r0 = 0;
  for (std::size_t len : segments) {
    s.assign(len * len, 0.0);
    p.assign(len * len, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j) {
          double acc = 0.0;
          const double* qi = &qv[(r0 + i) * d + c0];
          const double* kj = &kv[(r0 + j) * d + c0];
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          s[i * len + j] = acc * scale;
        }
      kernels::serial::softmax_rows(s.data(), p.data(), len, len, 1.0);
      if (observer) observer->accumulate(p, {len, len});
      const std::vector<double>* weights = &p;
      if (probs) {
        pq.assign(len * len, 0.0);
        mask.assign(len * len, 0);
        kernels::serial::fake_quant(p.data(), pq.data(), mask.data(), len * len, grid);
        weights = &pq;
      }
      for (std::size_t i = 0; i < len; ++i) {
        double* oi = &out[(r0 + i) * d + c0];
        for (std::size_t j = 0; j < len; ++j) {
          const double w = (*weights)[i * len + j];
          const double* vj = &vv[(r0 + j) * d + c0];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
      if (record) {
        saved_p.push_back(p);
        saved_pq.push_back(probs ? pq : std::vector<double>{});
        saved_mask.push_back(probs ? mask : std::vector<std::uint8_t>{});
      }
    }
    r0 += len;
  }

  std::vector<std::size_t> segs(segments.begin(), segments.end());
  return make_op(
      "attention", {n, d}, std::move(out), {q, k, v},
      [q, k, v, segs = std::move(segs), heads, dh, d, scale, saved_p = std::move(saved_p),
       saved_pq = std::move(saved_pq), saved_mask = std::move(saved_mask)](std::span<const double> g,
                                                                           GradSink& sink) {
        auto gq = sink[0];
        auto gk = sink[1];
        auto gv = sink[2];
        const auto qv = q.values(), kv = k.values(), vv = v.values();
        std::vector<double> dp, ds;
        std::size_t r0 = 0, idx = 0;
        for (std::size_t len : segs) {
          dp.assign(len * len, 0.0);
          ds.assign(len * len, 0.0);
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const std::size_t c0 = h * dh;
            const auto& p = saved_p[idx];
            const bool quantized = !saved_pq[idx].empty();
            const auto& w = quantized ? saved_pq[idx] : p;
            // dW = dO · Vᵀ, dV = Wᵀ · dO
            for (std::size_t i = 0; i < len; ++i)
              for (std::size_t j = 0; j < len; ++j) {
                const double* gi = &g[(r0 + i) * d + c0];
                const double* vj = &vv[(r0 + j) * d + c0];
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                dp[i * len + j] = quantized && !saved_mask[idx][i * len + j] ? 0.0 : acc;
              }
            if (!gv.empty())
              for (std::size_t j = 0; j < len; ++j)
                for (std::size_t i = 0; i < len; ++i) {
                  const double wij = w[i * len + j];
                  const double* gi = &g[(r0 + i) * d + c0];
                  double* gvj = &gv[(r0 + j) * d + c0];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += wij * gi[c];
                }
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) dot += dp[i * len + j] * p[i * len + j];
              for (std::size_t j = 0; j < len; ++j) ds[i * len + j] = p[i * len + j] * (dp[i * len + j] - dot) * scale;
            }
            if (!gq.empty())
              for (std::size_t i = 0; i < len; ++i) {
                double* gqi = &gq[(r0 + i) * d + c0];
                for (std::size_t j = 0; j < len; ++j) {
                  const double sij = ds[i * len + j];
                  const double* kj = &kv[(r0 + j) * d + c0];
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += sij * kj[c];
                }
              }
            if (!gk.empty())
              for (std::size_t i = 0; i < len; ++i) {
                const double* qi = &qv[(r0 + i) * d + c0];
                for (std::size_t j = 0; j < len; ++j) {
                  const double sij = ds[i * len + j];
                  double* gkj = &gk[(r0 + j) * d + c0];
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += sij * qi[c];
                }
              }
          }
          r0 += len;
        }
      });
}

Tensor patchify(const Tensor& images, std::size_t patch_size) {
  Shape shape = images.shape();
  if (shape.size() == 3) shape.insert(shape.begin(), 1);
  if (shape.size() != 4) throw DimensionError("patchify expects [B, H, W, C] images, got " + shape_str(images.shape()));
  const std::size_t b = shape[0], hgt = shape[1], wid = shape[2], ch = shape[3];
  if (patch_size == 0 || hgt % patch_size != 0 || wid % patch_size != 0)
    throw DimensionError("image " + shape_str(images.shape()) + " is not divisible into patches of " +
                         std::to_string(patch_size));
  const std::size_t ph = hgt / patch_size, pw = wid / patch_size, pd = patch_size * patch_size * ch;
  const auto x = images.values();
  std::vector<double> out(b * ph * pw * pd);
  std::size_t o = 0;
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px)
        for (std::size_t dy = 0; dy < patch_size; ++dy)
          for (std::size_t dx = 0; dx < patch_size; ++dx)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t y = py * patch_size + dy, xx = px * patch_size + dx;
              out[o++] = x[((n * hgt + y) * wid + xx) * ch + c];
            }
  return Tensor({b * ph * pw, pd}, std::move(out));
}

// ---- model ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg, EncoderWeights weights) : cfg_(std::move(cfg)), weights_(std::move(weights)) {
  cfg_.validate();
  for (const auto& [name, shape] : weight_layout(cfg_)) {
    if (!weights_.contains(name)) throw DimensionError("model weights lack '" + name + "'");
    if (weights_.get(name).shape() != shape)
      throw DimensionError("weight '" + name + "' has shape " + shape_str(weights_.get(name).shape()) +
                           ", config expects " + shape_str(shape));
    if (weights_.get(name).requires_grad()) throw StateError("encoder weight '" + name + "' must be frozen");
  }
}

Model Model::quantized(const QuantSiteMap& sites) const {
  EncoderWeights w = weights_;
  for (const auto& s : site_layout(cfg_)) {
    if (s.site_class != SiteClass::Weight) continue;
    const auto& p = sites.params(s.name);
    if (p.enabled()) w.replace(s.name, fake_quant(weights_.get(s.name), p).detach());
  }
  return Model(cfg_, std::move(w));
}

Tensor Model::linear(const std::string& prefix, const Tensor& x, SiteHook& hook) const {
  const Tensor h = hook.apply(prefix + ".in", x);
  return add_bias(matmul(h, w(prefix + ".w")), w(prefix + ".b"));
}

Tensor Model::block(const std::string& p, Tensor x, std::span<const std::size_t> segments, std::size_t heads,
                    SiteHook& hook) const {
  const std::size_t width = x.dim(1);
  const double eps = cfg_.ln_eps;
  Tensor h = layer_norm(x, w(p + ".ln1.g"), w(p + ".ln1.b"), eps);
  const Tensor qkv = linear(p + ".attn.qkv", h, hook);
  const Tensor q = hook.apply(p + ".attn.q", slice_cols(qkv, 0, width));
  const Tensor k = hook.apply(p + ".attn.k", slice_cols(qkv, width, width));
  const Tensor v = hook.apply(p + ".attn.v", slice_cols(qkv, 2 * width, width));
  const std::string probs_site = p + ".attn.probs";
  const Tensor a = attention(q, k, v, segments, heads, hook.probs_params(probs_site), hook.probs_observer(probs_site));
  x = add(x, linear(p + ".attn.out", a, hook));
  h = layer_norm(x, w(p + ".ln2.g"), w(p + ".ln2.b"), eps);
  h = gelu(linear(p + ".mlp.fc1", h, hook));
  return add(x, linear(p + ".mlp.fc2", h, hook));
}

Tensor Model::encode_images_raw(const Tensor& images, SiteHook& hook) const {
  const Shape& s = images.shape();
  const bool single = s.size() == 3;
  const Shape expect{cfg_.image_size, cfg_.image_size, cfg_.channels};
  if (!(single ? s == expect : (s.size() == 4 && s[0] > 0 && Shape(s.begin() + 1, s.end()) == expect)))
    throw DimensionError("image batch " + shape_str(s) + " does not match the configured " + shape_str(expect));
  const std::size_t batch = single ? 1 : s[0];
  const std::size_t tokens = cfg_.num_patches();

  Tensor x = linear("image.patch_embed", patchify(images, cfg_.patch_size), hook);
  const auto pos = w("image.pos_embed").values();
  std::vector<double> tiled(batch * pos.size());
  for (std::size_t b = 0; b < batch; ++b) std::copy(pos.begin(), pos.end(), tiled.begin() + static_cast<std::ptrdiff_t>(b * pos.size()));
  x = add(x, Tensor({batch * tokens, cfg_.image_width}, std::move(tiled)));

  const std::vector<std::size_t> segments(batch, tokens);
  for (std::size_t l = 0; l < cfg_.image_layers; ++l)
    x = block("image.blocks." + std::to_string(l), x, segments, cfg_.image_heads, hook);
  x = segment_mean_rows(x, segments);
  x = layer_norm(x, w("image.ln_post.g"), w("image.ln_post.b"), cfg_.ln_eps);
  return linear("image.proj", x, hook);
}

Tensor Model::encode_images(const Tensor& images, SiteHook& hook) const {
  return hook.apply("image.feature", encode_images_raw(images, hook));
}

Tensor Model::encode_text_raw(const std::vector<Tensor>& sequences, SiteHook& hook) const {
  if (sequences.empty()) throw DimensionError("encode_text: no sequences");
  std::vector<std::size_t> lengths, last;
  std::size_t total = 0;
  for (const auto& seq : sequences) {
    if (seq.rank() != 2 || seq.dim(1) != cfg_.text_width)
      throw DimensionError("text sequence " + shape_str(seq.shape()) + " does not have width " +
                           std::to_string(cfg_.text_width));
    if (seq.dim(0) > cfg_.context_length)
      throw DimensionError("text sequence of " + std::to_string(seq.dim(0)) + " tokens exceeds the context length " +
                           std::to_string(cfg_.context_length));
    lengths.push_back(seq.dim(0));
    total += seq.dim(0);
    last.push_back(total - 1);
  }
  Tensor x = sequences.size() == 1 ? sequences.front() : concat_rows(sequences);

  const auto pos = w("text.pos_embed").values();
  const std::size_t tw = cfg_.text_width;
  std::vector<double> tiled;
  tiled.reserve(total * tw);
  for (std::size_t len : lengths) tiled.insert(tiled.end(), pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(len * tw));
  x = add(x, Tensor({total, tw}, std::move(tiled)));
  x = hook.apply("text.input", x);

  for (std::size_t l = 0; l < cfg_.text_layers; ++l)
    x = block("text.blocks." + std::to_string(l), x, lengths, cfg_.text_heads, hook);
  x = gather_rows(x, last);
  x = layer_norm(x, w("text.ln_final.g"), w("text.ln_final.b"), cfg_.ln_eps);
  return linear("text.proj", x, hook);
}

Tensor Model::encode_text(const std::vector<Tensor>& sequences, SiteHook& hook) const {
  return hook.apply("text.feature", encode_text_raw(sequences, hook));
}

Tensor Model::token_embeddings(const std::vector<std::size_t>& ids) const {
  const Tensor& table = w("text.token_embed");
  const std::size_t tw = cfg_.text_width;
  std::vector<double> out;
  out.reserve(ids.size() * tw);
  for (std::size_t id : ids) {
    if (id >= cfg_.vocab_size) throw DimensionError("token id " + std::to_string(id) + " outside the vocabulary");
    const auto row = table.values().subspan(id * tw, tw);
    out.insert(out.end(), row.begin(), row.end());
  }
  return Tensor({ids.size(), tw}, std::move(out));
}

Tensor encode_image_fp(const Model& model, const Tensor& image) {
  FpHook hook;
  const Tensor f = model.encode_images(image, hook);
  return Tensor({f.size()}, {f.values().begin(), f.values().end()});
}

Tensor encode_text_fp(const Model& model, const Tensor& sequence) {
  FpHook hook;
  const Tensor f = model.encode_text({sequence}, hook);
  return Tensor({f.size()}, {f.values().begin(), f.values().end()});
}

namespace {

QuantizedFeatures quantize_features(const Tensor& raw, const QuantParams& p) {
  if (!p.enabled()) return {IntTensor{raw.shape(), {}}, p, raw.detach()};
  IntTensor codes = quantize(raw, p);
  Tensor real = dequantize(codes, p);
  return {std::move(codes), p, std::move(real)};
}

}  // namespace

QuantizedFeatures encode_image_q(const Model& qmodel, const QuantSiteMap& sites, const Tensor& images) {
  QuantHook hook(sites);
  return quantize_features(qmodel.encode_images_raw(images, hook), sites.params("image.feature"));
}

QuantizedFeatures encode_text_q(const Model& qmodel, const QuantSiteMap& sites, const std::vector<Tensor>& sequences) {
  QuantHook hook(sites);
  return quantize_features(qmodel.encode_text_raw(sequences, hook), sites.params("text.feature"));
}

}  // namespace p4q
