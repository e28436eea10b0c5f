// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "p4q/container.hpp"
#include "p4q/encoders.hpp"
#include "p4q/error.hpp"
#include "test_util.hpp"

namespace p4q {
namespace {

namespace fs = std::filesystem;

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_width = 8;
  c.text_width = 8;
  c.embed_dim = 6;
  c.image_layers = 2;
  c.text_layers = 2;
  c.image_heads = 2;
  c.text_heads = 2;
  c.patch_size = 4;
  c.image_size = 8;
  c.channels = 3;
  c.vocab_size = 64;
  c.context_length = 6;
  c.mlp_ratio = 2;
  return c;
}

// Random weights with a larger spread than the default initializer so every
// nonlinearity sees non-trivial inputs.
EncoderWeights rich_weights(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  EncoderWeights w;
  for (const auto& [name, shape] : weight_layout(cfg)) w.add(name, test::random_tensor(rng, shape, 0.4));
  return w;
}

// ---- straight-line reference ------------------------------------------------------

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
  return m;
}

struct Ref {
  const EncoderWeights& w;
  double eps;

  std::vector<double> vec(const std::string& name) const {
    const auto v = w.get(name).values();
    return {v.begin(), v.end()};
  }

  Mat linear(const Mat& x, const std::string& p) const {
    const Mat W = to_mat(w.get(p + ".w"));
    const auto b = vec(p + ".b");
    Mat y(x.size(), std::vector<double>(b.size()));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < W.size(); ++k) acc += x[i][k] * W[k][j];
        y[i][j] = acc + b[j];
      }
    return y;
  }

  Mat norm(const Mat& x, const std::string& p) const {
    const auto g = vec(p + ".g"), b = vec(p + ".b");
    Mat y = x;
    for (auto& row : y) {
      double mu = 0.0, var = 0.0;
      for (double v : row) mu += v;
      mu /= static_cast<double>(row.size());
      for (double v : row) var += (v - mu) * (v - mu);
      var /= static_cast<double>(row.size());
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
    }
    return y;
  }

  Mat attend(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) const {
    const std::size_t n = q.size(), d = q[0].size(), dh = d / heads;
    Mat out(n, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += q[i][h * dh + c] * k[j][h * dh + c];
          s[j] = acc / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < dh; ++c) out[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
      }
    return out;
  }

  Mat block(Mat x, const std::string& p, std::size_t heads) const {
    const std::size_t d = x[0].size();
    const Mat qkv = linear(norm(x, p + ".ln1"), p + ".attn.qkv");
    Mat q(x.size()), k(x.size()), v(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      q[i].assign(qkv[i].begin(), qkv[i].begin() + d);
      k[i].assign(qkv[i].begin() + d, qkv[i].begin() + 2 * d);
      v[i].assign(qkv[i].begin() + 2 * d, qkv[i].end());
    }
    const Mat a = linear(attend(q, k, v, heads), p + ".attn.out");
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += a[i][j];
    Mat h = linear(norm(x, p + ".ln2"), p + ".mlp.fc1");
    for (auto& row : h)
      for (double& e : row) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
    const Mat m = linear(h, p + ".mlp.fc2");
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += m[i][j];
    return x;
  }

  std::vector<double> image(const ModelConfig& cfg, const Tensor& img) const {
    const std::size_t p = cfg.patch_size, side = cfg.image_size / p;
    Mat patches;
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        std::vector<double> row;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            for (std::size_t c = 0; c < cfg.channels; ++c)
              row.push_back(img.value(((py * p + dy) * cfg.image_size + px * p + dx) * cfg.channels + c));
        patches.push_back(row);
      }
    Mat x = linear(patches, "image.patch_embed");
    const Mat pos = to_mat(w.get("image.pos_embed"));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += pos[i][j];
    for (std::size_t l = 0; l < cfg.image_layers; ++l) x = block(x, "image.blocks." + std::to_string(l), cfg.image_heads);
    Mat pooled(1, std::vector<double>(x[0].size(), 0.0));
    for (const auto& row : x)
      for (std::size_t j = 0; j < row.size(); ++j) pooled[0][j] += row[j] / static_cast<double>(x.size());
    return linear(norm(pooled, "image.ln_post"), "image.proj")[0];
  }

  std::vector<double> text(const ModelConfig& cfg, const Tensor& seq) const {
    Mat x = to_mat(seq);
    const Mat pos = to_mat(w.get("text.pos_embed"));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += pos[i][j];
    for (std::size_t l = 0; l < cfg.text_layers; ++l) x = block(x, "text.blocks." + std::to_string(l), cfg.text_heads);
    return linear(norm(Mat{x.back()}, "text.ln_final"), "text.proj")[0];
  }
};

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

TEST(Encoders, ImageTowerMatchesStraightLineReference) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 1));
  Rng rng(2);
  const Tensor img = test::random_uniform(rng, {8, 8, 3}, 0.0, 1.0);
  const Ref ref{model.weights(), cfg.ln_eps};
  const Tensor f = encode_image_fp(model, img);
  ASSERT_EQ(f.size(), cfg.embed_dim);
  EXPECT_LE(max_abs_diff(f.values(), ref.image(cfg, img)), 1e-10);
}

TEST(Encoders, TextTowerMatchesStraightLineReference) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 3));
  Rng rng(4);
  const Tensor seq = test::random_tensor(rng, {5, 8});
  const Ref ref{model.weights(), cfg.ln_eps};
  EXPECT_LE(max_abs_diff(encode_text_fp(model, seq).values(), ref.text(cfg, seq)), 1e-10);
}

TEST(Encoders, BatchedImagesMatchOneAtATime) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 5));
  Rng rng(6);
  const Tensor batch = test::random_uniform(rng, {3, 8, 8, 3}, 0.0, 1.0);
  FpHook hook;
  const Tensor all = model.encode_images(batch, hook);
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor one(Shape{8, 8, 3}, std::vector<double>(batch.values().begin() + static_cast<std::ptrdiff_t>(b * 192),
                                                         batch.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * 192)));
    const Tensor f = encode_image_fp(model, one);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) EXPECT_NEAR(all.at(b, j), f.value(j), 1e-12);
  }
}

TEST(Encoders, ZeroWeightsGiveTheProjectionBias) {
  const ModelConfig cfg = tiny_config();
  EncoderWeights w;
  for (const auto& [name, shape] : weight_layout(cfg)) w.add(name, Tensor(shape, 0.0));
  w.replace("image.proj.b", Tensor::vector({1, 2, 3, 4, 5, 6}));
  w.replace("text.proj.b", Tensor::vector({-1, 0, 1, 0, -1, 0}));
  const Model model(cfg, std::move(w));
  const Tensor f = encode_image_fp(model, Tensor({8, 8, 3}, 0.0));
  EXPECT_EQ(std::vector<double>(f.values().begin(), f.values().end()), (std::vector<double>{1, 2, 3, 4, 5, 6}));
  const Tensor t = encode_text_fp(model, Tensor({3, 8}, 0.25));
  EXPECT_EQ(std::vector<double>(t.values().begin(), t.values().end()), (std::vector<double>{-1, 0, 1, 0, -1, 0}));
}

TEST(Encoders, DisabledPlanMatchesFullPrecision) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 7));
  const QuantSiteMap sites = QuantSiteMap::identity(cfg);
  const Model q = model.quantized(sites);
  Rng rng(8);
  const Tensor imgs = test::random_uniform(rng, {2, 8, 8, 3}, 0.0, 1.0);
  const std::vector<Tensor> seqs = {test::random_tensor(rng, {4, 8}), test::random_tensor(rng, {2, 8})};
  FpHook fp;
  const Tensor fi = model.encode_images(imgs, fp), ft = model.encode_text(seqs, fp);
  const auto qi = encode_image_q(q, sites, imgs), qt = encode_text_q(q, sites, seqs);
  EXPECT_LE(max_abs_diff(qi.dequantized.values(), {fi.values().begin(), fi.values().end()}), 1e-12);
  EXPECT_LE(max_abs_diff(qt.dequantized.values(), {ft.values().begin(), ft.values().end()}), 1e-12);
}

TEST(Encoders, EightBitFeaturesStayWithinHalfAStepPlusAccumulatedError) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 9));
  Rng rng(10);
  const Tensor imgs = test::random_uniform(rng, {16, 8, 8, 3}, 0.0, 1.0);
  CalibrationStats stats(cfg);
  stats.observe_weights(model.weights());
  ObserveHook obs(stats);
  model.encode_images(imgs, obs);
  model.encode_text({test::random_tensor(rng, {3, 8})}, obs);
  stats.close_batch();
  const QuantSiteMap sites = stats.finalize(CalibMethod::MinMax, BitPlan::uniform(8));
  const Model q = model.quantized(sites);
  const auto qf = encode_image_q(q, sites, imgs);
  FpHook fp;
  const Tensor z = model.encode_images(imgs, fp);
  const double s = sites.params("image.feature").scale[0];
  double worst = 0.0, range = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    worst = std::max(worst, std::abs(qf.dequantized.value(i) - z.value(i)));
    range = std::max(range, std::abs(z.value(i)));
  }
  // Accumulated error of the fake-quantized inner layers, measured on this
  // configuration and pinned at a tenth of the feature range.
  EXPECT_LE(worst, s / 2.0 + 0.1 * range);
  const auto again = encode_image_q(q, sites, imgs);
  EXPECT_EQ(again.codes, qf.codes);
}

TEST(Encoders, AttentionRowsSumToOne) {
  Rng rng(11);
  const Tensor q = test::random_tensor(rng, {7, 4}, 3.0), k = test::random_tensor(rng, {7, 4}, 3.0);
  const std::size_t segments[] = {3, 4};
  Calibrator probs;
  // With v = 1 every output entry is the sum of one probability row.
  const Tensor ones({7, 4}, 1.0);
  const Tensor out = attention(q, k, ones, segments, 2);
  for (double v : out.values()) EXPECT_NEAR(v, 1.0, 1e-10);
  attention(q, k, ones, segments, 2, nullptr, &probs);
  probs.close_batch();
  EXPECT_EQ(probs.count(), 2u * (9u + 16u));
}

TEST(Encoders, ClassPermutationPermutesTextFeatures) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 12));
  Rng rng(13);
  const std::vector<Tensor> seqs = {test::random_tensor(rng, {3, 8}), test::random_tensor(rng, {5, 8}),
                                    test::random_tensor(rng, {1, 8})};
  const std::vector<Tensor> perm = {seqs[2], seqs[0], seqs[1]};
  FpHook fp;
  const Tensor a = model.encode_text(seqs, fp), b = model.encode_text(perm, fp);
  const std::size_t map[] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) EXPECT_NEAR(b.at(r, j), a.at(map[r], j), 1e-12);
}

TEST(Encoders, DimensionErrors) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 14));
  FpHook fp;
  EXPECT_THROW(model.encode_images(Tensor({8, 4, 3}), fp), DimensionError);
  EXPECT_THROW(model.encode_text({Tensor({7, 8})}, fp), DimensionError);
  EXPECT_THROW(model.encode_text({Tensor({2, 5})}, fp), DimensionError);
}

TEST(Encoders, MissingSiteParamsAreAStateError) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 15));
  QuantSiteMap empty;
  EXPECT_THROW(model.quantized(empty), StateError);
}

TEST(Encoders, PromptGradientIsNonzeroThroughTheTextTower) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 16));
  Rng rng(17);
  Tensor seq = test::random_tensor(rng, {4, 8});
  seq.set_requires_grad(true);
  auto f = [&] {
    FpHook fp;
    return sum(model.encode_text({seq}, fp));
  };
  const auto g = test::tape_gradient(seq, f);
  const auto n = test::numeric_gradient(seq, f);
  EXPECT_LE(test::max_relative_error(g, n), 1e-5);
  double norm = 0.0;
  for (double v : g) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Encoders, WeightsStayFrozenThroughAForwardAndBackwardPass) {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, rich_weights(cfg, 18));
  const auto before = model.weights().checksum();
  Tensor seq = Tensor({2, 8}, 0.3);
  seq.set_requires_grad(true);
  test::tape_gradient(seq, [&] {
    FpHook fp;
    return sum(model.encode_text({seq}, fp));
  });
  EXPECT_EQ(model.weights().checksum(), before);
  for (const auto& [name, t] : model.weights().entries()) EXPECT_FALSE(t.has_grad()) << name;
}

TEST(Encoders, SiteLayoutIsCompleteAndUnique) {
  const ModelConfig cfg = tiny_config();
  const auto sites = site_layout(cfg);
  std::set<std::string> names;
  std::size_t weights = 0, attn = 0;
  for (const auto& s : sites) {
    EXPECT_TRUE(names.insert(s.name).second) << s.name;
    weights += s.site_class == SiteClass::Weight;
    attn += s.site_class == SiteClass::Attention;
  }
  // Four linears per block plus patch embedding and both projections.
  EXPECT_EQ(weights, 4 * (cfg.image_layers + cfg.text_layers) + 3);
  EXPECT_EQ(attn, 4 * (cfg.image_layers + cfg.text_layers));
  const auto params = CalibrationStats(cfg).finalize(CalibMethod::MinMax, BitPlan::uniform(32));
  EXPECT_EQ(params.size(), sites.size());
}

// ---- checkpoints ----------------------------------------------------------------------

class CheckpointTest : public testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("p4q_enc_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(CheckpointTest, SaveThenLoadIsBitIdentical) {
  const ModelConfig cfg = tiny_config();
  const EncoderWeights w = rich_weights(cfg, 19);
  save_checkpoint(w, cfg, dir_ / "m.p4q");
  EXPECT_EQ(load_checkpoint_config(dir_ / "m.p4q"), cfg);
  const EncoderWeights back = load_checkpoint(dir_ / "m.p4q", cfg);
  EXPECT_EQ(back.checksum(), w.checksum());
}

TEST_F(CheckpointTest, CorruptedMagicIsAFormatError) {
  const ModelConfig cfg = tiny_config();
  save_checkpoint(rich_weights(cfg, 20), cfg, dir_ / "m.p4q");
  auto bytes = read_file_bytes(dir_ / "m.p4q");
  bytes[0] = 'X';
  write_file_bytes(dir_ / "m.p4q", bytes);
  EXPECT_THROW(load_checkpoint(dir_ / "m.p4q", cfg), FormatError);
}

TEST_F(CheckpointTest, TruncationIsAFormatError) {
  const ModelConfig cfg = tiny_config();
  save_checkpoint(rich_weights(cfg, 21), cfg, dir_ / "m.p4q");
  auto bytes = read_file_bytes(dir_ / "m.p4q");
  bytes.resize(bytes.size() / 2);
  write_file_bytes(dir_ / "m.p4q", bytes);
  EXPECT_THROW(load_checkpoint(dir_ / "m.p4q", cfg), FormatError);
}

TEST_F(CheckpointTest, MismatchedConfigNamesTheFirstOffendingTensor) {
  const ModelConfig cfg = tiny_config();
  save_checkpoint(rich_weights(cfg, 22), cfg, dir_ / "m.p4q");
  ModelConfig other = cfg;
  other.mlp_ratio = 4;
  try {
    load_checkpoint(dir_ / "m.p4q", other);
    FAIL() << "expected a DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("image.blocks.0.mlp.fc1.w"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace p4q
