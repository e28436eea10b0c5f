// SPDX-License-Identifier: Apache-2.0
#include "p4q/quant.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "p4q/error.hpp"
#include "p4q/kernels.hpp"

namespace p4q {

namespace {

bool supported_bits(int bits) { return bits == 2 || bits == 3 || bits == 4 || bits == 8 || bits == kDisabledBits; }

std::int64_t unsigned_max(int bits) { return (std::int64_t{1} << bits) - 1; }

kernels::QuantGrid make_grid(const QuantParams& p, const Shape& shape) {
  kernels::QuantGrid g;
  g.scale = p.scale.data();
  g.zero_point = p.zero_point.data();
  g.lo = p.qmin();
  g.hi = p.qmax();
  if (p.is_per_channel()) {
    const std::size_t axis = *p.channel_axis;
    if (axis >= shape.size() || shape[axis] != p.channels())
      throw DimensionError("per-channel params with " + std::to_string(p.channels()) + " channels on axis " +
                           std::to_string(axis) + " do not fit shape " + shape_str(shape));
    g.channels = shape[axis];
    g.inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) g.inner *= shape[i];
  } else if (p.channels() != 1) {
    throw StateError("per-tensor params must hold exactly one scale");
  }
  return g;
}

void require_finalized(const QuantParams& p) {
  if (p.scale.empty() || p.zero_point.empty()) throw StateError("quantization params are not finalized");
  p.validate();
}

}  // namespace

std::string to_string(Signedness s) { return s == Signedness::Signed ? "signed" : "unsigned"; }

Signedness parse_signedness(const std::string& s) {
  if (s == "signed") return Signedness::Signed;
  if (s == "unsigned") return Signedness::Unsigned;
  throw FormatError("unknown signedness '" + s + "'");
}

std::string to_string(CalibMethod m) {
  switch (m) {
    case CalibMethod::MinMax: return "minmax";
    case CalibMethod::Ema: return "ema";
    case CalibMethod::Percentile: return "percentile";
    case CalibMethod::Omse: return "omse";
  }
  return "?";
}

CalibMethod parse_calib_method(const std::string& s) {
  if (s == "minmax") return CalibMethod::MinMax;
  if (s == "ema") return CalibMethod::Ema;
  if (s == "percentile") return CalibMethod::Percentile;
  if (s == "omse") return CalibMethod::Omse;
  throw ParameterError("unknown calibration method '" + s + "'");
}

// ---- QuantParams -------------------------------------------------------------

QuantParams QuantParams::identity() { return QuantParams{}; }

QuantParams QuantParams::per_tensor(int bits, Signedness signedness, double scale, std::int64_t zero_point) {
  QuantParams p;
  p.bits = bits;
  p.signedness = signedness;
  p.scale = {scale};
  p.zero_point = {zero_point};
  p.validate();
  return p;
}

QuantParams QuantParams::per_channel(int bits, Signedness signedness, std::size_t axis, std::vector<double> scales,
                                     std::vector<std::int64_t> zero_points) {
  QuantParams p;
  p.bits = bits;
  p.signedness = signedness;
  p.channel_axis = axis;
  p.scale = std::move(scales);
  p.zero_point = std::move(zero_points);
  p.validate();
  return p;
}

std::int64_t QuantParams::qmin() const {
  return signedness == Signedness::Signed ? -(std::int64_t{1} << (bits - 1)) : 0;
}

std::int64_t QuantParams::qmax() const {
  return signedness == Signedness::Signed ? (std::int64_t{1} << (bits - 1)) - 1 : unsigned_max(bits);
}

void QuantParams::validate() const {
  if (!supported_bits(bits)) throw StateError("unsupported bit-width " + std::to_string(bits));
  if (!enabled()) return;
  if (scale.empty() || scale.size() != zero_point.size())
    throw StateError("scale and zero-point vectors must be non-empty and of equal length");
  if (!is_per_channel() && scale.size() != 1) throw StateError("per-tensor params must hold one scale");
  for (std::size_t c = 0; c < scale.size(); ++c) {
    if (!(scale[c] >= kScaleFloor) || !std::isfinite(scale[c]))
      throw StateError("scale " + std::to_string(scale[c]) + " below the floor");
    if (signedness == Signedness::Signed && zero_point[c] != 0) throw StateError("signed params need zero-point 0");
    if (signedness == Signedness::Unsigned && (zero_point[c] < 0 || zero_point[c] > unsigned_max(bits)))
      throw StateError("zero-point " + std::to_string(zero_point[c]) + " outside the unsigned range");
  }
}

// ---- quantize / dequantize -----------------------------------------------------

double round_half_away(double x) { return std::round(x); }

IntTensor quantize(const Tensor& x, const QuantParams& p) {
  require_finalized(p);
  if (!p.enabled()) throw StateError("cannot produce integer codes for a disabled (32-bit) site");
  const auto grid = make_grid(p, x.shape());
  IntTensor out{x.shape(), std::vector<std::int32_t>(x.size())};
  kernels::parallel::quantize(x.values().data(), out.data.data(), x.size(), grid);
  return out;
}

Tensor dequantize(const IntTensor& q, const QuantParams& p) {
  require_finalized(p);
  if (!p.enabled()) throw StateError("cannot dequantize against a disabled (32-bit) site");
  const auto grid = make_grid(p, q.shape);
  std::vector<double> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const std::size_t ch = grid.channel_of(i);
    if (q.data[i] < grid.lo || q.data[i] > grid.hi)
      throw CorruptionError("integer code " + std::to_string(q.data[i]) + " outside [" + std::to_string(grid.lo) +
                            ", " + std::to_string(grid.hi) + "]");
    out[i] = static_cast<double>(q.data[i] - p.zero_point[ch]) * p.scale[ch];
  }
  return Tensor(q.shape, std::move(out));
}

Tensor fake_quant(const Tensor& x, const QuantParams& p) {
  require_finalized(p);
  if (!p.enabled()) return x;
  const auto grid = make_grid(p, x.shape());
  std::vector<double> out(x.size());
  std::vector<std::uint8_t> mask(x.size());
  kernels::parallel::fake_quant(x.values().data(), out.data(), mask.data(), x.size(), grid);
  return make_op("fake_quant", x.shape(), std::move(out), {x},
                 [mask = std::move(mask)](std::span<const double> g, GradSink& sink) {
                   auto gx = sink[0];
                   for (std::size_t i = 0; i < g.size(); ++i)
                     if (mask[i]) gx[i] += g[i];
                 });
}

// ---- scale rules ----------------------------------------------------------------

std::pair<double, std::int64_t> minmax_scale(double lo, double hi, int bits, Signedness signedness,
                                             bool& degenerate) {
  degenerate = !(hi > lo);
  if (degenerate) return {kScaleFloor, 0};
  if (signedness == Signedness::Signed) {
    const double amax = std::max(std::abs(lo), std::abs(hi));
    const double s = amax / static_cast<double>((std::int64_t{1} << (bits - 1)) - 1);
    return {std::max(s, kScaleFloor), 0};
  }
  // The grid always spans zero so that the clamped zero-point still covers [lo, hi].
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const double s = std::max((hi - lo) / static_cast<double>(unsigned_max(bits)), kScaleFloor);
  const double zp = std::clamp(round_half_away(-lo / s), 0.0, static_cast<double>(unsigned_max(bits)));
  return {s, static_cast<std::int64_t>(zp)};
}

std::pair<double, std::int64_t> omse_scale(double variance, int bits, Signedness signedness, bool& degenerate) {
  degenerate = !(variance > 0.0);
  if (degenerate) return {kScaleFloor, 0};
  const double delta = std::sqrt(variance);
  const double s = std::max(2.0 * delta / static_cast<double>(unsigned_max(bits)), kScaleFloor);
  if (signedness == Signedness::Signed) return {s, 0};
  const double zp = std::floor(round_half_away(variance) / 2.0);
  return {s, static_cast<std::int64_t>(std::clamp(zp, 0.0, static_cast<double>(unsigned_max(bits))))};
}

// ---- histogram ------------------------------------------------------------------

double Calibrator::Histogram::width() const { return std::ldexp(1.0, width_exp); }

void Calibrator::Histogram::coarsen_to(int exp) {
  if (bins.empty()) {
    width_exp = std::max(width_exp, exp);
    return;
  }
  while (width_exp < exp) {
    // Bin i on the fine grid maps to floor(i/2) on the grid of twice the width.
    const std::int64_t new_first = first >= 0 ? first / 2 : -((-first + 1) / 2);
    const std::int64_t last = first + static_cast<std::int64_t>(bins.size()) - 1;
    const std::int64_t new_last = last >= 0 ? last / 2 : -((-last + 1) / 2);
    std::vector<std::uint64_t> merged(static_cast<std::size_t>(new_last - new_first + 1), 0);
    for (std::size_t i = 0; i < bins.size(); ++i) {
      const std::int64_t g = first + static_cast<std::int64_t>(i);
      const std::int64_t h = g >= 0 ? g / 2 : -((-g + 1) / 2);
      merged[static_cast<std::size_t>(h - new_first)] += bins[i];
    }
    bins = std::move(merged);
    first = new_first;
    ++width_exp;
  }
}

void Calibrator::Histogram::add_range(double lo, double hi) {
  // Smallest power-of-two width whose grid covers [lo, hi] in kHistogramBins bins,
  // but no finer than the resolution of a double at the range's magnitude. Both
  // bounds only grow with the range, so the final width depends on the global
  // range alone.
  auto span_bins = [&](int e) {
    const double w = std::ldexp(1.0, e);
    return std::floor(hi / w) - std::floor(lo / w) + 1.0;
  };
  const double mag = std::max({std::abs(lo), std::abs(hi), std::numeric_limits<double>::min()});
  int e = std::ilogb(mag) - 52;
  if (!bins.empty()) e = std::max(e, width_exp);
  while (span_bins(e) > static_cast<double>(kHistogramBins)) ++e;
  if (bins.empty()) {
    width_exp = e;
    const double w = width();
    first = static_cast<std::int64_t>(std::floor(lo / w));
    bins.assign(static_cast<std::size_t>(static_cast<std::int64_t>(std::floor(hi / w)) - first + 1), 0);
    return;
  }
  coarsen_to(e);
  const double w = width();
  const std::int64_t lo_idx = std::min(first, static_cast<std::int64_t>(std::floor(lo / w)));
  const std::int64_t hi_idx =
      std::max(first + static_cast<std::int64_t>(bins.size()) - 1, static_cast<std::int64_t>(std::floor(hi / w)));
  if (lo_idx < first) bins.insert(bins.begin(), static_cast<std::size_t>(first - lo_idx), 0);
  first = lo_idx;
  bins.resize(static_cast<std::size_t>(hi_idx - first + 1), 0);
}

void Calibrator::Histogram::insert(double x) {
  const auto idx = static_cast<std::int64_t>(std::floor(x / width()));
  bins[static_cast<std::size_t>(idx - first)] += 1;
}

void Calibrator::Histogram::merge(const Histogram& other) {
  if (other.bins.empty()) return;
  Histogram o = other;
  const int e = std::max(width_exp, o.width_exp);
  if (bins.empty()) {
    *this = std::move(o);
    return;
  }
  coarsen_to(e);
  o.coarsen_to(e);
  const std::int64_t lo = std::min(first, o.first);
  const std::int64_t hi =
      std::max(first + static_cast<std::int64_t>(bins.size()), o.first + static_cast<std::int64_t>(o.bins.size()));
  std::vector<std::uint64_t> out(static_cast<std::size_t>(hi - lo), 0);
  for (std::size_t i = 0; i < bins.size(); ++i) out[static_cast<std::size_t>(first - lo) + i] += bins[i];
  for (std::size_t i = 0; i < o.bins.size(); ++i) out[static_cast<std::size_t>(o.first - lo) + i] += o.bins[i];
  bins = std::move(out);
  first = lo;
  // Combined range may need a coarser grid.
  while (bins.size() > kHistogramBins) coarsen_to(width_exp + 1);
}

// ---- Calibrator -------------------------------------------------------------------

void Calibrator::ensure_layout(const Shape& shape) {
  if (channel_axis_) {
    if (*channel_axis_ >= shape.size())
      throw DimensionError("channel axis " + std::to_string(*channel_axis_) + " missing from shape " + shape_str(shape));
    if (stats_.empty()) {
      stats_.resize(shape[*channel_axis_]);
    } else if (stats_.size() != shape[*channel_axis_]) {
      throw DimensionError("channel extent changed between batches");
    }
  } else if (stats_.empty()) {
    stats_.resize(1);
  }
  layout_ = shape;
}

void Calibrator::accumulate(std::span<const double> values, const Shape& shape) {
  if (shape_size(shape) != values.size()) throw DimensionError("observe: values do not match shape");
  for (double v : values)
    if (!std::isfinite(v)) throw DataError("calibration batch contains NaN or Inf");
  ensure_layout(shape);

  std::size_t inner = 1;
  if (channel_axis_)
    for (std::size_t i = *channel_axis_ + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t channels = stats_.size();

  // Per-channel batch moments, then Chan's parallel update into the running moments.
  std::vector<std::size_t> n(channels, 0);
  std::vector<double> lo(channels, std::numeric_limits<double>::infinity());
  std::vector<double> hi(channels, -std::numeric_limits<double>::infinity());
  std::vector<double> sum(channels, 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = channels == 1 ? 0 : (i / inner) % channels;
    ++n[c];
    lo[c] = std::min(lo[c], values[i]);
    hi[c] = std::max(hi[c], values[i]);
    sum[c] += values[i];
  }
  std::vector<double> bmean(channels), bm2(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) bmean[c] = n[c] ? sum[c] / static_cast<double>(n[c]) : 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = channels == 1 ? 0 : (i / inner) % channels;
    const double d = values[i] - bmean[c];
    bm2[c] += d * d;
  }

  for (std::size_t c = 0; c < channels; ++c) {
    if (n[c] == 0) continue;
    auto& s = stats_[c];
    if (s.count == 0) {
      s.min = lo[c];
      s.max = hi[c];
      s.mean = bmean[c];
      s.m2 = bm2[c];
    } else {
      s.min = std::min(s.min, lo[c]);
      s.max = std::max(s.max, hi[c]);
      const double na = static_cast<double>(s.count), nb = static_cast<double>(n[c]);
      const double delta = bmean[c] - s.mean;
      s.mean += delta * nb / (na + nb);
      s.m2 += bm2[c] + delta * delta * na * nb / (na + nb);
    }
    s.count += n[c];
    if (!s.batch_open) {
      s.batch_open = true;
      s.batch_min = lo[c];
      s.batch_max = hi[c];
    } else {
      s.batch_min = std::min(s.batch_min, lo[c]);
      s.batch_max = std::max(s.batch_max, hi[c]);
    }
    s.hist.add_range(s.min, s.max);
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = channels == 1 ? 0 : (i / inner) % channels;
    stats_[c].hist.insert(values[i]);
  }
}

void Calibrator::close_batch() {
  bool any = false;
  for (auto& s : stats_) {
    if (!s.batch_open) continue;
    s.batch_extrema.emplace_back(s.batch_min, s.batch_max);
    s.batch_open = false;
    any = true;
  }
  if (any) ++batches_;
}

void Calibrator::observe(std::span<const double> values, const Shape& shape) {
  accumulate(values, shape);
  close_batch();
}

void Calibrator::merge(const Calibrator& other) {
  if (other.stats_.empty()) return;
  if (channel_axis_ != other.channel_axis_) throw StateError("merging calibrators of different granularity");
  if (stats_.empty()) {
    stats_.resize(other.stats_.size());
    layout_ = other.layout_;
  }
  if (stats_.size() != other.stats_.size()) throw DimensionError("merging calibrators with different channel counts");
  for (std::size_t c = 0; c < stats_.size(); ++c) {
    auto& s = stats_[c];
    const auto& o = other.stats_[c];
    if (o.count == 0) continue;
    if (s.count == 0) {
      s = o;
      continue;
    }
    const double na = static_cast<double>(s.count), nb = static_cast<double>(o.count);
    const double delta = o.mean - s.mean;
    s.mean += delta * nb / (na + nb);
    s.m2 += o.m2 + delta * delta * na * nb / (na + nb);
    s.count += o.count;
    s.min = std::min(s.min, o.min);
    s.max = std::max(s.max, o.max);
    s.hist.merge(o.hist);
    s.batch_extrema.insert(s.batch_extrema.end(), o.batch_extrema.begin(), o.batch_extrema.end());
  }
  batches_ += other.batches_;
  ema_valid_ = false;
}

std::size_t Calibrator::count() const {
  std::size_t n = 0;
  for (const auto& s : stats_) n = std::max(n, s.count);
  return n;
}

void Calibrator::require_observed(std::size_t min_count, const char* method) const {
  if (stats_.empty()) throw StateError(std::string(method) + ": calibrator has observed nothing");
  for (const auto& s : stats_)
    if (s.count < min_count)
      throw StateError(std::string(method) + ": needs at least " + std::to_string(min_count) + " observations");
}

QuantParams Calibrator::make_params(int bits, Signedness signedness, std::vector<double> scales,
                                    std::vector<std::int64_t> zps) const {
  if (!supported_bits(bits) || bits == kDisabledBits) throw ParameterError("cannot calibrate for " + std::to_string(bits) + " bits");
  if (channel_axis_) return QuantParams::per_channel(bits, signedness, *channel_axis_, std::move(scales), std::move(zps));
  return QuantParams::per_tensor(bits, signedness, scales[0], zps[0]);
}

Calibrated Calibrator::from_ranges(int bits, Signedness signedness,
                                   const std::vector<std::pair<double, double>>& ranges) const {
  Calibrated out;
  std::vector<double> scales;
  std::vector<std::int64_t> zps;
  for (const auto& [lo, hi] : ranges) {
    bool degenerate = false;
    const auto [s, zp] = minmax_scale(lo, hi, bits, signedness, degenerate);
    out.degenerate = out.degenerate || degenerate;
    scales.push_back(s);
    zps.push_back(zp);
  }
  out.params = make_params(bits, signedness, std::move(scales), std::move(zps));
  return out;
}

Calibrated Calibrator::minmax(int bits, Signedness signedness) const {
  require_observed(1, "minmax");
  std::vector<std::pair<double, double>> ranges;
  for (const auto& s : stats_) ranges.emplace_back(s.min, s.max);
  return from_ranges(bits, signedness, ranges);
}

Calibrated Calibrator::ema(int bits, Signedness signedness, double decay) const {
  require_observed(1, "ema");
  if (!(decay > 0.0 && decay < 1.0)) throw ParameterError("EMA decay must lie in (0, 1)");
  if (!ema_valid_) throw StateError("EMA history is order-dependent and is lost by merge()");
  std::vector<std::pair<double, double>> ranges;
  for (const auto& s : stats_) {
    if (s.batch_extrema.empty()) throw StateError("ema: no closed batch");
    auto [lo, hi] = s.batch_extrema.front();
    for (std::size_t b = 1; b < s.batch_extrema.size(); ++b) {
      lo = decay * lo + (1.0 - decay) * s.batch_extrema[b].first;
      hi = decay * hi + (1.0 - decay) * s.batch_extrema[b].second;
    }
    ranges.emplace_back(lo, hi);
  }
  return from_ranges(bits, signedness, ranges);
}

double Calibrator::histogram_bin_width(std::size_t c) const { return stats_.at(c).hist.width(); }

std::pair<double, double> Calibrator::percentile_range(std::size_t c, PercentileOptions q) const {
  if (!(q.low >= 0.0 && q.low < q.high && q.high <= 100.0))
    throw ParameterError("percentiles must satisfy 0 <= low < high <= 100");
  const auto& s = stats_.at(c);
  if (s.count == 0) throw StateError("percentile: calibrator has observed nothing");
  const auto& h = s.hist;
  const double n = static_cast<double>(s.count);
  // Nearest rank, ceil(q/100 * n) clamped into [1, n]. The small slack keeps
  // products like 99.9 * 1000 / 100 from rounding up past an exact integer.
  auto rank_of = [&](double pct) {
    const double r = std::ceil(pct / 100.0 * n - 1e-9);
    return static_cast<std::uint64_t>(std::clamp(r, 1.0, n));
  };
  auto bin_of_rank = [&](std::uint64_t rank) {
    std::uint64_t cum = 0;
    for (std::size_t i = 0; i < h.bins.size(); ++i) {
      cum += h.bins[i];
      if (cum >= rank) return i;
    }
    return h.bins.size() - 1;
  };
  const double w = h.width();
  const std::size_t lo_bin = bin_of_rank(rank_of(q.low));
  const std::size_t hi_bin = bin_of_rank(rank_of(q.high));
  const double lo = std::max(s.min, static_cast<double>(h.first + static_cast<std::int64_t>(lo_bin)) * w);
  const double hi = std::min(s.max, static_cast<double>(h.first + static_cast<std::int64_t>(hi_bin) + 1) * w);
  return {lo, hi};
}

Calibrated Calibrator::percentile(int bits, Signedness signedness, PercentileOptions q) const {
  require_observed(1, "percentile");
  std::vector<std::pair<double, double>> ranges;
  for (std::size_t c = 0; c < stats_.size(); ++c) ranges.push_back(percentile_range(c, q));
  return from_ranges(bits, signedness, ranges);
}

double Calibrator::variance(std::size_t c) const {
  const auto& s = stats_.at(c);
  if (s.count == 0) throw StateError("variance of an empty stream");
  return s.m2 / static_cast<double>(s.count);
}

Calibrated Calibrator::omse(int bits, Signedness signedness) const {
  require_observed(2, "omse");
  Calibrated out;
  std::vector<double> scales;
  std::vector<std::int64_t> zps;
  for (std::size_t c = 0; c < stats_.size(); ++c) {
    bool degenerate = false;
    const auto [s, zp] = omse_scale(variance(c), bits, signedness, degenerate);
    out.degenerate = out.degenerate || degenerate;
    scales.push_back(s);
    zps.push_back(zp);
  }
  out.params = make_params(bits, signedness, std::move(scales), std::move(zps));
  return out;
}

Calibrated Calibrator::finalize(CalibMethod method, int bits, Signedness signedness) const {
  switch (method) {
    case CalibMethod::MinMax: return minmax(bits, signedness);
    case CalibMethod::Ema: return ema(bits, signedness);
    case CalibMethod::Percentile: return percentile(bits, signedness);
    case CalibMethod::Omse: return omse(bits, signedness);
  }
  throw ParameterError("unknown calibration method");
}

// ---- sidecar records ----------------------------------------------------------------

void write_quant_record(std::ostream& os, const std::string& name, const QuantParams& p) {
  std::ostringstream line;
  line << name << ' ' << p.bits << ' ' << to_string(p.signedness) << ' ';
  if (p.is_per_channel())
    line << "per_channel:" << *p.channel_axis;
  else
    line << "per_tensor";
  line << ' ' << std::setprecision(17);
  for (std::size_t i = 0; i < p.scale.size(); ++i) line << (i ? "," : "") << p.scale[i];
  line << ' ';
  for (std::size_t i = 0; i < p.zero_point.size(); ++i) line << (i ? "," : "") << p.zero_point[i];
  os << line.str() << '\n';
}

namespace {

template <class T>
std::vector<T> parse_list(const std::string& field, const char* what) {
  std::vector<T> out;
  std::size_t start = 0;
  while (start <= field.size()) {
    const std::size_t end = std::min(field.find(',', start), field.size());
    const std::string item = field.substr(start, end - start);
    T v{};
    const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || res.ec != std::errc() || res.ptr != item.data() + item.size())
      throw FormatError(std::string("bad ") + what + " '" + item + "'");
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

}  // namespace

std::pair<std::string, QuantParams> parse_quant_record(const std::string& line) {
  std::istringstream is(line);
  std::string name, bits_s, sign_s, gran_s, scales_s, zps_s, extra;
  if (!(is >> name >> bits_s >> sign_s >> gran_s >> scales_s >> zps_s) || (is >> extra))
    throw FormatError("quant record needs 6 fields: '" + line + "'");
  QuantParams p;
  p.bits = parse_list<int>(bits_s, "bit-width").at(0);
  p.signedness = parse_signedness(sign_s);
  if (gran_s.rfind("per_channel:", 0) == 0) {
    p.channel_axis = parse_list<std::size_t>(gran_s.substr(12), "channel axis").at(0);
  } else if (gran_s != "per_tensor") {
    throw FormatError("unknown granularity '" + gran_s + "'");
  }
  p.scale = parse_list<double>(scales_s, "scale");
  p.zero_point = parse_list<std::int64_t>(zps_s, "zero-point");
  try {
    p.validate();
  } catch (const StateError& e) {
    throw FormatError(std::string("invalid quant record for ") + name + ": " + e.what());
  }
  return {name, p};
}

}  // namespace p4q
