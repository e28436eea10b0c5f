// SPDX-License-Identifier: Apache-2.0
#pragma once

// Uniform affine quantization.
//
//   q      = clip(round(x / s) + zp, lo, hi)      round = half away from zero
//   x~     = (q - zp) * s
//
// with (lo, hi) = (0, 2^b - 1) unsigned or (-2^(b-1), 2^(b-1) - 1) signed.
// Bit-width 32 denotes a disabled (identity) site.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "p4q/tensor.hpp"

namespace p4q {

inline constexpr double kScaleFloor = 1e-8;
inline constexpr int kDisabledBits = 32;

enum class Signedness : std::uint8_t { Signed, Unsigned };

std::string to_string(Signedness s);
Signedness parse_signedness(const std::string& s);

struct QuantParams {
  int bits = kDisabledBits;
  Signedness signedness = Signedness::Unsigned;
  /// Set for per-channel params: the tensor axis whose entries each own a scale.
  std::optional<std::size_t> channel_axis;
  std::vector<double> scale{1.0};
  std::vector<std::int64_t> zero_point{0};

  static QuantParams identity();
  static QuantParams per_tensor(int bits, Signedness signedness, double scale, std::int64_t zero_point);
  static QuantParams per_channel(int bits, Signedness signedness, std::size_t axis, std::vector<double> scales,
                                 std::vector<std::int64_t> zero_points);

  bool enabled() const { return bits != kDisabledBits; }
  bool is_per_channel() const { return channel_axis.has_value(); }
  std::int64_t qmin() const;
  std::int64_t qmax() const;
  std::size_t channels() const { return scale.size(); }

  /// Throws StateError when the invariants (bit-width, scale floor, zero-point range,
  /// matching channel vectors) do not hold.
  void validate() const;

  bool operator==(const QuantParams&) const = default;
};

/// Integer codes produced by quantize(). Stored as 32-bit; every supported
/// bit-width fits.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  std::size_t size() const { return data.size(); }
  bool operator==(const IntTensor&) const = default;
};

/// Round half away from zero.
double round_half_away(double x);

IntTensor quantize(const Tensor& x, const QuantParams& p);
Tensor dequantize(const IntTensor& q, const QuantParams& p);

/// dequantize(quantize(x)) in the forward pass. The backward pass is the
/// straight-through estimator: identity gradient, zeroed where the forward clipped.
/// Disabled params return x unchanged.
Tensor fake_quant(const Tensor& x, const QuantParams& p);

// ---- calibration ---------------------------------------------------------------

enum class CalibMethod : std::uint8_t { MinMax, Ema, Percentile, Omse };

std::string to_string(CalibMethod m);
CalibMethod parse_calib_method(const std::string& s);

struct PercentileOptions {
  double low = 0.1;
  double high = 99.9;
};

/// Result of a finalize call. `degenerate` reports a zero-width range (or zero
/// variance) that forced the scale to kScaleFloor.
struct Calibrated {
  QuantParams params;
  bool degenerate = false;
};

/// Streaming statistics for one quantization site.
///
/// A calibrator keeps everything every finalizer needs, so one observation pass
/// can be finalized with any method and bit-width: running min/max, per-batch
/// extrema for the EMA recurrence, count/mean/M2 for the population variance,
/// and a histogram for percentiles.
///
/// The histogram uses at most kHistogramBins bins of a power-of-two width with
/// edges on multiples of that width. The width is the smallest one whose grid
/// covers the observed range, so growing the range only merges neighbouring
/// bins and the final histogram does not depend on observation order or on how
/// the stream was split. merge() relies on the same property.
class Calibrator {
 public:
  static constexpr std::size_t kHistogramBins = 2048;

  /// Per-tensor statistics.
  Calibrator() = default;
  /// Independent statistics for every index along `channel_axis`.
  explicit Calibrator(std::size_t channel_axis) : channel_axis_(channel_axis) {}

  /// One calibration batch.
  void observe(const Tensor& batch) { observe(batch.values(), batch.shape()); }
  void observe(std::span<const double> values, const Shape& shape);

  /// Builds one logical batch out of several parts; close_batch() ends it.
  void accumulate(std::span<const double> values, const Shape& shape);
  void close_batch();

  /// Folds another calibrator's statistics in. Defined for MinMax, Percentile and
  /// OMSE; the EMA history of the result is invalid.
  void merge(const Calibrator& other);

  std::size_t count() const;
  std::size_t batches() const { return batches_; }
  std::optional<std::size_t> channel_axis() const { return channel_axis_; }
  std::size_t channels() const { return stats_.size(); }

  Calibrated minmax(int bits, Signedness signedness) const;
  Calibrated ema(int bits, Signedness signedness, double decay = 0.9) const;
  Calibrated percentile(int bits, Signedness signedness, PercentileOptions q = {}) const;
  Calibrated omse(int bits, Signedness signedness) const;
  Calibrated finalize(CalibMethod method, int bits, Signedness signedness) const;

  /// Range the percentile finalizer would use for channel c.
  std::pair<double, double> percentile_range(std::size_t c, PercentileOptions q = {}) const;
  /// Width of one histogram bin for channel c.
  double histogram_bin_width(std::size_t c) const;
  /// Population variance (1/n) for channel c.
  double variance(std::size_t c) const;
  double min(std::size_t c) const { return stats_.at(c).min; }
  double max(std::size_t c) const { return stats_.at(c).max; }

 private:
  struct Histogram {
    int width_exp = 0;       // bin width = 2^width_exp
    std::int64_t first = 0;  // index of bins[0] on the global grid
    std::vector<std::uint64_t> bins;

    void add_range(double lo, double hi);
    void coarsen_to(int exp);
    void insert(double x);
    void merge(const Histogram& other);
    double width() const;
  };

  struct Stats {
    std::size_t count = 0;
    double min = 0.0;
    double max = 0.0;
    double mean = 0.0;
    double m2 = 0.0;
    Histogram hist;
    std::vector<std::pair<double, double>> batch_extrema;
    // extrema of the batch being accumulated
    bool batch_open = false;
    double batch_min = 0.0;
    double batch_max = 0.0;
  };

  void ensure_layout(const Shape& shape);
  void require_observed(std::size_t min_count, const char* method) const;
  Calibrated from_ranges(int bits, Signedness signedness, const std::vector<std::pair<double, double>>& ranges) const;
  QuantParams make_params(int bits, Signedness signedness, std::vector<double> scales,
                          std::vector<std::int64_t> zps) const;

  std::optional<std::size_t> channel_axis_;
  Shape layout_;
  std::vector<Stats> stats_;
  std::size_t batches_ = 0;
  bool ema_valid_ = true;
};

/// MinMax rule on an explicit range. Unsigned: the range is first widened to
/// include 0, then s = (hi - lo)/(2^b - 1), zp = clip(round(-lo/s), 0, 2^b - 1). Signed: symmetric, s = max(|lo|,|hi|)/(2^(b-1) - 1), zp = 0.
/// A zero-width range yields kScaleFloor and sets `degenerate`.
std::pair<double, std::int64_t> minmax_scale(double lo, double hi, int bits, Signedness signedness, bool& degenerate);

/// Variance rule: Δ = √z, s = 2Δ/(2^b - 1), zp = ⌊round(z)/2⌋ clamped into the
/// unsigned range (0 for signed).
std::pair<double, std::int64_t> omse_scale(double variance, int bits, Signedness signedness, bool& degenerate);

// ---- sidecar -----------------------------------------------------------------

/// Writes `name bits signedness granularity scale[,scale...] zp[,zp...]`.
/// Granularity is `per_tensor` or `per_channel:<axis>`. Scales are printed with
/// 17 significant digits so that reading them back is exact.
void write_quant_record(std::ostream& os, const std::string& name, const QuantParams& p);
/// Parses one record; throws FormatError on malformed input.
std::pair<std::string, QuantParams> parse_quant_record(const std::string& line);

}  // namespace p4q
