#pragma once

// Multi-resolution multi-filter (MRMF) audio features.
//
// A waveform is analysed with K STFT window sizes sharing one hop. Every
// resolution yields two F-band views of its magnitude spectrogram: a mel
// filterbank view and a raw view that averages contiguous FFT bins. Both are
// log(1+x) compressed and linearly resampled in time onto the finest frame grid,
// giving a tensor of shape [T × K × F × 2].

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "cat/binary_io.hpp"
#include "cat/tensor.hpp"
#include "cat/wav.hpp"

namespace cat {

constexpr bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// In-place iterative radix-2 FFT (forward, no scaling).
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!is_power_of_two(n)) throw ValidationError("fft: length " + std::to_string(n) + " is not a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      // Twiddles from the exact angle rather than repeated multiplication.
      const std::complex<double> w(std::cos(ang * k), std::sin(ang * k));
      for (std::size_t i = 0; i < n; i += len) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

enum class WindowKind { hann, rectangular };

/// Periodic Hann window of length n, or all ones.
inline std::vector<double> make_window(std::size_t n, WindowKind kind) {
  std::vector<double> w(n, 1.0);
  if (kind == WindowKind::hann)
    for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / static_cast<double>(n));
  return w;
}

/// Magnitude spectrogram: values[t][k] = |FFT(window · frame_t)|_k for k ≤ ω/2.
struct Spectrogram {
  Tensor values;  // [frames × (window_size/2 + 1)]
  std::size_t window_size = 0;
  std::size_t hop = 0;
  std::size_t resolution_index = 0;

  std::size_t frames() const { return values.dim(0); }
  std::size_t bins() const { return values.dim(1); }
};

inline std::size_t frame_count(std::size_t n_samples, std::size_t window, std::size_t hop) {
  return (n_samples - window) / hop + 1;
}

inline Spectrogram stft(const Waveform& s, std::size_t window, std::size_t hop, WindowKind kind = WindowKind::hann) {
  if (!is_power_of_two(window)) {
    throw ValidationError("stft: window " + std::to_string(window) + " is not a power of two");
  }
  if (hop == 0) throw ValidationError("stft: hop must be positive");
  if (s.samples.size() < window) {
    throw ValidationError("stft: waveform of " + std::to_string(s.samples.size()) + " samples is shorter than window " +
                          std::to_string(window));
  }
  const std::size_t frames = frame_count(s.samples.size(), window, hop);
  const std::size_t bins = window / 2 + 1;
  const std::vector<double> w = make_window(window, kind);
  Spectrogram out{Tensor({frames, bins}), window, hop, 0};
  std::vector<std::complex<double>> buf(window);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* frame = s.samples.data() + t * hop;
    for (std::size_t i = 0; i < window; ++i) buf[i] = {frame[i] * w[i], 0.0};
    fft(buf);
    for (std::size_t k = 0; k < bins; ++k) out.values.at(t, k) = std::abs(buf[k]);
  }
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters equally spaced on the mel scale.
///
/// Row m rises linearly in mel from edge m to peak m+1 and falls to edge m+2.
/// Each weight is the triangle's mean over the FFT bin's frequency interval
/// [f_k − Δ/2, f_k + Δ/2], integrated in closed form, so narrow low-frequency
/// triangles still land on a bin and overlapping triangles sum to exactly 1
/// over any bin lying between the first and last peak.
struct MelFilterbank {
  Tensor weights;               // [bands × bins]
  std::vector<double> edges_hz;  // bands + 2 edges; peaks are edges_hz[1..bands]
  double f_min = 0.0;
  double f_max = 0.0;
  std::size_t bands = 0;
  std::uint32_t sample_rate = 0;

  std::size_t bins() const { return weights.dim(1); }
  double peak_hz(std::size_t band) const { return edges_hz[band + 1]; }
  double bin_width_hz() const { return static_cast<double>(sample_rate) / (2.0 * static_cast<double>(bins() - 1)); }
};

namespace detail {

// Antiderivative of hz_to_mel.
inline double mel_integral(double f) {
  const double x = 1.0 + f / 700.0;
  return 2595.0 / std::numbers::ln10 * (700.0 * x * std::log(x) - f);
}

// (1/Δ) ∫_a^b (mel(f) − base) / span df over the overlap of [a, b] with [lo, hi], optionally mirrored.
inline double ramp_overlap(double a, double b, double lo, double hi, double base, double span, bool falling) {
  const double l = std::max(a, lo), r = std::min(b, hi);
  if (r <= l) return 0.0;
  const double integral = (mel_integral(r) - mel_integral(l) - base * (r - l)) / span;
  return falling ? (r - l) - integral : integral;
}

}  // namespace detail

inline MelFilterbank build_mel_filterbank(std::size_t bands, std::size_t bins, std::uint32_t sample_rate, double f_min,
                                          double f_max) {
  if (bands < 2) throw ValidationError("mel filterbank: need at least 2 bands, got " + std::to_string(bands));
  if (bins < 2) throw ValidationError("mel filterbank: need at least 2 FFT bins");
  if (sample_rate == 0) throw ValidationError("mel filterbank: sample rate must be positive");
  const double nyquist = sample_rate / 2.0;
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= nyquist)) {
    throw ValidationError("mel filterbank: require 0 <= f_min < f_max <= sample_rate/2, got f_min=" +
                          std::to_string(f_min) + " f_max=" + std::to_string(f_max));
  }
  MelFilterbank fb;
  fb.bands = bands;
  fb.f_min = f_min;
  fb.f_max = f_max;
  fb.sample_rate = sample_rate;
  fb.weights = Tensor({bands, bins});
  const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> mel_edges(bands + 2);
  fb.edges_hz.resize(bands + 2);
  for (std::size_t i = 0; i < bands + 2; ++i) {
    mel_edges[i] = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(bands + 1);
    fb.edges_hz[i] = mel_to_hz(mel_edges[i]);
  }
  fb.edges_hz.front() = f_min;
  fb.edges_hz.back() = f_max;

  const double delta = nyquist / static_cast<double>(bins - 1);
  for (std::size_t m = 0; m < bands; ++m) {
    bool any = false;
    for (std::size_t k = 0; k < bins; ++k) {
      const double a = (static_cast<double>(k) - 0.5) * delta, b = (static_cast<double>(k) + 0.5) * delta;
      const double rise = detail::ramp_overlap(a, b, fb.edges_hz[m], fb.edges_hz[m + 1], mel_edges[m],
                                               mel_edges[m + 1] - mel_edges[m], false);
      const double fall = detail::ramp_overlap(a, b, fb.edges_hz[m + 1], fb.edges_hz[m + 2], mel_edges[m + 1],
                                               mel_edges[m + 2] - mel_edges[m + 1], true);
      const double w = std::max(0.0, (rise + fall) / delta);
      fb.weights.at(m, k) = w;
      any = any || w > 0.0;
    }
    if (!any) throw ValidationError("mel filterbank: band " + std::to_string(m) + " covers no FFT bin");
  }
  return fb;
}

/// mel(x) = values · weightsᵀ, shape [T × bands].
inline Tensor apply_mel(const Spectrogram& spec, const MelFilterbank& fb) {
  if (spec.bins() != fb.bins()) {
    throw DimensionError("apply_mel: spectrogram has " + std::to_string(spec.bins()) + " bins, filterbank expects " +
                         std::to_string(fb.bins()));
  }
  const std::size_t T = spec.frames(), B = spec.bins(), F = fb.bands;
  Tensor out({T, F});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = 0; m < F; ++m) {
      double s = 0.0;
      for (std::size_t k = 0; k < B; ++k) s += spec.values.at(t, k) * fb.weights.at(m, k);
      out.at(t, m) = s;
    }
  return out;
}

/// Half-open bin range averaged into raw band `band` when B bins are folded into F bands.
inline std::pair<std::size_t, std::size_t> raw_band_range(std::size_t band, std::size_t bins, std::size_t bands) {
  const std::size_t lo = band * bins / bands;
  const std::size_t hi = std::max(lo + 1, (band + 1) * bins / bands);
  return {lo, std::min(hi, bins)};
}

/// Raw-filter view: averages contiguous bin groups down to `bands` columns.
inline Tensor rebin_linear(const Spectrogram& spec, std::size_t bands) {
  if (bands == 0) throw ValidationError("rebin: band count must be positive");
  const std::size_t T = spec.frames(), B = spec.bins();
  Tensor out({T, bands});
  for (std::size_t m = 0; m < bands; ++m) {
    const auto [lo, hi] = raw_band_range(m, B, bands);
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      for (std::size_t k = lo; k < hi; ++k) s += spec.values.at(t, k);
      out.at(t, m) = s / static_cast<double>(hi - lo);
    }
  }
  return out;
}

/// Resamples each [T_i × F] matrix onto T = max T_i frames by linear interpolation
/// (endpoints aligned) and stacks them as [T × K × F] in input order.
inline Tensor align_temporal(const std::vector<Tensor>& specs) {
  if (specs.empty()) throw ValidationError("align_temporal: no spectrograms given");
  const std::size_t F = specs[0].dim(1);
  std::size_t T = 0;
  for (const Tensor& s : specs) {
    if (s.rank() != 2 || s.dim(1) != F) {
      throw DimensionError("align_temporal: expected [T_i x " + std::to_string(F) + "], got " + shape_str(s.shape()));
    }
    T = std::max(T, s.dim(0));
  }
  const std::size_t K = specs.size();
  Tensor out({T, K, F});
  for (std::size_t k = 0; k < K; ++k) {
    const Tensor& s = specs[k];
    const std::size_t Ti = s.dim(0);
    for (std::size_t t = 0; t < T; ++t) {
      double* dst = &out[(t * K + k) * F];
      if (Ti == T) {
        for (std::size_t f = 0; f < F; ++f) dst[f] = s.at(t, f);
        continue;
      }
      const double pos = T == 1 ? 0.0 : static_cast<double>(t) * static_cast<double>(Ti - 1) / static_cast<double>(T - 1);
      const auto lo = std::min(static_cast<std::size_t>(pos), Ti - 1);
      const std::size_t hi = std::min(lo + 1, Ti - 1);
      const double frac = pos - static_cast<double>(lo);
      for (std::size_t f = 0; f < F; ++f) dst[f] = s.at(lo, f) + frac * (s.at(hi, f) - s.at(lo, f));
    }
  }
  return out;
}

struct DspConfig {
  std::uint32_t sample_rate = 32000;
  std::vector<std::size_t> windows{256, 512, 1024};
  std::size_t hop = 320;
  std::size_t mel_bands = 64;
  double f_min = 50.0;
  double f_max = 14000.0;

  void validate() const {
    if (sample_rate == 0) throw ValidationError("dsp.sample_rate must be positive");
    if (windows.empty()) throw ValidationError("dsp.windows must list at least one window size");
    for (std::size_t w : windows)
      if (!is_power_of_two(w)) throw ValidationError("dsp.windows: " + std::to_string(w) + " is not a power of two");
    if (hop == 0) throw ValidationError("dsp.hop must be positive");
    if (mel_bands < 2) throw ValidationError("dsp.mel_bands must be at least 2");
    if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
      throw ValidationError("dsp.f_min/f_max must satisfy 0 <= f_min < f_max <= sample_rate/2");
    }
  }

  std::size_t largest_window() const { return *std::max_element(windows.begin(), windows.end()); }
};

/// Stacked features, shape [T × K × F × 2]; channel 0 = mel, 1 = raw.
struct MrmfFeature {
  Tensor values;
  std::vector<std::uint32_t> window_sizes;

  std::size_t frames() const { return values.dim(0); }
  std::size_t resolutions() const { return values.dim(1); }
  std::size_t bands() const { return values.dim(2); }
};

/// Filterbanks for every window of a config; reuse across many clips.
class MrmfExtractor {
 public:
  explicit MrmfExtractor(DspConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t w : cfg_.windows)
      banks_.push_back(build_mel_filterbank(cfg_.mel_bands, w / 2 + 1, cfg_.sample_rate, cfg_.f_min, cfg_.f_max));
  }

  const DspConfig& config() const { return cfg_; }
  const MelFilterbank& filterbank(std::size_t k) const { return banks_.at(k); }

  MrmfFeature operator()(const Waveform& input) const {
    const Waveform s = input.sample_rate == cfg_.sample_rate ? input : resample_linear(input, cfg_.sample_rate);
    if (s.samples.size() < cfg_.largest_window()) {
      throw ValidationError("extract_mrmf: waveform of " + std::to_string(s.samples.size()) +
                            " samples is shorter than the largest window " + std::to_string(cfg_.largest_window()));
    }
    std::vector<Tensor> mel, raw;
    for (std::size_t k = 0; k < cfg_.windows.size(); ++k) {
      Spectrogram spec = stft(s, cfg_.windows[k], cfg_.hop);
      spec.resolution_index = k;
      Tensor m = apply_mel(spec, banks_[k]);
      Tensor r = rebin_linear(spec, cfg_.mel_bands);
      for (double& v : m.storage()) v = std::log1p(v);
      for (double& v : r.storage()) v = std::log1p(v);
      mel.push_back(std::move(m));
      raw.push_back(std::move(r));
    }
    const Tensor am = align_temporal(mel), ar = align_temporal(raw);
    const std::size_t T = am.dim(0), K = am.dim(1), F = am.dim(2);
    MrmfFeature out{Tensor({T, K, F, 2}), {}};
    for (std::size_t i = 0; i < T * K * F; ++i) {
      out.values[2 * i] = am[i];
      out.values[2 * i + 1] = ar[i];
    }
    for (std::size_t w : cfg_.windows) out.window_sizes.push_back(static_cast<std::uint32_t>(w));
    return out;
  }

 private:
  DspConfig cfg_;
  std::vector<MelFilterbank> banks_;
};

inline MrmfFeature extract_mrmf(const Waveform& s, const DspConfig& cfg) { return MrmfExtractor(cfg)(s); }

// Feature dump: "MRMF", u32 version=1, u32 T, K, F, C=2, K × u32 window sizes,
// then T·K·F·C little-endian float32 values in row-major order.

inline constexpr std::uint32_t kMrmfVersion = 1;

inline std::vector<std::uint8_t> encode_mrmf(const MrmfFeature& x) {
  if (x.values.rank() != 4 || x.values.dim(3) != 2) throw DimensionError("encode_mrmf: expected [T x K x F x 2]");
  if (x.window_sizes.size() != x.values.dim(1)) throw DimensionError("encode_mrmf: window list does not match K");
  std::vector<std::uint8_t> out;
  out.reserve(24 + 4 * x.window_sizes.size() + 4 * x.values.size());
  io::put_bytes(out, "MRMF");
  io::put_u32(out, kMrmfVersion);
  for (std::size_t d = 0; d < 4; ++d) io::put_u32(out, static_cast<std::uint32_t>(x.values.dim(d)));
  for (std::uint32_t w : x.window_sizes) io::put_u32(out, w);
  for (double v : x.values.data()) io::put_f32(out, static_cast<float>(v));
  return out;
}

inline MrmfFeature decode_mrmf(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes, "MRMF dump");
  if (r.bytes(4) != "MRMF") throw FormatError("MRMF dump: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kMrmfVersion) throw FormatError("MRMF dump: unsupported version " + std::to_string(version));
  const std::uint32_t T = r.u32(), K = r.u32(), F = r.u32(), C = r.u32();
  if (C != 2) throw FormatError("MRMF dump: channel count must be 2, got " + std::to_string(C));
  if (T == 0 || K == 0 || F == 0) throw FormatError("MRMF dump: zero-sized dimension");
  MrmfFeature x;
  for (std::uint32_t k = 0; k < K; ++k) x.window_sizes.push_back(r.u32());
  const std::size_t n = std::size_t{T} * K * F * C;
  r.need(4 * n);
  std::vector<double> data(n);
  for (double& v : data) v = r.f32();
  if (r.remaining() != 0) throw FormatError("MRMF dump: " + std::to_string(r.remaining()) + " trailing bytes");
  x.values = Tensor({T, K, F, C}, std::move(data));
  return x;
}

inline void write_mrmf(const std::filesystem::path& path, const MrmfFeature& x) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot create " + path.string());
  io::write_all(out, encode_mrmf(x));
}

inline MrmfFeature read_mrmf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return decode_mrmf(io::read_all(in));
}

}  // namespace cat
