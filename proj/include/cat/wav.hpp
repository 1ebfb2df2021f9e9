#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cat/binary_io.hpp"
#include "cat/error.hpp"

namespace cat {

/// Mono PCM audio, amplitude nominally in [−1, 1].
struct Waveform {
  std::vector<double> samples;
  std::uint32_t sample_rate = 32000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

namespace detail {

inline std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

inline std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

}  // namespace detail

/// Parses a RIFF/WAVE image holding 16-bit PCM (mono or stereo; stereo is averaged).
inline Waveform parse_wav(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw IngestionError("WAV: file shorter than RIFF header", bytes.size());
  if (std::string(bytes.begin(), bytes.begin() + 4) != "RIFF") throw IngestionError("WAV: missing RIFF magic", 0);
  if (std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") throw IngestionError("WAV: missing WAVE tag", 8);

  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4));
    const std::uint32_t len = detail::le32(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (len < 16 || body + 16 > bytes.size()) throw IngestionError("WAV: fmt chunk too short", body);
      const std::uint16_t format = detail::le16(bytes, body);
      if (format != 1) {
        throw IngestionError("WAV: unsupported encoding " + std::to_string(format) + " (only PCM is accepted)", body);
      }
      channels = detail::le16(bytes, body + 2);
      rate = detail::le32(bytes, body + 4);
      bits = detail::le16(bytes, body + 14);
      if (channels != 1 && channels != 2) throw IngestionError("WAV: unsupported channel count " + std::to_string(channels), body + 2);
      if (bits != 16) throw IngestionError("WAV: unsupported bit depth " + std::to_string(bits), body + 14);
      if (rate == 0) throw IngestionError("WAV: zero sample rate", body + 4);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw IngestionError("WAV: data chunk before fmt chunk", pos);
      if (body + len > bytes.size()) throw IngestionError("WAV: data chunk runs past end of file", body);
      const std::size_t frame_bytes = 2u * channels;
      if (len % frame_bytes != 0) throw IngestionError("WAV: data length is not a whole number of frames", pos + 4);
      Waveform w;
      w.sample_rate = rate;
      const std::size_t frames = len / frame_bytes;
      w.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const auto raw = static_cast<std::int16_t>(detail::le16(bytes, body + i * frame_bytes + 2 * c));
          acc += static_cast<double>(raw) / 32768.0;
        }
        w.samples[i] = acc / channels;
      }
      return w;
    }
    pos = body + len + (len & 1u);
  }
  throw IngestionError(have_fmt ? "WAV: no data chunk" : "WAV: no fmt chunk", pos);
}

inline Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("WAV: cannot open " + path.string(), 0);
  try {
    return parse_wav(io::read_all(in));
  } catch (const IngestionError& e) {
    throw IngestionError(path.string() + ": " + e.what(), e.offset());
  }
}

/// Encodes as 16-bit mono PCM. Samples are rounded to the nearest step of 1/32768 and clipped.
inline std::vector<std::uint8_t> encode_wav(const Waveform& w) {
  std::vector<std::uint8_t> out;
  const auto data_len = static_cast<std::uint32_t>(2 * w.samples.size());
  io::put_bytes(out, "RIFF");
  io::put_u32(out, 36 + data_len);
  io::put_bytes(out, "WAVEfmt ");
  io::put_u32(out, 16);
  out.push_back(1); out.push_back(0);  // PCM
  out.push_back(1); out.push_back(0);  // mono
  io::put_u32(out, w.sample_rate);
  io::put_u32(out, w.sample_rate * 2);
  out.push_back(2); out.push_back(0);   // block align
  out.push_back(16); out.push_back(0);  // bits per sample
  io::put_bytes(out, "data");
  io::put_u32(out, data_len);
  for (double s : w.samples) {
    const double q = std::clamp(std::nearbyint(s * 32768.0), -32768.0, 32767.0);
    const auto v = static_cast<std::uint16_t>(static_cast<std::int16_t>(q));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("WAV: cannot create " + path.string(), 0);
  io::write_all(out, encode_wav(w));
}

/// Linear-interpolation resampling to `target_rate`.
inline Waveform resample_linear(const Waveform& w, std::uint32_t target_rate) {
  if (target_rate == 0) throw ValidationError("resample: target rate must be positive");
  if (w.sample_rate == target_rate || w.samples.empty()) {
    Waveform out = w;
    out.sample_rate = target_rate;
    return out;
  }
  const double ratio = static_cast<double>(w.sample_rate) / target_rate;
  const auto n_out = static_cast<std::size_t>(std::floor((w.samples.size() - 1) / ratio)) + 1;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = i * ratio;
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, w.samples.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    out.samples[i] = w.samples[lo] + frac * (w.samples[hi] - w.samples[lo]);
  }
  return out;
}

}  // namespace cat
