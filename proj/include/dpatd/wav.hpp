// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dpatd/errors.hpp"

namespace dpatd {

struct AudioClip {
  std::vector<double> samples;
  std::uint32_t sample_rate = 16000;
};

enum class StereoMode { reject, downmix };

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16le(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw InputError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw InputError("cannot rename into " + path.string());
  }
}

}  // namespace detail

/// Decodes RIFF/WAVE PCM 16-bit from memory. Sample s maps to s/32768.
inline AudioClip parse_wav(const std::vector<unsigned char>& bytes, StereoMode stereo = StereoMode::reject) {
  auto fail = [](std::size_t offset, const std::string& what) -> ParseError {
    return ParseError("wav: " + what + " at byte " + std::to_string(offset));
  };
  if (bytes.size() < 12) throw fail(0, "file shorter than RIFF header");
  if (std::string(bytes.begin(), bytes.begin() + 4) != "RIFF") throw fail(0, "missing RIFF tag");
  if (std::string(bytes.begin() + 8, bytes.begin() + 12) != "WAVE") throw fail(8, "missing WAVE tag");

  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4));
    const std::uint32_t size = detail::read_u32le(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    if (size > bytes.size() - body) throw fail(pos, "chunk '" + id + "' runs past end of file");
    if (id == "fmt ") {
      if (size < 16) throw fail(pos, "fmt chunk too small");
      const std::uint16_t format = detail::read_u16le(&bytes[body]);
      channels = detail::read_u16le(&bytes[body + 2]);
      rate = detail::read_u32le(&bytes[body + 4]);
      bits = detail::read_u16le(&bytes[body + 14]);
      if (format != 1) throw fail(body, "unsupported encoding " + std::to_string(format) + " (PCM only)");
      if (bits != 16) throw fail(body + 14, "unsupported bit depth " + std::to_string(bits));
      if (channels == 0) throw fail(body + 2, "zero channels");
      if (channels > 2 || (channels == 2 && stereo == StereoMode::reject)) {
        throw fail(body + 2, std::to_string(channels) + " channels (mono expected)");
      }
      if (rate == 0) throw fail(body + 4, "zero sample rate");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw fail(pos, "data chunk before fmt chunk");
      const std::size_t frame = 2u * channels;
      if (size % frame != 0) throw fail(pos + 4, "data size not a whole number of frames");
      if (size == 0) throw fail(pos + 4, "empty data chunk");
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(size / frame);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const auto s = static_cast<std::int16_t>(detail::read_u16le(&bytes[body + i * frame + 2 * c]));
          acc += static_cast<double>(s) / 32768.0;
        }
        clip.samples[i] = acc / channels;
      }
      return clip;
    }
    pos = body + size + (size & 1u);
  }
  throw fail(pos, have_fmt ? "missing data chunk" : "missing fmt chunk");
}

inline AudioClip read_wav(const std::filesystem::path& path, StereoMode stereo = StereoMode::reject) {
  try {
    return parse_wav(detail::read_file_bytes(path), stereo);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// PCM 16-bit mono encoding; samples are clamped to [−1, 1 − 1/32768] and
/// rounded to the nearest step.
inline std::string encode_wav(const AudioClip& clip) {
  if (clip.samples.empty()) throw InputError("write_wav: empty clip");
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32le(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32le(out, 16);
  detail::put_u16le(out, 1);
  detail::put_u16le(out, 1);
  detail::put_u32le(out, clip.sample_rate);
  detail::put_u32le(out, clip.sample_rate * 2);
  detail::put_u16le(out, 2);
  detail::put_u16le(out, 16);
  out += "data";
  detail::put_u32le(out, data_bytes);
  constexpr double hi = 1.0 - 1.0 / 32768.0;
  for (double v : clip.samples) {
    if (!std::isfinite(v)) throw InputError("write_wav: non-finite sample");
    const long q = std::lround(std::clamp(v, -1.0, hi) * 32768.0);
    detail::put_u16le(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline void write_wav(const AudioClip& clip, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_wav(clip));
}

}  // namespace dpatd
