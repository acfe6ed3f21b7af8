// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpatd/config.hpp"
#include "dpatd/wav.hpp"

namespace dpatd {

inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'T', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  NamedTensors blobs;
  std::optional<AdamState> optimizer;
};

namespace detail {

inline void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64le(std::string& out, double v) { put_u64le(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  const unsigned char* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw ParseError(std::string("checkpoint: truncated ") + what + " at byte " + std::to_string(pos_));
    }
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint8_t u8(const char* what) { return *take(1, what); }
  std::uint32_t u32(const char* what) { return read_u32le(take(4, what)); }
  std::uint64_t u64(const char* what) {
    const unsigned char* p = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n, const char* what) {
    const unsigned char* p = take(n, what);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::vector<double> f64s(std::size_t n, const char* what) {
    if (n > (bytes_.size() - pos_) / 8) {
      throw ParseError(std::string("checkpoint: truncated ") + what + " at byte " + std::to_string(pos_));
    }
    std::vector<double> out(n);
    for (auto& v : out) v = f64(what);
    return out;
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Layout (all integers and doubles little-endian):
///   "DPTD" u32 version
///   u64 n, n bytes of model config text
///   u32 blob count; per blob: u32 name length, name, u32 rank, rank × u64
///   dims, numel × f64
///   u8 optimizer flag; if 1: u64 step, then per blob numel × f64 first
///   moments followed by numel × f64 second moments
inline std::string encode_checkpoint(const ModelConfig& cfg, const ModelWeights& w,
                                     const AdamState* optimizer = nullptr) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32le(out, kCheckpointVersion);
  const std::string text = serialize_model_config(cfg);
  detail::put_u64le(out, text.size());
  out += text;
  const NamedTensors params = w.parameters();
  detail::put_u32le(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put_u32le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32le(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u64le(out, d);
    for (double v : t.data()) detail::put_f64le(out, v);
  }
  const bool with_opt = optimizer && !optimizer->m.empty();
  out.push_back(static_cast<char>(with_opt ? 1 : 0));
  if (with_opt) {
    if (optimizer->m.size() != params.size()) throw ConfigError("checkpoint: optimizer state does not match weights");
    detail::put_u64le(out, optimizer->t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (double v : optimizer->m[i]) detail::put_f64le(out, v);
      for (double v : optimizer->v[i]) detail::put_f64le(out, v);
    }
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  if (std::memcmp(in.take(4, "magic"), kCheckpointMagic, 4) != 0) {
    throw ParseError("checkpoint: bad magic at byte 0");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: format version " + std::to_string(version) + ", expected " +
                     std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  const std::uint64_t text_len = in.u64("config length");
  ck.config = parse_model_config(in.str(static_cast<std::size_t>(std::min<std::uint64_t>(text_len, bytes.size())),
                                        "config text"));
  const std::uint32_t count = in.u32("blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = in.u32("name length");
    std::string name = in.str(name_len, "name");
    const std::uint32_t rank = in.u32("rank");
    if (rank == 0 || rank > 8) throw ParseError("checkpoint: blob '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint64_t d = in.u64("dimension");
      if (d == 0 || d > bytes.size()) throw ParseError("checkpoint: blob '" + name + "' has bad dimension");
      numel *= d;
      if (numel > bytes.size()) throw ParseError("checkpoint: blob '" + name + "' larger than file");
      shape.push_back(static_cast<std::size_t>(d));
    }
    auto values = in.f64s(static_cast<std::size_t>(numel), "values");
    ck.blobs.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values), true));
  }
  if (in.u8("optimizer flag") == 1) {
    AdamState st;
    st.t = in.u64("optimizer step");
    for (const auto& [name, t] : ck.blobs) {
      st.m.push_back(in.f64s(t.numel(), "first moments"));
      st.v.push_back(in.f64s(t.numel(), "second moments"));
    }
    ck.optimizer = std::move(st);
  }
  if (!in.at_end()) throw ParseError("checkpoint: trailing bytes at byte " + std::to_string(in.offset()));
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelWeights& w,
                            const AdamState* optimizer = nullptr) {
  detail::write_file_atomic(path, encode_checkpoint(cfg, w, optimizer));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(detail::read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Throws unless the checkpoint holds exactly the parameters `cfg`
/// describes, by name and shape.
inline void check_compatible(const Checkpoint& ck, const ModelConfig& cfg) {
  const NamedShapes expected = parameter_shapes(cfg);
  if (expected.size() != ck.blobs.size()) {
    throw DimensionError("checkpoint holds " + std::to_string(ck.blobs.size()) + " tensors, config expects " +
                         std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, shape] = expected[i];
    const auto& [src_name, src] = ck.blobs[i];
    if (name != src_name) throw DimensionError("checkpoint tensor '" + src_name + "' where '" + name + "' expected");
    if (shape != src.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                           ", config expects " + shape_str(shape));
    }
  }
}

/// Copies blob values into `into`, which must have been built for `cfg`.
inline void load_weights(const Checkpoint& ck, const ModelConfig& cfg, ModelWeights& into) {
  check_compatible(ck, cfg);
  const NamedTensors params = into.parameters();
  if (params.size() != ck.blobs.size()) throw DimensionError("weights do not match their config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor target = params[i].second;
    const Tensor& src = ck.blobs[i].second;
    if (target.shape() != src.shape()) throw DimensionError("weights do not match their config");
    std::copy(src.data().begin(), src.data().end(), target.mutable_data().begin());
  }
}

inline void load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, ModelWeights& into) {
  load_weights(read_checkpoint(path), cfg, into);
}

struct LoadedModel {
  ModelConfig config;
  ModelWeights weights;
  std::optional<AdamState> optimizer;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  check_compatible(ck, ck.config);
  LoadedModel m{ck.config, init_weights(ck.config, ck.config.seed), std::move(ck.optimizer)};
  load_weights(ck, m.config, m.weights);
  return m;
}

}  // namespace dpatd
