// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dpatd/training.hpp"

namespace dpatd {

/// Flat `key = value` text. Blank lines are skipped; `#` starts a comment at
/// the beginning of a line or after whitespace.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t end = std::min(text.find('\n', start), text.size());
      std::string line(text.substr(start, end - start));
      start = end + 1;
      ++line_no;
      for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
          line.resize(i);
          break;
        }
      }
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
      }
      std::string key = trim(body.substr(0, eq));
      std::string value = trim(body.substr(eq + 1));
      if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + ": empty key");
      if (!kv.entries_.emplace(key, value).second) {
        throw ParseError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
      }
    }
    return kv;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  std::map<std::string, std::string> entries_;
};

namespace detail {

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& key, const std::string& s) {
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || std::isnan(v)) {
    throw ParseError("config key '" + key + "': not a number: '" + s + "'");
  }
  return v;
}

template <typename Int>
Int parse_unsigned(const std::string& key, const std::string& s) {
  Int v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ParseError("config key '" + key + "': not a non-negative integer: '" + s + "'");
  }
  return v;
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

inline Field size_field(std::string key, std::size_t& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& s) { ref = parse_unsigned<std::size_t>(key, s); }};
}

inline Field seed_field(std::string key, std::uint64_t& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& s) { ref = parse_unsigned<std::uint64_t>(key, s); }};
}

inline Field double_field(std::string key, double& ref) {
  return {key, [&ref] { return format_double(ref); },
          [&ref, key](const std::string& s) { ref = parse_double(key, s); }};
}

template <typename Enum>
Field enum_field(std::string key, Enum& ref, std::vector<std::pair<Enum, std::string>> names) {
  return {key,
          [&ref, names] {
            for (const auto& [e, n] : names)
              if (e == ref) return n;
            return std::string("?");
          },
          [&ref, names, key](const std::string& s) {
            for (const auto& [e, n] : names) {
              if (n == s) {
                ref = e;
                return;
              }
            }
            std::string options;
            for (const auto& [e, n] : names) options += (options.empty() ? "" : "|") + n;
            throw ParseError("config key '" + key + "': expected " + options + ", got '" + s + "'");
          }};
}

}  // namespace detail

/// Everything a training run needs: model shape, optimizer settings and the
/// data source (synthetic unless `data_dir` names a folder of WAV pairs).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthSpec data;
  std::string data_dir;

  static RunConfig parse(std::string_view text) {
    RunConfig c;
    c.apply(KeyValues::parse(text));
    return c;
  }

  void apply(const KeyValues& kv) {
    auto table = fields();
    for (const auto& [key, value] : kv.entries()) {
      auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.key == key; });
      if (it == table.end()) throw ParseError("config: unknown key '" + key + "'");
      it->set(value);
    }
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    for (const auto& f : const_cast<RunConfig*>(this)->fields()) kv.set(f.key, f.get());
    return kv;
  }

  std::string serialize() const { return to_key_values().serialize(); }

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
  }

 private:
  std::vector<detail::Field> fields() {
    using namespace detail;
    std::vector<Field> f{
        size_field("model.d", model.d),
        size_field("model.heads", model.heads),
        size_field("model.n_blocks", model.n_blocks),
        size_field("model.chunk", model.chunk),
        size_field("model.hop", model.hop),
        size_field("model.encoder_kernel", model.encoder_kernel),
        size_field("model.max_positions", model.max_positions),
        size_field("model.compress_kernel", model.compress_kernel),
        size_field("model.compress_stride", model.compress_stride),
        size_field("model.norm_groups", model.norm_groups),
        enum_field("model.activation", model.activation,
                   {{Activation::gelu, "gelu"}, {Activation::relu, "relu"}}),
        double_field("model.init_std", model.init_std),
        seed_field("model.seed", model.seed),
        double_field("model.sample_rate", model.sample_rate),
        size_field("train.epochs", train.epochs),
        size_field("train.batch_size", train.batch_size),
        double_field("train.max_lr", train.max_lr),
        double_field("train.beta1", train.beta1),
        double_field("train.beta2", train.beta2),
        double_field("train.adam_eps", train.adam_eps),
        size_field("train.warmup_steps", train.warmup_steps),
        double_field("train.lr_decay", train.lr_decay),
        size_field("train.patience", train.patience),
        double_field("train.val_fraction", train.val_fraction),
        seed_field("train.seed", train.seed),
        size_field("data.n_clips", data.n_clips),
        size_field("data.length", data.length),
        double_field("data.sample_rate", data.sample_rate),
        double_field("data.snr_db", data.snr_db),
        enum_field("data.clean_kind", data.clean_kind,
                   {{CleanKind::sine, "sine"}, {CleanKind::chirp, "chirp"}, {CleanKind::tone_mix, "tone-mix"}}),
        enum_field("data.noise_kind", data.noise_kind, {{NoiseKind::white, "white"}, {NoiseKind::pink, "pink"}}),
        seed_field("data.seed", data.seed),
    };
    f.push_back({"data.dir", [this] { return data_dir; }, [this](const std::string& s) { data_dir = s; }});
    return f;
  }
};

inline bool operator==(const RunConfig& a, const RunConfig& b) { return a.serialize() == b.serialize(); }

/// Model-only view, as stored inside checkpoints.
inline std::string serialize_model_config(const ModelConfig& m) {
  RunConfig rc;
  rc.model = m;
  const KeyValues kv = rc.to_key_values();
  std::string out;
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("model.", 0) == 0) out += k + " = " + v + "\n";
  }
  return out;
}

inline ModelConfig parse_model_config(std::string_view text) {
  return RunConfig::parse(text).model;
}

}  // namespace dpatd
