// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpatd/checkpoint.hpp"
#include "dpatd/gradsuite.hpp"

namespace dpatd {

namespace fs = std::filesystem;

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RunConfig load_run_config(const fs::path& path) {
  try {
    RunConfig rc = RunConfig::parse(read_text_file(path));
    rc.validate();
    return rc;
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Pairs dir/clean/<name>.wav with dir/noisy/<name>.wav, sorted by name.
inline PairedDataset load_wav_pairs(const fs::path& dir, double expected_rate) {
  const fs::path clean_dir = dir / "clean", noisy_dir = dir / "noisy";
  if (!fs::is_directory(clean_dir) || !fs::is_directory(noisy_dir)) {
    throw InputError(dir.string() + ": expected clean/ and noisy/ subdirectories");
  }
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(clean_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") names.push_back(e.path().filename());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw InputError(clean_dir.string() + ": no .wav files");
  PairedDataset data;
  data.sample_rate = expected_rate;
  for (const auto& name : names) {
    AudioClip clean = read_wav(clean_dir / name);
    AudioClip noisy = read_wav(noisy_dir / name);
    if (clean.sample_rate != expected_rate || noisy.sample_rate != expected_rate) {
      throw InputError(name.string() + ": sample rate differs from " + detail::format_double(expected_rate) + " Hz");
    }
    if (clean.samples.size() != noisy.samples.size()) {
      throw InputError(name.string() + ": clean and noisy lengths differ");
    }
    data.pairs.push_back({std::move(noisy.samples), std::move(clean.samples)});
  }
  return data;
}

inline PairedDataset load_dataset(const RunConfig& rc) {
  if (!rc.data_dir.empty()) return load_wav_pairs(rc.data_dir, rc.model.sample_rate);
  if (rc.data.sample_rate != rc.model.sample_rate) {
    throw ConfigError("data.sample_rate differs from model.sample_rate");
  }
  return make_synthetic_dataset(rc.data);
}

struct RunResult {
  ModelWeights weights;
  AdamState optimizer;
  TrainHistory history;
  EvalMetrics validation;
};

/// Full training run as described by a RunConfig. Validation metrics are
/// computed on the held-out split, or on the training set when the split is
/// empty.
inline RunResult run_training(const RunConfig& rc, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  rc.validate();
  const PairedDataset data = load_dataset(rc);
  auto [train_set, val_set] = split_validation(data, rc.train.val_fraction, rc.train.seed);
  RunResult r{init_weights(rc.model, rc.model.seed), {}, {}, {}};
  r.history = train(r.weights, rc.model, train_set, val_set, rc.train, &r.optimizer, on_epoch);
  r.validation = evaluate(r.weights, rc.model, val_set.empty() ? train_set : val_set);
  return r;
}

namespace detail {

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream ss;
  ss << std::setprecision(digits) << v;
  return ss.str();
}

inline std::vector<std::size_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(parse_unsigned<std::size_t>(what, item));
  }
  return out;
}

inline AudioClip to_clip(const Tensor& t, double rate) {
  AudioClip c;
  c.samples.assign(t.data().begin(), t.data().end());
  c.sample_rate = static_cast<std::uint32_t>(std::lround(rate));
  return c;
}

inline void require_rate(const AudioClip& clip, const ModelConfig& cfg, const std::string& what) {
  if (std::abs(clip.sample_rate - cfg.sample_rate) > 0.0) {
    throw InputError(what + ": sample rate " + std::to_string(clip.sample_rate) + " Hz, model expects " +
                     format_double(cfg.sample_rate) + " Hz (no resampling)");
  }
}

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline int cmd_train(const std::string& config, const std::string& out_path, const std::string& metrics,
                     bool quiet, std::ostream& out) {
  const RunConfig rc = load_run_config(config);
  std::ofstream csv;
  if (!metrics.empty()) {
    csv.open(metrics, std::ios::trunc);
    if (!csv) throw InputError("cannot write " + metrics);
    write_metrics_header(csv);
  }
  RunResult r = run_training(rc, [&](const EpochMetrics& m) {
    if (csv.is_open()) {
      write_metrics_row(csv, m);
      csv.flush();
    }
    if (!quiet) {
      out << "epoch " << m.epoch << " train_mse=" << fixed(m.train_mse) << " val_mse=" << fixed(m.val_mse)
          << " val_sdr_db=" << fixed(m.val_sdr_db, 4) << " lr=" << fixed(m.lr) << '\n';
      out.flush();
    }
  });
  save_checkpoint(out_path, rc.model, r.weights, &r.optimizer);
  out << "saved " << out_path << " (" << r.weights.parameter_count() << " parameters)\n";
  return 0;
}

inline int cmd_denoise(const std::string& ckpt, const std::string& in_path, const std::string& out_path,
                       std::ostream& out) {
  const LoadedModel m = load_model(ckpt);
  const AudioClip noisy = read_wav(in_path);
  require_rate(noisy, m.config, in_path);
  NoGradGuard guard;
  const Tensor est = forward(std::span<const double>(noisy.samples), m.weights, m.config);
  write_wav(to_clip(est, m.config.sample_rate), out_path);
  out << "wrote " << out_path << " (" << est.numel() << " samples)\n";
  return 0;
}

inline int cmd_eval(const std::string& ckpt, const std::string& clean_path, const std::string& noisy_path,
                    std::ostream& out) {
  const LoadedModel m = load_model(ckpt);
  const AudioClip clean = read_wav(clean_path);
  const AudioClip noisy = read_wav(noisy_path);
  require_rate(clean, m.config, clean_path);
  require_rate(noisy, m.config, noisy_path);
  if (clean.samples.size() != noisy.samples.size()) {
    throw InputError("eval: clean has " + std::to_string(clean.samples.size()) + " samples, noisy has " +
                     std::to_string(noisy.samples.size()));
  }
  NoGradGuard guard;
  const Tensor est = forward(std::span<const double>(noisy.samples), m.weights, m.config);
  out << "mse=" << fixed(mse(clean.samples, est.data()), 8) << " sdr_db=" << fixed(sdr(clean.samples, est.data()), 5)
      << " input_sdr_db=" << fixed(sdr(clean.samples, noisy.samples), 5) << '\n';
  return 0;
}

inline int cmd_gradcheck(bool full, std::size_t instances, std::ostream& out) {
  constexpr double tolerance = 1e-4;
  bool ok = true;
  const auto start = std::chrono::steady_clock::now();
  run_gradient_suite(full, instances, [&](const GradSuiteResult& r) {
    const bool pass = r.max_rel_error < tolerance;
    ok = ok && pass;
    out << std::left << std::setw(24) << r.name << " max_rel_error=" << std::setw(12) << fixed(r.max_rel_error, 3)
        << " coords=" << r.coords << (pass ? "" : "  FAIL") << '\n';
    out.flush();
  });
  out << (ok ? "all" : "not all") << " checks below " << tolerance << " (" << fixed(elapsed_ms(start) / 1000.0, 3)
      << " s)\n";
  return ok ? 0 : 1;
}

/// Counts and times attention logits with and without key/value compression.
inline int cmd_bench_attn(std::size_t len, std::size_t d, std::size_t heads, std::size_t repeat, std::ostream& out) {
  if (len == 0) throw ConfigError("bench-attn: --len must be >= 1");
  const AttentionConfig cfg{d, heads, 3, 3};
  cfg.validate();
  Rng rng(5);
  const AttentionWeights w = AttentionWeights::init(cfg, len, rng, 0.1);
  const Tensor y = randn({1, len, d}, rng);
  NoGradGuard guard;
  const HeadProjections p = project_heads(y, w, cfg);
  const std::size_t lc = cfg.compressed_length(len);
  const std::size_t full_count = heads * len * len, compressed_count = heads * len * lc;

  auto time_it = [&](auto&& fn) {
    fn();
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < repeat; ++i) fn();
    return elapsed_ms(start) / static_cast<double>(std::max<std::size_t>(repeat, 1));
  };
  const double full_ms = time_it([&] { explainable_attention(p.query, p.key, p.value, w.bias); });
  const double compressed_ms = time_it([&] {
    auto [k, v] = compress_kv(p.key, p.value, w, cfg);
    explainable_attention(p.query, k, v, w.bias);
  });
  out << "length=" << len << " heads=" << heads << " compressed_length=" << lc << '\n'
      << "full_logits=" << full_count << " compressed_logits=" << compressed_count
      << " ratio=" << fixed(static_cast<double>(compressed_count) / static_cast<double>(full_count), 4) << '\n'
      << "full_ms=" << fixed(full_ms, 4) << " compressed_ms=" << fixed(compressed_ms, 4) << '\n';
  return 0;
}

inline int cmd_synth(const std::string& spec_path, const std::string& out_dir, std::ostream& out) {
  const RunConfig rc = RunConfig::parse(read_text_file(spec_path));
  rc.data.validate();
  if (rc.data.sample_rate != std::floor(rc.data.sample_rate)) {
    throw ConfigError("synth: WAV output needs an integer sample rate");
  }
  const PairedDataset data = make_synthetic_dataset(rc.data);
  const fs::path root(out_dir);
  fs::create_directories(root / "clean");
  fs::create_directories(root / "noisy");
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "clip_" << std::setw(4) << std::setfill('0') << i << ".wav";
    const auto rate = static_cast<std::uint32_t>(rc.data.sample_rate);
    write_wav(AudioClip{data.pairs[i].clean, rate}, root / "clean" / name.str());
    write_wav(AudioClip{data.pairs[i].noisy, rate}, root / "noisy" / name.str());
  }
  out << "wrote " << data.size() << " pairs to " << root.string() << '\n';
  return 0;
}

/// One-axis sweeps over head count and chunk length around a base config.
inline int cmd_ablate(const std::string& config, const std::string& heads_list, const std::string& chunks_list,
                      std::size_t epochs, const std::string& csv_path, std::ostream& out) {
  RunConfig base = load_run_config(config);
  if (epochs) base.train.epochs = epochs;
  const auto heads = parse_list(heads_list, "--heads");
  const auto chunks = parse_list(chunks_list, "--chunks");
  std::vector<std::pair<std::string, RunConfig>> runs;
  for (auto h : heads) {
    RunConfig rc = base;
    rc.model.heads = h;
    runs.emplace_back("heads," + std::to_string(h), rc);
  }
  for (auto k : chunks) {
    RunConfig rc = base;
    rc.model.chunk = k;
    runs.emplace_back("chunk," + std::to_string(k), rc);
  }
  if (runs.empty()) throw ConfigError("ablate: nothing to sweep (give --heads and/or --chunks)");
  for (const auto& [label, rc] : runs) {
    try {
      rc.validate();
    } catch (const Error& e) {
      throw ConfigError("ablate " + label + ": " + e.what());
    }
  }
  std::ostringstream table;
  table << "axis,value,parameters,val_mse,val_sdr_db,input_sdr_db\n";
  out << "axis,value,parameters,val_mse,val_sdr_db,input_sdr_db\n";
  for (const auto& [label, rc] : runs) {
    const RunResult r = run_training(rc);
    std::ostringstream row;
    row << label << ',' << r.weights.parameter_count() << ',' << fixed(r.validation.mse, 8) << ','
        << fixed(r.validation.sdr_db, 5) << ',' << fixed(r.validation.input_sdr_db, 5) << '\n';
    table << row.str();
    out << row.str();
    out.flush();
  }
  if (!csv_path.empty()) write_file_atomic(csv_path, table.str());
  return 0;
}

}  // namespace detail

/// Parses and runs one subcommand. Returns 0 on success; otherwise writes a
/// one-line diagnostic to `err` and returns nonzero (2 for usage errors).
inline int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Time-domain audio denoiser: training, inference and diagnostics", "dpatd"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config, out_path, metrics, ckpt, in_path, clean_path, noisy_path, spec_path, out_dir;
  std::string heads_list, chunks_list;
  bool quiet = false, full = false;
  std::size_t len = 0, d = 32, heads = 4, repeat = 20, instances = 10, epochs = 0;

  auto* train = app.add_subcommand("train", "Train a model from a config file and save a checkpoint");
  train->add_option("--config", config, "Run configuration (key = value)")->required();
  train->add_option("--out", out_path, "Checkpoint to write")->required();
  train->add_option("--metrics", metrics, "Per-epoch metrics CSV");
  train->add_flag("--quiet", quiet, "Suppress per-epoch lines");

  auto* denoise = app.add_subcommand("denoise", "Denoise one WAV file");
  denoise->add_option("--ckpt", ckpt, "Checkpoint")->required();
  denoise->add_option("--in", in_path, "Noisy input WAV")->required();
  denoise->add_option("--out", out_path, "Output WAV")->required();

  auto* eval = app.add_subcommand("eval", "Report MSE and SDR of the model on one clean/noisy pair");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--clean", clean_path, "Clean reference WAV")->required();
  eval->add_option("--noisy", noisy_path, "Noisy input WAV")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_flag("--full", full, "Check every coordinate of the whole-model loss");
  gradcheck->add_option("--instances", instances, "Random instances per op")->check(CLI::PositiveNumber);

  auto* bench = app.add_subcommand("bench-attn", "Compare full and compressed attention logits");
  bench->add_option("--len", len, "Sequence length")->required()->check(CLI::PositiveNumber);
  bench->add_option("--d", d, "Model width");
  bench->add_option("--heads", heads, "Attention heads");
  bench->add_option("--repeat", repeat, "Timing repetitions");

  auto* synth = app.add_subcommand("synth", "Write a synthetic clean/noisy WAV corpus");
  synth->add_option("--spec", spec_path, "Config file with data.* keys")->required();
  synth->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Sweep head count and chunk length, reporting MSE and SDR");
  ablate->add_option("--config", config, "Base run configuration")->required();
  ablate->add_option("--heads", heads_list, "Comma-separated head counts, e.g. 6,8,12,16");
  ablate->add_option("--chunks", chunks_list, "Comma-separated chunk lengths, e.g. 500,1000,2000");
  ablate->add_option("--epochs", epochs, "Override train.epochs");
  ablate->add_option("--csv", out_path, "Write the result table here");

  std::vector<const char*> argv{"dpatd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dpatd: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train) return detail::cmd_train(config, out_path, metrics, quiet, out);
    if (*denoise) return detail::cmd_denoise(ckpt, in_path, out_path, out);
    if (*eval) return detail::cmd_eval(ckpt, clean_path, noisy_path, out);
    if (*gradcheck) return detail::cmd_gradcheck(full, instances, out);
    if (*bench) return detail::cmd_bench_attn(len, d, heads, repeat, out);
    if (*synth) return detail::cmd_synth(spec_path, out_dir, out);
    if (*ablate) return detail::cmd_ablate(config, heads_list, chunks_list, epochs, out_path, out);
  } catch (const std::exception& e) {
    err << "dpatd: error: " << e.what() << '\n';
    return 1;
  } catch (...) {
    err << "dpatd: error: unknown failure\n";
    return 1;
  }
  err << "dpatd: no subcommand\n";
  return 2;
}

}  // namespace dpatd
