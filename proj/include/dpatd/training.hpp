// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dpatd/model.hpp"

namespace dpatd {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kSdrClampDb = 100.0;

/// 10·log₁₀(‖x‖² / ‖x − x̂‖²), clamped to ±100 dB.
inline double sdr(std::span<const double> clean, std::span<const double> estimate) {
  if (clean.size() != estimate.size()) {
    throw DimensionError("sdr: length " + std::to_string(clean.size()) + " vs " +
                         std::to_string(estimate.size()));
  }
  double signal = 0.0, error = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    signal += clean[i] * clean[i];
    const double e = clean[i] - estimate[i];
    error += e * e;
  }
  if (signal == 0.0) throw MetricError("sdr: clean signal is silent");
  if (error == 0.0) return kSdrClampDb;
  return std::clamp(10.0 * std::log10(signal / error), -kSdrClampDb, kSdrClampDb);
}

inline double mse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("mse: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct AudioPair {
  std::vector<double> noisy;
  std::vector<double> clean;
};

struct PairedDataset {
  std::vector<AudioPair> pairs;
  double sample_rate = 16000.0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Noisy and clean clips stacked to [B × 1 × L], zero-padded to the longest.
struct PairedBatch {
  Tensor noisy;
  Tensor clean;
  std::vector<std::size_t> lengths;
};

inline PairedBatch make_batch(const PairedDataset& data, std::span<const std::size_t> indices) {
  std::size_t longest = 0;
  for (auto i : indices) longest = std::max(longest, data.pairs.at(i).noisy.size());
  if (longest == 0) throw InputError("make_batch: empty clips");
  const std::size_t B = indices.size();
  std::vector<double> noisy(B * longest, 0.0), clean(B * longest, 0.0);
  PairedBatch batch;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& p = data.pairs[indices[b]];
    if (p.noisy.size() != p.clean.size()) throw InputError("make_batch: pair length mismatch");
    std::copy(p.noisy.begin(), p.noisy.end(), noisy.begin() + static_cast<std::ptrdiff_t>(b * longest));
    std::copy(p.clean.begin(), p.clean.end(), clean.begin() + static_cast<std::ptrdiff_t>(b * longest));
    batch.lengths.push_back(p.noisy.size());
  }
  batch.noisy = Tensor({B, 1, longest}, std::move(noisy));
  batch.clean = Tensor({B, 1, longest}, std::move(clean));
  return batch;
}

enum class CleanKind { sine, chirp, tone_mix };
enum class NoiseKind { white, pink };

struct SynthSpec {
  std::size_t n_clips = 200;
  std::size_t length = 2000;
  double sample_rate = 16000.0;
  double snr_db = 0.0;  // +inf: no noise
  CleanKind clean_kind = CleanKind::tone_mix;
  NoiseKind noise_kind = NoiseKind::white;
  std::uint64_t seed = 7;

  void validate() const {
    if (n_clips == 0) throw ConfigError("synth: n_clips must be >= 1");
    if (length == 0) throw ConfigError("synth: length must be >= 1");
    if (!(sample_rate > 0.0)) throw ConfigError("synth: sample_rate must be positive");
    if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity()) {
      throw ConfigError("synth: snr_db must be finite or +inf");
    }
  }
};

namespace detail {

inline std::vector<double> clean_signal(const SynthSpec& spec, Rng& rng) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double fs = spec.sample_rate;
  std::vector<double> x(spec.length, 0.0);
  switch (spec.clean_kind) {
    case CleanKind::sine: {
      const double f = rng.uniform(100.0, 1000.0), phase = rng.uniform(0.0, two_pi);
      for (std::size_t t = 0; t < x.size(); ++t) x[t] = std::sin(two_pi * f * t / fs + phase);
      break;
    }
    case CleanKind::chirp: {
      const double f0 = rng.uniform(100.0, 500.0), f1 = rng.uniform(1000.0, 3000.0);
      const double duration = static_cast<double>(x.size()) / fs;
      const double phase = rng.uniform(0.0, two_pi);
      for (std::size_t t = 0; t < x.size(); ++t) {
        const double s = t / fs;
        x[t] = std::sin(two_pi * (f0 * s + 0.5 * (f1 - f0) / duration * s * s) + phase);
      }
      break;
    }
    case CleanKind::tone_mix: {
      for (int k = 0; k < 3; ++k) {
        const double f = rng.uniform(80.0, 1200.0);
        const double a = rng.uniform(0.3, 1.0);
        const double phase = rng.uniform(0.0, two_pi);
        for (std::size_t t = 0; t < x.size(); ++t) x[t] += a * std::sin(two_pi * f * t / fs + phase);
      }
      break;
    }
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    for (auto& v : x) v *= 0.5 / peak;
  }
  return x;
}

inline std::vector<double> noise_signal(const SynthSpec& spec, Rng& rng) {
  std::vector<double> n(spec.length);
  if (spec.noise_kind == NoiseKind::white) {
    for (auto& v : n) v = rng.normal();
    return n;
  }
  // Paul Kellet's refined pink filter.
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  for (auto& v : n) {
    const double w = rng.normal();
    b0 = 0.99886 * b0 + w * 0.0555179;
    b1 = 0.99332 * b1 + w * 0.0750759;
    b2 = 0.96900 * b2 + w * 0.1538520;
    b3 = 0.86650 * b3 + w * 0.3104856;
    b4 = 0.55000 * b4 + w * 0.5329522;
    b5 = -0.7616 * b5 - w * 0.0168980;
    v = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
    b6 = w * 0.115926;
  }
  return n;
}

}  // namespace detail

/// Pairs y = x + ε with ε scaled so 10·log₁₀(‖x‖²/‖ε‖²) = snr_db. A pair
/// whose peak would exceed 1 is scaled down as a whole, which keeps the SNR.
inline PairedDataset make_synthetic_dataset(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  PairedDataset data;
  data.sample_rate = spec.sample_rate;
  for (std::size_t c = 0; c < spec.n_clips; ++c) {
    AudioPair pair;
    pair.clean = detail::clean_signal(spec, rng);
    std::vector<double> noise = detail::noise_signal(spec, rng);
    pair.noisy = pair.clean;
    if (std::isfinite(spec.snr_db)) {
      double ps = 0.0, pn = 0.0;
      for (std::size_t t = 0; t < noise.size(); ++t) {
        ps += pair.clean[t] * pair.clean[t];
        pn += noise[t] * noise[t];
      }
      const double gain = pn > 0.0 ? std::sqrt(ps / pn / std::pow(10.0, spec.snr_db / 10.0)) : 0.0;
      double peak = 0.0;
      for (std::size_t t = 0; t < noise.size(); ++t) {
        pair.noisy[t] = pair.clean[t] + gain * noise[t];
        peak = std::max(peak, std::abs(pair.noisy[t]));
      }
      if (peak > 1.0) {
        const double s = 0.999 / peak;
        for (std::size_t t = 0; t < noise.size(); ++t) {
          pair.clean[t] *= s;
          pair.noisy[t] = pair.clean[t] + s * gain * noise[t];
        }
      }
    }
    data.pairs.push_back(std::move(pair));
  }
  return data;
}

/// Seeded split; the first round(fraction·n) shuffled clips go to validation.
inline std::pair<PairedDataset, PairedDataset> split_validation(const PairedDataset& data, double fraction,
                                                                std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  PairedDataset train, val;
  train.sample_rate = val.sample_rate = data.sample_rate;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? val : train).pairs.push_back(data.pairs[order[i]]);
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double max_lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 100;
  double lr_decay = 0.5;
  std::size_t patience = 2;
  double val_fraction = 0.1;
  std::uint64_t seed = 11;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(max_lr > 0.0)) throw ConfigError("max_lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  }
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient; a parameter without a gradient is treated as having zero.
inline void adam_step(std::span<Tensor> params, AdamState& state, double lr, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ConfigError("adam: state does not match parameter list");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel()) throw ConfigError("adam: state shape mismatch");
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? p.grad()[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.adam_eps);
    }
  }
}

/// Warmup part of the schedule: max_lr·step/warmup until warmup, then max_lr.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.max_lr;
  return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

/// Linear warmup followed by halving (lr_decay) whenever the monitored loss
/// fails to improve for `patience` consecutive epochs.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(const TrainConfig& cfg) : cfg_(cfg) {}

  double lr(std::size_t step) const { return lr_schedule(step, cfg_) * factor_; }

  void end_epoch(double loss) {
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
      return;
    }
    if (++stale_ >= cfg_.patience) {
      factor_ *= cfg_.lr_decay;
      stale_ = 0;
    }
  }

  double factor() const { return factor_; }

 private:
  TrainConfig cfg_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  double factor_ = 1.0;
};

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double mse = 0.0;
  double sdr_db = 0.0;        // mean over clips, model output
  double input_sdr_db = 0.0;  // mean over clips, noisy input
};

inline EvalMetrics evaluate(const ModelWeights& w, const ModelConfig& cfg, const PairedDataset& data) {
  if (data.empty()) throw InputError("evaluate: empty dataset");
  NoGradGuard guard;
  EvalMetrics m;
  double sq = 0.0;
  std::size_t count = 0;
  for (const auto& p : data.pairs) {
    Tensor est = forward(std::span<const double>(p.noisy), w, cfg);
    for (std::size_t i = 0; i < p.clean.size(); ++i) {
      const double e = est.data()[i] - p.clean[i];
      sq += e * e;
    }
    count += p.clean.size();
    m.sdr_db += sdr(p.clean, est.data());
    m.input_sdr_db += sdr(p.clean, p.noisy);
  }
  const auto n = static_cast<double>(data.size());
  m.mse = sq / static_cast<double>(count);
  m.sdr_db /= n;
  m.input_sdr_db /= n;
  return m;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double val_sdr_db = 0.0;
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochMetrics> epochs;
};

inline std::vector<Tensor> parameter_list(const ModelWeights& w) {
  std::vector<Tensor> out;
  for (auto& [name, t] : w.parameters()) out.push_back(t);
  return out;
}

/// Mini-batch training on MSE. Each epoch visits the training clips in a
/// seeded random order; each step pads its batch to the longest clip,
/// accumulates the batch-mean loss gradient clip by clip, and applies one
/// Adam update. Validation metrics (when a validation set is given) drive the
/// plateau schedule; otherwise the training loss does.
inline TrainHistory train(ModelWeights& weights, const ModelConfig& model_cfg, const PairedDataset& train_set,
                          const PairedDataset& val_set, const TrainConfig& cfg, AdamState* state = nullptr,
                          const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw InputError("train: empty dataset");
  AdamState local_state;
  AdamState& adam = state ? *state : local_state;
  std::vector<Tensor> params = parameter_list(weights);
  PlateauSchedule schedule(cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainHistory history;
  std::size_t step = static_cast<std::size_t>(adam.t);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    double last_lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      PairedBatch batch = make_batch(train_set, idx);
      const std::size_t B = idx.size(), L = batch.noisy.dim(2);
      for (auto& p : params) p.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const auto* noisy = batch.noisy.data().data() + b * L;
        const auto* clean = batch.clean.data().data() + b * L;
        Tensor x({1, L}, std::vector<double>(noisy, noisy + L));
        Tensor target({1, L}, std::vector<double>(clean, clean + L));
        Tensor loss = scale(mse_loss(forward(x, weights, model_cfg), target), 1.0 / static_cast<double>(B));
        batch_loss += loss.item();
        loss.backward();
      }
      ++step;
      last_lr = schedule.lr(step);
      adam_step(params, adam, last_lr, cfg);
      loss_sum += batch_loss * static_cast<double>(B);
      loss_count += B;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_mse = loss_sum / static_cast<double>(loss_count);
    m.lr = last_lr;
    if (!val_set.empty()) {
      const EvalMetrics v = evaluate(weights, model_cfg, val_set);
      m.val_mse = v.mse;
      m.val_sdr_db = v.sdr_db;
      schedule.end_epoch(v.mse);
    } else {
      m.val_mse = std::numeric_limits<double>::quiet_NaN();
      m.val_sdr_db = std::numeric_limits<double>::quiet_NaN();
      schedule.end_epoch(m.train_mse);
    }
    history.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  for (auto& p : params) p.zero_grad();
  return history;
}

inline void write_metrics_header(std::ostream& os) { os << "epoch,train_mse,val_mse,val_sdr_db,lr\n"; }

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  const auto old = os.precision(10);
  os << m.epoch << ',' << m.train_mse << ',' << m.val_mse << ',' << m.val_sdr_db << ',' << m.lr << '\n';
  os.precision(old);
}

}  // namespace dpatd
