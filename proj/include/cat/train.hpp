#pragma once

// Desk-scale experiment driver: synthetic audio, mixup, Adam, train/eval loops.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cat/causal.hpp"
#include "cat/dsp.hpp"
#include "cat/model.hpp"
#include "cat/random.hpp"

namespace cat {

enum class SynthClass { pure_tone = 0, chirp = 1, white_noise = 2, am_tone = 3 };

inline const char* synth_class_name(SynthClass c) {
  switch (c) {
    case SynthClass::pure_tone: return "pure-tone";
    case SynthClass::chirp: return "chirp";
    case SynthClass::white_noise: return "white-noise";
    case SynthClass::am_tone: return "am-tone";
  }
  return "?";
}

struct SynthDatasetSpec {
  std::size_t classes = 4;  // first `classes` of {pure-tone, chirp, white-noise, am-tone}
  std::size_t samples_per_class = 50;
  double duration = 1.0;
  std::uint32_t sample_rate = 32000;
  std::uint64_t seed = 7;
  double tone_min_hz = 300.0;  // base-frequency jitter range
  double tone_max_hz = 3000.0;
  double noise_floor = 0.01;  // max std-dev of additive noise on tonal classes

  void validate() const {
    if (classes < 2 || classes > 4) throw ValidationError("synth: classes must be in [2, 4]");
    if (samples_per_class == 0) throw ValidationError("synth: samples_per_class must be positive");
    if (!(duration > 0.0)) throw ValidationError("synth: duration must be positive");
    if (sample_rate == 0) throw ValidationError("synth: sample_rate must be positive");
    if (!(tone_min_hz > 0.0 && tone_min_hz < tone_max_hz && tone_max_hz < sample_rate / 4.0)) {
      throw ValidationError("synth: need 0 < tone_min_hz < tone_max_hz < sample_rate/4");
    }
    if (!(noise_floor >= 0.0)) throw ValidationError("synth: noise_floor must be non-negative");
  }
};

struct SynthSample {
  Waveform wave;
  std::size_t label = 0;
  double base_hz = 0.0;  // tone frequency, chirp start, 0 for noise
  double end_hz = 0.0;   // chirp end frequency
};

inline SynthSample synth_sample(SynthClass kind, const SynthDatasetSpec& spec, Rng& rng) {
  const auto n = static_cast<std::size_t>(std::llround(spec.duration * spec.sample_rate));
  const double sr = spec.sample_rate, two_pi = 2.0 * std::numbers::pi;
  SynthSample s;
  s.label = static_cast<std::size_t>(kind);
  s.wave.sample_rate = spec.sample_rate;
  s.wave.samples.assign(n, 0.0);
  const double amp = rng.uniform(0.3, 0.6);
  const double phase = rng.uniform(0.0, two_pi);
  const double noise = rng.uniform(0.0, spec.noise_floor);
  auto& x = s.wave.samples;
  switch (kind) {
    case SynthClass::pure_tone: {
      s.base_hz = rng.uniform(spec.tone_min_hz, spec.tone_max_hz);
      for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(two_pi * s.base_hz * i / sr + phase);
      break;
    }
    case SynthClass::chirp: {
      // Linear sweep upward by at least an octave.
      s.base_hz = rng.uniform(spec.tone_min_hz, spec.tone_max_hz / 2.0);
      s.end_hz = std::min(rng.uniform(2.0 * s.base_hz, 4.0 * s.base_hz), 0.9 * sr / 4.0);
      const double rate = (s.end_hz - s.base_hz) / spec.duration;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        x[i] = amp * std::sin(two_pi * (s.base_hz * t + 0.5 * rate * t * t) + phase);
      }
      break;
    }
    case SynthClass::white_noise: {
      const double sd = rng.uniform(0.05, 0.3);
      for (double& v : x) v = sd * rng.normal();
      break;
    }
    case SynthClass::am_tone: {
      s.base_hz = rng.uniform(spec.tone_min_hz, spec.tone_max_hz);
      const double mod_hz = rng.uniform(3.0, 8.0), depth = rng.uniform(0.7, 1.0);
      const double mod_phase = rng.uniform(0.0, two_pi);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = i / sr;
        const double env = (1.0 + depth * std::sin(two_pi * mod_hz * t + mod_phase)) / (1.0 + depth);
        x[i] = amp * env * std::sin(two_pi * s.base_hz * t + phase);
      }
      break;
    }
  }
  if (kind != SynthClass::white_noise && noise > 0.0)
    for (double& v : x) v += noise * rng.normal();
  for (double& v : x) v = std::clamp(v, -1.0, 1.0);
  return s;
}

/// Balanced synthetic clips, class-major order; fully determined by spec.seed.
inline std::vector<SynthSample> synth_dataset(const SynthDatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<SynthSample> out;
  out.reserve(spec.classes * spec.samples_per_class);
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) out.push_back(synth_sample(static_cast<SynthClass>(c), spec, rng));
  return out;
}

struct Example {
  Tensor features;  // [T × K × F × 2]
  std::size_t label = 0;
  std::string source;
};

struct Dataset {
  std::vector<Example> items;
  std::vector<std::string> class_names;

  std::size_t size() const { return items.size(); }
  std::size_t classes() const { return class_names.size(); }
};

inline Dataset featurize(const std::vector<SynthSample>& clips, const MrmfExtractor& extract, std::size_t classes) {
  Dataset d;
  for (std::size_t c = 0; c < classes; ++c) d.class_names.push_back(synth_class_name(static_cast<SynthClass>(c)));
  for (std::size_t i = 0; i < clips.size(); ++i)
    d.items.push_back({extract(clips[i].wave).values, clips[i].label, "synth-" + std::to_string(i)});
  return d;
}

/// `<root>/<class-name>/*.wav`; classes are the sorted subdirectory names.
inline Dataset load_wav_folder(const std::filesystem::path& root, const MrmfExtractor& extract) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IngestionError("dataset root is not a directory: " + root.string(), 0);
  Dataset d;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    d.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c]))
      if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) d.items.push_back({extract(load_wav(f)).values, c, f.string()});
  }
  if (d.items.empty()) throw IngestionError("no .wav files under " + root.string(), 0);
  return d;
}

inline Tensor one_hot(std::size_t label, std::size_t classes) {
  Tensor t({classes});
  t[label] = 1.0;
  return t;
}

struct Mixed {
  Tensor features;
  Tensor target;
};

/// Convex combination λ·first + (1−λ)·second of features and labels.
inline Mixed mixup(const Tensor& x1, const Tensor& y1, const Tensor& x2, const Tensor& y2, double lambda) {
  if (x1.shape() != x2.shape()) throw DimensionError("mixup: feature shapes " + shape_str(x1.shape()) + " and " + shape_str(x2.shape()));
  if (y1.shape() != y2.shape()) throw DimensionError("mixup: label shapes differ");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("mixup: lambda must lie in [0, 1]");
  Mixed m{x1, y1};
  for (std::size_t i = 0; i < m.features.size(); ++i) m.features[i] = lambda * x1[i] + (1.0 - lambda) * x2[i];
  for (std::size_t i = 0; i < m.target.size(); ++i) m.target[i] = lambda * y1[i] + (1.0 - lambda) * y2[i];
  return m;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update. Returns false (and changes nothing) when any
/// gradient entry is non-finite.
inline bool adam_step(std::vector<Parameter>& params, const std::vector<Tensor>& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (grads.size() != params.size()) throw DimensionError("adam_step: gradient count differs from parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) throw DimensionError("adam_step: gradient shape mismatch for " + params[i].name);
    if (!grads[i].all_finite()) return false;
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros(p.value.shape()));
      state.v.push_back(Tensor::zeros(p.value.shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      p[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  return true;
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  AdamConfig adam;
  double mixup_alpha = 0.5;
  LossWeights weights;
  double causal_eps = 1e-4;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw ValidationError("train.epochs must be positive");
    if (batch < 2) throw ValidationError("train.batch must be at least 2 (causal loss needs counterfactual donors)");
    if (!(adam.lr >= 0.0)) throw ValidationError("train.lr must be non-negative");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw ValidationError("train.beta1/beta2 must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw ValidationError("train.adam_eps must be positive");
    if (!(mixup_alpha > 0.0)) throw ValidationError("train.mixup_alpha must be positive");
    if (!(causal_eps > 0.0 && causal_eps < 1.0)) throw ValidationError("loss.epsilon must lie in (0, 1)");
  }
};

struct EpochReport {
  std::size_t epoch = 0;
  double l_theta = 0.0;
  double l_c = 0.0;
  double l_rs = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  double eval_map = 0.0;
  double eval_l_rs = 0.0;
  std::size_t rejected_steps = 0;
  double seconds = 0.0;
};

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Parameter gradients of one step: mixup → forward → loss → backward.
struct StepResult {
  LossBreakdown loss;
  std::vector<Tensor> grads;
  std::size_t correct = 0;
};

inline StepResult train_step(const CatModel& model, const std::vector<Tensor>& xs, const Tensor& targets,
                             const std::vector<std::size_t>& perm, const TrainConfig& cfg) {
  Tape tape;
  const auto p = model.bind(tape);
  BatchOutput out = model.forward(tape, p, xs);
  Classifier clf = [&](Var z) { return model.classify(p, z); };
  StepResult r;
  r.loss = total_loss(out.logits, targets, out.recon, xs, out.z, clf, perm, cfg.weights, cfg.causal_eps);
  if (!std::isfinite(r.loss.total)) return r;
  tape.backward(r.loss.objective);
  for (const Var& v : p) r.grads.push_back(tape.grad(v));
  const std::size_t c = targets.dim(1);
  const Tensor& logits = out.logits.value();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::span<const double> row(logits.data().data() + i * c, c), trow(targets.data().data() + i * c, c);
    if (argmax(row) == argmax(trow)) ++r.correct;
  }
  return r;
}

/// One pass over shuffled mini-batches. Batches smaller than 2 are dropped
/// when the causal term is active.
inline EpochReport train_epoch(CatModel& model, const Dataset& data, const TrainConfig& cfg, Rng& rng, AdamState& adam) {
  if (data.items.empty()) throw ContractError("train_epoch: empty dataset");
  const std::size_t C = model.config().classes;
  const auto order = rng.permutation(data.size());
  EpochReport rep;
  std::size_t batches = 0, seen = 0, correct = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
    const std::size_t n = std::min(cfg.batch, order.size() - start);
    if (n < 2 && cfg.weights.causal != 0.0) continue;
    std::vector<Tensor> xs;
    Tensor targets({n, C});
    const auto pair = rng.permutation(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Example& a = data.items[order[start + i]];
      const Example& b = data.items[order[start + pair[i]]];
      const double lambda = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha);
      Mixed m = mixup(a.features, one_hot(a.label, C), b.features, one_hot(b.label, C), lambda);
      xs.push_back(std::move(m.features));
      std::copy(m.target.data().begin(), m.target.data().end(), targets.data().begin() + static_cast<std::ptrdiff_t>(i * C));
    }
    std::vector<std::size_t> perm;
    if (cfg.weights.causal != 0.0) perm = donor_permutation(rng, n);
    StepResult r = train_step(model, xs, targets, perm, cfg);
    if (!std::isfinite(r.loss.total)) {
      throw Error("non-finite loss in batch " + std::to_string(batches) + ": l_theta=" + std::to_string(r.loss.l_theta) +
                  " l_c=" + std::to_string(r.loss.l_c) + " l_rs=" + std::to_string(r.loss.l_rs));
    }
    if (!adam_step(model.parameters(), r.grads, adam, cfg.adam)) ++rep.rejected_steps;
    rep.l_theta += r.loss.l_theta;
    rep.l_c += r.loss.l_c;
    rep.l_rs += r.loss.l_rs;
    rep.total += r.loss.total;
    correct += r.correct;
    seen += n;
    ++batches;
  }
  if (batches > 0) {
    const double b = static_cast<double>(batches);
    rep.l_theta /= b;
    rep.l_c /= b;
    rep.l_rs /= b;
    rep.total /= b;
    rep.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  }
  return rep;
}

/// Average precision of one class from scores: mean of precision@k over the
/// ranks k of the relevant items (scores sorted descending, ties by index).
inline double average_precision(std::span<const double> scores, const std::vector<bool>& relevant) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0, acc = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (!relevant[idx[k]]) continue;
    hits += 1.0;
    acc += hits / static_cast<double>(k + 1);
  }
  return hits > 0.0 ? acc / hits : 0.0;
}

struct Metrics {
  double accuracy = 0.0;
  double map = 0.0;
  double l_rs = 0.0;
  std::vector<std::size_t> skipped_classes;  // absent from the labels, left out of mAP
};

/// Top-1 accuracy and one-vs-rest mAP from a score matrix [n × C].
inline Metrics score_metrics(const Tensor& scores, const std::vector<std::size_t>& labels) {
  const std::size_t n = scores.dim(0), C = scores.dim(1);
  if (labels.size() != n) throw DimensionError("score_metrics: label count differs from score rows");
  if (n == 0) throw ContractError("score_metrics: empty dataset");
  Metrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (argmax(std::span<const double>(scores.data().data() + i * C, C)) == labels[i]) ++correct;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  double ap_sum = 0.0;
  std::size_t counted = 0;
  std::vector<double> col(n);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<bool> rel(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      rel[i] = labels[i] == c;
      any = any || rel[i];
      col[i] = scores[i * C + c];
    }
    if (!any) {
      m.skipped_classes.push_back(c);
      continue;
    }
    ap_sum += average_precision(col, rel);
    ++counted;
  }
  m.map = counted ? ap_sum / static_cast<double>(counted) : 0.0;
  return m;
}

/// Class probabilities for every example, [n × C], plus the reconstruction loss.
inline Metrics evaluate(const CatModel& model, const Dataset& data, std::size_t batch = 16) {
  if (data.items.empty()) throw ContractError("evaluate: empty dataset");
  const std::size_t n = data.size(), C = model.config().classes;
  Tensor probs({n, C});
  std::vector<std::size_t> labels;
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t m = std::min(batch, n - start);
    Tape tape;
    std::vector<Var> p;
    for (const auto& prm : model.parameters()) p.push_back(tape.constant(prm.value));
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < m; ++i) xs.push_back(data.items[start + i].features);
    BatchOutput out = model.forward(tape, p, xs);
    const Tensor pr = softmax(out.logits.value(), 1);
    std::copy(pr.data().begin(), pr.data().end(), probs.data().begin() + static_cast<std::ptrdiff_t>(start * C));
    for (std::size_t i = 0; i < m; ++i) {
      const Tensor& r = out.recon[i].value();
      for (std::size_t k = 0; k < r.size(); ++k) {
        const double d = r[k] - xs[i][k];
        sq += d * d;
      }
      count += r.size();
    }
  }
  for (const auto& e : data.items) labels.push_back(e.label);
  Metrics met = score_metrics(probs, labels);
  met.l_rs = std::sqrt(sq / static_cast<double>(count));
  return met;
}

/// Full training run; `on_epoch` sees every report as soon as it is complete.
inline std::vector<EpochReport> train(CatModel& model, const Dataset& train_set, const Dataset* eval_set,
                                      const TrainConfig& cfg,
                                      const std::function<void(const EpochReport&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.classes() != model.config().classes) {
    throw ValidationError("dataset has " + std::to_string(train_set.classes()) + " classes, model.classes is " +
                          std::to_string(model.config().classes));
  }
  Rng rng(cfg.seed);
  AdamState adam;
  std::vector<EpochReport> reports;
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochReport rep = train_epoch(model, train_set, cfg, rng, adam);
    rep.epoch = e;
    if (eval_set) {
      const Metrics m = evaluate(model, *eval_set);
      rep.eval_accuracy = m.accuracy;
      rep.eval_map = m.map;
      rep.eval_l_rs = m.l_rs;
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    reports.push_back(rep);
    if (on_epoch) on_epoch(rep);
  }
  return reports;
}

}  // namespace cat
