#pragma once

// Flat key = value run configuration. Every key has a default; unknown keys
// are rejected.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cat/dsp.hpp"
#include "cat/model.hpp"
#include "cat/train.hpp"

namespace cat {

struct ConfigKey {
  const char* key;
  const char* value;
  const char* doc;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"dsp.sample_rate", "32000", "working sample rate in Hz; inputs are resampled to it"},
      {"dsp.windows", "256,512,1024", "STFT window sizes (powers of two), one resolution each"},
      {"dsp.hop", "320", "STFT hop in samples"},
      {"dsp.mel_bands", "64", "frequency bands F for both channels"},
      {"dsp.f_min", "50", "lowest mel filter edge in Hz"},
      {"dsp.f_max", "14000", "highest mel filter edge in Hz"},
      {"model.M", "32", "embedding width"},
      {"model.heads", "4", "attention heads (even; half per stream)"},
      {"model.layers", "2", "transformer blocks"},
      {"model.kernel", "global", "attention kernel: global | local"},
      {"model.window_len", "0", "local kernel window in frames"},
      {"model.classes", "4", "number of classes"},
      {"model.time_embed_dim", "32", "width of the temporal sinusoid"},
      {"model.ffn_mult", "4", "FFN hidden width as a multiple of M"},
      {"loss.lambda_theta", "1", "weight of the cross-entropy term"},
      {"loss.lambda_c", "1", "weight of the causal term"},
      {"loss.lambda_rs", "1", "weight of the reconstruction term"},
      {"loss.epsilon", "1e-4", "lower clamp of the PNS estimates"},
      {"train.epochs", "30", "passes over the training set"},
      {"train.batch", "16", "mini-batch size (>= 2 when loss.lambda_c > 0)"},
      {"train.lr", "1e-3", "Adam learning rate"},
      {"train.beta1", "0.9", "Adam first-moment decay"},
      {"train.beta2", "0.999", "Adam second-moment decay"},
      {"train.adam_eps", "1e-8", "Adam denominator epsilon"},
      {"train.mixup_alpha", "0.5", "mixup Beta(alpha, alpha) parameter"},
      {"train.seed", "1", "seed for init, shuffling, mixup and donors"},
      {"data.path", "", "WAV folder <root>/<class>/*.wav (empty: synthetic)"},
      {"data.train_per_class", "50", "synthetic training clips per class"},
      {"data.test_per_class", "20", "synthetic test clips per class"},
      {"data.duration", "1.0", "synthetic clip length in seconds"},
      {"data.seed", "7", "synthetic data seed (test split uses seed + 1)"},
      {"data.noise_floor", "0.01", "max additive noise std-dev on tonal synthetic classes"},
      {"gradcheck.frames", "6", "frames T of the gradient-check input"},
      {"gradcheck.batch", "2", "batch size of the gradient-check objective"},
      {"gradcheck.h", "1e-5", "central-difference step"},
      {"gradcheck.tol", "1e-3", "relative error tolerance"},
      {"gradcheck.seed", "3", "seed for the gradient-check model and input"},
  };
  return schema;
}

class CliConfig {
 public:
  CliConfig() {
    for (const auto& k : config_schema()) values_[k.key] = k.value;
  }

  static CliConfig parse(const std::string& text, const std::string& origin = "config") {
    CliConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ValidationError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
  }

  static CliConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IngestionError("cannot open config " + path.string(), 0);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
    return it->second;
  }

  double number(const std::string& key) const {
    const std::string& s = get(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ValidationError(key + ": '" + s + "' is not a number");
    return v;
  }

  std::size_t count(const std::string& key) const { return parse_count(key, get(key)); }

  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_count(key, trim(item)));
    return out;
  }

  DspConfig dsp() const {
    DspConfig d;
    d.sample_rate = static_cast<std::uint32_t>(count("dsp.sample_rate"));
    d.windows = counts("dsp.windows");
    d.hop = count("dsp.hop");
    d.mel_bands = count("dsp.mel_bands");
    d.f_min = number("dsp.f_min");
    d.f_max = number("dsp.f_max");
    d.validate();
    return d;
  }

  /// Model shape; K and F follow the dsp section, T the data.
  ModelConfig model(std::size_t frames) const {
    ModelConfig m;
    m.frames = frames;
    m.resolutions = counts("dsp.windows").size();
    m.bands = count("dsp.mel_bands");
    m.width = count("model.M");
    m.heads = count("model.heads");
    m.layers = count("model.layers");
    const std::string& k = get("model.kernel");
    if (k == "global") {
      m.kernel = AttentionKernel::global;
    } else if (k == "local") {
      m.kernel = AttentionKernel::local;
    } else {
      throw ValidationError("model.kernel must be 'global' or 'local', got '" + k + "'");
    }
    m.window_len = count("model.window_len");
    m.classes = count("model.classes");
    m.time_embed_dim = count("model.time_embed_dim");
    m.ffn_mult = count("model.ffn_mult");
    m.validate();
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.epochs = count("train.epochs");
    t.batch = count("train.batch");
    t.adam.lr = number("train.lr");
    t.adam.beta1 = number("train.beta1");
    t.adam.beta2 = number("train.beta2");
    t.adam.eps = number("train.adam_eps");
    t.mixup_alpha = number("train.mixup_alpha");
    t.weights.theta = number("loss.lambda_theta");
    t.weights.causal = number("loss.lambda_c");
    t.weights.recon = number("loss.lambda_rs");
    t.causal_eps = number("loss.epsilon");
    t.seed = count("train.seed");
    t.validate();
    return t;
  }

  SynthDatasetSpec synth(bool test_split) const {
    SynthDatasetSpec s;
    s.classes = count("model.classes");
    s.samples_per_class = count(test_split ? "data.test_per_class" : "data.train_per_class");
    s.duration = number("data.duration");
    s.sample_rate = static_cast<std::uint32_t>(count("dsp.sample_rate"));
    s.seed = count("data.seed") + (test_split ? 1 : 0);
    s.noise_floor = number("data.noise_floor");
    s.validate();
    return s;
  }

  /// Every key with its current value, documented, in schema order.
  std::string dump() const {
    std::string out;
    for (const auto& k : config_schema()) {
      out += "# ";
      out += k.doc;
      out += "\n";
      out += k.key;
      out += " = " + get(k.key) + "\n";
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::size_t parse_count(const std::string& key, const std::string& s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
      throw ValidationError(key + ": '" + s + "' is not a non-negative integer");
    }
    return v;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace cat
