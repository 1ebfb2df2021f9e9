#pragma once

// Command implementations behind the `cat` executable. Each returns the exit
// status; data goes to `out`, diagnostics to `err`.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "cat/causal.hpp"
#include "cat/config.hpp"
#include "cat/gradcheck.hpp"
#include "cat/model.hpp"
#include "cat/train.hpp"
#include "json.hpp"

namespace cat {

inline constexpr std::size_t kGradCheckMaxParams = 20000;

/// Built-in gradient-check configuration: T=6, K=2, F=8, M=16, H=4, L=2, 4 classes, batch 2.
inline CliConfig tiny_gradcheck_config() {
  CliConfig c;
  c.set("dsp.windows", "256,512");
  c.set("dsp.mel_bands", "8");
  c.set("model.M", "16");
  c.set("model.heads", "4");
  c.set("model.layers", "2");
  c.set("model.classes", "4");
  return c;
}

struct ModelGradCheck {
  GradCheckReport report;
  std::size_t parameters = 0;
};

/// Full objective (all three terms) on a random batch with fixed soft targets
/// and donor permutation, checked against central differences.
inline ModelGradCheck model_grad_check(const CliConfig& cfg, bool inject_fault = false) {
  const std::size_t T = cfg.count("gradcheck.frames"), n = cfg.count("gradcheck.batch");
  const ModelConfig mc = cfg.model(T);
  TrainConfig tc;
  tc.weights.theta = cfg.number("loss.lambda_theta");
  tc.weights.causal = cfg.number("loss.lambda_c");
  tc.weights.recon = cfg.number("loss.lambda_rs");
  tc.causal_eps = cfg.number("loss.epsilon");
  const std::uint64_t seed = cfg.count("gradcheck.seed");
  CatModel model = CatModel::init(mc, seed);
  ModelGradCheck out;
  out.parameters = model.parameter_count();
  if (out.parameters > kGradCheckMaxParams) {
    throw ValidationError("gradcheck needs a tiny config: " + std::to_string(out.parameters) + " parameters > " +
                          std::to_string(kGradCheckMaxParams));
  }
  if (n < 2 && tc.weights.causal != 0.0) throw ValidationError("gradcheck.batch must be at least 2 when loss.lambda_c > 0");

  Rng rng(seed + 1);
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x({T, mc.resolutions, mc.bands, 2});
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = rng.uniform(0.0, 2.0);
    xs.push_back(std::move(x));
  }
  Tensor targets({n, mc.classes});
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = rng.uniform(0.2, 0.8);
    targets[i * mc.classes + i % mc.classes] += lambda;
    targets[i * mc.classes + (i + 1) % mc.classes] += 1.0 - lambda;
  }
  std::vector<std::size_t> perm;
  if (tc.weights.causal != 0.0) perm = donor_permutation(rng, n);

  ScalarFn f = [&](Tape& tape, const std::vector<Var>& p) {
    BatchOutput o = model.forward(tape, p, xs);
    Classifier clf = [&](Var z) { return model.classify(p, z); };
    return total_loss(o.logits, targets, o.recon, xs, o.z, clf, perm, tc.weights, tc.causal_eps).objective;
  };
  std::vector<NamedTensor> named;
  for (auto& prm : model.parameters()) named.push_back({prm.name, &prm.value});
  GradCheckOptions opt;
  opt.h = cfg.number("gradcheck.h");
  opt.tol = cfg.number("gradcheck.tol");
  if (inject_fault) {
    opt.tamper = [](std::vector<Tensor>& g) {
      Tensor& w = g[g.size() / 2];
      w[0] += 0.5 * (1.0 + std::abs(w[0]));
    };
  }
  out.report = grad_check(f, named, opt);
  return out;
}

inline std::string format_gradcheck_table(const GradCheckReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "group" << std::right << std::setw(8) << "count" << std::setw(14) << "max_rel_err"
     << std::setw(13) << "tape" << std::setw(13) << "numeric" << "  status\n";
  for (const auto& e : r.entries) {
    os << std::left << std::setw(28) << e.name << std::right << std::setw(8) << e.count << std::setw(14)
       << std::scientific << std::setprecision(3) << e.max_rel_error << std::setw(13) << e.worst_tape << std::setw(13)
       << e.worst_numeric << std::defaultfloat << "  "
       << (e.passed ? "ok" : "FAIL") << '\n';
  }
  return os.str();
}

inline nlohmann::json report_json(const EpochReport& r, bool has_eval) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["l_theta"] = r.l_theta;
  j["l_c"] = r.l_c;
  j["l_rs"] = r.l_rs;
  j["L"] = r.total;
  j["train_accuracy"] = r.train_accuracy;
  if (has_eval) {
    j["eval_accuracy"] = r.eval_accuracy;
    j["eval_mAP"] = r.eval_map;
    j["eval_l_rs"] = r.eval_l_rs;
  } else {
    j["eval_accuracy"] = nullptr;
    j["eval_mAP"] = nullptr;
    j["eval_l_rs"] = nullptr;
  }
  j["rejected_steps"] = r.rejected_steps;
  j["seconds"] = r.seconds;
  return j;
}

/// Training and held-out sets: a WAV folder (no held-out set) or the synthetic splits.
struct DataSplits {
  Dataset train;
  std::optional<Dataset> test;
};

inline DataSplits load_data(const CliConfig& cfg, const std::string& data_dir) {
  MrmfExtractor ex(cfg.dsp());
  DataSplits s;
  const std::string dir = data_dir.empty() ? cfg.get("data.path") : data_dir;
  if (!dir.empty()) {
    s.train = load_wav_folder(dir, ex);
    return s;
  }
  const std::size_t classes = cfg.count("model.classes");
  s.train = featurize(synth_dataset(cfg.synth(false)), ex, classes);
  s.test = featurize(synth_dataset(cfg.synth(true)), ex, classes);
  return s;
}

inline int fail(std::ostream& err, const std::string& cmd, const std::exception& e) {
  err << "cat " << cmd << ": " << e.what() << '\n';
  return 1;
}

// ---------------------------------------------------------------------------

inline int cmd_extract(const std::filesystem::path& in, const std::filesystem::path& out, const CliConfig& cfg,
                       std::ostream& os, std::ostream& err) {
  namespace fs = std::filesystem;
  try {
    MrmfExtractor ex(cfg.dsp());
    auto one = [&](const fs::path& src, const fs::path& dst) {
      MrmfFeature f;
      try {
        f = ex(load_wav(src));
      } catch (const std::exception& e) {
        throw IngestionError(src.string() + ": " + e.what(), 0);
      }
      if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
      write_mrmf(dst, f);
      os << dst.string() << " T=" << f.frames() << " K=" << f.resolutions() << " F=" << f.bands() << '\n';
    };
    if (fs::is_directory(in)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      if (files.empty()) throw IngestionError("no .wav files under " + in.string(), 0);
      for (const auto& f : files) one(f, (out / fs::relative(f, in)).replace_extension(".mrmf"));
    } else {
      one(in, out);
    }
    return 0;
  } catch (const std::exception& e) {
    return fail(err, "extract", e);
  }
}

inline int cmd_train(const CliConfig& cfg, const std::filesystem::path& checkpoint, const std::string& data_dir,
                     const std::filesystem::path& report_path, std::ostream& os, std::ostream& err) {
  try {
    const TrainConfig tc = cfg.train();
    const DataSplits data = load_data(cfg, data_dir);
    const ModelConfig mc = cfg.model(data.train.items.front().features.dim(0));
    if (data.train.classes() != mc.classes) {
      throw ValidationError("model.classes = " + std::to_string(mc.classes) + " but the data has " +
                            std::to_string(data.train.classes()) + " classes");
    }
    CatModel model = CatModel::init(mc, tc.seed);
    std::ofstream report;
    if (!report_path.empty()) {
      report.open(report_path);
      if (!report) throw Error("cannot write report " + report_path.string());
    }
    const bool has_eval = data.test.has_value();
    train(model, data.train, has_eval ? &*data.test : nullptr, tc, [&](const EpochReport& r) {
      const std::string line = report_json(r, has_eval).dump();
      os << line << std::endl;
      if (report) report << line << std::endl;
    });
    save_checkpoint(checkpoint, model);
    err << "checkpoint written to " << checkpoint.string() << '\n';
    return 0;
  } catch (const std::exception& e) {
    return fail(err, "train", e);
  }
}

inline int cmd_eval(const CliConfig& cfg, const std::filesystem::path& checkpoint, const std::string& data_dir,
                    bool train_split, std::ostream& os, std::ostream& err) {
  try {
    // Read before any extraction so a bad file fails fast.
    const auto bytes = [&] {
      std::ifstream f(checkpoint, std::ios::binary);
      if (!f) throw IngestionError("cannot open checkpoint " + checkpoint.string(), 0);
      return io::read_all(f);
    }();
    decode_checkpoint(bytes);
    const DataSplits data = load_data(cfg, data_dir);
    const Dataset& set = (train_split || !data.test) ? data.train : *data.test;
    CatModel model = CatModel::init(cfg.model(set.items.front().features.dim(0)), 0);
    load_checkpoint_into(model, bytes);
    const Metrics m = evaluate(model, set);
    for (std::size_t c : m.skipped_classes)
      err << "class " << set.class_names[c] << " has no examples; left out of mAP\n";
    os << std::fixed << std::setprecision(4) << "accuracy " << m.accuracy << "\nmAP " << m.map << '\n';
    return 0;
  } catch (const std::exception& e) {
    return fail(err, "eval", e);
  }
}

inline int cmd_gradcheck(const CliConfig& cfg, bool inject_fault, std::ostream& os, std::ostream& err) {
  try {
    const ModelGradCheck g = model_grad_check(cfg, inject_fault);
    os << format_gradcheck_table(g.report);
    os << "parameters " << g.parameters << ", max relative error " << std::scientific << std::setprecision(3)
       << g.report.max_rel_error() << std::defaultfloat << '\n';
    if (g.report.passed()) return 0;
    err << "gradient check failed for:";
    for (const auto& e : g.report.entries)
      if (!e.passed) err << ' ' << e.name;
    err << '\n';
    return 1;
  } catch (const std::exception& e) {
    return fail(err, "gradcheck", e);
  }
}

inline int cmd_pns_verify(std::uint64_t seed, std::size_t count, std::ostream& os, std::ostream& err) {
  try {
    const auto rows = run_pns_verification(seed, count);
    os << format_pns_table(rows);
    std::size_t bad = 0, checked = 0;
    for (const auto& r : rows) {
      bad += r.ok() ? 0 : 1;
      checked += r.identity_checked ? 1 : 0;
    }
    os << rows.size() << " cases, " << checked << " identity checks, " << bad << " violations\n";
    if (bad == 0) return 0;
    err << "pns-verify: " << bad << " violation(s)\n";
    return 1;
  } catch (const std::exception& e) {
    return fail(err, "pns-verify", e);
  }
}

}  // namespace cat
