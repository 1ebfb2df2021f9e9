#include <iostream>

#include "CLI11.hpp"
#include "cat/cli.hpp"

namespace {

cat::CliConfig load_config(const std::string& path) {
  return path.empty() ? cat::CliConfig{} : cat::CliConfig::load(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal audio transformer: feature extraction, training and verification"};
  app.require_subcommand(0, 1);
  bool dump_defaults = false;
  app.add_flag("--dump-defaults", dump_defaults, "Print every config key with its default and exit");

  std::string config, in, out, data, report, checkpoint;
  bool synth = false, train_split = false, inject_fault = false;
  std::uint64_t seed = 1;
  std::size_t count = 50;

  auto* extract = app.add_subcommand("extract", "Write MRMF feature dumps for a WAV file or directory");
  extract->add_option("--in", in, "WAV file or directory")->required();
  extract->add_option("--out", out, "Output file, or directory for a directory input")->required();
  extract->add_option("--config", config, "Config file");

  auto* train = app.add_subcommand("train", "Train a model and stream epoch reports");
  train->add_option("--config", config, "Config file");
  train->add_option("--out", out, "Checkpoint path")->required();
  auto* data_opt = train->add_option("--data", data, "WAV folder <root>/<class>/*.wav");
  train->add_flag("--synth", synth, "Use the synthetic dataset")->excludes(data_opt);
  train->add_option("--report", report, "Also append epoch reports to this file");

  auto* eval = app.add_subcommand("eval", "Print accuracy and mAP of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  auto* eval_data = eval->add_option("--data", data, "WAV folder <root>/<class>/*.wav");
  eval->add_flag("--synth", synth, "Use the synthetic test split")->excludes(eval_data);
  eval->add_flag("--train-split", train_split, "Evaluate the synthetic training split instead");
  eval->add_option("--config", config, "Config file");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full objective");
  grad->add_option("--config", config, "Config file (default: built-in tiny config)");
  grad->add_flag("--inject-fault", inject_fault, "Corrupt one tape gradient (harness self-test)")->group("");

  auto* pns = app.add_subcommand("pns-verify", "Compare PNS estimators against exact enumeration");
  pns->add_option("--seed", seed, "RNG seed");
  pns->add_option("--count", count, "Number of random SCMs")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (dump_defaults) {
      std::cout << cat::CliConfig{}.dump();
      return 0;
    }
    if (*extract) return cat::cmd_extract(in, out, load_config(config), std::cout, std::cerr);
    if (*train) return cat::cmd_train(load_config(config), out, data, report, std::cout, std::cerr);
    if (*eval) return cat::cmd_eval(load_config(config), checkpoint, data, train_split, std::cout, std::cerr);
    if (*grad) {
      const cat::CliConfig c = config.empty() ? cat::tiny_gradcheck_config() : cat::CliConfig::load(config);
      return cat::cmd_gradcheck(c, inject_fault, std::cout, std::cerr);
    }
    if (*pns) return cat::cmd_pns_verify(seed, count, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "cat: " << e.what() << '\n';
    return 1;
  }
  std::cerr << app.help();
  return 2;
}
