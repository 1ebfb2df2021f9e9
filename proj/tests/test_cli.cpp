#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cat/cli.hpp"

using namespace cat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int status;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("cat_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args) const {
    const fs::path o = dir_ / "stdout.txt", e = dir_ / "stderr.txt";
    const std::string cmd = std::string(CAT_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(o), slurp(e)};
  }

  fs::path write_config(const std::string& name, const std::string& text) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  void write_tone(const fs::path& p, double hz, double seconds = 0.1) const {
    Waveform w;
    for (std::size_t i = 0; i < static_cast<std::size_t>(seconds * 32000); ++i)
      w.samples.push_back(0.4 * std::sin(2.0 * 3.141592653589793 * hz * i / 32000.0));
    fs::create_directories(p.parent_path());
    write_wav(p, w);
  }

  fs::path dir_;
};

const char* kSmallTrain =
    "dsp.windows = 256,512\n"
    "dsp.mel_bands = 8\n"
    "model.M = 8\nmodel.heads = 2\nmodel.layers = 1\nmodel.time_embed_dim = 8\n"
    "train.epochs = 2\ntrain.batch = 4\n"
    "data.train_per_class = 3\ndata.test_per_class = 2\ndata.duration = 0.1\n";

}  // namespace

TEST(Config, DefaultsParseAndUnknownKeys) {
  const CliConfig d;
  const CliConfig back = CliConfig::parse(d.dump());
  for (const auto& k : config_schema()) EXPECT_EQ(back.get(k.key), d.get(k.key)) << k.key;
  EXPECT_THROW(CliConfig::parse("model.bogus = 3\n"), ValidationError);
  EXPECT_THROW(CliConfig::parse("no equals sign\n"), ValidationError);
  EXPECT_THROW(CliConfig::parse("train.epochs = ten\n").train(), ValidationError);
  const CliConfig c = CliConfig::parse("# comment\n  train.lr = 0.01  # trailing\n");
  EXPECT_EQ(c.train().adam.lr, 0.01);
  EXPECT_THROW(CliConfig::parse("model.kernel = diagonal\n").model(10), ValidationError);
}

TEST_F(Cli, DumpDefaultsListsEveryKey) {
  const Outcome r = run("--dump-defaults");
  EXPECT_EQ(r.status, 0);
  for (const auto& k : config_schema()) EXPECT_NE(r.out.find(std::string(k.key) + " = "), std::string::npos) << k.key;
}

TEST_F(Cli, UnknownConfigKeyRejected) {
  const auto cfg = write_config("bad.cfg", "train.epochz = 3\n");
  const Outcome r = run("train --synth --out " + (dir_ / "m.catc").string() + " --config " + cfg.string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("train.epochz"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "m.catc"));
}

TEST_F(Cli, BatchConstraintNamed) {
  const auto cfg = write_config("b.cfg", "train.batch = 1\n");
  const Outcome r = run("train --synth --out " + (dir_ / "m.catc").string() + " --config " + cfg.string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("train.batch"), std::string::npos) << r.err;
}

TEST_F(Cli, ExtractSingleDirectoryAndDeterminism) {
  write_tone(dir_ / "in" / "a.wav", 440.0);
  write_tone(dir_ / "in" / "b.wav", 880.0);
  write_tone(dir_ / "in" / "sub" / "c.wav", 1320.0);
  Outcome r = run("extract --in " + (dir_ / "in" / "a.wav").string() + " --out " + (dir_ / "a.mrmf").string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("T="), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "a.mrmf").substr(0, 4), "MRMF");
  const std::string first = slurp(dir_ / "a.mrmf");
  r = run("extract --in " + (dir_ / "in" / "a.wav").string() + " --out " + (dir_ / "a.mrmf").string());
  EXPECT_EQ(slurp(dir_ / "a.mrmf"), first);

  r = run("extract --in " + (dir_ / "in").string() + " --out " + (dir_ / "out").string());
  ASSERT_EQ(r.status, 0) << r.err;
  for (auto* n : {"a.mrmf", "b.mrmf", "sub/c.mrmf"}) EXPECT_TRUE(fs::exists(dir_ / "out" / n)) << n;
  EXPECT_EQ(slurp(dir_ / "out" / "a.mrmf"), first);
}

TEST_F(Cli, ExtractBadWavNamesFile) {
  std::ofstream(dir_ / "junk.wav") << "not a wav at all";
  const Outcome r = run("extract --in " + (dir_ / "junk.wav").string() + " --out " + (dir_ / "j.mrmf").string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("junk.wav"), std::string::npos) << r.err;
}

TEST_F(Cli, GradcheckDefaultPassesAndCoversEveryGroup) {
  const Outcome r = run("gradcheck");
  EXPECT_EQ(r.status, 0) << r.out << r.err;
  CatModel m = CatModel::init(tiny_gradcheck_config().model(6), 1);
  for (const auto& p : m.parameters()) EXPECT_NE(r.out.find(p.name + " "), std::string::npos) << p.name;
}

TEST_F(Cli, GradcheckInjectedFaultFails) {
  const Outcome r = run("gradcheck --inject-fault");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("gradient check failed"), std::string::npos) << r.err;
}

TEST_F(Cli, GradcheckRejectsLargeConfig) {
  const auto cfg = write_config("big.cfg", "model.M = 64\n");
  const Outcome r = run("gradcheck --config " + cfg.string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("tiny config"), std::string::npos) << r.err;
}

TEST_F(Cli, PnsVerify) {
  const Outcome r = run("pns-verify --seed 3 --count 50");
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("bijective"), std::string::npos);
  EXPECT_NE(r.out.find("0 violations"), std::string::npos);
}

TEST_F(Cli, TrainEvalRoundTrip) {
  const auto cfg = write_config("small.cfg", kSmallTrain);
  const fs::path ck = dir_ / "m.catc";
  Outcome r = run("train --synth --config " + cfg.string() + " --out " + ck.string() + " --report " +
              (dir_ / "rep.jsonl").string());
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (auto* k : {"epoch", "l_theta", "l_c", "l_rs", "L", "train_accuracy", "eval_accuracy", "eval_mAP", "seconds"})
      EXPECT_TRUE(j.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, 2);
  EXPECT_EQ(slurp(dir_ / "rep.jsonl"), r.out);

  r = run("eval --synth --checkpoint " + ck.string() + " --config " + cfg.string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("accuracy 0."), std::string::npos);
  const auto dot = r.out.find("mAP ");
  ASSERT_NE(dot, std::string::npos);
  EXPECT_EQ(r.out.substr(dot).find('\n'), std::string("mAP 0.0000").size()) << r.out;

  // Same data, different width: the first mismatching tensor is named.
  const auto wide = write_config("wide.cfg", std::string(kSmallTrain) + "model.M = 12\n");
  r = run("eval --synth --checkpoint " + ck.string() + " --config " + wide.string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("embed.mel.weight"), std::string::npos) << r.err;

  std::string bytes = slurp(ck);
  bytes[0] = 'X';
  std::ofstream(dir_ / "bad.catc", std::ios::binary) << bytes;
  r = run("eval --synth --checkpoint " + (dir_ / "bad.catc").string() + " --config " + cfg.string());
  EXPECT_NE(r.status, 0);
  EXPECT_TRUE(r.out.empty());
  EXPECT_NE(r.err.find("magic"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainDeterministicAndCausalSwitch) {
  const auto cfg = write_config("nc.cfg", std::string(kSmallTrain) + "loss.lambda_c = 0\n");
  auto strip = [](const std::string& s) {
    std::string out;
    std::istringstream in(s);
    std::string line;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line);
      EXPECT_EQ(j["l_c"].get<double>(), 0.0);
      j.erase("seconds");
      out += j.dump() + "\n";
    }
    return out;
  };
  const Outcome a = run("train --synth --config " + cfg.string() + " --out " + (dir_ / "a.catc").string());
  const Outcome b = run("train --synth --config " + cfg.string() + " --out " + (dir_ / "b.catc").string());
  ASSERT_EQ(a.status, 0) << a.err;
  EXPECT_EQ(strip(a.out), strip(b.out));
  EXPECT_EQ(slurp(dir_ / "a.catc"), slurp(dir_ / "b.catc"));
}

TEST_F(Cli, RandomInitNearChance) {
  const CliConfig cfg;
  CatModel m = CatModel::init(cfg.model(100), 17);
  save_checkpoint(dir_ / "init.catc", m);
  const Outcome r = run("eval --synth --train-split --checkpoint " + (dir_ / "init.catc").string());
  ASSERT_EQ(r.status, 0) << r.err;
  const double acc = std::stod(r.out.substr(r.out.find("accuracy ") + 9));
  EXPECT_NEAR(acc, 0.25, 0.15);
}
