// Copyright 2026 The VisemeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

// Per-test scratch directory, so tests can run in separate processes.
fs::path kWork;

struct Result {
  int code;
  std::string err;
};

// Runs the tool inside the work directory, capturing stderr.
Result run(const std::string& args) {
  const auto err = kWork / "stderr.txt";
  const std::string cmd = "cd '" + kWork.string() + "' && '" VISEMEFLOW_CLI "' " + args +
                          " 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  std::ifstream is(err);
  std::stringstream ss;
  ss << is.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void expect_same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GE(files, 2u);
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    kWork = fs::path(VISEMEFLOW_TEST_WORK) / "cli_work" /
            ::testing::UnitTest::GetInstance()->current_test_info()->name();
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
};

}  // namespace

TEST_F(Cli, UnknownSubcommandExitsTwo) {
  const auto r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown subcommand"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(Cli, ConfigErrorsExitThree) {
  EXPECT_EQ(run("synth --out x").code, 3);  // no seed
  EXPECT_EQ(run("synth --seed 1 --profile vhs --out x").code, 3);
  EXPECT_EQ(run("synth --seed 1 --out x --words notanumber").code, 3);
}

TEST_F(Cli, SynthIsByteIdenticalAcrossRuns) {
  const std::string args = "synth --profile desk --seed 7 --words 2 --speakers 2 --occurrences 2 --quiet --out ";
  ASSERT_EQ(run(args + "synth_a").code, 0);
  ASSERT_EQ(run(args + "synth_b").code, 0);
  expect_same_tree(kWork / "synth_a", kWork / "synth_b");
  const auto meta = read_json(kWork / "synth_a" / "run.meta");
  EXPECT_EQ(meta.at("seed"), 7);
  EXPECT_EQ(meta.at("config_hash").get<std::string>().size(), 16u);
}

TEST_F(Cli, EvalWithoutLstmCheckpointExitsFour) {
  const auto r = run("eval --extractor-checkpoint nowhere/cae.nckp --lstm nowhere/lstm.nckp "
                     "--test nowhere/test.jsonl --out eval_missing");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("missing checkpoint"), std::string::npos);
}

TEST_F(Cli, FullDeskPipeline) {
  ASSERT_EQ(run("synth --seed 5 --words 4 --speakers 3 --occurrences 10 --quiet --out corpus").code, 0);
  const auto manifest_before = slurp(kWork / "corpus" / "manifest.jsonl");
  ASSERT_EQ(run("preprocess --manifest corpus/manifest.jsonl --out pre --quiet").code, 0);
  ASSERT_EQ(run("split --seed 5 --manifest pre/manifest.jsonl --msd --out split --quiet").code, 0);
  ASSERT_EQ(run("train-cae --seed 5 --train split/train.jsonl --val split/val.jsonl --out cae --quiet").code, 0);
  ASSERT_EQ(run("extract-features --extractor cae --checkpoint cae/cae.nckp "
                "--manifest split/train.jsonl --manifest split/val.jsonl --out feat").code, 0);
  ASSERT_EQ(run("train-lstm --seed 5 --lstm-patience 30 --lstm-epochs 150 --quiet "
                "--train feat/train.feat --val feat/val.feat --out lstm").code, 0);
  ASSERT_EQ(run("eval --extractor-checkpoint cae/cae.nckp --lstm lstm/lstm.nckp "
                "--train split/train.jsonl --val split/val.jsonl --test split/test.jsonl "
                "--out eval").code, 0);

  const auto report = read_json(kWork / "eval" / "report.json");
  const double train = report.at("train_accuracy"), val = report.at("val_accuracy");
  EXPECT_GE(train, val);
  EXPECT_GE(val, 0.25);
  EXPECT_TRUE(fs::exists(kWork / "eval" / "confusion.csv"));
  for (const char* d : {"corpus", "pre", "split", "cae", "feat", "lstm", "eval"}) {
    EXPECT_TRUE(fs::exists(kWork / d / "run.meta")) << d;
  }
  EXPECT_EQ(slurp(kWork / "corpus" / "manifest.jsonl"), manifest_before);

  // Re-running a stage with the same config reproduces it bit for bit.
  ASSERT_EQ(run("train-cae --seed 5 --train split/train.jsonl --val split/val.jsonl --out cae2 --quiet").code, 0);
  expect_same_tree(kWork / "cae", kWork / "cae2");

  ASSERT_EQ(run("visualize --checkpoint cae/cae.nckp --manifest pre/manifest.jsonl --out vis").code, 0);
  EXPECT_TRUE(fs::exists(kWork / "vis" / "kernel_000.pgm"));
  EXPECT_TRUE(fs::exists(kWork / "vis" / "recon_000.pgm"));

  // A huge step overflows the CAE weights.
  const auto div = run("train-cae --seed 5 --cae-lr 1e30 --train split/train.jsonl --out cae_div --quiet");
  EXPECT_EQ(div.code, 5);
  EXPECT_NE(div.err.find("kind=divergence"), std::string::npos);
}

TEST_F(Cli, ConfigFileIsOverriddenByFlags) {
  ASSERT_EQ(run("synth --seed 3 --words 2 --speakers 3 --occurrences 2 --quiet --out cfg_corpus").code, 0);
  ASSERT_EQ(run("preprocess --manifest cfg_corpus/manifest.jsonl --out cfg_pre --quiet").code, 0);
  std::ofstream(kWork / "run.ini") << "seed = 3\ncae-epochs = 1\ncae-batch = 8\nquiet = true\n";
  ASSERT_EQ(run("train-cae --config run.ini --cae-epochs 2 --train cfg_pre/manifest.jsonl --out cfg_cae").code, 0);
  const auto cae = read_json(kWork / "cfg_cae" / "run.meta").at("config").at("cae");
  EXPECT_EQ(cae.at("max_epochs"), 2);
  EXPECT_EQ(cae.at("batch_size"), 8);
}
