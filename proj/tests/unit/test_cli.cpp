// Copyright 2026 The beamsplat Authors
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

#include "beamsplat/cli.hpp"
#include "beamsplat/grad.hpp"
#include "beamsplat/metrics.hpp"
#include "beamsplat/train.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace beamsplat {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

/// Loss columns of curves.csv (wall time dropped).
std::string loss_columns(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("beamsplat_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    data_ = (root_ / "data").string();
    const CliRun r = cli({"synth", "--scene", "urban-toy-static", "--frames", "4", "--val", "1", "--beams", "8",
                       "--out", data_});
    ASSERT_EQ(r.code, 0) << r.err;
    config_ = (root_ / "small.cfg").string();
    spit(config_, "iterations = 4\ndensify_until = 4\nanchors = 300\n");
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_;
  static std::string data_, config_;
};

fs::path CliTest::root_;
std::string CliTest::data_, CliTest::config_;

TEST_F(CliTest, SynthDefaultSplitsFiftyAndFour) {
  const std::string out = (root_ / "full").string();
  const CliRun r = cli({"synth", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const Dataset d = load_dataset(out);
  EXPECT_EQ(d.frames.size(), 54u);
  EXPECT_EQ(d.train.size(), 50u);
  EXPECT_EQ(d.val.size(), 4u);
  EXPECT_TRUE(fs::exists(fs::path(out) / "manifest.json"));
  fs::remove_all(out);
}

TEST_F(CliTest, SynthIsByteReproducible) {
  const std::string again = (root_ / "again").string();
  ASSERT_EQ(cli({"synth", "--scene", "urban-toy-static", "--frames", "4", "--val", "1", "--beams", "8", "--out",
                 again})
                .code,
            0);
  for (const auto& e : fs::directory_iterator(fs::path(data_) / "frames"))
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(again) / "frames" / e.path().filename())) << e.path();
  fs::remove_all(again);
}

TEST_F(CliTest, SynthErrors) {
  const fs::path empty = root_ / "empty_poses.csv";
  spit(empty, "frame,tx,ty,tz,qw,qx,qy,qz\n");
  CliRun r = cli({"synth", "--trajectory", empty.string(), "--out", (root_ / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("empty trajectory"), std::string::npos) << r.err;

  const fs::path bad = root_ / "bad_scene.txt";
  spit(bad, "seed 3\nplane 0 0 0 0 0 1 0.5\nplane 0 0 zero 0 0 1 0.5\n");
  r = cli({"synth", "--scene", bad.string(), "--out", (root_ / "y").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
}

TEST_F(CliTest, UnknownFlagIsValidationFailure) {
  EXPECT_EQ(cli({"train", "--data", data_, "--out", (root_ / "z").string(), "--no-such-flag"}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
}

TEST_F(CliTest, ZeroIterationCheckpointIsInitialization) {
  const fs::path cfg = root_ / "zero.cfg";
  spit(cfg, "iterations = 0\ndensify_until = 0\nanchors = 300\n");
  const std::string out = (root_ / "zero").string();
  const CliRun r = cli({"train", "--data", data_, "--out", out, "--config", cfg.string(), "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint c = load_checkpoint(fs::path(out) / "checkpoint.bsck");
  const Field<float> init = initialize_field(load_dataset(data_), load_train_config(cfg));
  ASSERT_EQ(c.field.groups.size(), init.groups.size());
  for (std::size_t g = 0; g < init.groups.size(); ++g) {
    EXPECT_EQ(c.field.groups[g].anchors.position, init.groups[g].anchors.position);
    EXPECT_EQ(c.field.groups[g].anchors.feature, init.groups[g].anchors.feature);
    EXPECT_EQ(c.field.groups[g].anchors.base_scale, init.groups[g].anchors.base_scale);
  }
  for (std::size_t n = 0; n < init.nets.nets().size(); ++n)
    for (std::size_t l = 0; l < init.nets.nets()[n]->weight.size(); ++l)
      EXPECT_EQ(c.field.nets.nets()[n]->weight[l], init.nets.nets()[n]->weight[l]);
}

TEST_F(CliTest, ManifestRecordsAblations) {
  const std::string out = (root_ / "ablate").string();
  const CliRun r = cli({"train", "--data", data_, "--out", out, "--config", config_, "--pseudo-plane", "--disable-ls",
                     "--seed", "11", "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = nlohmann::json::parse(slurp(fs::path(out) / "manifest.json"));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["seed"], 11);
  EXPECT_TRUE(m["deterministic"].get<bool>());
  EXPECT_TRUE(m["ablations"]["pseudo-plane"].get<bool>());
  EXPECT_TRUE(m["ablations"]["disable-ls"].get<bool>());
  EXPECT_FALSE(m["ablations"]["disable-aabb"].get<bool>());
  EXPECT_TRUE(m.contains("started") && m.contains("finished"));
  const TrainConfig cfg = load_train_config(fs::path(out) / "config.txt");
  EXPECT_EQ(cfg.projection, "pseudo");
  EXPECT_EQ(cfg.w_scale, 0.0);
  EXPECT_EQ(cfg.seed, 11u);
}

TEST_F(CliTest, IdenticalManifestsGiveIdenticalCurves) {
  const std::string a = (root_ / "det_a").string(), b = (root_ / "det_b").string();
  ASSERT_EQ(cli({"train", "--data", data_, "--out", a, "--config", config_, "--quiet"}).code, 0);
  ASSERT_EQ(cli({"train", "--data", data_, "--out", b, "--config", config_, "--quiet"}).code, 0);
  const std::string ca = loss_columns(fs::path(a) / "curves.csv");
  EXPECT_EQ(std::count(ca.begin(), ca.end(), '\n'), 5);
  EXPECT_EQ(ca, loss_columns(fs::path(b) / "curves.csv"));
  EXPECT_EQ(slurp(fs::path(a) / "checkpoint.bsck"), slurp(fs::path(b) / "checkpoint.bsck"));
}

TEST_F(CliTest, DivergenceExitsWithThree) {
  const fs::path cfg = root_ / "wild.cfg";
  spit(cfg,
       "iterations = 60\ndensify_until = 60\nanchors = 300\nlr_mlp = 50\nlr_feature = 50\n"
       "guard_factor = 1.0000001\nguard_window = 3\n");
  const std::string out = (root_ / "wild").string();
  const CliRun r = cli({"train", "--data", data_, "--out", out, "--config", cfg.string(), "--quiet"});
  EXPECT_EQ(r.code, 3) << r.err;
  const auto m = nlohmann::json::parse(slurp(fs::path(out) / "manifest.json"));
  EXPECT_EQ(m["status"], "diverged");
  EXPECT_TRUE(fs::exists(fs::path(out) / "curves.csv"));
}

class CliRenderTest : public CliTest {
 protected:
  static void SetUpTestSuite() {
    CliTest::SetUpTestSuite();
    run_ = (root_ / "run").string();
    const CliRun r = cli({"train", "--data", data_, "--out", run_, "--config", config_, "--quiet"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static std::string run_;
};
std::string CliRenderTest::run_;

TEST_F(CliRenderTest, TrainingPoseMatchesLibraryRender) {
  const std::string out = (root_ / "r_train").string();
  const CliRun r = cli({"render", "--checkpoint", run_ + "/checkpoint.bsck", "--data", data_, "--frames", "1", "--out",
                     out, "--config", run_ + "/config.txt"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint c = load_checkpoint(fs::path(run_) / "checkpoint.bsck");
  const Dataset d = load_dataset(data_);
  const RangeImage want =
      render(c.field, 1, d.poses[1], c.spec, load_train_config(fs::path(run_) / "config.txt").render_options());
  const RangeImage got = load_rangeimage(fs::path(out) / "0001.rv");
  EXPECT_TRUE((got.depth == want.depth).all());
  EXPECT_TRUE((got.intensity == want.intensity).all());
  EXPECT_TRUE((got.raydrop == want.raydrop).all());
  EXPECT_TRUE((got.valid == want.valid).all());
  EXPECT_TRUE(fs::exists(fs::path(out) / "manifest.json"));
}

TEST_F(CliRenderTest, BeamOverrideSetsRowCount) {
  const std::string out = (root_ / "r_beams").string();
  const CliRun r = cli({"render", "--checkpoint", run_ + "/checkpoint.bsck", "--data", data_, "--frames", "0",
                     "--beams", "4", "--png", "--ply", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const RangeImage img = load_rangeimage(fs::path(out) / "0000.rv");
  EXPECT_EQ(img.rows(), 4);
  EXPECT_EQ(img.spec.width, load_checkpoint(fs::path(run_) / "checkpoint.bsck").spec.width);
  EXPECT_TRUE(fs::exists(fs::path(out) / "0000.png"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "0000.ply"));
}

TEST_F(CliRenderTest, BadPoseIsRejected) {
  const CliRun r = cli({"render", "--checkpoint", run_ + "/checkpoint.bsck", "--pose", "1,two,3", "--out",
                     (root_ / "r_bad").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(cli({"render", "--checkpoint", run_ + "/checkpoint.bsck", "--out", (root_ / "r_none").string()}).code,
            2);
}

TEST_F(CliTest, EvalIdenticalFramesAndOrdering) {
  const fs::path pred = root_ / "pred";
  fs::create_directories(pred);
  // Copy in reverse order; the mean report must not depend on it.
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(fs::path(data_) / "frames"))
    if (e.path().extension() == ".rv") files.push_back(e.path());
  std::sort(files.rbegin(), files.rend());
  for (const auto& f : files) fs::copy_file(f, pred / f.filename());
  const CliRun r = cli({"eval", "--pred", pred.string(), "--gt", data_});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), report_table_header());
  const auto j = nlohmann::json::parse(slurp(pred / "eval.json"));
  EXPECT_EQ(j["frames"].size(), files.size());
  for (const char* k : {"cd", "depth_rmse", "depth_mae", "int_mae", "int_rmse"})
    EXPECT_EQ(j["mean"][k].get<double>(), 0.0) << k;
  EXPECT_EQ(j["mean"]["fscore"].get<double>(), 1.0);
}

TEST_F(CliTest, EvalListsMissingFrames) {
  const fs::path pred = root_ / "pred_missing";
  fs::create_directories(pred);
  fs::copy_file(fs::path(data_) / "frames" / "0000.rv", pred / "0000.rv");
  fs::copy_file(fs::path(data_) / "frames" / "0001.rv", pred / "0017.rv");
  fs::copy_file(fs::path(data_) / "frames" / "0002.rv", pred / "0023.rv");
  const CliRun r = cli({"eval", "--pred", pred.string(), "--gt", data_});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("17 23"), std::string::npos) << r.err;
}

TEST_F(CliTest, GradcheckPasses) {
  const CliRun r = cli({"gradcheck", "--coords", "60"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

}  // namespace
}  // namespace beamsplat
