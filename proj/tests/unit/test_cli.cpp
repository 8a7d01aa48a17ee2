// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "hiergan/checkpoint.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(HIERGAN_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file() && e.path().filename() != "resolved.cfg") files.push_back(fs::relative(e.path(), a));
  if (files.empty()) return false;
  for (const auto& f : files)
    if (!fs::exists(b / f) || read_text(a / f) != read_text(b / f)) return false;
  return true;
}

const std::string kTiny =
    "--set batch=2 global_width=4 global_res_blocks=1 local_width=4 local_res_blocks=1 disc_width=8 fusion_width=4 "
    "checkpoint_interval=2";

// Small dataset shared by the tests below.
fs::path dataset() {
  static const fs::path dir = [] {
    const fs::path d = fs::path(TEST_TMP_DIR) / "cli_data";
    fs::remove_all(d);
    const Result r = run("gen-data --n 12 --seed 5 --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.output;
    return d;
  }();
  return dir;
}

fs::path parser() {
  static const fs::path file = [] {
    const fs::path d = fs::path(TEST_TMP_DIR) / "cli_parser";
    fs::remove_all(d);
    const Result r = run("pretrain-seg --data " + dataset().string() + " --epochs 1 --out " + d.string());
    EXPECT_EQ(r.code, 0) << r.output;
    return d / "seg.ckpt";
  }();
  return file;
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  const auto dir = testutil::scratch_dir();
  ASSERT_EQ(run("gen-data --n 6 --seed 3 --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run("gen-data --n 6 --seed 3 --out " + (dir / "b").string()).code, 0);
  EXPECT_TRUE(same_tree(dir / "a", dir / "b"));
  EXPECT_TRUE(fs::exists(dir / "a" / "resolved.cfg"));
  ASSERT_EQ(run("gen-data --n 6 --seed 4 --out " + (dir / "c").string()).code, 0);
  EXPECT_FALSE(same_tree(dir / "a", dir / "c"));
}

TEST(Cli, ExitCodes) {
  const auto dir = testutil::scratch_dir();
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("train --bogus-flag").code, 1);

  const Result unknown = run("gen-data --n 2 --out " + dir.string() + " --set not_a_key=3");
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.output.find("not_a_key"), std::string::npos) << unknown.output;

  const Result invalid = run("gen-data --out " + dir.string() + " --set batch=0");
  EXPECT_EQ(invalid.code, 1);
  EXPECT_NE(invalid.output.find("batch"), std::string::npos) << invalid.output;

  const Result missing = run("train --data " + (dir / "absent").string() + " --out " + dir.string());
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.output.find("absent"), std::string::npos) << missing.output;

  // a corrupt checkpoint is a runtime failure
  {
    std::ofstream bad(dir / "bad.ckpt");
    bad << "not a checkpoint";
  }
  const Result corrupt = run("translate --checkpoint " + (dir / "bad.ckpt").string() + " --target happy --out " +
                             (dir / "t").string());
  EXPECT_EQ(corrupt.code, 2) << corrupt.output;
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto dir = testutil::scratch_dir();
  const Result none = run("gen-data --n 2", "HIERGAN_OUT=");
  EXPECT_EQ(none.code, 1);
  EXPECT_NE(none.output.find("HIERGAN_OUT"), std::string::npos) << none.output;
  ASSERT_EQ(run("gen-data --n 2", "HIERGAN_OUT=" + dir.string()).code, 0);
  EXPECT_TRUE(fs::exists(dir / "gen-data" / "resolved.cfg"));
}

TEST(Cli, ConfigFileThenOverrides) {
  const auto dir = testutil::scratch_dir();
  {
    std::ofstream f(dir / "run.cfg");
    f << "data_n = 3\ndata_seed = 7\n";
  }
  ASSERT_EQ(run("gen-data --config " + (dir / "run.cfg").string() + " --set data_n=4 --out " + (dir / "o").string())
                .code,
            0);
  const std::string resolved = read_text(dir / "o" / "resolved.cfg");
  EXPECT_NE(resolved.find("data_n = 4"), std::string::npos) << resolved;
  EXPECT_NE(resolved.find("data_seed = 7"), std::string::npos) << resolved;
  int images = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "o"))
    if (e.path().extension() == ".png") ++images;
  EXPECT_EQ(images, 4);
}

TEST(Cli, TrainWithoutEndToEndKeepsTheParser) {
  const auto dir = testutil::scratch_dir();
  const Result r = run("train --data " + dataset().string() + " --seg " + parser().string() +
                       " --iterations 2 --end-to-end false --out " + dir.string() + " " + kTiny);
  ASSERT_EQ(r.code, 0) << r.output;
  const hiergan::TensorContainer pre = hiergan::load_container(parser());
  const hiergan::TensorContainer post = hiergan::load_container(dir / "checkpoints" / "latest.ckpt");
  const auto& a = pre.section("seg").tensors;
  const auto& b = post.section("seg").tensors;
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(testutil::bit_equal(a[i].tensor, b[i].tensor)) << a[i].name;
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "resolved.cfg"));
}

TEST(Cli, ResumeMatchesUninterruptedRun) {
  const auto dir = testutil::scratch_dir();
  const std::string common = "--deterministic train --data " + dataset().string() + " --seg " + parser().string() +
                             " " + kTiny + " --out ";
  ASSERT_EQ(run(common + (dir / "full").string() + " --iterations 4").code, 0);
  ASSERT_EQ(run(common + (dir / "split").string() + " --iterations 2").code, 0);
  const Result resumed = run(common + (dir / "split").string() + " --iterations 4 --resume");
  ASSERT_EQ(resumed.code, 0) << resumed.output;
  EXPECT_EQ(read_text(dir / "full" / "metrics.csv"), read_text(dir / "split" / "metrics.csv"));
  EXPECT_EQ(read_text(dir / "full" / "checkpoints" / "latest.ckpt"),
            read_text(dir / "split" / "checkpoints" / "latest.ckpt"));

  const Result no_ckpt = run(common + (dir / "fresh").string() + " --iterations 2 --resume");
  EXPECT_EQ(no_ckpt.code, 1);
  const Result changed = run(common + (dir / "split").string() + " --iterations 6 --resume --set w_cls=2");
  EXPECT_EQ(changed.code, 1) << changed.output;
}

TEST(Cli, GradcheckPasses) {
  const auto dir = testutil::scratch_dir();
  const Result r = run("gradcheck --out " + dir.string() + " " + kTiny);
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(dir / "gradcheck.txt"));
}

TEST(Cli, TranslateWritesImages) {
  const auto dir = testutil::scratch_dir();
  ASSERT_EQ(run("train --data " + dataset().string() + " --iterations 1 --out " + (dir / "t").string() + " " + kTiny)
                .code,
            0);
  const std::string ckpt = (dir / "t" / "checkpoints" / "latest.ckpt").string();
  const Result r = run("translate --checkpoint " + ckpt + " --seed 9 --target sad --out " + (dir / "x").string());
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"translated.png", "grid.png", "heatmap.png"}) EXPECT_GT(fs::file_size(dir / "x" / f), 0u) << f;
  const Result bad = run("translate --checkpoint " + ckpt + " --target sleepy --out " + (dir / "y").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.output.find("sleepy"), std::string::npos) << bad.output;
}
