// SPDX-License-Identifier: Apache-2.0
// Runs the ca3d executable and checks exit codes and outputs.
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string g_cli;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ca3d_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& capture = {}) {
  const std::string sink = capture.empty() ? "/dev/null" : capture.string();
  const int rc = std::system(("\"" + g_cli + "\" " + args + " > " + sink + " 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 2") {
  CHECK(run("") == 2);
  CHECK(run("--help") == 0);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train") == 2);
  CHECK(run("translate --ckpt x --input y --direction sideways --out z") == 2);
  CHECK(run("eval --data d --out o --self --copy") == 2);
  CHECK(run("eval --data d --out o") == 2);
}

TEST_CASE("missing files exit with 1") {
  const auto dir = scratch("io");
  CHECK(run("translate --ckpt " + (dir / "none.ca3d").string() + " --input x.pgm --direction cc2mlo --out " +
            (dir / "o").string()) == 1);
  CHECK(run("eval --data " + (dir / "none").string() + " --copy --out " + (dir / "r.tsv").string()) == 1);
  fs::remove_all(dir);
}

TEST_CASE("geometry verification passes and fails with exit code 4") {
  const auto dir = scratch("verify");
  CHECK(run("verify-geometry --seed 3", dir / "ok.txt") == 0);
  CHECK(read(dir / "ok.txt").find("FAIL") == std::string::npos);
  CHECK(run("verify-geometry --perturb-theta 0.05", dir / "bad.txt") == 4);
  CHECK(read(dir / "bad.txt").find("FAIL point_projection_mlo") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("data, train, translate and eval end to end") {
  const auto dir = scratch("e2e");
  const auto data = dir / "data", ckpt = dir / "m.ca3d";
  REQUIRE(run("gen-data --out " + data.string() + " --count 20 --size 16 --seed 1", dir / "gen.txt") == 0);
  CHECK(read(dir / "gen.txt").find("train\t16") != std::string::npos);
  std::ofstream(dir / "tiny.cfg") << "image_size = 16\nbase_channels = 8\nchannel_mults = 1,2\nres_blocks = 1\n"
                                     "groups = 4\nheads = 2\nrefine_hidden = 4\nvolume_slabs = 2\nT = 20\nsample_steps = 4\n"
                                     "batch_size = 2\nlog_every = 1\n";
  REQUIRE(run("train --data " + data.string() + " --config " + (dir / "tiny.cfg").string() + " --steps 2 --out " +
              ckpt.string() + " --set lr=1e-3 --no-im3d") == 0);
  const auto log = read(fs::path(ckpt.string() + ".log.tsv"));
  CHECK(log.rfind("0\t", 0) == 0);
  CHECK(log.find("\n1\t") != std::string::npos);
  CHECK(run("train --data " + data.string() + " --config " + (dir / "tiny.cfg").string() + " --out " +
            (dir / "x.ca3d").string() + " --set nope=1") == 2);
  CHECK(run("train --data " + data.string() + " --out " + (dir / "y.ca3d").string() + " --steps 1") != 0);

  REQUIRE(run("eval --ckpt " + ckpt.string() + " --data " + data.string() + " --steps 2 --out " +
              (dir / "eval.tsv").string()) == 0);
  const auto report = read(dir / "eval.tsv");
  CHECK(report.rfind("# cc2mlo\n", 0) == 0);
  CHECK(report.find("# mlo2cc\n") != std::string::npos);
  CHECK(report.find("MEAN\t") != std::string::npos);
  CHECK(report.find("STD\t") != std::string::npos);

  REQUIRE(run("eval --copy --data " + data.string() + " --split val --out " + (dir / "copy.tsv").string()) == 0);
  std::ofstream(dir / "bad.pgm", std::ios::binary) << "P5\n8 8\n255\n" << std::string(64, '\x40');
  CHECK(run("translate --ckpt " + ckpt.string() + " --input " + (dir / "bad.pgm").string() +
            " --direction cc2mlo --steps 2 --out " + (dir / "t").string()) == 2);
  std::ofstream(dir / "in.pgm", std::ios::binary) << "P5\n16 16\n255\n" << std::string(256, '\x40');
  REQUIRE(run("translate --ckpt " + ckpt.string() + " --input " + (dir / "in.pgm").string() +
              " --direction mlo2cc --steps 2 --out " + (dir / "t").string()) == 0);
  CHECK(fs::exists(dir / "t.pgm"));
  CHECK(fs::exists(dir / "t.ca3d"));
  CHECK(run("translate --ckpt " + ckpt.string() + " --input " + (dir / "in.pgm").string() +
            " --direction mlo2cc --steps 999 --out " + (dir / "t2").string()) == 2);
  fs::remove_all(dir);
}

}  // TEST_SUITE

int main(int argc, char** argv) {
  // The first argument is the executable under test; the rest go to doctest.
  if (argc < 2) return 2;
  g_cli = argv[1];
  doctest::Context ctx;
  ctx.applyCommandLine(argc - 1, argv + 1);
  return ctx.run();
}
