#include <doctest.h>

#include <array>
#include <cstdio>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "support.hpp"

using namespace protofuse;
using namespace testing;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(PROTOFUSE_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe) != nullptr) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const std::string small_world_flags =
    "--embed-dim 12 --semantic-dim 6 --base-classes 10 --novel-classes 6 --attributes 8 "
    "--min-attributes 2 --max-attributes 4 --samples-per-class 25";

const std::string small_net_flags = "--latent-dim 10 --aggregator-hidden 7 --decoder-hidden 9";

}  // namespace

TEST_CASE("cli exit codes and overwrite protection") {
  const auto dir = scratch_dir("cli-codes");
  const auto w = (dir / "w").string();

  CHECK(run("").code == 2);
  CHECK(run("eval --world " + w).code == 2);
  CHECK(run("gen --out " + w).code == 2);  // seed is mandatory
  CHECK(run("eval --world " + w + " --checkpoint x --seed 1 --mode best").code == 2);
  CHECK(run("--help").code == 0);

  const auto missing = run("eval --world " + (dir / "nope").string() + " --checkpoint x --seed 1");
  CHECK(missing.code == 1);
  CHECK(missing.out.rfind("error: ", 0) == 0);
  CHECK(std::count(missing.out.begin(), missing.out.end(), '\n') == 1);

  REQUIRE(run("gen --out " + w + " --seed 1 " + small_world_flags).code == 0);
  CHECK(run("gen --out " + w + " --seed 1 " + small_world_flags).code == 1);
  CHECK(run("gen --out " + w + " --seed 1 --overwrite " + small_world_flags).code == 0);

  const auto ckpt = (dir / "m.pcn").string();
  REQUIRE(run("train-completion --world " + w + " --out " + ckpt + " --seed 2 --epochs 2 " + small_net_flags).code == 0);
  const auto sidecar = json::parse(read_file(ckpt + ".json"));
  CHECK(sidecar["architecture"]["embed_dim"] == 12);
  CHECK(sidecar["architecture"]["semantic_dim"] == 6);
  CHECK(sidecar["training"]["losses"].size() == 2);
  CHECK(sidecar["training"]["seed"] == 2);
  CHECK(run("train-completion --world " + w + " --out " + ckpt + " --seed 2 --epochs 2").code == 1);

  // Corrupt checkpoint: runtime error, not a crash.
  write_file_atomic(dir / "bad.pcn", "PCN1\x05");
  write_file_atomic(dir / "bad.pcn.json", read_file(ckpt + ".json"));
  const auto bad = run("eval --world " + w + " --checkpoint " + (dir / "bad.pcn").string() + " --seed 1 --episodes 2");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("truncated") != std::string::npos);
}

TEST_CASE("cli eval on a separable world and ablation consistency") {
  const auto dir = scratch_dir("cli-eval");
  const auto w = (dir / "w").string();
  REQUIRE(run("gen --out " + w + " --seed 3 --noise-std 0 --dropout 0 --class-offset-std 0.5 " + small_world_flags)
              .code == 0);
  const auto ckpt = (dir / "m.pcn").string();
  REQUIRE(run("train-completion --world " + w + " --out " + ckpt + " --seed 4 --epochs 1 " + small_net_flags).code == 0);

  const auto eval = run("eval --world " + w + " --checkpoint " + ckpt +
                        " --seed 5 --episodes 30 --mode mean-only --report " + (dir / "e.json").string());
  REQUIRE(eval.code == 0);
  CHECK(eval.out.find("100.00%") != std::string::npos);
  const auto report = json::parse(read_file(dir / "e.json"));
  CHECK(report["mean_acc"] == 1.0);
  CHECK(report["mode"] == "mean-only");

  const auto noisy = (dir / "nw").string();
  REQUIRE(run("gen --out " + noisy + " --seed 6 " + small_world_flags).code == 0);
  REQUIRE(run("eval --world " + noisy + " --checkpoint " + ckpt +
              " --seed 7 --episodes 40 --mode mean-only --report " + (dir / "m.json").string())
              .code == 0);
  REQUIRE(run("ablate --world " + noisy + " --checkpoint " + ckpt + " --seed 7 --episodes 40 --report " +
              (dir / "a.json").string())
              .code == 0);
  const auto single = json::parse(read_file(dir / "m.json"));
  const auto rows = json::parse(read_file(dir / "a.json"))["rows"];
  REQUIRE(rows.size() == 4);
  CHECK(rows[0]["mode"] == "mean-only");
  CHECK(rows[0]["per_episode"] == single["per_episode"]);
  CHECK(rows[0]["mean_acc"] == single["mean_acc"]);
  CHECK(rows[3]["mode"] == "gauss-fusion");
}
