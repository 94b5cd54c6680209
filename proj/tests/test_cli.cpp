#include "helpers.hpp"

#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using haan::testing::TempDir;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(HAAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Shared small corpus plus a short training config.
struct Workspace {
  TempDir dir{"cli"};
  fs::path data = dir / "data";
  fs::path train_cfg = dir / "train.cfg";

  Workspace() {
    std::ofstream(dir / "synth.cfg") << "atomic_dim = 8\ntrain_videos = 16\nval_videos = 6\n";
    std::ofstream(train_cfg) << "epochs = 2\nnum_concepts = 7\ntopk_concepts = 2\nembed_dim = 8\nlearning_rate = 0.001\n";
    REQUIRE(run("synth --config " + q(dir / "synth.cfg") + " --out " + q(data) + " --seed 3") == 0);
  }
  std::string base() const { return "--dataset " + q(data) + " --split " + q(data / "split.json"); }
};

}  // namespace

TEST_CASE("synth writes a deterministic dataset") {
  Workspace ws;
  for (const char* f : {"manifest.json", "atomic_truth.json", "split.json", "synth.cfg", "run.json"})
    CHECK(fs::exists(ws.data / f));
  const fs::path again = ws.dir / "again";
  REQUIRE(run("synth --config " + q(ws.dir / "synth.cfg") + " --out " + q(again) + " --seed 3") == 0);
  CHECK(slurp(again / "manifest.json") == slurp(ws.data / "manifest.json"));
  CHECK(slurp(again / "features/train_0003.bin") == slurp(ws.data / "features/train_0003.bin"));
  CHECK(slurp(again / "run.json") == slurp(ws.data / "run.json"));

  CHECK(run("synth --out " + q(ws.data)) == 2);
  CHECK(run("synth --out " + q(ws.data) + " --force --seed 4") == 0);
  CHECK(run("synth --out " + q(ws.dir / "missing/parent/x")) == 2);
  CHECK(run("synth --out " + q(ws.dir / "s2") + " --seed -1") == 2);
}

TEST_CASE("argument and config errors exit with 2") {
  Workspace ws;
  CHECK(run("") != 0);
  CHECK(run("--help") == 0);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train " + ws.base() + " --out " + q(ws.dir / "r") + " --no-such-flag") == 2);
  CHECK(run("train " + ws.base() + " --out " + q(ws.dir / "r") + " --clusters 1") == 2);
  CHECK(run("train " + ws.base() + " --out " + q(ws.dir / "r") + " --losses pseudo") == 2);
  CHECK(run("train " + ws.base() + " --out " + q(ws.dir / "r") + " --distance manhattan") == 2);
  std::ofstream(ws.dir / "bad_split.json") << "{";
  CHECK(run("train --dataset " + q(ws.data) + " --split " + q(ws.dir / "bad_split.json") + " --out " +
            q(ws.dir / "r")) == 2);
}

TEST_CASE("split command") {
  Workspace ws;
  std::ofstream(ws.dir / "big.cfg") << "atomic_dim = 4\ntrain_videos = 60\nval_videos = 20\n";
  REQUIRE(run("synth --config " + q(ws.dir / "big.cfg") + " --out " + q(ws.dir / "big")) == 0);
  const fs::path out = ws.dir / "s.json";
  REQUIRE(run("split --dataset " + q(ws.dir / "big") + " --out " + q(out) + " --seed 1") == 0);
  const json s = read_json(out);
  CHECK(s["train"].size() + s["val"].size() == 80);
  CHECK(fs::exists(ws.dir / "s.run.json"));
  const std::string first = slurp(out);
  REQUIRE(run("split --dataset " + q(ws.dir / "big") + " --out " + q(out) + " --seed 1") == 0);
  CHECK(slurp(out) == first);
  CHECK(run("split --dataset " + q(ws.dir / "big") + " --out " + q(out) + " --ratio 1.5") != 0);
  // 22 videos over 8 classes leaves some class in a single video
  CHECK(run("split --dataset " + q(ws.data) + " --out " + q(out) + " --seed 1") == 3);
  CHECK(run("split --dataset " + q(ws.dir / "nowhere") + " --out " + q(out)) == 3);
}

TEST_CASE("train, eval and inspect") {
  Workspace ws;
  const fs::path a = ws.dir / "run_a", b = ws.dir / "run_b";
  REQUIRE(run("train " + ws.base() + " --config " + q(ws.train_cfg) + " --out " + q(a) + " --seed 4") == 0);
  REQUIRE(run("train " + ws.base() + " --config " + q(ws.train_cfg) + " --out " + q(b) + " --seed 4") == 0);
  for (const char* f : {"init.ckpt", "best.ckpt", "last.ckpt", "metrics.jsonl", "resolved.cfg", "summary.json"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  // two epochs, two batches each, plus one summary line per epoch
  const std::string log = slurp(a / "metrics.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 6);

  const fs::path ev = ws.dir / "eval";
  REQUIRE(run("eval " + ws.base() + " --subset val --checkpoint " + q(a / "best.ckpt") + " --out " + q(ev)) == 0);
  const json rep = read_json(ev / "report.json");
  CHECK(rep["protocol"] == "finegym");
  CHECK(rep["avg_map"].get<double>() >= 0.0);
  CHECK(rep["avg_map"].get<double>() <= 1.0);
  CHECK(fs::exists(ev / "report.csv"));
  CHECK(fs::exists(ev / "detections.jsonl"));
  REQUIRE(run("eval " + ws.base() + " --subset val --checkpoint " + q(a / "best.ckpt") + " --out " +
              q(ws.dir / "eval_fa") + " --protocol fineaction") == 0);
  CHECK(read_json(ws.dir / "eval_fa/report.json")["thresholds"].size() == 10);

  const fs::path in = ws.dir / "inspect";
  REQUIRE(run("inspect-concepts " + ws.base() + " --checkpoint " + q(a / "best.ckpt") + " --out " + q(in) +
              " --truth " + q(ws.data / "atomic_truth.json")) == 0);
  const json c = read_json(in / "concepts.json");
  CHECK(c["classes"].size() == 8);
  for (const auto& [name, entry] : c["classes"].items()) CHECK(entry["concepts"].size() == 2);
  CHECK(c["concepts"].size() == 7);
  CHECK(c["relevance"].get<double>() >= 0.0);
  CHECK(fs::exists(in / "clusters.bin"));
  CHECK(run("inspect-concepts " + ws.base() + " --checkpoint " + q(a / "best.ckpt") + " --out " +
            q(ws.dir / "inspect2") + " --clusters 5") == 4);

  SUBCASE("artifact mismatches exit with 4") {
    CHECK(run("eval " + ws.base() + " --checkpoint " + q(ws.data / "manifest.json") + " --out " + q(ws.dir / "e2")) == 4);
    std::ofstream(ws.dir / "other.cfg") << "atomic_dim = 5\ntrain_videos = 4\nval_videos = 2\n";
    REQUIRE(run("synth --config " + q(ws.dir / "other.cfg") + " --out " + q(ws.dir / "other")) == 0);
    CHECK(run("eval --dataset " + q(ws.dir / "other") + " --checkpoint " + q(a / "best.ckpt") + " --out " +
              q(ws.dir / "e3")) == 4);
  }
  SUBCASE("evaluation without temporal annotations exits with 3") {
    json m = read_json(ws.data / "manifest.json");
    for (auto& v : m["videos"]) v.erase("segments");
    std::ofstream(ws.data / "manifest.json") << m.dump();
    CHECK(run("eval --dataset " + q(ws.data) + " --checkpoint " + q(a / "best.ckpt") + " --out " + q(ws.dir / "e4")) == 3);
  }
}

TEST_CASE("ablate ladder writes a four-row summary") {
  Workspace ws;
  const fs::path out = ws.dir / "ablate";
  std::ofstream(ws.dir / "short.cfg") << "epochs = 1\nnum_concepts = 7\ntopk_concepts = 2\nembed_dim = 8\n";
  REQUIRE(run("ablate " + ws.base() + " --config " + q(ws.dir / "short.cfg") + " --out " + q(out) +
              " --seeds 0 --grid ladder") == 0);
  const json s = read_json(out / "summary.json");
  REQUIRE(s.size() == 4);
  CHECK(s[0]["cell"] == "mil");
  CHECK(s[3]["cell"] == "mil+pseudo+concept+coarse");
  for (const auto& row : s) CHECK(row["avg_map"].size() == 1);
  const std::string csv = slurp(out / "summary.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(fs::exists(out / "cells/mil/seed_0/best.ckpt"));
  CHECK(run("ablate " + ws.base() + " --out " + q(ws.dir / "ab2") + " --grid bogus") == 2);
}
