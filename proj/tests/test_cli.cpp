// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "tokenseek/cli.hpp"
#include "tokenseek/seeker.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = tokenseek::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// A scratch directory with a model and a six-record corpus.
struct Workspace {
  fs::path dir;
  std::string model, corpus, scores;

  Workspace() {
    dir = fs::temp_directory_path() / "tokenseek_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    model = (dir / "m.ckpt").string();
    corpus = (dir / "c.jsonl").string();
    scores = (dir / "s.csv").string();
    REQUIRE(run({"init", "--config", "1,16,2,32,259,256", "--seed", "3", "--out", model}).code == 0);
    REQUIRE(run({"toy-corpus", "--task", "mixed", "--count", "6", "--seed", "2", "--out", corpus}).code == 0);
    REQUIRE(run({"score", "--model", model, "--corpus", corpus, "--out", scores}).code == 0);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("usage errors exit 1 and help exits 0") {
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"init"}).code == 1);
  CHECK(run({"init", "--config", "1,16,3,32,259,256"}).code == 1);
}

TEST_CASE("score: deterministic, validated before work, missing inputs named") {
  Workspace ws;
  const auto first = slurp(ws.scores);
  const Result again = run({"score", "--model", ws.model, "--corpus", ws.corpus, "--out", ws.scores});
  CHECK(again.code == 0);
  CHECK(slurp(ws.scores) == first);
  CHECK(again.out.find("instances 6") != std::string::npos);
  CHECK(again.out.find("r=0.1 k=") != std::string::npos);

  const std::string fresh = ws.path("never.csv");
  const Result zero = run({"score", "--model", ws.model, "--corpus", ws.corpus, "--alpha", "0", "--beta", "0", "--out", fresh});
  CHECK(zero.code == 1);
  CHECK_FALSE(fs::exists(fresh));

  const std::string missing = ws.path("absent.ckpt");
  const Result no_model = run({"score", "--model", missing, "--corpus", ws.corpus, "--out", fresh});
  CHECK(no_model.code == 2);
  CHECK(no_model.err.find(missing) != std::string::npos);

  const tokenseek::ScoreSet s = tokenseek::read_scores(fs::path(ws.scores));
  CHECK(s.instances.size() == 6);
  CHECK(first.find("# corpus=" + ws.corpus) != std::string::npos);
}

TEST_CASE("score threads do not change the file") {
  Workspace ws;
  const std::string two = ws.path("s2.csv");
  REQUIRE(run({"score", "--model", ws.model, "--corpus", ws.corpus, "--out", two, "--threads", "3"}).code == 0);
  auto strip = [](std::string s) {
    for (const char* key : {"# threads=", "# out="}) {
      const auto p = s.find(key);
      s.erase(p, s.find('\n', p) - p);
    }
    return s;
  };
  CHECK(strip(slurp(two)) == strip(slurp(ws.scores)));
}

TEST_CASE("train: seek needs scores, full warns about a ratio") {
  Workspace ws;
  const Result seek = run({"train", "--model", ws.model, "--corpus", ws.corpus, "--mode", "seek"});
  CHECK(seek.code == 1);
  CHECK(seek.err.find("--scores") != std::string::npos);
  CHECK(seek.err.find("score") != std::string::npos);

  const Result full = run({"train", "--model", ws.model, "--corpus", ws.corpus, "--mode", "full", "--ratio", "0.5",
                           "--warmup", "1", "--accum", "2", "--out", ws.path("full")});
  CHECK(full.code == 0);
  CHECK(full.err.find("--ratio is ignored") != std::string::npos);

  const Result warm = run({"train", "--model", ws.model, "--corpus", ws.corpus, "--out", ws.path("w")});
  CHECK(warm.code == 1);
  CHECK(warm.err.find("warmup") != std::string::npos);
}

TEST_CASE("train end to end: metrics parse, memreport is exact, reruns are byte-identical") {
  Workspace ws;
  const std::vector<std::string> args{"train", "--model", ws.model, "--corpus", ws.corpus, "--mode", "seek",
                                      "--ratio", "0.3", "--scores", ws.scores, "--warmup", "1", "--accum", "2",
                                      "--epochs", "2", "--eval", ws.corpus, "--out", ws.path("run")};
  const Result a = run(args);
  REQUIRE(a.code == 0);
  const auto metrics = slurp(ws.path("run/metrics.csv"));
  const auto ckpt = slurp(ws.path("run/model.ckpt"));
  const auto memory = slurp(ws.path("run/memory.txt"));

  std::istringstream is(metrics);
  std::string line;
  bool in_steps = false;
  std::size_t steps = 0;
  while (std::getline(is, line)) {
    if (line == "step,lr,loss,cached_scalars") {
      in_steps = true;
      continue;
    }
    if (!in_steps || line.empty() || line[0] == '#') {
      if (in_steps && line == "# summary") in_steps = false;
      continue;
    }
    std::istringstream ls(line);
    std::string f;
    std::size_t fields = 0;
    while (std::getline(ls, f, ',')) ++fields;
    CHECK(fields == 4);
    ++steps;
  }
  CHECK(steps == 6);
  CHECK(metrics.find("# eval_loss=") != std::string::npos);

  const Result mem = run({"memreport", "--run", ws.path("run")});
  CHECK(mem.code == 0);
  CHECK(mem.out.find(",1.000000\n") != std::string::npos);

  const Result b = run(args);
  REQUIRE(b.code == 0);
  CHECK(b.out == a.out);
  CHECK(slurp(ws.path("run/metrics.csv")) == metrics);
  CHECK(slurp(ws.path("run/model.ckpt")) == ckpt);
  CHECK(slurp(ws.path("run/memory.txt")) == memory);
}

TEST_CASE("adapter runs stay exact in memreport") {
  Workspace ws;
  const Result r = run({"train", "--model", ws.model, "--corpus", ws.corpus, "--mode", "random", "--ratio", "0.5",
                        "--adapter", "--lora-targets", "q,o,ff2", "--warmup", "1", "--accum", "3", "--out",
                        ws.path("ad")});
  REQUIRE(r.code == 0);
  CHECK(run({"memreport", "--run", ws.path("ad")}).code == 0);
  CHECK(run({"train", "--model", ws.model, "--corpus", ws.corpus, "--adapter", "--lora-targets", "zz", "--warmup",
             "1", "--out", ws.path("bad")})
            .code == 1);
}

TEST_CASE("memreport analytic table") {
  const Result r = run({"memreport", "--config", "1,7168,128,7168,1000,4096", "--ratios", "0.1,1.0"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("1,4096,2147483648,29360128,2176843776,51380224,42.37") != std::string::npos);
  CHECK(r.out.find("0.1,410,214958080,") != std::string::npos);
  CHECK(run({"memreport"}).code == 1);
  CHECK(run({"memreport", "--run", "/nonexistent/run"}).code == 2);
}

TEST_CASE("gradcheck passes on tiny and reports violations with exit 3") {
  const Result ok = run({"gradcheck", "--size", "tiny", "--masks", "20"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("fd_full,") != std::string::npos);
  CHECK(ok.out.find("VIOLATION") == std::string::npos);
  CHECK(run({"gradcheck", "--size", "tiny", "--masks", "2", "--fd-tol", "0"}).code == 3);
  CHECK(run({"gradcheck", "--size", "huge"}).code == 1);
}

TEST_CASE("inspect marks tokens and rejects unknown ids") {
  Workspace ws;
  const Result all = run({"inspect", ws.scores, "arith-1", "--ratio", "1.0", "--corpus", ws.corpus});
  REQUIRE(all.code == 0);
  std::istringstream is(all.out);
  std::string line;
  bool csv = false;
  std::size_t rows = 0, selected = 0;
  while (std::getline(is, line)) {
    if (line.rfind("token_index,", 0) == 0) {
      csv = true;
      continue;
    }
    if (!csv) continue;
    ++rows;
    // token_index,token,selected,... where the token may be a quoted comma
    const auto first = line.find(',');
    const auto rest = line.substr(first + 1);
    const auto sel_pos = rest[0] == '"' ? rest.find("\",", 1) + 2 : rest.find(',') + 1;
    selected += rest[sel_pos] == '1';
  }
  CHECK(rows > 0);
  CHECK(selected == rows);
  CHECK(all.out.find("[[<bos>") != std::string::npos);

  const Result half = run({"inspect", ws.scores, "arith-1", "--ratio", "0.1"});
  CHECK(half.code == 0);
  CHECK(half.out.find("selected ") != std::string::npos);
  CHECK(run({"inspect", ws.scores, "nope"}).code == 2);
}

TEST_CASE("config file: flags beat the file, the file beats defaults") {
  Workspace ws;
  const std::string cfg = ws.path("t.cfg");
  {
    std::ofstream os(cfg);
    os << "# training defaults\nwarmup=1\naccum=3\nratio=0.5\nresponse-only=true\n";
  }
  const Result r = run({"train", "--config-file", cfg, "--model", ws.model, "--corpus", ws.corpus, "--mode", "random",
                        "--accum", "2", "--out", ws.path("cf")});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("# accum=2\n") != std::string::npos);
  CHECK(r.out.find("# warmup=1\n") != std::string::npos);
  CHECK(r.out.find("# ratio=0.5\n") != std::string::npos);
  CHECK(r.out.find("# response-only=true\n") != std::string::npos);
  {
    std::ofstream os(cfg);
    os << "no-such-option=1\n";
  }
  CHECK(run({"train", "--config-file", cfg, "--model", ws.model, "--corpus", ws.corpus}).code == 1);
  CHECK(run({"train", "--config-file", ws.path("missing.cfg"), "--model", ws.model, "--corpus", ws.corpus}).code == 2);
}

TEST_CASE("ablate writes its tables") {
  Workspace ws;
  const Result r = run({"ablate", "--model", ws.model, "--corpus", ws.corpus, "--scores", ws.scores, "--ratios",
                        "0.5,1.0", "--seeds", "1,2,3", "--warmup", "1", "--accum", "3", "--out", ws.path("ab")});
  REQUIRE(r.code == 0);
  const auto rows = slurp(ws.path("ab/rows.csv"));
  CHECK(rows.find("mode,r,seed,final_eval_loss") != std::string::npos);
  std::size_t lines = 0;
  std::istringstream is(rows);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty() && line[0] != '#') ++lines;
  CHECK(lines == 1 + 2 * 2 * 3);
  CHECK(fs::exists(ws.path("ab/aggregate.csv")));
  CHECK(fs::exists(ws.path("ab/table.txt")));
  CHECK(run({"ablate", "--model", ws.model, "--corpus", ws.corpus, "--seeds", "1,2"}).code == 1);
  CHECK(run({"ablate", "--model", ws.model, "--corpus", ws.corpus, "--modes", "seek"}).code == 1);
}

TEST_CASE("relative outputs land under the output directory variable") {
  const fs::path base = fs::temp_directory_path() / "tokenseek_cli_env";
  fs::remove_all(base);
  ::setenv(tokenseek::cli::kOutDirEnv, base.c_str(), 1);
  const Result r = run({"toy-corpus", "--count", "2", "--out", "x.jsonl"});
  ::unsetenv(tokenseek::cli::kOutDirEnv);
  CHECK(r.code == 0);
  CHECK(fs::exists(base / "x.jsonl"));
  fs::remove_all(base);
}
