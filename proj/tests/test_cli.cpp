// Tests for the command-line tool (driven through the real binary, located via
// the BITQUANT_CLI environment variable) and for the benchmark harness library
// entry points it wraps.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bitquant/bench.hpp"

using namespace bitquant;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const std::string& cli_path() {
  static const std::string p = [] {
    const char* v = std::getenv("BITQUANT_CLI");
    REQUIRE_MESSAGE(v != nullptr, "BITQUANT_CLI must point at the built binary");
    return std::string(v);
  }();
  return p;
}

const std::string& work_dir() {
  static const std::string d = [] {
    std::string t = "/tmp/bitquant_cli_test_" + std::to_string(::getpid());
    const int rc = std::system(("rm -rf " + t + " && mkdir -p " + t).c_str());
    REQUIRE(rc == 0);
    return t;
  }();
  return d;
}

// Runs `<cli> args` with an optional environment prefix; captures exit code,
// stdout, and stderr.
RunResult run(const std::string& args, const std::string& env = "") {
  const std::string so = work_dir() + "/stdout.txt";
  const std::string se = work_dir() + "/stderr.txt";
  const std::string cmd =
      "cd " + work_dir() + " && " + env + (env.empty() ? "" : " ") + cli_path() + " " + args +
      " >" + so + " 2>" + se;
  const int st = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

int data_rows(const std::string& csv) {
  int n = -1;  // skip header
  std::istringstream ss(csv);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Benchmark harness library
// ---------------------------------------------------------------------------

TEST_CASE("bench config validation") {
  BenchConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.reps = 2;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg.reps = 3;
  cfg.ci_list.clear();
  CHECK_THROWS_AS(cfg.validate(), ParamError);
  cfg.ci_list = {8};
  cfg.bit_list = {{0, 1}};
  CHECK_THROWS_AS(cfg.validate(), RangeError);
  cfg.bit_list = {{1, 1}};
  cfg.n = 0;
  CHECK_THROWS_AS(cfg.validate(), ParamError);
}

TEST_CASE("bench produces gated rows and a well-formed table") {
  BenchConfig cfg;
  cfg.n = 8;
  cfg.m = 64;
  cfg.kernel_size = 3;
  cfg.ci_list = {2, 4};
  cfg.bit_list = {{1, 1}, {2, 2}};
  cfg.thread_list = {1};
  cfg.reps = 3;
  cfg.seed = 11;
  const std::vector<BenchRow> rows = run_bench(cfg);

  // Per input-channel count: naive FP + blocked FP + one row per bit pair.
  CHECK(rows.size() == 2 * (2 + 2));
  int fp_rows = 0, bit_rows = 0;
  for (const BenchRow& r : rows) {
    CHECK(r.mean_ms > 0.0);
    CHECK(r.std_ms >= 0.0);
    CHECK(r.speedup_vs_naive > 0.0);
    if (r.kernel == "fp_naive") {
      CHECK(r.k_w == 32);
      CHECK(r.speedup_vs_naive == doctest::Approx(1.0));
      ++fp_rows;
    }
    if (r.kernel == "bitwise") ++bit_rows;
  }
  CHECK(fp_rows == 2);
  CHECK(bit_rows == 4);

  const std::string csv = bench_csv(rows);
  CHECK(contains(csv, "kernel,k_w,k_a,c_i,threads,mean_ms,std_ms,speedup_vs_naive"));
  CHECK(data_rows(csv) == static_cast<int>(rows.size()));
}

// ---------------------------------------------------------------------------
// Exit-code contract
// ---------------------------------------------------------------------------

TEST_CASE("usage errors exit with code 2") {
  CHECK(run("").code == 2);
  CHECK(run("definitely-not-a-subcommand").code == 2);
  CHECK(run("fit --bits 0").code == 2);
  CHECK(run("fit --bits 9").code == 2);
  CHECK(run("bench --reps 1").code == 2);
  CHECK(run("train --weights nonsense").code == 2);
  CHECK(run("pack").code == 2);  // missing required --checkpoint
  CHECK(run("--help").code == 0);
}

TEST_CASE("runtime errors exit with code 1") {
  const RunResult missing = run("--out rt1 pack --checkpoint /nonexistent/model.bqck");
  CHECK(missing.code == 1);
  CHECK(contains(missing.err, "error:"));
  const RunResult badidx = run("--out rt2 fit --input /nonexistent.idx --labels /nonexistent2.idx");
  CHECK(badidx.code == 1);
}

// ---------------------------------------------------------------------------
// speedup
// ---------------------------------------------------------------------------

TEST_CASE("speedup calculator output") {
  const RunResult canon = run("--out sp1 speedup --kw 1 --ka 1 --q 1000000 --L 64 --gamma 1.91");
  CHECK(canon.code == 0);
  CHECK(contains(canon.out, "S = 61.1"));
  CHECK(contains(canon.out, "~60x"));

  const RunResult two = run("--out sp2 speedup --kw 2 --ka 2 --q 2304");
  CHECK(two.code == 0);
  CHECK(contains(two.out, "S = 14.88"));

  const RunResult degenerate = run("--out sp3 speedup --gamma 0");
  CHECK(degenerate.code == 0);
  CHECK(contains(degenerate.out, "S = 0"));
  CHECK(contains(degenerate.out, "warning"));
}

// ---------------------------------------------------------------------------
// run.json echo, seed precedence, config files
// ---------------------------------------------------------------------------

TEST_CASE("every run echoes its resolved config") {
  CHECK(run("--out echo1 speedup").code == 0);
  const nlohmann::json j = nlohmann::json::parse(slurp(work_dir() + "/echo1/run.json"));
  CHECK(j.at("command") == "speedup");
  CHECK(j.at("q") == 1000000);
}

TEST_CASE("seed resolution: default < env < flag") {
  CHECK(run("--out seed_def train --epochs 0").code == 0);
  nlohmann::json j = nlohmann::json::parse(slurp(work_dir() + "/seed_def/run.json"));
  CHECK(j.at("seed") == 1);

  CHECK(run("--out seed_env train --epochs 0", "BITQUANT_SEED=7").code == 0);
  j = nlohmann::json::parse(slurp(work_dir() + "/seed_env/run.json"));
  CHECK(j.at("seed") == 7);

  CHECK(run("--out seed_flag --seed 9 train --epochs 0", "BITQUANT_SEED=7").code == 0);
  j = nlohmann::json::parse(slurp(work_dir() + "/seed_flag/run.json"));
  CHECK(j.at("seed") == 9);
}

TEST_CASE("config file applies under flags") {
  {
    std::ofstream f(work_dir() + "/opts.ini");
    f << "seed=5\n";
  }
  CHECK(run("--config opts.ini --out cfg1 train --epochs 0").code == 0);
  nlohmann::json j = nlohmann::json::parse(slurp(work_dir() + "/cfg1/run.json"));
  CHECK(j.at("seed") == 5);

  CHECK(run("--config opts.ini --out cfg2 --seed 12 train --epochs 0").code == 0);
  j = nlohmann::json::parse(slurp(work_dir() + "/cfg2/run.json"));
  CHECK(j.at("seed") == 12);
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

TEST_CASE("fit on heteroscedastic synth reports a majority of improved channels") {
  const RunResult r = run("--out fit1 --seed 3 fit --channels 24 --iters 20 --samples 4 --bits 2");
  CHECK(r.code == 0);
  CHECK(contains(r.out, "channels improved under the averaged basis"));
  const std::string csv = slurp(work_dir() + "/fit1/fit_report.csv");
  CHECK(contains(csv, "channel,mse_caq,mse_global,rel_change_pct"));
  CHECK(data_rows(csv) == 24);
}

TEST_CASE("fit on a single channel reports zero relative change") {
  const RunResult r = run("--out fit2 fit --channels 1 --iters 10 --samples 4");
  CHECK(r.code == 0);
  CHECK(contains(r.out, "improved under the averaged basis: 0/1"));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TEST_CASE("train with zero epochs writes a header-only log and succeeds") {
  const RunResult r = run("--out tr0 train --epochs 0 --per-class 4");
  CHECK(r.code == 0);
  const std::string csv = slurp(work_dir() + "/tr0/train_log.csv");
  CHECK(contains(csv, "epoch,lr,loss,train_acc,eval_acc"));
  CHECK(data_rows(csv) == 0);
  CHECK(!slurp(work_dir() + "/tr0/model.bqck").empty());
}

TEST_CASE("identical seeds give byte-identical training logs") {
  CHECK(run("--out det1 --seed 21 train --epochs 5 --per-class 8").code == 0);
  CHECK(run("--out det2 --seed 21 train --epochs 5 --per-class 8").code == 0);
  const std::string a = slurp(work_dir() + "/det1/train_log.csv");
  CHECK(!a.empty());
  CHECK(a == slurp(work_dir() + "/det2/train_log.csv"));
  CHECK(slurp(work_dir() + "/det1/model.bqck") == slurp(work_dir() + "/det2/model.bqck"));
}

TEST_CASE("a 2x2 ablation grid writes a four-row table") {
  const RunResult r =
      run("--out ab1 --seed 2 train --ablate --epochs 3 --per-class 6 --seeds 1,2");
  CHECK(r.code == 0);
  const std::string csv = slurp(work_dir() + "/ab1/ablation.csv");
  CHECK(contains(csv, "weights,acts,mean_train_acc,acc_seed1,acc_seed2"));
  CHECK(data_rows(csv) == 4);
  const std::string md = slurp(work_dir() + "/ab1/ablation.md");
  CHECK(contains(md, "| lqw | caq |"));
  CHECK(contains(md, "| fp | global |"));
}

// ---------------------------------------------------------------------------
// pack
// ---------------------------------------------------------------------------

TEST_CASE("pack verifies and exports a quantized checkpoint") {
  CHECK(run("--out pktrain --seed 4 train --epochs 6 --per-class 8 --weights lqw --acts caq")
            .code == 0);
  const RunResult r = run("--out pk1 pack --checkpoint pktrain/model.bqck");
  CHECK(r.code == 0);
  CHECK(contains(r.out, "verified on 16 inputs"));
  CHECK(!slurp(work_dir() + "/pk1/model.bqpk").empty());
}

TEST_CASE("pack refuses a full-precision checkpoint") {
  CHECK(run("--out fptrain --seed 4 train --epochs 2 --per-class 6 --weights fp --acts fp")
            .code == 0);
  const RunResult r = run("--out pk2 pack --checkpoint fptrain/model.bqck");
  CHECK(r.code == 1);
  CHECK(contains(r.err, "nothing to pack"));
  CHECK(slurp(work_dir() + "/pk2/model.bqpk").empty());
}

TEST_CASE("pack propagates checkpoint corruption as a runtime error") {
  std::string bytes = slurp(work_dir() + "/pktrain/model.bqck");
  REQUIRE(bytes.size() > 10);
  bytes[0] = 'X';
  {
    std::ofstream f(work_dir() + "/corrupt.bqck", std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  const RunResult r = run("--out pk3 pack --checkpoint corrupt.bqck");
  CHECK(r.code == 1);
  CHECK(contains(r.err, "error:"));
}
