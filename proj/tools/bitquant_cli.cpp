// bitquant command-line tool: quantizer fitting, training/ablation, kernel
// benchmarking, the speedup calculator, and packed-model export. Every run
// echoes its fully resolved configuration to <out>/run.json; exit codes are
// 0 on success, 2 for usage errors, 1 for runtime failures.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "bitquant/bench.hpp"
#include "bitquant/data_io.hpp"
#include "bitquant/quantizer.hpp"
#include "bitquant/tinynet.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace bitquant;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

void write_run_json(const std::string& out_dir, const json& j) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir + "/run.json", std::ios::trunc);
  if (!f) throw IoError("cannot write " + out_dir + "/run.json");
  f << j.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

WeightMode parse_weights(const std::string& s) {
  return s == "fp" ? WeightMode::FP : WeightMode::LQW;
}

ActMode parse_acts(const std::string& s) {
  if (s == "fp") return ActMode::FP;
  if (s == "caq") return ActMode::CAQ;
  return ActMode::GlobalScalar;
}

// ---------------------------------------------------------------------------
// fit: channel-wise averaged quantizer vs the single global basis
// ---------------------------------------------------------------------------

struct FitOpts {
  std::string input = "synth";
  std::string labels;
  std::string report;
  int bits = 2;
  int steps = 60;
  int samples = 8;
  int channels = 96;
  double scale_lo = 0.1, scale_hi = 10.0;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

int cmd_fit(const FitOpts& o) {
  const std::string report = o.report.empty() ? o.out_dir + "/fit_report.csv" : o.report;
  write_run_json(o.out_dir,
                 json{{"command", "fit"},
                      {"input", o.input},
                      {"labels", o.labels},
                      {"bits", o.bits},
                      {"steps", o.steps},
                      {"samples", o.samples},
                      {"channels", o.channels},
                      {"scale_lo", o.scale_lo},
                      {"scale_hi", o.scale_hi},
                      {"seed", o.seed},
                      {"report", report}});

  Batch train_data, eval_data;
  if (o.input == "synth") {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> lu(std::log(o.scale_lo), std::log(o.scale_hi));
    Vec scales(o.channels);
    for (int c = 0; c < o.channels; ++c) scales[c] = std::exp(lu(rng));
    const int classes = 4;
    const int per_class = (o.steps * o.samples + classes - 1) / classes;
    Dataset ds = synth_blobs(o.seed * 1000 + 7, per_class, classes, scales);
    train_data = ds.images;
    train_data.data = train_data.data.cwiseMax(0.0);
    Dataset ev = synth_blobs(o.seed * 1000 + 500, 8, classes, scales);
    eval_data = ev.images;
    eval_data.data = eval_data.data.cwiseMax(0.0);
  } else {
    if (o.labels.empty()) throw ParamError("fit: an IDX input needs --labels as well");
    Dataset ds = load_idx(o.input, o.labels);
    train_data = ds.images;
    eval_data = ds.images;
  }

  ActQuantState caq = make_act_quant_state(train_data.c, o.bits);
  ActQuantState global = make_act_quant_state(1, o.bits);
  const int per_step = std::min(o.samples, train_data.samples());
  for (int s = 0; s < o.steps; ++s) {
    const int from = (s * per_step) % std::max(1, train_data.samples() - per_step + 1);
    Batch b;
    b.c = train_data.c;
    b.h = train_data.h;
    b.w = train_data.w;
    b.data = train_data.data.middleCols(from, per_step);
    caq_train_step(b, caq);
    Batch g;
    g.c = 1;
    g.h = train_data.c * train_data.h * train_data.w;
    g.w = 1;
    g.data = b.data;
    caq_train_step(g, global);
  }

  const ChannelMseReport rep = channel_mse_report(eval_data, caq, global.averaged);
  write_text(report, to_csv(rep));
  const double pct = 100.0 * rep.improved / train_data.c;
  std::cout << "channels improved under the averaged basis: " << rep.improved << "/"
            << train_data.c << " (" << pct << "%)\n"
            << "averaged basis:";
  for (long i = 0; i < caq.averaged.size(); ++i) std::cout << ' ' << caq.averaged[i];
  std::cout << "\nglobal basis:";
  for (long i = 0; i < global.averaged.size(); ++i) std::cout << ' ' << global.averaged[i];
  std::cout << "\nreport: " << report << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string task = "synth";
  std::string images, labels;
  int epochs = 200;
  int kw = 2, ka = 2;
  std::string weights = "lqw";
  std::string acts = "caq";
  int classes = 4, per_class = 64, hw = 8;
  double noise = 0.1;
  int batch = 64;
  double lr = 0.02;
  int total_epochs = 0;  // schedule horizon; 0 = same as --epochs
  bool ablate = false;
  std::string ablate_weights = "fp,lqw";
  std::string ablate_acts = "caq,global";
  std::string seeds = "1,2,3";
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

int cmd_train(const TrainOpts& o) {
  write_run_json(o.out_dir, json{{"command", "train"},
                                 {"task", o.task},
                                 {"images", o.images},
                                 {"labels", o.labels},
                                 {"epochs", o.epochs},
                                 {"k_w", o.kw},
                                 {"k_a", o.ka},
                                 {"weights", o.weights},
                                 {"acts", o.acts},
                                 {"classes", o.classes},
                                 {"per_class", o.per_class},
                                 {"hw", o.hw},
                                 {"noise", o.noise},
                                 {"batch", o.batch},
                                 {"lr", o.lr},
                                 {"total_epochs", o.total_epochs},
                                 {"ablate", o.ablate},
                                 {"ablate_weights", o.ablate_weights},
                                 {"ablate_acts", o.ablate_acts},
                                 {"seeds", o.seeds},
                                 {"seed", o.seed}});

  Dataset ds;
  if (o.task == "synth") {
    ds = synth_blobs(o.seed * 7919 + 11, o.per_class, o.classes, Vec::Ones(1), o.hw, o.noise);
  } else {
    if (o.images.empty() || o.labels.empty())
      throw ParamError("train: --task idx needs --images and --labels");
    ds = load_idx(o.images, o.labels);
  }

  NetConfig cfg;
  cfg.classes = ds.classes;
  cfg.image_hw = ds.images.h;
  cfg.bits.k_w = o.kw;
  cfg.bits.k_a = o.ka;
  cfg.weight_mode = parse_weights(o.weights);
  cfg.act_mode = parse_acts(o.acts);
  cfg.batch_size = o.batch;
  cfg.opt.lr = o.lr;
  cfg.opt.total_epochs = o.total_epochs > 0 ? o.total_epochs : std::max(1, o.epochs);
  cfg.seed = o.seed;

  if (o.ablate) {
    std::vector<WeightMode> wms;
    for (const std::string& s : split(o.ablate_weights, ',')) wms.push_back(parse_weights(s));
    std::vector<ActMode> ams;
    for (const std::string& s : split(o.ablate_acts, ',')) ams.push_back(parse_acts(s));
    std::vector<std::uint64_t> seeds;
    for (const std::string& s : split(o.seeds, ',')) seeds.push_back(std::stoull(s));
    const std::vector<AblationCell> cells = ablate(cfg, ds, nullptr, wms, ams, seeds, o.epochs);
    write_text(o.out_dir + "/ablation.csv", ablation_csv(cells));
    write_text(o.out_dir + "/ablation.md", ablation_markdown(cells));
    std::cout << ablation_markdown(cells) << "ablation tables: " << o.out_dir
              << "/ablation.{csv,md}\n";
    return 0;
  }

  TrainState st = make_tiny_net(cfg);
  const std::vector<EpochLog> log = train(st, ds, nullptr, o.epochs);
  write_text(o.out_dir + "/train_log.csv", to_csv(log));
  save_checkpoint(st, o.out_dir + "/model.bqck");
  if (log.empty()) {
    std::cout << "no epochs requested; wrote header-only log\n";
  } else {
    std::cout << "final: loss " << log.back().loss << ", train acc " << log.back().train_acc
              << ", eval acc " << log.back().eval_acc << "\n";
  }
  std::cout << "log: " << o.out_dir << "/train_log.csv\ncheckpoint: " << o.out_dir
            << "/model.bqck\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchOpts {
  int n = 256;
  int m = 14 * 14 * 100;
  int kernel_size = 3;
  std::string ci = "64,256,1024";
  std::string bits = "1/1,2/2";
  std::string threads = "1";
  int reps = 3;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

int cmd_bench(const BenchOpts& o) {
  write_run_json(o.out_dir, json{{"command", "bench"},
                                 {"n", o.n},
                                 {"m", o.m},
                                 {"kernel_size", o.kernel_size},
                                 {"ci", o.ci},
                                 {"bits", o.bits},
                                 {"threads", o.threads},
                                 {"reps", o.reps},
                                 {"seed", o.seed}});
  BenchConfig cfg;
  cfg.n = o.n;
  cfg.m = o.m;
  cfg.kernel_size = o.kernel_size;
  cfg.reps = o.reps;
  cfg.seed = o.seed;
  cfg.ci_list.clear();
  for (const std::string& s : split(o.ci, ',')) cfg.ci_list.push_back(std::stoi(s));
  cfg.bit_list.clear();
  for (const std::string& s : split(o.bits, ',')) {
    const std::vector<std::string> kv = split(s, '/');
    if (kv.size() != 2) throw ParamError("bench: bit pairs look like 1/1 or 2/2");
    cfg.bit_list.emplace_back(std::stoi(kv[0]), std::stoi(kv[1]));
  }
  cfg.thread_list.clear();
  for (const std::string& s : split(o.threads, ',')) cfg.thread_list.push_back(std::stoi(s));

  const std::vector<BenchRow> rows = run_bench(cfg);
  const std::string csv = bench_csv(rows);
  write_text(o.out_dir + "/bench.csv", csv);
  std::cout << csv << "bench table: " << o.out_dir << "/bench.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// speedup
// ---------------------------------------------------------------------------

struct SpeedupOpts {
  int kw = 1, ka = 1;
  long long q = 1000000;
  int L = 64;
  double gamma = 1.91;
};

int cmd_speedup(const SpeedupOpts& o, const std::string& out_dir) {
  write_run_json(out_dir, json{{"command", "speedup"},
                               {"k_w", o.kw},
                               {"k_a", o.ka},
                               {"q", o.q},
                               {"L", o.L},
                               {"gamma", o.gamma}});
  SpeedupParams p;
  p.k_w = o.kw;
  p.k_a = o.ka;
  p.q = o.q;
  p.word_bits = o.L;
  p.gamma = o.gamma;
  const double s = theoretical_speedup(p);
  const double lim = speedup_asymptote(p);
  std::cout << "S = " << s << "\n";
  std::cout << "large-q asymptote = " << lim << "\n";
  if (o.gamma == 0.0)
    std::cout << "warning: gamma=0 collapses the cost model; S is degenerate\n";
  else if (o.kw == 1 && o.ka == 1 && o.L == 64 && lim > 55.0 && lim < 65.0)
    std::cout << "note: ~60x for 1-bit weights and activations on 64-bit words\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pack
// ---------------------------------------------------------------------------

struct PackOpts {
  std::string checkpoint;
  std::string out_model;
  int verify_inputs = 16;
  double tol = 1e-4;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

int cmd_pack(const PackOpts& o) {
  const std::string out_model = o.out_model.empty() ? o.out_dir + "/model.bqpk" : o.out_model;
  write_run_json(o.out_dir, json{{"command", "pack"},
                                 {"checkpoint", o.checkpoint},
                                 {"out_model", out_model},
                                 {"verify_inputs", o.verify_inputs},
                                 {"tol", o.tol},
                                 {"seed", o.seed}});
  TrainState st = load_checkpoint(o.checkpoint);
  PackedModel m = pack_model(st);

  // Verification pass: packed inference must match the dense path before the
  // file is written.
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Batch x;
  x.c = 1;
  x.h = st.cfg.image_hw;
  x.w = st.cfg.image_hw;
  x.data.resize(x.h * x.w, o.verify_inputs);
  for (long j = 0; j < x.data.cols(); ++j)
    for (long i = 0; i < x.data.rows(); ++i) x.data(i, j) = std::abs(nd(rng));
  const Mat dense = forward(st, x, ForwardMode::Eval).logits;
  const Mat packed = packed_forward(m, x);
  const double worst = (packed - dense).cwiseAbs().maxCoeff();
  const double bound = o.tol * std::max(1.0, dense.cwiseAbs().maxCoeff());
  if (!(worst <= bound))
    throw NumericError("pack: packed inference disagrees with the dense path (" +
                       std::to_string(worst) + " > " + std::to_string(bound) +
                       "); nothing written");
  save_packed(m, out_model);
  std::cout << "verified on " << o.verify_inputs << " inputs (max |diff| " << worst << ")\n"
            << "packed model: " << out_model << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bit-packed quantized training and inference toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file; flags override it");

  std::string out_dir = ".";
  std::uint64_t seed = 1;
  app.add_option("--out", out_dir, "output directory for run artifacts")->capture_default_str();
  app.add_option("--seed", seed, "random seed")
      ->envname("BITQUANT_SEED")
      ->capture_default_str();

  FitOpts fit;
  CLI::App* cfit = app.add_subcommand("fit", "fit activation quantizers and report per-channel MSE");
  cfit->add_option("--input", fit.input, "synth or an IDX image file")->capture_default_str();
  cfit->add_option("--labels", fit.labels, "IDX label file (for file input)");
  cfit->add_option("--bits", fit.bits, "quantizer bit width")
      ->check(CLI::Range(1, 8))
      ->capture_default_str();
  cfit->add_option("--iters", fit.steps, "adaptation steps over the input")
      ->check(CLI::Range(1, 100000))
      ->capture_default_str();
  cfit->add_option("--samples", fit.samples, "samples per adaptation step")
      ->check(CLI::Range(1, 100000))
      ->capture_default_str();
  cfit->add_option("--channels", fit.channels, "synthetic channel count")
      ->check(CLI::Range(1, 100000))
      ->capture_default_str();
  cfit->add_option("--scale-lo", fit.scale_lo, "low end of the channel-scale range")
      ->capture_default_str();
  cfit->add_option("--scale-hi", fit.scale_hi, "high end of the channel-scale range")
      ->capture_default_str();
  cfit->add_option("--report", fit.report, "per-channel MSE CSV path (default <out>/fit_report.csv)");

  TrainOpts tr;
  CLI::App* ctrain = app.add_subcommand("train", "train the small reference net");
  ctrain->add_option("--task", tr.task, "synth or idx")
      ->check(CLI::IsMember({"synth", "idx"}))
      ->capture_default_str();
  ctrain->add_option("--images", tr.images, "IDX image file (task idx)");
  ctrain->add_option("--labels", tr.labels, "IDX label file (task idx)");
  ctrain->add_option("--epochs", tr.epochs, "epochs to run")
      ->check(CLI::Range(0, 1000000))
      ->capture_default_str();
  ctrain->add_option("--kw", tr.kw, "weight bits")->check(CLI::Range(1, 8))->capture_default_str();
  ctrain->add_option("--ka", tr.ka, "activation bits")
      ->check(CLI::Range(1, 8))
      ->capture_default_str();
  ctrain->add_option("--weights", tr.weights, "weight mode")
      ->check(CLI::IsMember({"fp", "lqw"}))
      ->capture_default_str();
  ctrain->add_option("--acts", tr.acts, "activation mode")
      ->check(CLI::IsMember({"fp", "caq", "global"}))
      ->capture_default_str();
  ctrain->add_option("--classes", tr.classes, "synthetic class count")
      ->check(CLI::Range(2, 256))
      ->capture_default_str();
  ctrain->add_option("--per-class", tr.per_class, "synthetic samples per class")
      ->check(CLI::Range(1, 1000000))
      ->capture_default_str();
  ctrain->add_option("--noise", tr.noise, "synthetic pixel noise")->capture_default_str();
  ctrain->add_option("--batch", tr.batch, "mini-batch size")
      ->check(CLI::Range(1, 100000))
      ->capture_default_str();
  ctrain->add_option("--lr", tr.lr, "base learning rate")->capture_default_str();
  ctrain->add_option("--total-epochs", tr.total_epochs,
                     "schedule horizon (default: same as --epochs)");
  ctrain->add_flag("--ablate", tr.ablate, "run the mode grid instead of a single model");
  ctrain->add_option("--ablate-weights", tr.ablate_weights, "weight modes for the grid")
      ->capture_default_str();
  ctrain->add_option("--ablate-acts", tr.ablate_acts, "activation modes for the grid")
      ->capture_default_str();
  ctrain->add_option("--seeds", tr.seeds, "seed list for the grid")->capture_default_str();

  BenchOpts be;
  CLI::App* cbench = app.add_subcommand("bench", "time the packed kernel against FP baselines");
  cbench->add_option("--n", be.n, "output channels")
      ->check(CLI::Range(1, 1 << 20))
      ->capture_default_str();
  cbench->add_option("--m", be.m, "output pixels (spatial x batch)")
      ->check(CLI::Range(1, 1 << 26))
      ->capture_default_str();
  cbench->add_option("--kernel-size", be.kernel_size, "square kernel side")
      ->check(CLI::Range(1, 16))
      ->capture_default_str();
  cbench->add_option("--ci", be.ci, "input-channel sweep, comma separated")->capture_default_str();
  cbench->add_option("--bits", be.bits, "bit pairs like 1/1,2/2")->capture_default_str();
  cbench->add_option("--threads", be.threads, "thread counts, comma separated")
      ->capture_default_str();
  cbench->add_option("--reps", be.reps, "timed repetitions per cell")
      ->check(CLI::Range(3, 10000))
      ->capture_default_str();

  SpeedupOpts sp;
  CLI::App* cspeed = app.add_subcommand("speedup", "evaluate the theoretical speedup model");
  cspeed->add_option("--kw", sp.kw, "weight bits")->check(CLI::Range(1, 8))->capture_default_str();
  cspeed->add_option("--ka", sp.ka, "activation bits")
      ->check(CLI::Range(1, 8))
      ->capture_default_str();
  cspeed->add_option("--q", sp.q, "dot-product length")
      ->check(CLI::Range(1LL, 1LL << 40))
      ->capture_default_str();
  cspeed->add_option("--L", sp.L, "machine word bits")
      ->check(CLI::IsMember({32, 64}))
      ->capture_default_str();
  cspeed->add_option("--gamma", sp.gamma, "FMA vs logical-op cost ratio")->capture_default_str();

  PackOpts pk;
  CLI::App* cpack = app.add_subcommand("pack", "export a checkpoint as a packed inference model");
  cpack->add_option("--checkpoint", pk.checkpoint, "trained .bqck file")->required();
  cpack->add_option("--out-model", pk.out_model, "target .bqpk path (default <out>/model.bqpk)");
  cpack->add_option("--verify-inputs", pk.verify_inputs, "verification input count")
      ->check(CLI::Range(1, 10000))
      ->capture_default_str();
  cpack->add_option("--tol", pk.tol, "verification tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  fit.seed = tr.seed = be.seed = pk.seed = seed;
  fit.out_dir = tr.out_dir = be.out_dir = pk.out_dir = out_dir;

  try {
    if (app.got_subcommand(cfit)) return cmd_fit(fit);
    if (app.got_subcommand(ctrain)) return cmd_train(tr);
    if (app.got_subcommand(cbench)) return cmd_bench(be);
    if (app.got_subcommand(cspeed)) return cmd_speedup(sp, out_dir);
    if (app.got_subcommand(cpack)) return cmd_pack(pk);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
