#include "bitquant/bench.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

namespace bitquant {

void BenchConfig::validate() const {
  if (n < 1 || m < 1 || kernel_size < 1) throw ParamError("bench: sizes must be positive");
  if (reps < 3) throw ParamError("bench: minimum 3 repetitions");
  if (ci_list.empty() || bit_list.empty() || thread_list.empty())
    throw ParamError("bench: empty sweep list");
  for (int c : ci_list)
    if (c < 1) throw ParamError("bench: c_i must be positive");
  for (auto [kw, ka] : bit_list)
    BitConfig{kw, ka, 64}.validate();
  for (int t : thread_list)
    if (t < 1) throw ParamError("bench: thread count must be positive");
}

namespace {

// Scalar triple loop, k-innermost; the naive baseline every row is scored
// against.
void fp_naive_matmul(const MatF& w, const MatF& a, MatF& out) {
  const long n = w.rows(), q = w.cols(), m = a.cols();
  for (long j = 0; j < m; ++j)
    for (long i = 0; i < n; ++i) {
      float acc = 0.0f;
      for (long k = 0; k < q; ++k) acc += w(i, k) * a(k, j);
      out(i, j) = acc;
    }
}

// Cache-blocked variant: 64-wide tiles over all three loops.
void fp_blocked_matmul(const MatF& w, const MatF& a, MatF& out) {
  constexpr long kTile = 64;
  const long n = w.rows(), q = w.cols(), m = a.cols();
  out.setZero();
  for (long j0 = 0; j0 < m; j0 += kTile)
    for (long k0 = 0; k0 < q; k0 += kTile)
      for (long i0 = 0; i0 < n; i0 += kTile) {
        const long j1 = std::min(j0 + kTile, m), k1 = std::min(k0 + kTile, q),
                   i1 = std::min(i0 + kTile, n);
        for (long j = j0; j < j1; ++j)
          for (long i = i0; i < i1; ++i) {
            float acc = out(i, j);
            for (long k = k0; k < k1; ++k) acc += w(i, k) * a(k, j);
            out(i, j) = acc;
          }
      }
}

struct Timing {
  double mean_ms = 0.0;
  double std_ms = 0.0;
};

template <class F>
Timing time_kernel(F&& body, int reps) {
  using clock = std::chrono::steady_clock;
  body();  // warmup, discarded
  std::vector<double> ms(reps);
  for (int r = 0; r < reps; ++r) {
    const auto t0 = clock::now();
    body();
    const auto t1 = clock::now();
    ms[r] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  Timing t;
  for (double v : ms) t.mean_ms += v;
  t.mean_ms /= reps;
  double var = 0.0;
  for (double v : ms) var += (v - t.mean_ms) * (v - t.mean_ms);
  t.std_ms = std::sqrt(var / (reps - 1));
  return t;
}

// One quantized problem instance: packed weights with per-row bases and
// constants, plus the float activation matrix the timed path re-encodes.
struct Instance {
  PackedBits64 w;
  std::vector<QuantBasis> row_bases;
  Vec q_consts;
  QuantBasis v_a;
  QuantLevels act_levels;
  MatF w_dense;
  MatF a_dense;
};

Instance make_instance(int n, int q, int m, int kw, int ka, std::mt19937_64& rng) {
  Instance inst;
  std::uniform_real_distribution<double> basis_u(0.2, 1.5);
  std::bernoulli_distribution bit(0.5);

  std::vector<Encoding> wsigns(n);
  inst.row_bases.resize(n);
  for (int i = 0; i < n; ++i) {
    wsigns[i].alphabet = Alphabet::PlusMinus;
    wsigns[i].bits.resize(q, kw);
    for (int e = 0; e < q; ++e)
      for (int k = 0; k < kw; ++k) wsigns[i].bits(e, k) = bit(rng) ? 1.0 : -1.0;
    inst.row_bases[i].resize(kw);
    for (int k = 0; k < kw; ++k) inst.row_bases[i][k] = basis_u(rng) / (1 << k);
  }
  inst.w = pack_all<std::uint64_t>(wsigns);

  inst.v_a.resize(ka);
  for (int k = 0; k < ka; ++k) inst.v_a[k] = basis_u(rng) / (1 << k);
  inst.act_levels = quant_levels(inst.v_a);

  inst.w_dense.resize(n, q);
  for (int i = 0; i < n; ++i) {
    Vec row = wsigns[i].bits * inst.row_bases[i];
    for (int e = 0; e < q; ++e) inst.w_dense(i, e) = static_cast<float>(row[e]);
  }

  // Activations: random level values (already on the quantizer grid, so the
  // timed encode recovers these codes exactly).
  const int levels = static_cast<int>(inst.act_levels.levels.size());
  std::uniform_int_distribution<int> pick(0, levels - 1);
  inst.a_dense.resize(q, m);
  for (int j = 0; j < m; ++j)
    for (int e = 0; e < q; ++e)
      inst.a_dense(e, j) = static_cast<float>(inst.act_levels.levels[pick(rng)]);

  inst.q_consts = precompute_q_all(inst.w, inst.row_bases, inst.v_a);
  return inst;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg) {
  cfg.validate();
  std::vector<BenchRow> rows;
  std::mt19937_64 rng(cfg.seed);

  for (int ci : cfg.ci_list) {
    const int q = ci * cfg.kernel_size * cfg.kernel_size;
    double naive_mean = 0.0;

    for (size_t bi = 0; bi < cfg.bit_list.size(); ++bi) {
      const auto [kw, ka] = cfg.bit_list[bi];
      Instance inst = make_instance(cfg.n, q, cfg.m, kw, ka, rng);

      // Correctness gate: the packed kernel must reproduce the dense product
      // of the same quantized operands before anything is timed.
      {
        const PackedBits64 pa = encode_and_pack_columns<std::uint64_t>(inst.a_dense, inst.act_levels);
        const MatF gate =
            bitwise_matmul(inst.w, inst.row_bases, inst.q_consts, pa, inst.v_a, 1);
        const MatF dense = inst.w_dense * inst.a_dense;
        const float scale = std::max(1.0f, dense.cwiseAbs().maxCoeff());
        const float worst = (gate - dense).cwiseAbs().maxCoeff();
        if (!(worst <= 1e-4f * scale))
          throw NumericError("bench: bitwise kernel disagrees with the dense oracle at c_i=" +
                             std::to_string(ci));
      }

      if (bi == 0) {
        MatF out(cfg.n, cfg.m);
        const Timing tn = time_kernel([&] { fp_naive_matmul(inst.w_dense, inst.a_dense, out); },
                                      cfg.reps);
        naive_mean = tn.mean_ms;
        rows.push_back({"fp_naive", 32, 32, ci, 1, tn.mean_ms, tn.std_ms, 1.0});

        const Timing tb = time_kernel([&] { fp_blocked_matmul(inst.w_dense, inst.a_dense, out); },
                                      cfg.reps);
        rows.push_back({"fp_blocked", 32, 32, ci, 1, tb.mean_ms, tb.std_ms,
                        naive_mean / tb.mean_ms});
      }

      for (int threads : cfg.thread_list) {
        MatF out;
        const Timing t = time_kernel(
            [&] {
              const PackedBits64 pa =
                  encode_and_pack_columns<std::uint64_t>(inst.a_dense, inst.act_levels);
              out = bitwise_matmul(inst.w, inst.row_bases, inst.q_consts, pa, inst.v_a, threads);
            },
            cfg.reps);
        rows.push_back(
            {"bitwise", kw, ka, ci, threads, t.mean_ms, t.std_ms, naive_mean / t.mean_ms});
      }
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "kernel,k_w,k_a,c_i,threads,mean_ms,std_ms,speedup_vs_naive\n";
  os.precision(6);
  for (const BenchRow& r : rows)
    os << r.kernel << ',' << r.k_w << ',' << r.k_a << ',' << r.c_i << ',' << r.threads << ','
       << r.mean_ms << ',' << r.std_ms << ',' << r.speedup_vs_naive << '\n';
  return os.str();
}

}  // namespace bitquant
