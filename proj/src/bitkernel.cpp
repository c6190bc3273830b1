#include "bitquant/bitkernel.hpp"

#include <bit>
#include <cmath>
#include <thread>

namespace bitquant {

namespace {

template <class Word>
constexpr int wbits = 8 * static_cast<int>(sizeof(Word));

template <class Word>
int words_for(int n) {
  return (n + wbits<Word> - 1) / wbits<Word>;
}

void check_signed_alphabet(const Encoding& enc) {
  if (enc.alphabet != Alphabet::PlusMinus)
    throw AlphabetError("pack: encoding must use the signed alphabet");
  for (long i = 0; i < enc.bits.rows(); ++i)
    for (long j = 0; j < enc.bits.cols(); ++j)
      if (enc.bits(i, j) != 1.0 && enc.bits(i, j) != -1.0)
        throw AlphabetError("pack: signed encoding entries must be -1 or +1");
}

template <class Word>
void pack_into(const Encoding& enc, PackedBits<Word>& out, int vec) {
  for (int pl = 0; pl < enc.planes(); ++pl) {
    Word* w = out.plane(vec, pl);
    for (int t = 0; t < enc.size(); ++t)
      if (enc.bits(t, pl) == 1.0) w[t / wbits<Word>] |= Word(1) << (t % wbits<Word>);
  }
}

// Popcount over one plane's words; pads are zero so they never count.
template <class Word>
long long plane_popcount(const Word* w, int wpp) {
  long long acc = 0;
  for (int t = 0; t < wpp; ++t) acc += std::popcount(w[t]);
  return acc;
}

template <class Word, class Out>
Eigen::Matrix<Out, Eigen::Dynamic, Eigen::Dynamic> matmul_impl(
    const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases, const Vec& q_consts,
    const PackedBits<Word>& a, const QuantBasis& v_a, int threads, MatmulStats* stats) {
  if (w.length != a.length) throw ShapeError("bitwise_matmul: operand lengths differ");
  if (static_cast<int>(row_bases.size()) != w.vectors)
    throw ShapeError("bitwise_matmul: need one basis per weight row");
  if (q_consts.size() != w.vectors) throw ShapeError("bitwise_matmul: need one constant per row");
  if (v_a.size() != a.planes) throw ShapeError("bitwise_matmul: activation basis length != planes");
  for (const QuantBasis& vb : row_bases)
    if (vb.size() != w.planes) throw ShapeError("bitwise_matmul: row basis length != planes");
  if (threads < 1) throw ParamError("bitwise_matmul: threads must be >= 1");

  const int n = w.vectors, m = a.vectors, kw = w.planes, ka = a.planes;
  const int wpp = w.words_per_plane();
  Eigen::Matrix<Out, Eigen::Dynamic, Eigen::Dynamic> out(n, m);

  std::vector<std::uint64_t> passes(threads, 0);
  auto run_rows = [&](int r0, int r1, std::uint64_t& pass_count) {
    constexpr int col_block = 256;
    std::vector<double> coef(static_cast<size_t>(kw) * ka);
    for (int cb = 0; cb < m; cb += col_block) {
      const int ce = std::min(cb + col_block, m);
      for (int r = r0; r < r1; ++r) {
        const QuantBasis& vw = row_bases[r];
        for (int i = 0; i < kw; ++i)
          for (int j = 0; j < ka; ++j) coef[static_cast<size_t>(i) * ka + j] = 0.5 * vw[i] * v_a[j];
        for (int c = cb; c < ce; ++c) {
          double acc = q_consts[r];
          for (int i = 0; i < kw; ++i) {
            const Word* wp = w.plane(r, i);
            for (int j = 0; j < ka; ++j) {
              const Word* ap = a.plane(c, j);
              long long agree = 0;
              for (int t = 0; t < wpp; ++t)
                agree += std::popcount(static_cast<Word>(~(wp[t] ^ ap[t])));
              const long long dot = 2 * (agree - w.pad_bits()) - w.length;
              acc += coef[static_cast<size_t>(i) * ka + j] * static_cast<double>(dot);
              ++pass_count;
            }
          }
          out(r, c) = static_cast<Out>(acc);
        }
      }
    }
  };

  if (threads == 1) {
    run_rows(0, n, passes[0]);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int r0 = std::min(t * chunk, n), r1 = std::min(r0 + chunk, n);
      pool.emplace_back(run_rows, r0, r1, std::ref(passes[t]));
    }
    for (auto& th : pool) th.join();
  }
  if (stats)
    for (std::uint64_t p : passes) stats->plane_pair_passes += p;
  return out;
}

}  // namespace

Encoding activation_to_signed(const Encoding& enc) {
  if (enc.alphabet != Alphabet::ZeroOne)
    throw AlphabetError("activation_to_signed: input must use the {0,1} alphabet");
  Encoding out;
  out.alphabet = Alphabet::PlusMinus;
  out.bits = 2.0 * enc.bits.array() - 1.0;
  return out;
}

template <class Word>
PackedBits<Word> pack(const Encoding& enc) {
  check_signed_alphabet(enc);
  if (enc.size() < 1 || enc.planes() < 1) throw ShapeError("pack: empty encoding");
  PackedBits<Word> out;
  out.length = enc.size();
  out.planes = enc.planes();
  out.vectors = 1;
  out.words.assign(static_cast<size_t>(out.planes) * out.words_per_plane(), 0);
  pack_into(enc, out, 0);
  return out;
}

template <class Word>
PackedBits<Word> pack_all(const std::vector<Encoding>& encs) {
  if (encs.empty()) throw ShapeError("pack_all: no encodings");
  PackedBits<Word> out;
  out.length = encs[0].size();
  out.planes = encs[0].planes();
  out.vectors = static_cast<int>(encs.size());
  out.words.assign(static_cast<size_t>(out.vectors) * out.planes * out.words_per_plane(), 0);
  for (int v = 0; v < out.vectors; ++v) {
    if (encs[v].size() != out.length || encs[v].planes() != out.planes)
      throw ShapeError("pack_all: encodings must share length and plane count");
    check_signed_alphabet(encs[v]);
    pack_into(encs[v], out, v);
  }
  return out;
}

template <class Word>
Encoding unpack(const PackedBits<Word>& pb, int vec) {
  if (vec < 0 || vec >= pb.vectors) throw RangeError("unpack: vector index out of range");
  Encoding enc;
  enc.alphabet = Alphabet::PlusMinus;
  enc.bits.resize(pb.length, pb.planes);
  for (int pl = 0; pl < pb.planes; ++pl) {
    const Word* w = pb.plane(vec, pl);
    for (int t = 0; t < pb.length; ++t)
      enc.bits(t, pl) = (w[t / wbits<Word>] >> (t % wbits<Word>)) & 1 ? 1.0 : -1.0;
  }
  return enc;
}

template <class Word>
PackedBits<Word> encode_and_pack_columns(const MatF& a, const QuantLevels& levels) {
  if (a.rows() < 1 || a.cols() < 1) throw ShapeError("encode_and_pack_columns: empty input");
  PackedBits<Word> out;
  out.length = static_cast<int>(a.rows());
  out.planes = levels.planes();
  out.vectors = static_cast<int>(a.cols());
  const int wpp = out.words_per_plane();
  out.words.assign(static_cast<size_t>(out.vectors) * out.planes * wpp, 0);
  const int count = levels.count();
  for (int c = 0; c < out.vectors; ++c) {
    Word* base = out.plane(c, 0);
    for (int t = 0; t < out.length; ++t) {
      const double x = static_cast<double>(a(t, c));
      int best = 0;
      double best_d = std::abs(x - levels.levels[0]);
      for (int i = 1; i < count; ++i) {
        const double d = std::abs(x - levels.levels[i]);
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      for (int j = 0; j < out.planes; ++j)
        if (levels.codes(best, j))
          base[static_cast<size_t>(j) * wpp + t / wbits<Word>] |= Word(1) << (t % wbits<Word>);
    }
  }
  return out;
}

template <class Word>
long long xnor_popcount_dot(const Word* x, const Word* y, int n) {
  const int wpp = words_for<Word>(n);
  long long agree = 0;
  for (int t = 0; t < wpp; ++t) agree += std::popcount(static_cast<Word>(~(x[t] ^ y[t])));
  const int pads = wpp * wbits<Word> - n;
  return 2 * (agree - pads) - n;
}

template <class Word>
double precompute_q(const PackedBits<Word>& w, int vec, const QuantBasis& v_w,
                    const QuantBasis& v_a) {
  if (vec < 0 || vec >= w.vectors) throw RangeError("precompute_q: vector index out of range");
  if (v_w.size() != w.planes) throw ShapeError("precompute_q: weight basis length != planes");
  double q = 0.0;
  for (int i = 0; i < w.planes; ++i) {
    const long long rowsum = 2 * plane_popcount(w.plane(vec, i), w.words_per_plane()) - w.length;
    for (int j = 0; j < v_a.size(); ++j) q += 0.5 * v_w[i] * v_a[j] * static_cast<double>(rowsum);
  }
  return q;
}

template <class Word>
Vec precompute_q_all(const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases,
                     const QuantBasis& v_a) {
  if (static_cast<int>(row_bases.size()) != w.vectors)
    throw ShapeError("precompute_q_all: need one basis per packed vector");
  Vec q(w.vectors);
  for (int v = 0; v < w.vectors; ++v) q[v] = precompute_q(w, v, row_bases[v], v_a);
  return q;
}

template <class Word>
double bitwise_dot(const PackedBits<Word>& w, int wvec, const QuantBasis& v_w, double q_const,
                   const PackedBits<Word>& a, int avec, const QuantBasis& v_a) {
  if (w.length != a.length) throw ShapeError("bitwise_dot: operand lengths differ");
  if (v_w.size() != w.planes || v_a.size() != a.planes)
    throw ShapeError("bitwise_dot: basis length != plane count");
  double acc = q_const;
  for (int i = 0; i < w.planes; ++i)
    for (int j = 0; j < a.planes; ++j)
      acc += 0.5 * v_w[i] * v_a[j] *
             static_cast<double>(xnor_popcount_dot(w.plane(wvec, i), a.plane(avec, j), w.length));
  return acc;
}

template <class Word>
MatF bitwise_matmul(const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases,
                    const Vec& q_consts, const PackedBits<Word>& a, const QuantBasis& v_a,
                    int threads, MatmulStats* stats) {
  return matmul_impl<Word, float>(w, row_bases, q_consts, a, v_a, threads, stats);
}

template <class Word>
Mat bitwise_matmul_f64(const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases,
                       const Vec& q_consts, const PackedBits<Word>& a, const QuantBasis& v_a,
                       int threads, MatmulStats* stats) {
  return matmul_impl<Word, double>(w, row_bases, q_consts, a, v_a, threads, stats);
}

double theoretical_speedup(const SpeedupParams& p) {
  BitConfig{p.k_w, p.k_a, p.word_bits}.validate();
  if (p.q < 1) throw ParamError("theoretical_speedup: q must be >= 1");
  if (p.gamma < 0.0) throw ParamError("theoretical_speedup: gamma must be >= 0");
  const double kk = static_cast<double>(p.k_w) * p.k_a;
  const double blocks = static_cast<double>((p.q + p.word_bits - 1) / p.word_bits);
  return p.gamma * static_cast<double>(p.q) / (p.gamma * kk + 2.0 * kk * blocks);
}

double speedup_asymptote(const SpeedupParams& p) {
  BitConfig{p.k_w, p.k_a, p.word_bits}.validate();
  if (p.gamma < 0.0) throw ParamError("speedup_asymptote: gamma must be >= 0");
  return p.gamma * p.word_bits / (2.0 * p.k_w * p.k_a);
}

#define BITQUANT_INSTANTIATE(Word)                                                                \
  template struct PackedBits<Word>;                                                               \
  template PackedBits<Word> pack<Word>(const Encoding&);                                          \
  template PackedBits<Word> pack_all<Word>(const std::vector<Encoding>&);                         \
  template Encoding unpack<Word>(const PackedBits<Word>&, int);                                   \
  template PackedBits<Word> encode_and_pack_columns<Word>(const MatF&, const QuantLevels&);       \
  template long long xnor_popcount_dot<Word>(const Word*, const Word*, int);                      \
  template double precompute_q<Word>(const PackedBits<Word>&, int, const QuantBasis&,             \
                                     const QuantBasis&);                                          \
  template Vec precompute_q_all<Word>(const PackedBits<Word>&, const std::vector<QuantBasis>&,    \
                                      const QuantBasis&);                                         \
  template double bitwise_dot<Word>(const PackedBits<Word>&, int, const QuantBasis&, double,      \
                                    const PackedBits<Word>&, int, const QuantBasis&);             \
  template MatF bitwise_matmul<Word>(const PackedBits<Word>&, const std::vector<QuantBasis>&,     \
                                     const Vec&, const PackedBits<Word>&, const QuantBasis&, int, \
                                     MatmulStats*);                                               \
  template Mat bitwise_matmul_f64<Word>(const PackedBits<Word>&, const std::vector<QuantBasis>&,  \
                                        const Vec&, const PackedBits<Word>&, const QuantBasis&,   \
                                        int, MatmulStats*);

BITQUANT_INSTANTIATE(std::uint32_t)
BITQUANT_INSTANTIATE(std::uint64_t)
#undef BITQUANT_INSTANTIATE

}  // namespace bitquant
