#pragma once

#include <cstdint>

#include "bitquant/quantizer.hpp"
#include "bitquant/types.hpp"

namespace bitquant {

// Bit-packed {-1,+1} planes for a set of equally sized vectors. +1 packs as
// bit 1. Plane pl of vector v occupies words_per_plane() consecutive words at
// plane(v, pl); bit b of word t is element t*word_bits + b. Pad bits are zero.
template <class Word>
struct PackedBits {
  int length = 0;   // logical bits per plane
  int planes = 0;   // bit planes per vector
  int vectors = 0;  // packed vector count
  std::vector<Word> words;

  static constexpr int word_bits = 8 * static_cast<int>(sizeof(Word));
  int words_per_plane() const { return (length + word_bits - 1) / word_bits; }
  int pad_bits() const { return words_per_plane() * word_bits - length; }

  const Word* plane(int vec, int pl) const {
    return words.data() + (static_cast<size_t>(vec) * planes + pl) * words_per_plane();
  }
  Word* plane(int vec, int pl) {
    return words.data() + (static_cast<size_t>(vec) * planes + pl) * words_per_plane();
  }
};

using PackedBits64 = PackedBits<std::uint64_t>;
using PackedBits32 = PackedBits<std::uint32_t>;

// {0,1} codes to the signed alphabet via s_hat = 2s - 1.
Encoding activation_to_signed(const Encoding& enc);

// Pack one signed encoding (or a set sharing length and plane count).
template <class Word>
PackedBits<Word> pack(const Encoding& enc);
template <class Word>
PackedBits<Word> pack_all(const std::vector<Encoding>& encs);
template <class Word>
Encoding unpack(const PackedBits<Word>& pb, int vec);

// Quantize each column of a float matrix against `levels` and pack the
// resulting codes as signed planes, one packed vector per column.
template <class Word>
PackedBits<Word> encode_and_pack_columns(const MatF& a, const QuantLevels& levels);

// Signed dot product of two packed planes of n logical bits:
// 2*(popcount(xnor) - pads) - n. Pads answer through the popcount because
// xnor maps the zero pad bits of both operands to 1.
template <class Word>
long long xnor_popcount_dot(const Word* x, const Word* y, int n);

// The input-independent constant of one packed weight vector:
// sum_ij (v_w[i] * v_a[j] / 2) * (2*popcount(plane_i) - n).
template <class Word>
double precompute_q(const PackedBits<Word>& w, int vec, const QuantBasis& v_w,
                    const QuantBasis& v_a);
template <class Word>
Vec precompute_q_all(const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases,
                     const QuantBasis& v_a);

// Full quantized dot product: q_const plus the weighted plane-pair popcounts.
template <class Word>
double bitwise_dot(const PackedBits<Word>& w, int wvec, const QuantBasis& v_w, double q_const,
                   const PackedBits<Word>& a, int avec, const QuantBasis& v_a);

struct MatmulStats {
  std::uint64_t plane_pair_passes = 0;
};

// n x m product of packed weights (one basis and constant per row) with
// packed activation columns sharing one basis. Plane-pair popcounts
// accumulate in int64 exactly; the weighted combination runs in double and
// is emitted in single precision (or double via the _f64 variant). Output
// rows shard across `threads`; results do not depend on the thread count.
template <class Word>
MatF bitwise_matmul(const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases,
                    const Vec& q_consts, const PackedBits<Word>& a, const QuantBasis& v_a,
                    int threads = 1, MatmulStats* stats = nullptr);
template <class Word>
Mat bitwise_matmul_f64(const PackedBits<Word>& w, const std::vector<QuantBasis>& row_bases,
                       const Vec& q_consts, const PackedBits<Word>& a, const QuantBasis& v_a,
                       int threads = 1, MatmulStats* stats = nullptr);

struct SpeedupParams {
  int k_w = 1;
  int k_a = 1;
  long long q = 0;       // dot-product length
  int word_bits = 64;
  double gamma = 1.91;   // measured fused-multiply-add vs logical-op cost ratio
};

// gamma*q / (gamma*Kw*Ka + 2*Kw*Ka*ceil(q/L)).
double theoretical_speedup(const SpeedupParams& p);
// Large-q limit gamma*L / (2*Kw*Ka).
double speedup_asymptote(const SpeedupParams& p);

}  // namespace bitquant
