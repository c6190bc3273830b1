#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bitquant {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using VecF = Eigen::VectorXf;
using MatF = Eigen::MatrixXf;
using VecI = Eigen::VectorXi;
using MatI = Eigen::MatrixXi;

// Error taxonomy. Everything thrown by the library derives from Error so the
// CLI can map library failures to one exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RangeError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ParamError : Error { using Error::Error; };
struct StateError : Error { using Error::Error; };
struct AlphabetError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ConsistencyError : Error { using Error::Error; };
struct VersionError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };

// Bit widths for the two operand streams plus the machine word size used by
// the packed kernels and the speedup model.
struct BitConfig {
  int k_w = 1;
  int k_a = 1;
  int word_bits = 64;

  void validate() const {
    if (k_w < 1 || k_w > 8 || k_a < 1 || k_a > 8)
      throw RangeError("BitConfig: bit widths must be in [1,8]");
    if (word_bits != 32 && word_bits != 64)
      throw RangeError("BitConfig: word_bits must be 32 or 64");
  }
};

// A quantizer basis v of length K; levels are subset sums of its entries.
using QuantBasis = Vec;

enum class Alphabet { ZeroOne, PlusMinus };

// N x K bit matrix for one signal: row i is the code of element i, column j
// pairs with basis entry j. Entries are {0,1} or {-1,+1} per `alphabet`.
struct Encoding {
  Mat bits;
  Alphabet alphabet = Alphabet::ZeroOne;

  int size() const { return static_cast<int>(bits.rows()); }
  int planes() const { return static_cast<int>(bits.cols()); }
};

// The 2^K representable values of a basis, in code order: levels[i] is the
// dot product of the code of i (LSB first) with the basis.
struct QuantLevels {
  Vec levels;
  MatI codes;  // 2^K x K, entries {0,1}

  int count() const { return static_cast<int>(levels.size()); }
  int planes() const { return static_cast<int>(codes.cols()); }
};

// A mini-batch of (B,C,H,W) activations stored feature-major: column b holds
// sample b, rows ordered c*h*w with h*w contiguous per channel, so channel j
// is the row block [j*h*w, (j+1)*h*w). Dense layers use h=w=1.
struct Batch {
  Mat data;
  int c = 0;
  int h = 0;
  int w = 0;

  int samples() const { return static_cast<int>(data.cols()); }
  int features() const { return static_cast<int>(data.rows()); }
  int spatial() const { return h * w; }

  void check() const {
    if (c < 1 || h < 1 || w < 1 || data.rows() != static_cast<long>(c) * h * w)
      throw ShapeError("Batch: data rows do not match c*h*w");
  }

  auto channel(int j) { return data.middleRows(static_cast<long>(j) * spatial(), spatial()); }
  auto channel(int j) const { return data.middleRows(static_cast<long>(j) * spatial(), spatial()); }
};

// Where a dataset came from and how its raw values were normalized at load
// time, so every consumer sees identical inputs.
struct DatasetMeta {
  std::string source;
  double pixel_scale = 1.0;   // multiplier applied to raw values
  double pixel_offset = 0.0;  // offset added after scaling
};

struct Dataset {
  Batch images;
  VecI labels;
  int classes = 0;
  DatasetMeta meta;

  int size() const { return images.samples(); }

  void check() const {
    images.check();
    if (labels.size() != images.samples())
      throw ConsistencyError("Dataset: label count != image count");
    if (classes < 2) throw ConsistencyError("Dataset: need at least two classes");
    for (long i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || labels[i] >= classes)
        throw ConsistencyError("Dataset: label out of range");
  }
};

}  // namespace bitquant
