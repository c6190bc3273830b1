#pragma once

#include <optional>

#include "bitquant/types.hpp"

namespace bitquant {

// Code of `value` as `bits` binary digits, least significant first, so
// entry j pairs with basis entry j and value = sum_j code[j] * 2^j.
VecI dec2bin(int value, int bits);

// All 2^K levels of a basis in code order. levels[i] = <dec2bin(i,K), basis>.
QuantLevels quant_levels(const QuantBasis& basis);

// Index of the squared-distance-nearest level per element; ties resolve to
// the lower level index.
VecI nearest_level_indices(const Vec& values, const QuantLevels& levels);

// {0,1} encoding of each element's nearest level.
Encoding encode_nearest(const Vec& values, const QuantLevels& levels);

// Nearest-level lookup applied elementwise.
Vec quantize_values(const Vec& values, const QuantLevels& levels);
Mat quantize_matrix(const Mat& values, const QuantLevels& levels);

// Least-squares basis refit for a fixed {0,1} encoding: solves the normal
// equations (S^T S + 1e-10 I) v = S^T a. The ridge term keeps encodings with
// an unused column solvable and pins that column's entry to zero.
QuantBasis basis_ls_update(const Encoding& enc, const Vec& a);

struct FitResult {
  QuantBasis basis;
  Encoding enc;               // assignment against the returned basis
  double sq_error = 0.0;      // ||a - S v||^2 for the returned pair
  std::vector<double> round_errors;  // objective after each alternating round
};

// Alternating nearest-assignment / least-squares fit, `iters` rounds from
// `init` (default: levels uniform over [0, max(a)]). The returned encoding
// comes from one final assignment pass against the returned basis.
FitResult fit_scalar_quantizer(const Vec& a, int bits, int iters,
                               const std::optional<QuantBasis>& init = std::nullopt);

// Per-channel quantizer state for channel-wise averaged activation
// quantization: one basis per channel maintained by EMA over mini-batch
// fits, plus the cached channel average actually used to quantize.
struct ActQuantState {
  std::vector<QuantBasis> channel_bases;
  QuantBasis averaged;
  double mu = 0.9;
  int iters = 1;
  int bits = 1;
  bool ready = false;  // bases hold data once the first batch is seen

  int channel_count() const { return static_cast<int>(channel_bases.size()); }
};

ActQuantState make_act_quant_state(int channels, int bits, double mu = 0.9, int iters = 1);

// One training-time step: refit every channel basis on this batch (alternating
// fit seeded from the stored basis, then EMA with weight mu on the old value),
// refresh the channel average, and return the batch quantized against it.
// Mutates `state`; channels that are entirely zero keep their basis.
Batch caq_train_step(const Batch& a, ActQuantState& state);

// Inference-time quantization: pure lookup against the stored average.
Batch caq_infer(const Batch& a, const ActQuantState& state);

// Straight-through backward for the activation quantizer: the gradient passes
// unchanged. With debug checks enabled, non-finite inputs bump a flag counter.
Mat ste_activation_backward(const Mat& grad);
void set_debug_nan_checks(bool on);
long ste_nan_flag_count();

struct ChannelMseReport {
  struct Row {
    int channel;
    double mse_caq;
    double mse_global;
    double rel_change_pct;  // negative when the averaged basis is better
  };
  std::vector<Row> rows;
  int improved = 0;        // channels with mse_caq < mse_global
  double overall_caq = 0.0;
  double overall_global = 0.0;
};

// Per-channel reconstruction error of the channel-averaged basis vs a single
// basis fit to the pooled tensor.
ChannelMseReport channel_mse_report(const Batch& a, const ActQuantState& state,
                                    const QuantBasis& global_basis);

std::string to_csv(const ChannelMseReport& report);

}  // namespace bitquant
