#pragma once

#include "bitquant/types.hpp"

namespace bitquant {

// Directly learned quantized weights for one filter: a shadow matrix S in
// [-1,1]^(N x K) whose signs select +-basis entries, and the basis itself.
// The represented weights are W_q = sign(S) * v.
struct WeightQuantParams {
  Mat shadow;
  QuantBasis basis;
  int filter_id = 0;

  int weight_count() const { return static_cast<int>(shadow.rows()); }
  int bits() const { return static_cast<int>(shadow.cols()); }

  void check() const {
    if (shadow.rows() < 1 || shadow.cols() < 1 || basis.size() != shadow.cols())
      throw ShapeError("WeightQuantParams: basis length must match shadow columns");
  }
};

struct LqwGrads {
  Mat shadow;  // straight-through gradient w.r.t. the shadow weights
  Vec basis;
};

// Nesterov momentum buffers, one pair per filter.
struct LqwOptState {
  Mat shadow_buf;
  Vec basis_buf;
};

struct OptimConfig {
  double lr = 0.02;
  double lr_final = 1e-6;
  double lr_power = 2.0;
  int total_epochs = 120;
  double momentum = 0.9;
  double gamma_v = 1.0 / 50.0;  // basis learning-rate multiplier
  double gamma_s = 1.0;         // shadow learning-rate multiplier
  double weight_decay_q = 0.0;  // applied to basis vectors only

  void validate() const {
    if (lr <= 0.0 || gamma_v <= 0.0 || gamma_s <= 0.0)
      throw ParamError("OptimConfig: lr and its multipliers must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ParamError("OptimConfig: momentum must be in [0,1)");
    if (weight_decay_q < 0.0) throw ParamError("OptimConfig: negative weight decay");
    if (lr_final < 0.0 || lr_power <= 0.0 || total_epochs < 1)
      throw ParamError("OptimConfig: invalid schedule");
  }
};

// sign with sign(0) = +1, so every weight always selects a full +-1 code.
double sign_pm1(double x);
Mat sign_pm1(const Mat& m);

// W_q = sign(shadow) * basis.
Vec lqw_forward(const WeightQuantParams& params);

// Pull a loss gradient on W_q back onto the basis and, via the straight
// through rule for sign, onto the shadow weights.
LqwGrads lqw_backward(const Vec& grad_wq, const WeightQuantParams& params);

LqwOptState make_opt_state(const WeightQuantParams& params);

// One Nesterov SGD step at step learning rate `lr`: the basis moves at
// gamma_v * lr with optional weight decay, the shadow at gamma_s * lr and is
// clipped back to [-1,1]. Non-finite gradients abort with a numeric error.
void lqw_update(WeightQuantParams& params, const LqwGrads& grads, const OptimConfig& opt,
                double lr, LqwOptState& state);

// Polynomial decay: lr_final + (lr - lr_final) * (1 - epoch/total)^power,
// clamped to lr_final once epoch reaches the horizon.
double poly_lr(int epoch, const OptimConfig& opt);

}  // namespace bitquant
