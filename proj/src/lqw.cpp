#include "bitquant/lqw.hpp"

#include <cmath>

namespace bitquant {

double sign_pm1(double x) { return x < 0.0 ? -1.0 : 1.0; }

Mat sign_pm1(const Mat& m) {
  return m.unaryExpr([](double x) { return sign_pm1(x); });
}

Vec lqw_forward(const WeightQuantParams& params) {
  params.check();
  return sign_pm1(params.shadow) * params.basis;
}

LqwGrads lqw_backward(const Vec& grad_wq, const WeightQuantParams& params) {
  params.check();
  if (grad_wq.size() != params.shadow.rows())
    throw ShapeError("lqw_backward: gradient length != weight count");
  LqwGrads g;
  const Mat signs = sign_pm1(params.shadow);
  g.basis = signs.transpose() * grad_wq;
  g.shadow = grad_wq * params.basis.transpose();
  return g;
}

LqwOptState make_opt_state(const WeightQuantParams& params) {
  params.check();
  LqwOptState st;
  st.shadow_buf = Mat::Zero(params.shadow.rows(), params.shadow.cols());
  st.basis_buf = Vec::Zero(params.basis.size());
  return st;
}

void lqw_update(WeightQuantParams& params, const LqwGrads& grads, const OptimConfig& opt,
                double lr, LqwOptState& state) {
  params.check();
  if (grads.shadow.rows() != params.shadow.rows() || grads.shadow.cols() != params.shadow.cols() ||
      grads.basis.size() != params.basis.size())
    throw ShapeError("lqw_update: gradient shapes do not match parameters");
  if (state.shadow_buf.rows() != params.shadow.rows() || state.basis_buf.size() != params.basis.size())
    throw ShapeError("lqw_update: optimizer state shape mismatch");
  opt.validate();
  if (!grads.shadow.allFinite() || !grads.basis.allFinite())
    throw NumericError("lqw_update: non-finite gradient");

  const Vec gb = grads.basis + opt.weight_decay_q * params.basis;
  state.basis_buf = opt.momentum * state.basis_buf + gb;
  params.basis -= (opt.gamma_v * lr) * (gb + opt.momentum * state.basis_buf);

  state.shadow_buf = opt.momentum * state.shadow_buf + grads.shadow;
  params.shadow -= (opt.gamma_s * lr) * (grads.shadow + opt.momentum * state.shadow_buf);
  params.shadow = params.shadow.cwiseMax(-1.0).cwiseMin(1.0);
}

double poly_lr(int epoch, const OptimConfig& opt) {
  if (epoch < 0) throw ParamError("poly_lr: negative epoch");
  opt.validate();
  if (epoch >= opt.total_epochs) return opt.lr_final;
  const double frac = 1.0 - static_cast<double>(epoch) / opt.total_epochs;
  return opt.lr_final + (opt.lr - opt.lr_final) * std::pow(frac, opt.lr_power);
}

}  // namespace bitquant
