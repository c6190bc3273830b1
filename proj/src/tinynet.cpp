#include "bitquant/tinynet.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace bitquant {

namespace {

// Patch matrix of a valid 3x3 convolution: column ((b*oh + i)*ow + j) holds
// the patch at (i,j) of sample b, rows ordered channel-major then kernel
// row-major.
Mat im2col3x3(const Batch& x) {
  const int oh = x.h - 2, ow = x.w - 2, b = x.samples();
  Mat p(static_cast<long>(x.c) * 9, static_cast<long>(b) * oh * ow);
  for (int s = 0; s < b; ++s)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const long q = (static_cast<long>(s) * oh + i) * ow + j;
        for (int c = 0; c < x.c; ++c)
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw)
              p(c * 9 + kh * 3 + kw, q) = x.data(c * x.h * x.w + (i + kh) * x.w + (j + kw), s);
      }
  return p;
}

Batch col2im3x3(const Mat& dpatches, int c, int h, int w, int b) {
  const int oh = h - 2, ow = w - 2;
  Batch x;
  x.c = c;
  x.h = h;
  x.w = w;
  x.data = Mat::Zero(static_cast<long>(c) * h * w, b);
  for (int s = 0; s < b; ++s)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const long q = (static_cast<long>(s) * oh + i) * ow + j;
        for (int ch = 0; ch < c; ++ch)
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw)
              x.data(ch * h * w + (i + kh) * w + (j + kw), s) += dpatches(ch * 9 + kh * 3 + kw, q);
      }
  return x;
}

Batch scatter_conv(const Mat& m, int b, int c_out, int oh, int ow) {
  Batch y;
  y.c = c_out;
  y.h = oh;
  y.w = ow;
  y.data.resize(static_cast<long>(c_out) * oh * ow, b);
  for (int s = 0; s < b; ++s)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const long q = (static_cast<long>(s) * oh + i) * ow + j;
        for (int c = 0; c < c_out; ++c) y.data(c * oh * ow + i * ow + j, s) = m(c, q);
      }
  return y;
}

Mat gather_conv(const Batch& y) {
  const int oh = y.h, ow = y.w, b = y.samples();
  Mat m(y.c, static_cast<long>(b) * oh * ow);
  for (int s = 0; s < b; ++s)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const long q = (static_cast<long>(s) * oh + i) * ow + j;
        for (int c = 0; c < y.c; ++c) m(c, q) = y.data(c * oh * ow + i * ow + j, s);
      }
  return m;
}

void scale_channels(Batch& x, const Vec& s) {
  for (int j = 0; j < x.c; ++j) x.channel(j) *= s[j];
}

Batch site_forward(const Batch& x, ActQuantState& st, ActMode mode, bool train) {
  if (mode == ActMode::CAQ) return train ? caq_train_step(x, st) : caq_infer(x, st);
  // Global scalar: the whole tensor as one channel through the same machinery.
  Batch flat;
  flat.data = x.data;
  flat.c = 1;
  flat.h = x.features();
  flat.w = 1;
  Batch out = train ? caq_train_step(flat, st) : caq_infer(flat, st);
  Batch y = x;
  y.data = std::move(out.data);
  return y;
}

FpLayer make_fp_layer(std::mt19937_64& rng, int rows, int cols, double sigma) {
  std::normal_distribution<double> d(0.0, sigma);
  FpLayer l;
  l.w.resize(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) l.w(i, j) = d(rng);
  l.b = Vec::Zero(rows);
  l.w_buf = Mat::Zero(rows, cols);
  l.b_buf = Vec::Zero(rows);
  return l;
}

Vec draw_scales(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  Vec s(n);
  for (int i = 0; i < n; ++i) s[i] = std::exp(u(rng));
  return s;
}

void nesterov_step(Mat& p, Mat& buf, const Mat& g, double momentum, double lr) {
  buf = momentum * buf + g;
  p -= lr * (g + momentum * buf);
}

void nesterov_step(Vec& p, Vec& buf, const Vec& g, double momentum, double lr) {
  buf = momentum * buf + g;
  p -= lr * (g + momentum * buf);
}

Batch gather_samples(const Batch& all, const std::vector<int>& idx, int from, int to) {
  Batch b;
  b.c = all.c;
  b.h = all.h;
  b.w = all.w;
  b.data.resize(all.features(), to - from);
  for (int i = from; i < to; ++i) b.data.col(i - from) = all.data.col(idx[i]);
  return b;
}

}  // namespace

TrainState make_tiny_net(const NetConfig& cfg) {
  if (cfg.classes < 2) throw ParamError("make_tiny_net: need at least two classes");
  if (cfg.image_hw < 5) throw ParamError("make_tiny_net: image too small for two valid 3x3 convs");
  if (cfg.conv1_out < 1 || cfg.conv2_out < 1) throw ParamError("make_tiny_net: empty conv layer");
  if (cfg.batch_size < 1) throw ParamError("make_tiny_net: batch size must be >= 1");
  if (cfg.scale_lo <= 0.0 || cfg.scale_hi < cfg.scale_lo)
    throw ParamError("make_tiny_net: bad scale range");
  cfg.bits.validate();
  cfg.opt.validate();

  TrainState st;
  st.cfg = cfg;
  st.rng = std::mt19937_64(cfg.seed);
  const bool qa = cfg.act_mode != ActMode::FP;
  const int hw2 = cfg.image_hw - 2, hw4 = cfg.image_hw - 4;
  st.layers = {
      {LayerSpec::Kind::Conv3x3, 1, cfg.conv1_out, false, qa, cfg.bits},
      {LayerSpec::Kind::Conv3x3, cfg.conv1_out, cfg.conv2_out, cfg.weight_mode == WeightMode::LQW,
       qa, cfg.bits},
      {LayerSpec::Kind::Dense, cfg.conv2_out * hw4 * hw4, cfg.classes, false, false, cfg.bits},
  };
  if (st.layers.front().quantize_weights || st.layers.back().quantize_weights)
    throw ConsistencyError("make_tiny_net: first and last layers must stay full precision");

  st.conv1 = make_fp_layer(st.rng, cfg.conv1_out, 9, std::sqrt(2.0 / 9.0));
  st.scale1 = draw_scales(st.rng, cfg.conv1_out, cfg.scale_lo, cfg.scale_hi);

  const int fan2 = cfg.conv1_out * 9;
  const double sigma2 = std::sqrt(2.0 / fan2);
  if (cfg.weight_mode == WeightMode::LQW) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    st.conv2_q.filters.resize(cfg.conv2_out);
    st.conv2_q.opt.resize(cfg.conv2_out);
    for (int f = 0; f < cfg.conv2_out; ++f) {
      WeightQuantParams& p = st.conv2_q.filters[f];
      p.filter_id = f;
      p.shadow.resize(fan2, cfg.bits.k_w);
      for (int i = 0; i < fan2; ++i)
        for (int k = 0; k < cfg.bits.k_w; ++k) p.shadow(i, k) = u(st.rng);
      p.basis.resize(cfg.bits.k_w);
      for (int k = 0; k < cfg.bits.k_w; ++k) p.basis[k] = sigma2 / static_cast<double>(2 << k);
      st.conv2_q.opt[f] = make_opt_state(p);
    }
    st.conv2_q.bias = Vec::Zero(cfg.conv2_out);
    st.conv2_q.bias_buf = Vec::Zero(cfg.conv2_out);
  } else {
    st.conv2_fp = make_fp_layer(st.rng, cfg.conv2_out, fan2, sigma2);
  }
  st.scale2 = draw_scales(st.rng, cfg.conv2_out, cfg.scale_lo, cfg.scale_hi);

  const int dense_in = cfg.conv2_out * hw4 * hw4;
  st.dense = make_fp_layer(st.rng, cfg.classes, dense_in, std::sqrt(2.0 / dense_in));

  st.act1 = make_act_quant_state(cfg.act_mode == ActMode::CAQ ? cfg.conv1_out : 1, cfg.bits.k_a);
  st.act2 = make_act_quant_state(cfg.act_mode == ActMode::CAQ ? cfg.conv2_out : 1, cfg.bits.k_a);
  (void)hw2;
  return st;
}

ForwardCache forward(TrainState& state, const Batch& batch, ForwardMode mode,
                     const ForwardCache* base) {
  batch.check();
  const NetConfig& cfg = state.cfg;
  if (batch.c != 1 || batch.h != cfg.image_hw || batch.w != cfg.image_hw)
    throw ShapeError("forward: batch shape does not match the input layer");
  if (mode == ForwardMode::FrozenResidual && (base == nullptr || !base->valid))
    throw StateError("forward: frozen mode needs a valid base cache");

  const bool train = mode == ForwardMode::Train;
  ForwardCache c;
  c.input = batch;
  c.train_mode = train;

  c.patches1 = im2col3x3(batch);
  Mat pre1 = state.conv1.w * c.patches1;
  pre1.colwise() += state.conv1.b;
  Batch ss1 = scatter_conv(pre1, batch.samples(), cfg.conv1_out, batch.h - 2, batch.w - 2);
  scale_channels(ss1, state.scale1);
  c.relu1 = ss1;
  c.relu1.data = ss1.data.cwiseMax(0.0);
  if (!state.acts_quantized()) {
    c.act1 = c.relu1;
  } else if (mode == ForwardMode::FrozenResidual) {
    c.act1 = c.relu1;
    c.act1.data += base->act1.data - base->relu1.data;
  } else {
    c.act1 = site_forward(c.relu1, state.act1, cfg.act_mode, train);
  }

  c.patches2 = im2col3x3(c.act1);
  if (state.conv2_is_lqw()) {
    c.wq2.resize(cfg.conv2_out, cfg.conv1_out * 9);
    for (int f = 0; f < cfg.conv2_out; ++f)
      c.wq2.row(f) = lqw_forward(state.conv2_q.filters[f]).transpose();
  } else {
    c.wq2 = state.conv2_fp.w;
  }
  const Vec& bias2 = state.conv2_is_lqw() ? state.conv2_q.bias : state.conv2_fp.b;
  Mat pre2 = c.wq2 * c.patches2;
  pre2.colwise() += bias2;
  Batch ss2 = scatter_conv(pre2, batch.samples(), cfg.conv2_out, c.act1.h - 2, c.act1.w - 2);
  scale_channels(ss2, state.scale2);
  c.relu2 = ss2;
  c.relu2.data = ss2.data.cwiseMax(0.0);
  if (!state.acts_quantized()) {
    c.act2 = c.relu2;
  } else if (mode == ForwardMode::FrozenResidual) {
    c.act2 = c.relu2;
    c.act2.data += base->act2.data - base->relu2.data;
  } else {
    c.act2 = site_forward(c.relu2, state.act2, cfg.act_mode, train);
  }

  c.logits = state.dense.w * c.act2.data;
  c.logits.colwise() += state.dense.b;
  c.valid = true;
  return c;
}

NetGrads backward(const TrainState& state, const ForwardCache& cache, const Mat& grad_logits) {
  if (!cache.valid) throw StateError("backward: cache does not come from a forward pass");
  if (grad_logits.rows() != cache.logits.rows() || grad_logits.cols() != cache.logits.cols())
    throw ShapeError("backward: grad_logits shape mismatch");
  const NetConfig& cfg = state.cfg;
  const bool qa = state.acts_quantized();

  NetGrads g;
  g.dense_w = grad_logits * cache.act2.data.transpose();
  g.dense_b = grad_logits.rowwise().sum();
  Mat dact2 = state.dense.w.transpose() * grad_logits;
  if (qa) dact2 = ste_activation_backward(dact2);

  Batch dpre2 = cache.relu2;
  dpre2.data = dact2.cwiseProduct((cache.relu2.data.array() > 0.0).cast<double>().matrix());
  scale_channels(dpre2, state.scale2);

  const Mat dpre2_mat = gather_conv(dpre2);
  g.conv2_w = dpre2_mat * cache.patches2.transpose();
  g.conv2_b = dpre2_mat.rowwise().sum();
  const Mat dpatches2 = cache.wq2.transpose() * dpre2_mat;
  Batch dact1 =
      col2im3x3(dpatches2, cfg.conv1_out, cache.act1.h, cache.act1.w, cache.act1.samples());
  if (qa) dact1.data = ste_activation_backward(dact1.data);

  Batch dpre1 = cache.relu1;
  dpre1.data = dact1.data.cwiseProduct((cache.relu1.data.array() > 0.0).cast<double>().matrix());
  scale_channels(dpre1, state.scale1);

  const Mat dpre1_mat = gather_conv(dpre1);
  g.conv1_w = dpre1_mat * cache.patches1.transpose();
  g.conv1_b = dpre1_mat.rowwise().sum();

  if (state.conv2_is_lqw())
    for (int f = 0; f < cfg.conv2_out; ++f)
      g.conv2_filters.push_back(
          lqw_backward(g.conv2_w.row(f).transpose(), state.conv2_q.filters[f]));
  return g;
}

void apply_update(TrainState& state, const NetGrads& grads, double lr) {
  const OptimConfig& opt = state.cfg.opt;
  opt.validate();
  if (!grads.conv1_w.allFinite() || !grads.dense_w.allFinite() || !grads.conv2_w.allFinite())
    throw NumericError("apply_update: non-finite gradient");

  nesterov_step(state.conv1.w, state.conv1.w_buf, grads.conv1_w, opt.momentum, lr);
  nesterov_step(state.conv1.b, state.conv1.b_buf, grads.conv1_b, opt.momentum, lr);
  if (state.conv2_is_lqw()) {
    for (size_t f = 0; f < state.conv2_q.filters.size(); ++f)
      lqw_update(state.conv2_q.filters[f], grads.conv2_filters[f], opt, lr, state.conv2_q.opt[f]);
    nesterov_step(state.conv2_q.bias, state.conv2_q.bias_buf, grads.conv2_b, opt.momentum, lr);
  } else {
    nesterov_step(state.conv2_fp.w, state.conv2_fp.w_buf, grads.conv2_w, opt.momentum, lr);
    nesterov_step(state.conv2_fp.b, state.conv2_fp.b_buf, grads.conv2_b, opt.momentum, lr);
  }
  nesterov_step(state.dense.w, state.dense.w_buf, grads.dense_w, opt.momentum, lr);
  nesterov_step(state.dense.b, state.dense.b_buf, grads.dense_b, opt.momentum, lr);
}

double softmax_xent(const Mat& logits, const VecI& labels, Mat* grad_logits) {
  const int b = static_cast<int>(logits.cols());
  if (labels.size() != b) throw ShapeError("softmax_xent: label count != batch size");
  double loss = 0.0;
  Mat grad;
  if (grad_logits) grad.resize(logits.rows(), b);
  for (int s = 0; s < b; ++s) {
    if (labels[s] < 0 || labels[s] >= logits.rows()) throw RangeError("softmax_xent: bad label");
    const Vec col = logits.col(s);
    const double m = col.maxCoeff();
    const Vec z = (col.array() - m).exp();
    const double sum = z.sum();
    loss += std::log(sum) + m - col[labels[s]];
    if (grad_logits) {
      grad.col(s) = z / sum;
      grad(labels[s], s) -= 1.0;
    }
  }
  if (grad_logits) *grad_logits = grad / b;
  return loss / b;
}

double accuracy(const Mat& logits, const VecI& labels) {
  int correct = 0;
  for (int s = 0; s < logits.cols(); ++s) {
    int arg = 0;
    for (int k = 1; k < logits.rows(); ++k)
      if (logits(k, s) > logits(arg, s)) arg = k;
    if (arg == labels[s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.cols());
}

namespace {

double eval_accuracy(TrainState& state, const Dataset& ds) {
  const int bs = state.cfg.batch_size;
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  int correct = 0;
  for (int from = 0; from < ds.size(); from += bs) {
    const int to = std::min(from + bs, ds.size());
    Batch mb = gather_samples(ds.images, idx, from, to);
    VecI labels(to - from);
    for (int i = from; i < to; ++i) labels[i - from] = ds.labels[idx[i]];
    ForwardCache c = forward(state, mb, ForwardMode::Eval);
    correct += static_cast<int>(std::lround(accuracy(c.logits, labels) * (to - from)));
  }
  return static_cast<double>(correct) / ds.size();
}

}  // namespace

std::vector<EpochLog> train(TrainState& state, const Dataset& train_ds, const Dataset* eval_ds,
                            int epochs) {
  train_ds.check();
  if (train_ds.size() < 1) throw ParamError("train: empty dataset");
  if (train_ds.classes != state.cfg.classes) throw ShapeError("train: class count mismatch");
  if (eval_ds) eval_ds->check();
  if (epochs < 0) throw ParamError("train: negative epoch count");

  std::vector<EpochLog> log;
  if (epochs == 0) return log;

  TrainState good = state;  // rollback point: end of the last finished epoch
  const int bs = state.cfg.batch_size;
  std::vector<int> idx(train_ds.size());

  for (int e = 0; e < epochs; ++e) {
    const double lr = poly_lr(state.epoch, state.cfg.opt);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = train_ds.size() - 1; i > 0; --i) {
      std::uniform_int_distribution<int> pick(0, i);
      std::swap(idx[i], idx[pick(state.rng)]);
    }

    double loss_sum = 0.0;
    double correct = 0.0;
    for (int from = 0; from < train_ds.size(); from += bs) {
      const int to = std::min(from + bs, train_ds.size());
      Batch mb = gather_samples(train_ds.images, idx, from, to);
      VecI labels(to - from);
      for (int i = from; i < to; ++i) labels[i - from] = train_ds.labels[idx[i]];

      ForwardCache cache = forward(state, mb, ForwardMode::Train);
      Mat dlogits;
      const double loss = softmax_xent(cache.logits, labels, &dlogits);
      if (!std::isfinite(loss)) {
        state = good;
        throw NumericError("train: loss diverged at epoch " + std::to_string(state.epoch));
      }
      loss_sum += loss * (to - from);
      correct += accuracy(cache.logits, labels) * (to - from);
      NetGrads grads = backward(state, cache, dlogits);
      apply_update(state, grads, lr);
    }

    EpochLog row;
    row.epoch = state.epoch;
    row.lr = lr;
    row.loss = loss_sum / train_ds.size();
    row.train_acc = correct / train_ds.size();
    row.eval_acc = eval_accuracy(state, eval_ds ? *eval_ds : train_ds);
    log.push_back(row);
    ++state.epoch;
    good = state;
  }
  return log;
}

std::string to_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,lr,loss,train_acc,eval_acc\n";
  os.precision(10);
  for (const EpochLog& r : log)
    os << r.epoch << ',' << r.lr << ',' << r.loss << ',' << r.train_acc << ',' << r.eval_acc
       << '\n';
  return os.str();
}

const char* to_string(WeightMode m) { return m == WeightMode::FP ? "fp" : "lqw"; }

const char* to_string(ActMode m) {
  switch (m) {
    case ActMode::FP: return "fp";
    case ActMode::CAQ: return "caq";
    default: return "global";
  }
}

std::vector<AblationCell> ablate(const NetConfig& base, const Dataset& train_ds,
                                 const Dataset* eval_ds, const std::vector<WeightMode>& weights,
                                 const std::vector<ActMode>& acts,
                                 const std::vector<std::uint64_t>& seeds, int epochs) {
  if (weights.empty() || acts.empty() || seeds.empty())
    throw ParamError("ablate: empty grid or seed list");
  std::vector<AblationCell> cells;
  for (WeightMode wm : weights)
    for (ActMode am : acts) {
      AblationCell cell;
      cell.weight_mode = wm;
      cell.act_mode = am;
      for (std::uint64_t seed : seeds) {
        NetConfig cfg = base;
        cfg.weight_mode = wm;
        cfg.act_mode = am;
        cfg.seed = seed;
        TrainState st = make_tiny_net(cfg);
        const std::vector<EpochLog> log = train(st, train_ds, eval_ds, epochs);
        cell.seed_accs.push_back(log.empty() ? 0.0 : log.back().train_acc);
      }
      cell.mean_acc = std::accumulate(cell.seed_accs.begin(), cell.seed_accs.end(), 0.0) /
                      cell.seed_accs.size();
      cells.push_back(std::move(cell));
    }
  return cells;
}

std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os << "weights,acts,mean_train_acc";
  if (!cells.empty())
    for (size_t s = 0; s < cells[0].seed_accs.size(); ++s) os << ",acc_seed" << s + 1;
  os << '\n';
  os.precision(6);
  for (const AblationCell& c : cells) {
    os << to_string(c.weight_mode) << ',' << to_string(c.act_mode) << ',' << c.mean_acc;
    for (double a : c.seed_accs) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

std::string ablation_markdown(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os << "| weights | acts | mean train acc |\n|---|---|---|\n";
  os.precision(4);
  for (const AblationCell& c : cells)
    os << "| " << to_string(c.weight_mode) << " | " << to_string(c.act_mode) << " | " << c.mean_acc
       << " |\n";
  return os.str();
}

}  // namespace bitquant
