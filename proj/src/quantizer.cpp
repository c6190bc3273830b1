#include "bitquant/quantizer.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace bitquant {

namespace {

constexpr double kRidge = 1e-10;

void check_bits(int bits) {
  if (bits < 1 || bits > 8)
    throw RangeError("bit width must be in [1,8], got " + std::to_string(bits));
}

// Levels uniform over [0, max(a)]: basis entry j gets the binary place value
// 2^j * M / (2^K - 1). Degenerate data (max <= 0) falls back to 1e-3 entries.
QuantBasis range_init(const Vec& a, int bits) {
  const double m = a.size() ? a.maxCoeff() : 0.0;
  QuantBasis v(bits);
  if (m <= 0.0) {
    v.setConstant(1e-3);
    return v;
  }
  const double unit = m / (static_cast<double>(1 << bits) - 1.0);
  for (int j = 0; j < bits; ++j) v[j] = unit * static_cast<double>(1 << j);
  return v;
}

int nearest_level(double x, const Vec& levels) {
  int best = 0;
  double best_d = std::abs(x - levels[0]);
  for (int i = 1; i < levels.size(); ++i) {
    const double d = std::abs(x - levels[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::atomic<bool> g_debug_nan_checks{false};
std::atomic<long> g_ste_nan_flags{0};

}  // namespace

VecI dec2bin(int value, int bits) {
  check_bits(bits);
  if (value < 0 || value >= (1 << bits))
    throw RangeError("dec2bin: value " + std::to_string(value) + " out of range for " +
                     std::to_string(bits) + " bits");
  VecI code(bits);
  for (int j = 0; j < bits; ++j) code[j] = (value >> j) & 1;
  return code;
}

QuantLevels quant_levels(const QuantBasis& basis) {
  const int k = static_cast<int>(basis.size());
  check_bits(k);
  const int n = 1 << k;
  QuantLevels out;
  out.codes.resize(n, k);
  out.levels.resize(n);
  for (int i = 0; i < n; ++i) {
    out.codes.row(i) = dec2bin(i, k).transpose();
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += out.codes(i, j) * basis[j];
    out.levels[i] = acc;
  }
  return out;
}

VecI nearest_level_indices(const Vec& values, const QuantLevels& levels) {
  if (levels.count() < 1) throw ParamError("nearest_level_indices: empty level set");
  VecI idx(values.size());
  for (long i = 0; i < values.size(); ++i) idx[i] = nearest_level(values[i], levels.levels);
  return idx;
}

Encoding encode_nearest(const Vec& values, const QuantLevels& levels) {
  const VecI idx = nearest_level_indices(values, levels);
  Encoding enc;
  enc.alphabet = Alphabet::ZeroOne;
  enc.bits.resize(values.size(), levels.planes());
  for (long i = 0; i < values.size(); ++i)
    enc.bits.row(i) = levels.codes.row(idx[i]).cast<double>();
  return enc;
}

Vec quantize_values(const Vec& values, const QuantLevels& levels) {
  Vec out(values.size());
  for (long i = 0; i < values.size(); ++i) out[i] = levels.levels[nearest_level(values[i], levels.levels)];
  return out;
}

Mat quantize_matrix(const Mat& values, const QuantLevels& levels) {
  Mat out(values.rows(), values.cols());
  for (long c = 0; c < values.cols(); ++c)
    for (long r = 0; r < values.rows(); ++r)
      out(r, c) = levels.levels[nearest_level(values(r, c), levels.levels)];
  return out;
}

QuantBasis basis_ls_update(const Encoding& enc, const Vec& a) {
  if (enc.alphabet != Alphabet::ZeroOne)
    throw AlphabetError("basis_ls_update: encoding must use the {0,1} alphabet");
  if (enc.size() != a.size())
    throw ShapeError("basis_ls_update: encoding rows != signal length");
  const int k = enc.planes();
  check_bits(k);
  Mat g = enc.bits.transpose() * enc.bits;
  g.diagonal().array() += kRidge;
  return g.ldlt().solve(enc.bits.transpose() * a);
}

FitResult fit_scalar_quantizer(const Vec& a, int bits, int iters,
                               const std::optional<QuantBasis>& init) {
  check_bits(bits);
  if (iters < 1) throw ParamError("fit_scalar_quantizer: iters must be >= 1");
  if (a.size() < 1) throw ShapeError("fit_scalar_quantizer: empty signal");
  QuantBasis v;
  if (init) {
    if (init->size() != bits) throw ShapeError("fit_scalar_quantizer: init size != bits");
    v = *init;
  } else {
    v = range_init(a, bits);
  }

  FitResult res;
  res.round_errors.reserve(iters);
  for (int t = 0; t < iters; ++t) {
    const QuantLevels lv = quant_levels(v);
    const Encoding enc = encode_nearest(a, lv);
    v = basis_ls_update(enc, a);
    res.round_errors.push_back((a - enc.bits * v).squaredNorm());
  }

  const QuantLevels lv = quant_levels(v);
  res.enc = encode_nearest(a, lv);
  res.basis = v;
  res.sq_error = (a - res.enc.bits * v).squaredNorm();
  return res;
}

ActQuantState make_act_quant_state(int channels, int bits, double mu, int iters) {
  if (channels < 1) throw ParamError("make_act_quant_state: need at least one channel");
  check_bits(bits);
  if (mu < 0.0 || mu > 1.0) throw RangeError("make_act_quant_state: mu must be in [0,1]");
  if (iters < 1) throw ParamError("make_act_quant_state: iters must be >= 1");
  ActQuantState st;
  st.channel_bases.assign(channels, QuantBasis::Zero(bits));
  st.averaged = QuantBasis::Zero(bits);
  st.mu = mu;
  st.iters = iters;
  st.bits = bits;
  st.ready = false;
  return st;
}

Batch caq_train_step(const Batch& a, ActQuantState& state) {
  a.check();
  if (a.c != state.channel_count())
    throw ShapeError("caq_train_step: batch has " + std::to_string(a.c) + " channels, state has " +
                     std::to_string(state.channel_count()));
  for (int j = 0; j < a.c; ++j) {
    const Mat block = a.channel(j);
    const Vec x = Eigen::Map<const Vec>(block.data(), block.size());
    if (!state.ready) state.channel_bases[j] = range_init(x, state.bits);
    if ((x.array() == 0.0).all()) continue;
    const FitResult fit = fit_scalar_quantizer(x, state.bits, state.iters, state.channel_bases[j]);
    state.channel_bases[j] =
        (1.0 - state.mu) * fit.basis + state.mu * state.channel_bases[j];
  }
  QuantBasis mean = QuantBasis::Zero(state.bits);
  for (const QuantBasis& v : state.channel_bases) mean += v;
  state.averaged = mean / state.channel_count();
  state.ready = true;

  Batch out = a;
  out.data = quantize_matrix(a.data, quant_levels(state.averaged));
  return out;
}

Batch caq_infer(const Batch& a, const ActQuantState& state) {
  a.check();
  if (!state.ready)
    throw StateError("caq_infer: quantizer has not seen a training batch");
  if (a.c != state.channel_count())
    throw ShapeError("caq_infer: channel count mismatch");
  Batch out = a;
  out.data = quantize_matrix(a.data, quant_levels(state.averaged));
  return out;
}

Mat ste_activation_backward(const Mat& grad) {
  if (g_debug_nan_checks.load(std::memory_order_relaxed) && !grad.allFinite())
    g_ste_nan_flags.fetch_add(1, std::memory_order_relaxed);
  return grad;
}

void set_debug_nan_checks(bool on) { g_debug_nan_checks.store(on); }

long ste_nan_flag_count() { return g_ste_nan_flags.load(); }

ChannelMseReport channel_mse_report(const Batch& a, const ActQuantState& state,
                                    const QuantBasis& global_basis) {
  a.check();
  if (!state.ready) throw StateError("channel_mse_report: quantizer state not initialized");
  if (a.c != state.channel_count()) throw ShapeError("channel_mse_report: channel count mismatch");
  const QuantLevels lv_caq = quant_levels(state.averaged);
  const QuantLevels lv_glob = quant_levels(global_basis);

  ChannelMseReport rep;
  rep.rows.reserve(a.c);
  double sum_caq = 0.0, sum_glob = 0.0;
  long total = 0;
  for (int j = 0; j < a.c; ++j) {
    const Mat block = a.channel(j);
    const Vec x = Eigen::Map<const Vec>(block.data(), block.size());
    const double mse_c = (x - quantize_values(x, lv_caq)).squaredNorm() / x.size();
    const double mse_g = (x - quantize_values(x, lv_glob)).squaredNorm() / x.size();
    double rel = 0.0;
    if (mse_g > 0.0)
      rel = (mse_c - mse_g) / mse_g * 100.0;
    else if (mse_c > 0.0)
      rel = std::numeric_limits<double>::infinity();
    rep.rows.push_back({j, mse_c, mse_g, rel});
    if (mse_c < mse_g) ++rep.improved;
    sum_caq += mse_c * x.size();
    sum_glob += mse_g * x.size();
    total += x.size();
  }
  rep.overall_caq = sum_caq / total;
  rep.overall_global = sum_glob / total;
  return rep;
}

std::string to_csv(const ChannelMseReport& report) {
  std::ostringstream os;
  os << "channel,mse_caq,mse_global,rel_change_pct\n";
  os.precision(12);
  for (const auto& r : report.rows)
    os << r.channel << ',' << r.mse_caq << ',' << r.mse_global << ',' << r.rel_change_pct << '\n';
  return os.str();
}

}  // namespace bitquant
