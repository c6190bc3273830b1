#include "bitquant/data_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace bitquant {

namespace {

// ---------------------------------------------------------------------------
// Bounded byte readers/writers. The whole file is pulled into memory first so
// every declared length can be validated against what is actually there
// before any allocation happens.
// ---------------------------------------------------------------------------

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path);
  return buf;
}

class Reader {
 public:
  Reader(std::vector<unsigned char> buf, std::string name)
      : buf_(std::move(buf)), name_(std::move(name)) {}

  size_t remaining() const { return buf_.size() - pos_; }

  const unsigned char* take(size_t n) {
    if (n > remaining()) throw IoError("truncated file: " + name_);
    const unsigned char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint8_t u8() { return *take(1); }

  std::uint32_t u32be() {
    const unsigned char* p = take(4);
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
  }

  std::uint32_t u32le() {
    const unsigned char* p = take(4);
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
  }

  std::uint64_t u64le() {
    const unsigned char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }

  std::int32_t i32le() { return static_cast<std::int32_t>(u32le()); }

  double f64le() {
    const std::uint64_t v = u64le();
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }

  // A declared payload length, validated against the bytes actually present.
  size_t section_len() {
    const std::uint64_t n = u64le();
    if (n > remaining()) throw FormatError("corrupt section length in " + name_);
    return static_cast<size_t>(n);
  }

  const std::string& name() const { return name_; }

 private:
  std::vector<unsigned char> buf_;
  size_t pos_ = 0;
  std::string name_;
};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }

  void u32be(std::uint32_t v) {
    for (int i = 3; i >= 0; --i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }

  void u32le(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }

  void u64le(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }

  void i32le(std::int32_t v) { u32le(static_cast<std::uint32_t>(v)); }

  void f64le(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    u64le(v);
  }

  void bytes(const void* p, size_t n) {
    const unsigned char* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }

  // Appends another writer's buffer as a length-prefixed section.
  void section(const Writer& w) {
    u64le(w.buf_.size());
    buf_.insert(buf_.end(), w.buf_.begin(), w.buf_.end());
  }

  void flush(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()),
              static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("write failure on " + path);
  }

 private:
  std::vector<unsigned char> buf_;
};

constexpr long kMaxDim = 1L << 30;  // parse-time sanity bound on any dimension

void put_mat(Writer& w, const Mat& m) {
  w.u64le(static_cast<std::uint64_t>(m.rows()));
  w.u64le(static_cast<std::uint64_t>(m.cols()));
  for (long j = 0; j < m.cols(); ++j)
    for (long i = 0; i < m.rows(); ++i) w.f64le(m(i, j));
}

Mat get_mat(Reader& r) {
  const std::uint64_t rows = r.u64le(), cols = r.u64le();
  if (rows > kMaxDim || cols > kMaxDim || rows * cols * 8 > r.remaining())
    throw FormatError("corrupt matrix header in " + r.name());
  Mat m(static_cast<long>(rows), static_cast<long>(cols));
  for (long j = 0; j < m.cols(); ++j)
    for (long i = 0; i < m.rows(); ++i) m(i, j) = r.f64le();
  return m;
}

void put_vec(Writer& w, const Vec& v) {
  w.u64le(static_cast<std::uint64_t>(v.size()));
  for (long i = 0; i < v.size(); ++i) w.f64le(v[i]);
}

Vec get_vec(Reader& r) {
  const std::uint64_t n = r.u64le();
  if (n > kMaxDim || n * 8 > r.remaining()) throw FormatError("corrupt vector header in " + r.name());
  Vec v(static_cast<long>(n));
  for (long i = 0; i < v.size(); ++i) v[i] = r.f64le();
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

// Parses one IDX file: unsigned-byte payload with `rank` in `allowed_ranks`.
std::pair<std::vector<int>, std::vector<unsigned char>> parse_idx(const std::string& path,
                                                                  std::initializer_list<int> ranks) {
  Reader r(slurp(path), path);
  const unsigned char* magic = r.take(4);
  if (magic[0] != 0 || magic[1] != 0) throw FormatError("bad IDX magic in " + path);
  if (magic[2] != 0x08) throw FormatError("unsupported IDX element type in " + path);
  const int rank = magic[3];
  bool ok = false;
  for (int a : ranks) ok = ok || rank == a;
  if (!ok) throw FormatError("unexpected IDX rank " + std::to_string(rank) + " in " + path);

  std::vector<int> dims(rank);
  std::uint64_t total = 1;
  for (int d = 0; d < rank; ++d) {
    const std::uint32_t v = r.u32be();
    if (v == 0) throw FormatError("empty IDX dimension in " + path);
    if (v > kMaxDim) throw FormatError("oversized IDX dimension in " + path);
    dims[d] = static_cast<int>(v);
    total *= v;
    if (total > (1ULL << 33)) throw FormatError("IDX payload too large in " + path);
  }
  if (r.remaining() < total) throw IoError("truncated IDX payload in " + path);
  if (r.remaining() > total) throw FormatError("trailing bytes after IDX payload in " + path);
  const unsigned char* p = r.take(static_cast<size_t>(total));
  return {dims, std::vector<unsigned char>(p, p + total)};
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  auto [idims, ibytes] = parse_idx(images_path, {3, 4});
  auto [ldims, lbytes] = parse_idx(labels_path, {1});

  const int n = idims[0];
  const int c = idims.size() == 4 ? idims[1] : 1;
  const int h = idims[idims.size() - 2];
  const int w = idims[idims.size() - 1];
  if (ldims[0] != n)
    throw ConsistencyError("IDX image count " + std::to_string(n) + " != label count " +
                           std::to_string(ldims[0]));

  Dataset ds;
  ds.images.c = c;
  ds.images.h = h;
  ds.images.w = w;
  ds.images.data.resize(static_cast<long>(c) * h * w, n);
  const size_t per = static_cast<size_t>(c) * h * w;
  for (int s = 0; s < n; ++s)
    for (size_t i = 0; i < per; ++i)
      ds.images.data(static_cast<long>(i), s) = ibytes[s * per + i] / 255.0;

  ds.labels.resize(n);
  int maxl = 0;
  for (int s = 0; s < n; ++s) {
    ds.labels[s] = lbytes[s];
    maxl = std::max(maxl, static_cast<int>(lbytes[s]));
  }
  ds.classes = maxl + 1;
  if (ds.classes < 2) throw ConsistencyError("IDX labels contain fewer than two classes");
  ds.meta.source = "idx:" + images_path;
  ds.meta.pixel_scale = 1.0 / 255.0;
  ds.check();
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.check();
  if (ds.classes > 256) throw RangeError("save_idx: labels do not fit in one byte");
  Writer wi;
  wi.u32be(ds.images.c == 1 ? 0x00000803u : 0x00000804u);
  wi.u32be(static_cast<std::uint32_t>(ds.size()));
  if (ds.images.c != 1) wi.u32be(static_cast<std::uint32_t>(ds.images.c));
  wi.u32be(static_cast<std::uint32_t>(ds.images.h));
  wi.u32be(static_cast<std::uint32_t>(ds.images.w));
  for (int s = 0; s < ds.size(); ++s)
    for (long i = 0; i < ds.images.data.rows(); ++i) {
      const double v = std::min(1.0, std::max(0.0, ds.images.data(i, s)));
      wi.u8(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  wi.flush(images_path);

  Writer wl;
  wl.u32be(0x00000801u);
  wl.u32be(static_cast<std::uint32_t>(ds.size()));
  for (int s = 0; s < ds.size(); ++s) wl.u8(static_cast<std::uint8_t>(ds.labels[s]));
  wl.flush(labels_path);
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

Dataset synth_blobs(std::uint64_t seed, int n_per_class, int classes, const Vec& channel_scales,
                    int hw, double noise) {
  if (classes < 2) throw ParamError("synth_blobs: need at least two classes");
  if (n_per_class < 1) throw ParamError("synth_blobs: need at least one sample per class");
  if (channel_scales.size() < 1) throw ParamError("synth_blobs: need at least one channel");
  if (hw < 2) throw ParamError("synth_blobs: image too small");
  if (noise < 0.0) throw ParamError("synth_blobs: negative noise level");

  const int chans = static_cast<int>(channel_scales.size());
  const int n = classes * n_per_class;
  Dataset ds;
  ds.classes = classes;
  ds.images.c = chans;
  ds.images.h = hw;
  ds.images.w = hw;
  ds.images.data.resize(static_cast<long>(chans) * hw * hw, n);
  ds.labels.resize(n);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> amp(0.8, 1.2), width(1.0, 1.5);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double mid = (hw - 1) / 2.0, radius = hw / 4.0;

  Mat pattern(hw, hw);
  for (int k = 0; k < classes; ++k) {
    const double theta = 2.0 * M_PI * k / classes;
    const double ci = mid + radius * std::cos(theta), cj = mid + radius * std::sin(theta);
    for (int t = 0; t < n_per_class; ++t) {
      const int s = k * n_per_class + t;
      ds.labels[s] = k;
      const double a = amp(rng), sg = width(rng);
      for (int i = 0; i < hw; ++i)
        for (int j = 0; j < hw; ++j)
          pattern(i, j) = a * std::exp(-((i - ci) * (i - ci) + (j - cj) * (j - cj)) / (2 * sg * sg));
      for (int c = 0; c < chans; ++c)
        for (int i = 0; i < hw; ++i)
          for (int j = 0; j < hw; ++j)
            ds.images.data(static_cast<long>(c) * hw * hw + i * hw + j, s) =
                channel_scales[c] * (pattern(i, j) + noise * nd(rng));
    }
  }
  ds.meta.source = "synth_blobs(seed=" + std::to_string(seed) + ")";
  ds.check();
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints (.bqck)
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kPackedVersion = 1;

void put_act_state(Writer& w, const ActQuantState& st) {
  w.i32le(st.channel_count());
  w.i32le(st.bits);
  w.f64le(st.mu);
  w.i32le(st.iters);
  w.u8(st.ready ? 1 : 0);
  put_vec(w, st.averaged);
  for (const QuantBasis& b : st.channel_bases) put_vec(w, b);
}

ActQuantState get_act_state(Reader& r) {
  const int channels = r.i32le();
  const int bits = r.i32le();
  if (channels < 1 || bits < 1) throw FormatError("corrupt quantizer state in " + r.name());
  const double mu = r.f64le();
  const int iters = r.i32le();
  ActQuantState st = make_act_quant_state(channels, bits, mu, iters);
  st.ready = r.u8() != 0;
  st.averaged = get_vec(r);
  for (int c = 0; c < channels; ++c) st.channel_bases[c] = get_vec(r);
  return st;
}

void check_same_shape(const char* what, long a, long b) {
  if (a != b)
    throw FormatError(std::string("checkpoint section does not match its config: ") + what);
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  const NetConfig& cfg = state.cfg;
  Writer out;
  out.bytes("BQCK", 4);
  out.u32le(kCheckpointVersion);

  Writer s0;
  s0.i32le(cfg.classes);
  s0.i32le(cfg.image_hw);
  s0.i32le(cfg.conv1_out);
  s0.i32le(cfg.conv2_out);
  s0.i32le(cfg.bits.k_w);
  s0.i32le(cfg.bits.k_a);
  s0.i32le(cfg.bits.word_bits);
  s0.i32le(static_cast<int>(cfg.weight_mode));
  s0.i32le(static_cast<int>(cfg.act_mode));
  s0.i32le(cfg.batch_size);
  s0.f64le(cfg.scale_lo);
  s0.f64le(cfg.scale_hi);
  s0.u64le(cfg.seed);
  s0.f64le(cfg.opt.lr);
  s0.f64le(cfg.opt.lr_final);
  s0.f64le(cfg.opt.lr_power);
  s0.i32le(cfg.opt.total_epochs);
  s0.f64le(cfg.opt.momentum);
  s0.f64le(cfg.opt.gamma_v);
  s0.f64le(cfg.opt.gamma_s);
  s0.f64le(cfg.opt.weight_decay_q);
  s0.i32le(state.epoch);
  out.section(s0);

  Writer s1;
  put_mat(s1, state.conv1.w);
  put_vec(s1, state.conv1.b);
  put_mat(s1, state.conv1.w_buf);
  put_vec(s1, state.conv1.b_buf);
  put_vec(s1, state.scale1);
  if (cfg.weight_mode == WeightMode::LQW) {
    for (size_t f = 0; f < state.conv2_q.filters.size(); ++f) {
      put_mat(s1, state.conv2_q.filters[f].shadow);
      put_vec(s1, state.conv2_q.filters[f].basis);
      put_mat(s1, state.conv2_q.opt[f].shadow_buf);
      put_vec(s1, state.conv2_q.opt[f].basis_buf);
    }
    put_vec(s1, state.conv2_q.bias);
    put_vec(s1, state.conv2_q.bias_buf);
  } else {
    put_mat(s1, state.conv2_fp.w);
    put_vec(s1, state.conv2_fp.b);
    put_mat(s1, state.conv2_fp.w_buf);
    put_vec(s1, state.conv2_fp.b_buf);
  }
  put_vec(s1, state.scale2);
  put_mat(s1, state.dense.w);
  put_vec(s1, state.dense.b);
  put_mat(s1, state.dense.w_buf);
  put_vec(s1, state.dense.b_buf);
  out.section(s1);

  Writer s2;
  put_act_state(s2, state.act1);
  put_act_state(s2, state.act2);
  out.section(s2);

  Writer s3;
  std::ostringstream rs;
  rs << state.rng;
  const std::string rtext = rs.str();
  s3.bytes(rtext.data(), rtext.size());
  out.section(s3);

  out.flush(path);
}

TrainState load_checkpoint(const std::string& path) {
  Reader r(slurp(path), path);
  const unsigned char* magic = r.take(4);
  if (std::memcmp(magic, "BQCK", 4) != 0) throw FormatError("bad checkpoint magic in " + path);
  const std::uint32_t version = r.u32le();
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " in " + path);

  r.section_len();  // config section
  NetConfig cfg;
  cfg.classes = r.i32le();
  cfg.image_hw = r.i32le();
  cfg.conv1_out = r.i32le();
  cfg.conv2_out = r.i32le();
  cfg.bits.k_w = r.i32le();
  cfg.bits.k_a = r.i32le();
  cfg.bits.word_bits = r.i32le();
  const int wm = r.i32le(), am = r.i32le();
  if (wm < 0 || wm > 1 || am < 0 || am > 2)
    throw FormatError("corrupt mode field in " + path);
  cfg.weight_mode = static_cast<WeightMode>(wm);
  cfg.act_mode = static_cast<ActMode>(am);
  cfg.batch_size = r.i32le();
  cfg.scale_lo = r.f64le();
  cfg.scale_hi = r.f64le();
  cfg.seed = r.u64le();
  cfg.opt.lr = r.f64le();
  cfg.opt.lr_final = r.f64le();
  cfg.opt.lr_power = r.f64le();
  cfg.opt.total_epochs = r.i32le();
  cfg.opt.momentum = r.f64le();
  cfg.opt.gamma_v = r.f64le();
  cfg.opt.gamma_s = r.f64le();
  cfg.opt.weight_decay_q = r.f64le();
  const int epoch = r.i32le();

  TrainState st = make_tiny_net(cfg);
  st.epoch = epoch;

  r.section_len();  // parameter section
  st.conv1.w = get_mat(r);
  check_same_shape("conv1 weights", st.conv1.w.rows(), cfg.conv1_out);
  st.conv1.b = get_vec(r);
  st.conv1.w_buf = get_mat(r);
  st.conv1.b_buf = get_vec(r);
  st.scale1 = get_vec(r);
  if (cfg.weight_mode == WeightMode::LQW) {
    for (int f = 0; f < cfg.conv2_out; ++f) {
      st.conv2_q.filters[f].shadow = get_mat(r);
      check_same_shape("shadow bit planes", st.conv2_q.filters[f].shadow.cols(), cfg.bits.k_w);
      st.conv2_q.filters[f].basis = get_vec(r);
      st.conv2_q.opt[f].shadow_buf = get_mat(r);
      st.conv2_q.opt[f].basis_buf = get_vec(r);
    }
    st.conv2_q.bias = get_vec(r);
    st.conv2_q.bias_buf = get_vec(r);
  } else {
    st.conv2_fp.w = get_mat(r);
    st.conv2_fp.b = get_vec(r);
    st.conv2_fp.w_buf = get_mat(r);
    st.conv2_fp.b_buf = get_vec(r);
  }
  st.scale2 = get_vec(r);
  st.dense.w = get_mat(r);
  check_same_shape("dense weights", st.dense.w.rows(), cfg.classes);
  st.dense.b = get_vec(r);
  st.dense.w_buf = get_mat(r);
  st.dense.b_buf = get_vec(r);

  r.section_len();  // quantizer states
  st.act1 = get_act_state(r);
  st.act2 = get_act_state(r);

  const size_t rlen = r.section_len();
  const unsigned char* rbytes = r.take(rlen);
  std::istringstream rstream(std::string(reinterpret_cast<const char*>(rbytes), rlen));
  rstream >> st.rng;
  if (rstream.fail()) throw FormatError("corrupt RNG state in " + path);
  return st;
}

void load_checkpoint_into(TrainState& state, const std::string& path) {
  TrainState loaded = load_checkpoint(path);
  const NetConfig& a = state.cfg;
  const NetConfig& b = loaded.cfg;
  const bool same = a.classes == b.classes && a.image_hw == b.image_hw &&
                    a.conv1_out == b.conv1_out && a.conv2_out == b.conv2_out &&
                    a.bits.k_w == b.bits.k_w && a.bits.k_a == b.bits.k_a &&
                    a.weight_mode == b.weight_mode && a.act_mode == b.act_mode;
  if (!same)
    throw ShapeError("checkpoint " + path + " was written by a differently shaped model");
  state = std::move(loaded);
}

// ---------------------------------------------------------------------------
// Packed models (.bqpk)
// ---------------------------------------------------------------------------

PackedModel pack_model(const TrainState& state) {
  const NetConfig& cfg = state.cfg;
  if (!state.conv2_is_lqw())
    throw StateError("nothing to pack: the model's weights are full precision");
  if (!state.acts_quantized())
    throw StateError("nothing to pack: the packed kernel needs quantized activations");
  if (!state.act1.ready || !state.act2.ready)
    throw StateError("pack_model: activation quantizers have not seen data yet");

  PackedModel m;
  m.bits = cfg.bits;
  m.image_hw = cfg.image_hw;
  m.conv1_out = cfg.conv1_out;
  m.conv2_out = cfg.conv2_out;
  m.classes = cfg.classes;
  m.conv1_w = state.conv1.w;
  m.conv1_b = state.conv1.b;
  m.scale1 = state.scale1;
  m.act1_basis = state.act1.averaged;
  m.scale2 = state.scale2;
  m.act2_basis = state.act2.averaged;
  m.dense_w = state.dense.w;
  m.dense_b = state.dense.b;
  m.conv2_b = state.conv2_q.bias;

  std::vector<Encoding> signs(cfg.conv2_out);
  for (int f = 0; f < cfg.conv2_out; ++f) {
    signs[f].bits = sign_pm1(state.conv2_q.filters[f].shadow);
    signs[f].alphabet = Alphabet::PlusMinus;
    m.conv2_bases.push_back(state.conv2_q.filters[f].basis);
  }
  m.conv2 = pack_all<std::uint64_t>(signs);
  m.conv2_q_consts = precompute_q_all(m.conv2, m.conv2_bases, m.act1_basis);
  return m;
}

void save_packed(const PackedModel& m, const std::string& path) {
  Writer out;
  out.bytes("BQPK", 4);
  out.u32le(kPackedVersion);

  Writer s0;
  s0.i32le(m.image_hw);
  s0.i32le(m.conv1_out);
  s0.i32le(m.conv2_out);
  s0.i32le(m.classes);
  s0.i32le(m.bits.k_w);
  s0.i32le(m.bits.k_a);
  s0.i32le(m.bits.word_bits);
  out.section(s0);

  Writer s1;
  put_mat(s1, m.conv1_w);
  put_vec(s1, m.conv1_b);
  put_vec(s1, m.scale1);
  put_vec(s1, m.act1_basis);
  out.section(s1);

  // The packed-weight block: header (magic, version, n, p, K_w, K_a, L),
  // then per-row bases, the precomputed constants, and the bit planes as
  // little-endian words.
  Writer s2;
  s2.bytes("BQPB", 4);
  s2.u32le(kPackedVersion);
  s2.u32le(static_cast<std::uint32_t>(m.conv2.vectors));
  s2.u32le(static_cast<std::uint32_t>(m.conv2.length));
  s2.u32le(static_cast<std::uint32_t>(m.bits.k_w));
  s2.u32le(static_cast<std::uint32_t>(m.bits.k_a));
  s2.u32le(64);
  for (const QuantBasis& b : m.conv2_bases)
    for (long i = 0; i < b.size(); ++i) s2.f64le(b[i]);
  for (long i = 0; i < m.conv2_q_consts.size(); ++i) s2.f64le(m.conv2_q_consts[i]);
  for (std::uint64_t w : m.conv2.words) s2.u64le(w);
  out.section(s2);

  Writer s3;
  put_vec(s3, m.conv2_b);
  put_vec(s3, m.scale2);
  put_vec(s3, m.act2_basis);
  out.section(s3);

  Writer s4;
  put_mat(s4, m.dense_w);
  put_vec(s4, m.dense_b);
  out.section(s4);

  out.flush(path);
}

PackedModel load_packed(const std::string& path) {
  Reader r(slurp(path), path);
  const unsigned char* magic = r.take(4);
  if (std::memcmp(magic, "BQPK", 4) != 0) throw FormatError("bad packed-model magic in " + path);
  const std::uint32_t version = r.u32le();
  if (version != kPackedVersion)
    throw VersionError("unsupported packed-model version " + std::to_string(version) + " in " +
                       path);

  PackedModel m;
  r.section_len();
  m.image_hw = r.i32le();
  m.conv1_out = r.i32le();
  m.conv2_out = r.i32le();
  m.classes = r.i32le();
  m.bits.k_w = r.i32le();
  m.bits.k_a = r.i32le();
  m.bits.word_bits = r.i32le();
  m.bits.validate();
  if (m.image_hw < 5 || m.conv1_out < 1 || m.conv2_out < 1 || m.classes < 2 ||
      m.conv1_out > kMaxDim / 16 || m.conv2_out > kMaxDim / 16)
    throw FormatError("corrupt packed-model header in " + path);

  r.section_len();
  m.conv1_w = get_mat(r);
  m.conv1_b = get_vec(r);
  m.scale1 = get_vec(r);
  m.act1_basis = get_vec(r);

  r.section_len();
  const unsigned char* bmagic = r.take(4);
  if (std::memcmp(bmagic, "BQPB", 4) != 0)
    throw FormatError("bad packed-weight block magic in " + path);
  if (r.u32le() != kPackedVersion)
    throw VersionError("unsupported packed-weight block version in " + path);
  const std::uint32_t n = r.u32le(), p = r.u32le(), kw = r.u32le(), ka = r.u32le(), L = r.u32le();
  if (n != static_cast<std::uint32_t>(m.conv2_out) ||
      p != static_cast<std::uint32_t>(m.conv1_out) * 9 ||
      kw != static_cast<std::uint32_t>(m.bits.k_w) ||
      ka != static_cast<std::uint32_t>(m.bits.k_a))
    throw ConsistencyError("packed-weight block disagrees with the model header in " + path);
  if (L != 64) throw FormatError("unsupported packed word size in " + path);
  m.conv2.length = static_cast<int>(p);
  m.conv2.planes = static_cast<int>(kw);
  m.conv2.vectors = static_cast<int>(n);
  const size_t nwords = static_cast<size_t>(n) * kw * ((p + 63) / 64);
  if (r.remaining() < (static_cast<size_t>(n) * kw + n + nwords) * 8)
    throw FormatError("corrupt packed-weight block in " + path);
  m.conv2_bases.resize(n);
  for (std::uint32_t f = 0; f < n; ++f) {
    m.conv2_bases[f].resize(kw);
    for (std::uint32_t k = 0; k < kw; ++k) m.conv2_bases[f][k] = r.f64le();
  }
  m.conv2_q_consts.resize(n);
  for (std::uint32_t f = 0; f < n; ++f) m.conv2_q_consts[f] = r.f64le();
  m.conv2.words.resize(nwords);
  for (size_t i = 0; i < nwords; ++i) m.conv2.words[i] = r.u64le();

  r.section_len();
  m.conv2_b = get_vec(r);
  m.scale2 = get_vec(r);
  m.act2_basis = get_vec(r);

  r.section_len();
  m.dense_w = get_mat(r);
  m.dense_b = get_vec(r);

  if (m.conv1_w.rows() != m.conv1_out || m.dense_w.rows() != m.classes ||
      m.act1_basis.size() != m.bits.k_a || m.act2_basis.size() != m.bits.k_a)
    throw ConsistencyError("packed-model sections disagree with the header in " + path);
  return m;
}

Mat packed_forward(const PackedModel& m, const Batch& input, int threads) {
  input.check();
  if (input.c != 1 || input.h != m.image_hw || input.w != m.image_hw)
    throw ShapeError("packed_forward: input shape does not match the model");
  const int hw = m.image_hw, o1 = hw - 2, o2 = hw - 4, b = input.samples();
  const int c1 = m.conv1_out, c2 = m.conv2_out;

  // Full-precision first conv, per-channel scale, ReLU — direct loops.
  Mat a1(static_cast<long>(c1) * o1 * o1, b);
  for (int s = 0; s < b; ++s)
    for (int f = 0; f < c1; ++f)
      for (int i = 0; i < o1; ++i)
        for (int j = 0; j < o1; ++j) {
          double acc = m.conv1_b[f];
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw)
              acc += m.conv1_w(f, kh * 3 + kw) * input.data((i + kh) * hw + (j + kw), s);
          acc *= m.scale1[f];
          a1(static_cast<long>(f) * o1 * o1 + i * o1 + j, s) = acc > 0.0 ? acc : 0.0;
        }

  // Encode 3x3 patches of the (quantized) activations and pack them.
  const QuantLevels lv1 = quant_levels(m.act1_basis);
  const int q = c1 * 9;
  const long cols = static_cast<long>(b) * o2 * o2;
  std::vector<Encoding> acts;
  acts.reserve(static_cast<size_t>(cols));
  Vec patch(q);
  for (int s = 0; s < b; ++s)
    for (int i = 0; i < o2; ++i)
      for (int j = 0; j < o2; ++j) {
        for (int c = 0; c < c1; ++c)
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw)
              patch[c * 9 + kh * 3 + kw] =
                  a1(static_cast<long>(c) * o1 * o1 + (i + kh) * o1 + (j + kw), s);
        acts.push_back(activation_to_signed(encode_nearest(patch, lv1)));
      }
  const PackedBits64 packed_acts = pack_all<std::uint64_t>(acts);

  // Quantized conv as a packed matmul, then bias/scale/ReLU and the
  // second quantization site.
  const Mat conv2 = bitwise_matmul_f64(m.conv2, m.conv2_bases, m.conv2_q_consts, packed_acts,
                                       m.act1_basis, threads);
  const QuantLevels lv2 = quant_levels(m.act2_basis);
  Mat a2(static_cast<long>(c2) * o2 * o2, b);
  for (int s = 0; s < b; ++s)
    for (int f = 0; f < c2; ++f)
      for (int i = 0; i < o2; ++i)
        for (int j = 0; j < o2; ++j) {
          const long col = (static_cast<long>(s) * o2 + i) * o2 + j;
          double v = (conv2(f, col) + m.conv2_b[f]) * m.scale2[f];
          a2(static_cast<long>(f) * o2 * o2 + i * o2 + j, s) = v > 0.0 ? v : 0.0;
        }
  a2 = quantize_matrix(a2, lv2);

  Mat logits = m.dense_w * a2;
  logits.colwise() += m.dense_b;
  return logits;
}

}  // namespace bitquant
