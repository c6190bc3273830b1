#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bitquant/data_io.hpp"

using namespace bitquant;

namespace {

std::string tmp_path(const std::string& name) { return "/tmp/bitquant_test_" + name; }

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

void be32(std::vector<unsigned char>& v, std::uint32_t x) {
  for (int i = 3; i >= 0; --i) v.push_back(static_cast<unsigned char>(x >> (8 * i)));
}

// A hand-built single-image IDX pair: one 28x28 image with pixel (i,j) set to
// (i*28+j) % 256, and one label byte of 3... plus a second zero label so the
// dataset has two classes.
std::vector<unsigned char> idx_images(int n, int h, int w) {
  std::vector<unsigned char> v;
  be32(v, 0x00000803u);
  be32(v, static_cast<std::uint32_t>(n));
  be32(v, static_cast<std::uint32_t>(h));
  be32(v, static_cast<std::uint32_t>(w));
  for (int s = 0; s < n; ++s)
    for (int i = 0; i < h * w; ++i) v.push_back(static_cast<unsigned char>((s + i) % 256));
  return v;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> v;
  be32(v, 0x00000801u);
  be32(v, static_cast<std::uint32_t>(labels.size()));
  v.insert(v.end(), labels.begin(), labels.end());
  return v;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

TrainState trained_net(WeightMode wm, ActMode am, std::uint64_t seed, int epochs) {
  NetConfig cfg;
  cfg.conv1_out = 3;
  cfg.conv2_out = 4;
  cfg.classes = 3;
  cfg.weight_mode = wm;
  cfg.act_mode = am;
  cfg.batch_size = 8;
  cfg.seed = seed;
  TrainState st = make_tiny_net(cfg);
  Dataset ds = synth_blobs(seed + 100, 8, 3, Vec::Ones(1));
  train(st, ds, nullptr, epochs);
  return st;
}

}  // namespace

TEST_CASE("idx: hand-built fixture loads with scaled pixels") {
  const std::string ip = tmp_path("fix_images.idx"), lp = tmp_path("fix_labels.idx");
  write_bytes(ip, idx_images(2, 28, 28));
  write_bytes(lp, idx_labels({3, 0}));
  Dataset ds = load_idx(ip, lp);
  CHECK(ds.size() == 2);
  CHECK(ds.images.c == 1);
  CHECK(ds.images.h == 28);
  CHECK(ds.images.w == 28);
  CHECK(ds.labels[0] == 3);
  CHECK(ds.labels[1] == 0);
  CHECK(ds.classes == 4);
  CHECK(ds.images.data(0, 0) == 0.0);
  CHECK(ds.images.data(77, 0) == doctest::Approx(77.0 / 255.0).epsilon(1e-15));
  CHECK(ds.images.data(300, 1) == doctest::Approx(((1 + 300) % 256) / 255.0).epsilon(1e-15));
  CHECK(ds.meta.pixel_scale == doctest::Approx(1.0 / 255.0));
  CHECK(ds.meta.source.find("idx:") == 0);
}

TEST_CASE("idx: malformed inputs are rejected with the right error kinds") {
  const std::string ip = tmp_path("bad_images.idx"), lp = tmp_path("bad_labels.idx");
  write_bytes(lp, idx_labels({1, 0}));

  auto imgs = idx_images(2, 28, 28);
  imgs[0] = 1;  // nonzero pad byte in the magic
  write_bytes(ip, imgs);
  CHECK_THROWS_AS(load_idx(ip, lp), FormatError);

  imgs = idx_images(2, 28, 28);
  imgs[2] = 0x09;  // element type other than unsigned byte
  write_bytes(ip, imgs);
  CHECK_THROWS_AS(load_idx(ip, lp), FormatError);

  imgs = idx_images(2, 28, 28);
  imgs[4] = imgs[5] = imgs[6] = imgs[7] = 0;  // zero first dimension
  write_bytes(ip, imgs);
  CHECK_THROWS_AS(load_idx(ip, lp), FormatError);

  imgs = idx_images(2, 28, 28);
  imgs.pop_back();  // declared payload longer than the file
  write_bytes(ip, imgs);
  CHECK_THROWS_AS(load_idx(ip, lp), IoError);

  imgs = idx_images(2, 28, 28);
  imgs.push_back(0);  // undeclared trailing byte
  write_bytes(ip, imgs);
  CHECK_THROWS_AS(load_idx(ip, lp), FormatError);

  write_bytes(ip, idx_images(2, 28, 28));
  write_bytes(lp, idx_labels({1, 0, 2}));  // one extra label
  CHECK_THROWS_AS(load_idx(ip, lp), ConsistencyError);

  write_bytes(lp, idx_labels({0, 0}));  // fewer than two classes
  CHECK_THROWS_AS(load_idx(ip, lp), ConsistencyError);

  write_bytes(lp, idx_images(2, 28, 28));  // rank-3 file in the label slot
  CHECK_THROWS_AS(load_idx(ip, lp), FormatError);

  CHECK_THROWS_AS(load_idx(tmp_path("does_not_exist.idx"), lp), IoError);
}

TEST_CASE("idx: save/load round trip, including multi-channel rank-4 files") {
  Dataset ds = synth_blobs(7, 3, 2, Vec::Ones(3), 6, 0.05);
  // Quantize to the byte grid first so the round trip is exact.
  for (long j = 0; j < ds.images.data.cols(); ++j)
    for (long i = 0; i < ds.images.data.rows(); ++i) {
      double v = std::min(1.0, std::max(0.0, ds.images.data(i, j)));
      ds.images.data(i, j) = std::round(v * 255.0) / 255.0;
    }
  const std::string ip = tmp_path("rt_images.idx"), lp = tmp_path("rt_labels.idx");
  save_idx(ds, ip, lp);
  Dataset back = load_idx(ip, lp);
  CHECK(back.images.c == 3);
  CHECK(back.images.h == 6);
  CHECK(back.size() == ds.size());
  CHECK(back.labels == ds.labels);
  CHECK((back.images.data - ds.images.data).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("synth_blobs: determinism, scaling, and guards") {
  const Vec ones = Vec::Ones(4);
  Dataset a = synth_blobs(11, 5, 3, ones);
  Dataset b = synth_blobs(11, 5, 3, ones);
  CHECK(a.images.data == b.images.data);
  CHECK(a.labels == b.labels);
  Dataset c = synth_blobs(12, 5, 3, ones);
  CHECK(a.images.data != c.images.data);

  // classes=2, one per class: minimal two-sample dataset.
  Dataset tiny = synth_blobs(1, 1, 2, Vec::Ones(1));
  CHECK(tiny.size() == 2);
  CHECK(tiny.labels[0] != tiny.labels[1]);

  CHECK_THROWS_AS(synth_blobs(1, 1, 1, ones), ParamError);
  CHECK_THROWS_AS(synth_blobs(1, 0, 2, ones), ParamError);
  CHECK_THROWS_AS(synth_blobs(1, 1, 2, Vec::Zero(0)), ParamError);
  CHECK_THROWS_AS(synth_blobs(1, 1, 2, ones, 8, -0.5), ParamError);
}

TEST_CASE("synth_blobs: equal channel scales give matching channel statistics") {
  Dataset ds = synth_blobs(3, 250, 4, Vec::Ones(4));  // 1000 samples
  REQUIRE(ds.size() == 1000);
  std::vector<double> stds;
  for (int ch = 0; ch < 4; ++ch) {
    const auto block = ds.images.channel(ch);
    const double mean = block.mean();
    stds.push_back(std::sqrt((block.array() - mean).square().mean()));
  }
  for (double s : stds) {
    CHECK(s <= 1.1 * stds[0]);
    CHECK(s >= 0.9 * stds[0]);
  }

  // Scaled channels scale their statistics accordingly.
  Vec scales(3);
  scales << 0.5, 1.0, 4.0;
  Dataset het = synth_blobs(3, 100, 4, scales);
  std::vector<double> hs;
  for (int ch = 0; ch < 3; ++ch) {
    const auto block = het.images.channel(ch);
    const double mean = block.mean();
    hs.push_back(std::sqrt((block.array() - mean).square().mean()));
  }
  CHECK(hs[1] / hs[0] == doctest::Approx(2.0).epsilon(0.15));
  CHECK(hs[2] / hs[1] == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("checkpoint: quantized-model round trip is bit-exact") {
  TrainState st = trained_net(WeightMode::LQW, ActMode::CAQ, 31, 2);
  const std::string p1 = tmp_path("ck1.bqck"), p2 = tmp_path("ck2.bqck");
  save_checkpoint(st, p1);
  TrainState back = load_checkpoint(p1);

  CHECK(back.epoch == st.epoch);
  CHECK(back.cfg.seed == st.cfg.seed);
  CHECK(back.conv1.w == st.conv1.w);
  CHECK(back.conv1.w_buf == st.conv1.w_buf);
  CHECK(back.scale1 == st.scale1);
  CHECK(back.scale2 == st.scale2);
  REQUIRE(back.conv2_q.filters.size() == st.conv2_q.filters.size());
  for (size_t f = 0; f < st.conv2_q.filters.size(); ++f) {
    CHECK(back.conv2_q.filters[f].shadow == st.conv2_q.filters[f].shadow);
    CHECK(back.conv2_q.filters[f].basis == st.conv2_q.filters[f].basis);
    CHECK(back.conv2_q.opt[f].shadow_buf == st.conv2_q.opt[f].shadow_buf);
    CHECK(back.conv2_q.opt[f].basis_buf == st.conv2_q.opt[f].basis_buf);
  }
  CHECK(back.conv2_q.bias == st.conv2_q.bias);
  CHECK(back.dense.w == st.dense.w);
  CHECK(back.dense.b_buf == st.dense.b_buf);
  CHECK(back.act1.ready == st.act1.ready);
  CHECK(back.act1.averaged == st.act1.averaged);
  for (size_t ch = 0; ch < st.act1.channel_bases.size(); ++ch)
    CHECK(back.act1.channel_bases[ch] == st.act1.channel_bases[ch]);
  CHECK(back.act2.averaged == st.act2.averaged);
  CHECK(rng_text(back.rng) == rng_text(st.rng));

  // Saving the loaded state reproduces the file byte for byte.
  save_checkpoint(back, p2);
  CHECK(read_bytes(p1) == read_bytes(p2));

  // Behavioral check: both copies continue training identically.
  Dataset ds = synth_blobs(131, 8, 3, Vec::Ones(1));
  const std::vector<EpochLog> la = train(st, ds, nullptr, 1);
  const std::vector<EpochLog> lb = train(back, ds, nullptr, 1);
  CHECK(la[0].loss == lb[0].loss);
  CHECK(la[0].train_acc == lb[0].train_acc);
}

TEST_CASE("checkpoint: full-precision round trip is bit-exact") {
  TrainState st = trained_net(WeightMode::FP, ActMode::FP, 33, 2);
  const std::string p = tmp_path("ck_fp.bqck");
  save_checkpoint(st, p);
  TrainState back = load_checkpoint(p);
  CHECK(back.conv2_fp.w == st.conv2_fp.w);
  CHECK(back.conv2_fp.w_buf == st.conv2_fp.w_buf);
  CHECK(back.conv2_fp.b == st.conv2_fp.b);
  CHECK(rng_text(back.rng) == rng_text(st.rng));
}

TEST_CASE("checkpoint: corrupt headers and sections are rejected") {
  TrainState st = trained_net(WeightMode::LQW, ActMode::CAQ, 35, 1);
  const std::string good = tmp_path("ck_good.bqck"), bad = tmp_path("ck_bad.bqck");
  save_checkpoint(st, good);
  const std::vector<unsigned char> bytes = read_bytes(good);

  auto with = [&](size_t pos, unsigned char value) {
    std::vector<unsigned char> b = bytes;
    b[pos] = value;
    write_bytes(bad, b);
  };

  with(0, 'X');  // magic
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
  with(4, 9);  // version
  CHECK_THROWS_AS(load_checkpoint(bad), VersionError);
  with(15, 0xFF);  // high byte of the first section length
  CHECK_THROWS_AS(load_checkpoint(bad), FormatError);

  std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + bytes.size() / 2);
  cut.resize(bytes.size() / 2);
  write_bytes(bad, cut);
  CHECK_THROWS_AS(load_checkpoint(bad), Error);  // truncation surfaces as I/O or format
}

TEST_CASE("checkpoint: loads only into an identically shaped model") {
  NetConfig cfg;
  cfg.conv1_out = 3;
  cfg.conv2_out = 2;  // two quantized filters
  cfg.classes = 3;
  cfg.weight_mode = WeightMode::LQW;
  cfg.act_mode = ActMode::CAQ;
  TrainState two = make_tiny_net(cfg);
  const std::string p = tmp_path("ck_shape.bqck");
  save_checkpoint(two, p);

  cfg.conv2_out = 3;
  TrainState three = make_tiny_net(cfg);
  CHECK_THROWS_AS(load_checkpoint_into(three, p), ShapeError);

  cfg.conv2_out = 2;
  cfg.seed = 999;  // different init, same architecture
  TrainState same = make_tiny_net(cfg);
  load_checkpoint_into(same, p);
  CHECK(same.conv1.w == two.conv1.w);
}

TEST_CASE("packed model: guards demand quantized, trained state") {
  CHECK_THROWS_AS(pack_model(trained_net(WeightMode::FP, ActMode::CAQ, 37, 1)), StateError);
  CHECK_THROWS_AS(pack_model(trained_net(WeightMode::LQW, ActMode::FP, 37, 1)), StateError);
  NetConfig cfg;
  cfg.weight_mode = WeightMode::LQW;
  cfg.act_mode = ActMode::CAQ;
  TrainState untrained = make_tiny_net(cfg);
  CHECK_THROWS_AS(pack_model(untrained), StateError);  // quantizers never saw data
}

TEST_CASE("packed model: round trip is bit-exact and inference matches the dense path") {
  TrainState st = trained_net(WeightMode::LQW, ActMode::CAQ, 39, 3);
  PackedModel m = pack_model(st);
  const std::string p1 = tmp_path("pm1.bqpk"), p2 = tmp_path("pm2.bqpk");
  save_packed(m, p1);
  PackedModel back = load_packed(p1);

  CHECK(back.conv2.words == m.conv2.words);
  CHECK(back.conv2.length == m.conv2.length);
  CHECK(back.conv2_q_consts == m.conv2_q_consts);
  REQUIRE(back.conv2_bases.size() == m.conv2_bases.size());
  for (size_t f = 0; f < m.conv2_bases.size(); ++f)
    CHECK(back.conv2_bases[f] == m.conv2_bases[f]);
  CHECK(back.act1_basis == m.act1_basis);
  CHECK(back.act2_basis == m.act2_basis);
  CHECK(back.dense_w == m.dense_w);
  save_packed(back, p2);
  CHECK(read_bytes(p1) == read_bytes(p2));

  // Dense eval vs packed inference on 16 random inputs.
  std::mt19937_64 rng(4242);
  std::normal_distribution<double> nd(0.0, 1.0);
  Batch x;
  x.c = 1;
  x.h = 8;
  x.w = 8;
  x.data.resize(64, 16);
  for (long j = 0; j < 16; ++j)
    for (long i = 0; i < 64; ++i) x.data(i, j) = std::abs(nd(rng));
  ForwardCache dense = forward(st, x, ForwardMode::Eval);
  const Mat packed = packed_forward(back, x);
  REQUIRE(packed.rows() == dense.logits.rows());
  REQUIRE(packed.cols() == 16);
  const double worst = (packed - dense.logits).cwiseAbs().maxCoeff();
  CHECK(worst <= 1e-4 * std::max(1.0, dense.logits.cwiseAbs().maxCoeff()));
}

TEST_CASE("packed model: corrupt files are rejected") {
  TrainState st = trained_net(WeightMode::LQW, ActMode::CAQ, 41, 1);
  const std::string good = tmp_path("pm_good.bqpk"), bad = tmp_path("pm_bad.bqpk");
  save_packed(pack_model(st), good);
  const std::vector<unsigned char> bytes = read_bytes(good);

  std::vector<unsigned char> b = bytes;
  b[1] = 'Z';
  write_bytes(bad, b);
  CHECK_THROWS_AS(load_packed(bad), FormatError);

  b = bytes;
  b[4] = 7;
  write_bytes(bad, b);
  CHECK_THROWS_AS(load_packed(bad), VersionError);

  b = bytes;
  b[13] = 0xFF;  // first section length
  write_bytes(bad, b);
  CHECK_THROWS_AS(load_packed(bad), FormatError);
}
