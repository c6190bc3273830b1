#pragma once

#include <random>

#include "bitquant/lqw.hpp"
#include "bitquant/quantizer.hpp"
#include "bitquant/types.hpp"

namespace bitquant {

enum class WeightMode { FP, LQW };
enum class ActMode { FP, CAQ, GlobalScalar };

struct LayerSpec {
  enum class Kind { Conv3x3, Dense };
  Kind kind = Kind::Conv3x3;
  int in_channels = 0;
  int out_channels = 0;
  bool quantize_weights = false;
  bool quantize_acts = false;  // quantization site on this layer's output
  BitConfig bit_config;
};

struct NetConfig {
  int classes = 4;
  int image_hw = 8;
  int conv1_out = 8;
  int conv2_out = 16;
  BitConfig bits;
  WeightMode weight_mode = WeightMode::LQW;
  ActMode act_mode = ActMode::CAQ;
  OptimConfig opt;
  int batch_size = 64;
  double scale_lo = 0.1;  // fixed per-channel scale draws, log-uniform
  double scale_hi = 10.0;
  std::uint64_t seed = 1;
};

struct FpLayer {
  Mat w;
  Vec b;
  Mat w_buf;  // Nesterov momentum buffers
  Vec b_buf;
};

struct LqwLayer {
  std::vector<WeightQuantParams> filters;
  std::vector<LqwOptState> opt;
  Vec bias;
  Vec bias_buf;
};

// Fixed topology: conv3x3 (1 -> conv1_out) FP, scale/shift + ReLU + act site,
// conv3x3 (conv1_out -> conv2_out) FP or LQW, scale/shift + ReLU + act site,
// dense (-> classes) FP. Valid convolutions: 8x8 -> 6x6 -> 4x4. The scale
// factors are drawn at construction and stay fixed; they are the mechanism
// that gives channels different variances.
struct TrainState {
  NetConfig cfg;
  std::vector<LayerSpec> layers;
  FpLayer conv1;
  FpLayer conv2_fp;
  LqwLayer conv2_q;
  FpLayer dense;
  Vec scale1;
  Vec scale2;
  ActQuantState act1;
  ActQuantState act2;
  int epoch = 0;
  std::mt19937_64 rng;

  bool conv2_is_lqw() const { return cfg.weight_mode == WeightMode::LQW; }
  bool acts_quantized() const { return cfg.act_mode != ActMode::FP; }
};

TrainState make_tiny_net(const NetConfig& cfg);

enum class ForwardMode {
  Train,           // activation sites refit and quantize (caq_train_step)
  Eval,            // pure lookup (caq_infer), no state mutation
  FrozenResidual,  // activation sites add a residual captured from a base run
};

struct ForwardCache {
  Batch input;
  Mat patches1;  // im2col of the input
  Batch relu1;   // after scale/shift + ReLU
  Batch act1;    // after the quantization site (== relu1 when acts are FP)
  Mat patches2;  // im2col of act1
  Batch relu2;
  Batch act2;
  Mat wq2;  // conv2 weight matrix actually applied
  Mat logits;
  bool train_mode = false;
  bool valid = false;
};

// `base` supplies the frozen residuals and is required in FrozenResidual mode.
ForwardCache forward(TrainState& state, const Batch& batch, ForwardMode mode,
                     const ForwardCache* base = nullptr);

struct NetGrads {
  Mat conv1_w;
  Vec conv1_b;
  Mat conv2_w;  // FP form; also the per-row grad_wq source for LQW
  Vec conv2_b;
  std::vector<LqwGrads> conv2_filters;  // filled when conv2 is LQW
  Mat dense_w;
  Vec dense_b;
};

NetGrads backward(const TrainState& state, const ForwardCache& cache, const Mat& grad_logits);

void apply_update(TrainState& state, const NetGrads& grads, double lr);

// Mean cross-entropy of softmax(logits) against labels; optionally the
// gradient w.r.t. logits (already divided by the batch size).
double softmax_xent(const Mat& logits, const VecI& labels, Mat* grad_logits = nullptr);
double accuracy(const Mat& logits, const VecI& labels);

struct EpochLog {
  int epoch;
  double lr;
  double loss;
  double train_acc;
  double eval_acc;
};

// Mini-batch SGD for `epochs` epochs under the polynomial schedule. eval_acc
// is measured in eval mode on `eval_ds` (the training set when absent). On a
// non-finite loss the state rolls back to the end of the last finished epoch
// and a numeric error is thrown.
std::vector<EpochLog> train(TrainState& state, const Dataset& train_ds, const Dataset* eval_ds,
                            int epochs);

std::string to_csv(const std::vector<EpochLog>& log);

struct AblationCell {
  WeightMode weight_mode;
  ActMode act_mode;
  std::vector<double> seed_accs;  // final train accuracy per seed
  double mean_acc = 0.0;
};

const char* to_string(WeightMode m);
const char* to_string(ActMode m);

// Train every (weight, act) combination for each seed with otherwise
// identical configuration and budget.
std::vector<AblationCell> ablate(const NetConfig& base, const Dataset& train_ds,
                                 const Dataset* eval_ds, const std::vector<WeightMode>& weights,
                                 const std::vector<ActMode>& acts,
                                 const std::vector<std::uint64_t>& seeds, int epochs);

std::string ablation_csv(const std::vector<AblationCell>& cells);
std::string ablation_markdown(const std::vector<AblationCell>& cells);

}  // namespace bitquant
