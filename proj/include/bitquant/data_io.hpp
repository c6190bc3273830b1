#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bitquant/bitkernel.hpp"
#include "bitquant/tinynet.hpp"
#include "bitquant/types.hpp"

namespace bitquant {

// ---------------------------------------------------------------------------
// IDX image/label containers (big-endian, per the external convention).
// Images: unsigned-byte tensor of rank 3 (N,H,W) or 4 (N,C,H,W); pixels are
// scaled to [0,1] on load and the scale is recorded in Dataset::meta.
// Class count is inferred as max(label)+1.
// ---------------------------------------------------------------------------
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Writes images (values clamped to [0,1], scaled back to bytes) and labels.
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// ---------------------------------------------------------------------------
// Synthetic blob task: per class, a Gaussian bump at a fixed position on a
// ring, with per-sample amplitude/width jitter and additive pixel noise.
// Channel c holds the same sample pattern multiplied by channel_scales[c],
// with its own noise draw, so the channel statistics scale as requested.
// Deterministic under `seed`.
// ---------------------------------------------------------------------------
Dataset synth_blobs(std::uint64_t seed, int n_per_class, int classes, const Vec& channel_scales,
                    int hw = 8, double noise = 0.1);

// ---------------------------------------------------------------------------
// Training checkpoints (.bqck): versioned little-endian container with
// length-prefixed sections. Round trips are bit-exact, including optimizer
// momentum and the RNG stream.
// ---------------------------------------------------------------------------
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);
// Loads into an existing state; the stored architecture must match exactly.
void load_checkpoint_into(TrainState& state, const std::string& path);

// ---------------------------------------------------------------------------
// Packed inference model (.bqpk): everything needed to run the net with the
// bit-packed kernel on the quantized layer — full-precision first/last
// layers, fixed per-channel scales, the deployed activation bases, and the
// quantized conv's sign planes, per-filter bases and precomputed constants.
// ---------------------------------------------------------------------------
struct PackedModel {
  BitConfig bits;
  int image_hw = 0;
  int conv1_out = 0;
  int conv2_out = 0;
  int classes = 0;

  Mat conv1_w;
  Vec conv1_b;
  Vec scale1;
  QuantBasis act1_basis;  // quantizes conv2's input; pairs with q_consts

  PackedBits64 conv2;                   // sign planes, one packed vector per filter
  std::vector<QuantBasis> conv2_bases;  // per-filter weight basis
  Vec conv2_q_consts;                   // per-filter input-independent constants
  Vec conv2_b;

  Vec scale2;
  QuantBasis act2_basis;  // quantizes the dense head's input

  Mat dense_w;
  Vec dense_b;
};

// Requires trained quantized weights and ready activation quantizers.
PackedModel pack_model(const TrainState& state);

void save_packed(const PackedModel& m, const std::string& path);
PackedModel load_packed(const std::string& path);

// Inference through the packed representation: full-precision convolution,
// scale and ReLU as in training; the quantized convolution runs as a packed
// xnor/popcount matmul over encoded activation patches.
Mat packed_forward(const PackedModel& m, const Batch& input, int threads = 1);

}  // namespace bitquant
