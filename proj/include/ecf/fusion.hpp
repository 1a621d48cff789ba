#pragma once

// Energy-driven cross-modality fusion of frame and event feature maps, plus
// the two baselines it is compared against (direct addition and additive
// attention).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ecf/layers.hpp"

namespace ecf::fusion {

struct EnergyConfig {
    double lambda = 1e-4;
};

/// Per pixel n of each (sample, channel) slice, with mu and sigma^2 taken
/// over all H*W pixels of the slice (n included):
///   e_n = 4 (sigma^2 + lambda) / ((n - mu)^2 + 2 sigma^2 + 2 lambda)
/// Values lie in (0, 2], with 2 exactly where n == mu.
Tensor energy_weights(const Tensor& features, const EnergyConfig& cfg);

/// sigmoid(1 / E). Rejects non-positive energies.
Tensor activate(const Tensor& energy);

struct ActivationBundle {
    Tensor frame;   // A_f
    Tensor event;   // A_e
    Tensor cross;   // softmax(A_f + A_e) over H*W per (sample, channel)
};

/// The block's only learnable part: a 1x1 conv over the concatenated fused
/// maps, (C_out, 2C, 1, 1) plus bias.
struct EcfmParams {
    Conv proj;

    static EcfmParams make(ParameterSet& ps, const Rng& root, const std::string& name, std::size_t channels,
                           std::size_t out_channels);
};

struct EcfmOutput {
    Tensor fused;
    ActivationBundle bundle;
};

EcfmOutput ecfm_forward(const Tensor& frame, const Tensor& event, const EcfmParams& params,
                        const EnergyConfig& cfg);

Tensor fuse_add(const Tensor& frame, const Tensor& event);

/// Gate alpha = sigmoid(BN(conv(relu(BN(conv(F_f)) + BN(conv(F_e)))))) with a
/// single-channel alpha broadcast over channels; output F_e * alpha.
struct AdditiveAttentionParams {
    Conv frame_proj;
    BatchNorm frame_bn;
    Conv event_proj;
    BatchNorm event_bn;
    Conv gate;
    BatchNorm gate_bn;

    static AdditiveAttentionParams make(ParameterSet& ps, const Rng& root, const std::string& name,
                                        std::size_t channels);
};

Tensor fuse_additive_attention(const Tensor& frame, const Tensor& event, AdditiveAttentionParams& params,
                               Mode mode);

/// Min-max scaling of one map to bytes; a zero range maps to all zeros.
std::vector<std::uint8_t> scale_to_bytes(std::span<const double> values);

struct DumpedMap {
    std::size_t stage;
    std::string modality;  // "frame", "event" or "cross"
    std::size_t channel;
    std::filesystem::path file;
};

/// Writes the frame/event/cross activation maps of one sample as PGM files,
/// one per channel (cross maps are multiplied by H*W before scaling), named
/// stage<s>_<modality>_c<k>.pgm.
std::vector<DumpedMap> dump_activations(const ActivationBundle& bundle, std::size_t sample, std::size_t stage,
                                        const std::filesystem::path& dir);

/// Writes `activations.json` listing stage, modality, channel and file of
/// every dumped map.
void write_activation_index(const std::filesystem::path& dir, const std::vector<DumpedMap>& maps);

}  // namespace ecf::fusion
