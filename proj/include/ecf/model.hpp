#pragma once

// Dual-stream steering network: per-modality stride-2 conv stages, a fusion
// tap after every stage, multi-stage feature integration and a decoder with
// mean and log-variance heads.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecf/fusion.hpp"
#include "ecf/layers.hpp"
#include "ecf/losses.hpp"

namespace ecf::model {

enum class FusionVariant { ecfm, add, additive_attention, frames_only, events_only };

FusionVariant parse_fusion(const std::string& name);
const char* to_string(FusionVariant v);

struct BackboneConfig {
    std::vector<std::size_t> channels{8, 16, 32};
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t frame_channels = 1;
    std::size_t event_channels = 2;

    std::size_t stages() const { return channels.size(); }
    void validate() const;
};

struct DecoderConfig {
    std::size_t blocks = 3;
    std::size_t kernel = 3;
    double dropout = 0.5;
    std::size_t hidden = 512;
    bool integrate = true;

    void validate(std::size_t in_channels) const;
    /// Output channels of each conv block: in/2, in/4, ...
    std::vector<std::size_t> block_channels(std::size_t in_channels) const;
};

/// One row of the decoder's layer table.
struct LayerRow {
    std::string layer;
    std::size_t in;
    std::size_t out;
};

/// Layer-by-layer dimensions of the decoder for an input of
/// (in_channels, height, width), without allocating anything.
std::vector<LayerRow> decoder_layer_plan(const DecoderConfig& cfg, std::size_t in_channels, std::size_t height,
                                         std::size_t width);

struct ModelConfig {
    BackboneConfig backbone;
    DecoderConfig decoder;
    FusionVariant fusion = FusionVariant::ecfm;
    fusion::EnergyConfig energy;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Fused map of every stage, s = 1..stages.
struct StageFeatures {
    std::vector<Tensor> maps;
};

/// Pools every stage map to the last stage's spatial extent, applies that
/// stage's 1x1 projection (to the last stage's channel count) and sums.
Tensor integrate_stage_features(const StageFeatures& features, const std::vector<Conv>& projections);

struct ForwardResult {
    losses::GaussianPrediction prediction;
    Tensor stacked;  // (N, 2): mean, clamped log-variance
    StageFeatures stages;
    std::vector<fusion::ActivationBundle> bundles;  // ECFM only
};

class Model {
  public:
    explicit Model(ModelConfig cfg);
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.parameter_count(); }

    /// frame (N, 1, H, W), event (N, 2, H, W). rng drives dropout in train mode.
    ForwardResult forward(const Tensor& frame, const Tensor& event, Mode mode, Rng& rng);

    Tensor integrate_stage_features(const StageFeatures& features) const {
        return model::integrate_stage_features(features, integrate_);
    }

    losses::GaussianPrediction decoder_forward(const Tensor& x, Mode mode, Rng& rng);

  private:
    struct Stage {
        Conv conv;
        BatchNorm bn;
    };
    struct DecoderBlock {
        Conv conv;
        BatchNorm bn;
        bool dropout;
    };

    Tensor run_stage(Stage& stage, const Tensor& x, Mode mode) { return relu(stage.bn(stage.conv(x), mode)); }

    ModelConfig cfg_;
    ParameterSet params_;
    std::vector<Stage> frame_stages_;
    std::vector<Stage> event_stages_;
    std::vector<fusion::EcfmParams> ecfm_;
    std::vector<fusion::AdditiveAttentionParams> attention_;
    std::vector<Conv> integrate_;
    std::vector<DecoderBlock> decoder_blocks_;
    Linear hidden_;
    Linear mu_head_;
    Linear log_var_head_;
};

inline constexpr int kCheckpointVersion = 1;

/// Directory of ECT1 tensors plus manifest.json (format version, config
/// echo, seed, epoch, tensor list).
void save_checkpoint(const Model& model, const std::filesystem::path& dir, std::size_t epoch = 0);

struct LoadedCheckpoint {
    Model model;
    std::size_t epoch;
};

/// Rebuilds the model from the manifest and fills every tensor; throws on a
/// version mismatch, missing or truncated tensor, or shape mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace ecf::model
