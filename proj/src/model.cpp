#include "ecf/model.hpp"

#include <fstream>

#include "ecf/serialize.hpp"

namespace ecf::model {

FusionVariant parse_fusion(const std::string& name) {
    if (name == "ecfm") return FusionVariant::ecfm;
    if (name == "add") return FusionVariant::add;
    if (name == "additive_attention") return FusionVariant::additive_attention;
    if (name == "frames_only") return FusionVariant::frames_only;
    if (name == "events_only") return FusionVariant::events_only;
    throw std::invalid_argument("unknown fusion variant '" + name + "'");
}

const char* to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::ecfm: return "ecfm";
        case FusionVariant::add: return "add";
        case FusionVariant::additive_attention: return "additive_attention";
        case FusionVariant::frames_only: return "frames_only";
        case FusionVariant::events_only: return "events_only";
    }
    return "?";
}

void BackboneConfig::validate() const {
    if (channels.size() < 2) throw std::invalid_argument("backbone: need at least 2 stages");
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i] == 0 || (i > 0 && channels[i] <= channels[i - 1])) {
            throw std::invalid_argument("backbone: stage channels must be positive and strictly increasing");
        }
    }
    const std::size_t scale = std::size_t{1} << channels.size();
    if (height == 0 || width == 0 || height % scale != 0 || width % scale != 0) {
        throw std::invalid_argument("backbone: geometry " + std::to_string(height) + "x" + std::to_string(width) +
                                    " must be divisible by 2^stages = " + std::to_string(scale));
    }
    if (frame_channels == 0 || event_channels == 0) throw std::invalid_argument("backbone: zero input channels");
}

std::vector<std::size_t> DecoderConfig::block_channels(std::size_t in_channels) const {
    std::vector<std::size_t> out;
    std::size_t c = in_channels;
    for (std::size_t b = 0; b < blocks; ++b) {
        c /= 2;
        out.push_back(c);
    }
    return out;
}

void DecoderConfig::validate(std::size_t in_channels) const {
    if (blocks == 0) throw std::invalid_argument("decoder: need at least one block");
    if (kernel != 1 && kernel != 3) throw std::invalid_argument("decoder: kernel must be 1 or 3");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("decoder: dropout must lie in [0, 1)");
    if (hidden == 0) throw std::invalid_argument("decoder: hidden width must be positive");
    if (in_channels % (std::size_t{1} << blocks) != 0) {
        throw std::invalid_argument("decoder: " + std::to_string(in_channels) + " input channels cannot be halved " +
                                    std::to_string(blocks) + " times");
    }
}

std::vector<LayerRow> decoder_layer_plan(const DecoderConfig& cfg, std::size_t in_channels, std::size_t height,
                                         std::size_t width) {
    cfg.validate(in_channels);
    std::vector<LayerRow> rows;
    std::size_t c = in_channels;
    const auto outs = cfg.block_channels(in_channels);
    for (std::size_t b = 0; b < outs.size(); ++b) {
        rows.push_back({"Convolution 2D", c, outs[b]});
        rows.push_back({"Batch normalization", outs[b], outs[b]});
        if (b > 0) rows.push_back({"Dropout", outs[b], outs[b]});
        rows.push_back({"ReLU", outs[b], outs[b]});
        c = outs[b];
    }
    rows.push_back({"Linear layer", c * height * width, cfg.hidden});
    rows.push_back({"ReLU", cfg.hidden, cfg.hidden});
    rows.push_back({"Linear layer", cfg.hidden, 1});
    return rows;
}

void ModelConfig::validate() const {
    backbone.validate();
    decoder.validate(backbone.channels.back());
    if (!(energy.lambda > 0.0)) throw std::invalid_argument("model: energy lambda must be positive");
}

nlohmann::ordered_json to_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["backbone"] = {{"channels", cfg.backbone.channels},
                     {"height", cfg.backbone.height},
                     {"width", cfg.backbone.width},
                     {"frame_channels", cfg.backbone.frame_channels},
                     {"event_channels", cfg.backbone.event_channels}};
    j["decoder"] = {{"blocks", cfg.decoder.blocks},
                    {"kernel", cfg.decoder.kernel},
                    {"dropout", cfg.decoder.dropout},
                    {"hidden", cfg.decoder.hidden},
                    {"integrate", cfg.decoder.integrate}};
    j["fusion"] = to_string(cfg.fusion);
    j["lambda"] = cfg.energy.lambda;
    j["seed"] = cfg.seed;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    const auto& b = j.at("backbone");
    cfg.backbone.channels = b.at("channels").get<std::vector<std::size_t>>();
    cfg.backbone.height = b.at("height").get<std::size_t>();
    cfg.backbone.width = b.at("width").get<std::size_t>();
    cfg.backbone.frame_channels = b.at("frame_channels").get<std::size_t>();
    cfg.backbone.event_channels = b.at("event_channels").get<std::size_t>();
    const auto& d = j.at("decoder");
    cfg.decoder.blocks = d.at("blocks").get<std::size_t>();
    cfg.decoder.kernel = d.at("kernel").get<std::size_t>();
    cfg.decoder.dropout = d.at("dropout").get<double>();
    cfg.decoder.hidden = d.at("hidden").get<std::size_t>();
    cfg.decoder.integrate = d.at("integrate").get<bool>();
    cfg.fusion = parse_fusion(j.at("fusion").get<std::string>());
    cfg.energy.lambda = j.at("lambda").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Rng root(cfg_.seed);
    const auto& bb = cfg_.backbone;
    const bool frames = cfg_.fusion != FusionVariant::events_only;
    const bool events = cfg_.fusion != FusionVariant::frames_only;
    const Conv2dOptions down{2, 1};

    std::size_t c_frame = bb.frame_channels;
    std::size_t c_event = bb.event_channels;
    for (std::size_t s = 0; s < bb.stages(); ++s) {
        const std::string tag = "stage" + std::to_string(s + 1);
        const std::size_t c = bb.channels[s];
        if (frames) {
            Conv conv = Conv::make(params_, root, "frame." + tag + ".conv", c_frame, c, 3, down, false);
            frame_stages_.push_back({conv, BatchNorm::make(params_, "frame." + tag + ".bn", c)});
        }
        if (events) {
            Conv conv = Conv::make(params_, root, "event." + tag + ".conv", c_event, c, 3, down, false);
            event_stages_.push_back({conv, BatchNorm::make(params_, "event." + tag + ".bn", c)});
        }
        if (cfg_.fusion == FusionVariant::ecfm) {
            ecfm_.push_back(fusion::EcfmParams::make(params_, root, "fusion." + tag, c, c));
        } else if (cfg_.fusion == FusionVariant::additive_attention) {
            attention_.push_back(fusion::AdditiveAttentionParams::make(params_, root, "fusion." + tag, c));
        }
        c_frame = c;
        c_event = c;
    }

    const std::size_t c_last = bb.channels.back();
    if (cfg_.decoder.integrate) {
        for (std::size_t s = 0; s < bb.stages(); ++s) {
            integrate_.push_back(
                Conv::make(params_, root, "integrate.stage" + std::to_string(s + 1), bb.channels[s], c_last, 1));
        }
    }
    const auto& dc = cfg_.decoder;
    std::size_t c = c_last;
    const auto outs = dc.block_channels(c_last);
    const Conv2dOptions same{1, dc.kernel / 2};
    for (std::size_t b = 0; b < outs.size(); ++b) {
        const std::string tag = "decoder.block" + std::to_string(b + 1);
        Conv conv = Conv::make(params_, root, tag + ".conv", c, outs[b], dc.kernel, same, false);
        decoder_blocks_.push_back({conv, BatchNorm::make(params_, tag + ".bn", outs[b]), b > 0});
        c = outs[b];
    }
    const std::size_t hw = (bb.height >> bb.stages()) * (bb.width >> bb.stages());
    hidden_ = Linear::make(params_, root, "decoder.hidden", c * hw, dc.hidden);
    mu_head_ = Linear::make(params_, root, "decoder.mu", dc.hidden, 1);
    log_var_head_ = Linear::make(params_, root, "decoder.log_var", dc.hidden, 1);
}

Tensor integrate_stage_features(const StageFeatures& features, const std::vector<Conv>& projections) {
    if (features.maps.empty()) throw std::invalid_argument("integrate_stage_features: no stage maps");
    if (features.maps.size() != projections.size()) {
        throw std::invalid_argument("integrate_stage_features: " + std::to_string(features.maps.size()) +
                                    " stage maps but " + std::to_string(projections.size()) + " projections");
    }
    const Tensor& last = features.maps.back();
    Tensor total;
    for (std::size_t s = 0; s < features.maps.size(); ++s) {
        const Tensor pooled = mean_pool2d(features.maps[s], last.dim(2), last.dim(3));
        const Tensor projected = projections[s](pooled);
        total = total.defined() ? add(total, projected) : projected;
    }
    return total;
}

losses::GaussianPrediction Model::decoder_forward(const Tensor& x, Mode mode, Rng& rng) {
    if (x.rank() != 4 || x.dim(1) != decoder_blocks_.front().conv.weight.dim(1)) {
        throw ShapeError("decoder: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(decoder_blocks_.front().conv.weight.dim(1)) + " channels");
    }
    Tensor h = x;
    for (DecoderBlock& block : decoder_blocks_) {
        h = block.bn(block.conv(h), mode);
        if (block.dropout) h = dropout(h, cfg_.decoder.dropout, mode, rng);
        h = relu(h);
    }
    h = relu(hidden_(flatten(h)));
    return losses::GaussianPrediction::from_raw(mu_head_(h), log_var_head_(h));
}

ForwardResult Model::forward(const Tensor& frame, const Tensor& event, Mode mode, Rng& rng) {
    const auto& bb = cfg_.backbone;
    auto check = [&](const Tensor& t, std::size_t channels, const char* what) {
        if (t.rank() != 4 || t.dim(1) != channels || t.dim(2) != bb.height || t.dim(3) != bb.width) {
            throw ShapeError(std::string("model: ") + what + " input " + shape_str(t.shape()) + " does not match (N, " +
                             std::to_string(channels) + ", " + std::to_string(bb.height) + ", " +
                             std::to_string(bb.width) + ")");
        }
    };
    check(frame, bb.frame_channels, "frame");
    check(event, bb.event_channels, "event");
    if (frame.dim(0) != event.dim(0)) throw ShapeError("model: frame and event batch sizes differ");

    ForwardResult result;
    Tensor f = frame;
    Tensor e = event;
    for (std::size_t s = 0; s < bb.stages(); ++s) {
        if (!frame_stages_.empty()) f = run_stage(frame_stages_[s], f, mode);
        if (!event_stages_.empty()) e = run_stage(event_stages_[s], e, mode);
        switch (cfg_.fusion) {
            case FusionVariant::ecfm: {
                auto out = fusion::ecfm_forward(f, e, ecfm_[s], cfg_.energy);
                result.stages.maps.push_back(out.fused);
                result.bundles.push_back(std::move(out.bundle));
                break;
            }
            case FusionVariant::add: result.stages.maps.push_back(fusion::fuse_add(f, e)); break;
            case FusionVariant::additive_attention:
                result.stages.maps.push_back(fusion::fuse_additive_attention(f, e, attention_[s], mode));
                break;
            case FusionVariant::frames_only: result.stages.maps.push_back(f); break;
            case FusionVariant::events_only: result.stages.maps.push_back(e); break;
        }
    }
    const Tensor features =
        cfg_.decoder.integrate ? integrate_stage_features(result.stages) : result.stages.maps.back();
    result.prediction = decoder_forward(features, mode, rng);
    result.stacked = concat({result.prediction.mu, result.prediction.log_var}, 1);
    return result;
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir, std::size_t epoch) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["config"] = to_json(model.config());
    manifest["seed"] = model.config().seed;
    manifest["epoch"] = epoch;
    auto list = nlohmann::ordered_json::array();
    auto write_group = [&](const std::vector<std::pair<std::string, Tensor>>& group, const char* kind) {
        for (const auto& [name, t] : group) {
            const std::string file = name + ".ect";
            save_tensor(dir / file, t);
            list.push_back({{"name", name}, {"kind", kind}, {"file", file}, {"shape", t.shape()}});
        }
    };
    write_group(model.parameters().params, "parameter");
    write_group(model.parameters().buffers, "buffer");
    manifest["tensors"] = list;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    os << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("checkpoint: missing " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: unreadable manifest: ") + e.what());
    }
    const int version = manifest.value("format_version", -1);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
    }
    Model model(model_config_from_json(manifest.at("config")));

    // Stage every tensor first so a failure leaves nothing half-loaded.
    std::vector<std::pair<Tensor, Tensor>> staged;
    auto& ps = model.parameters();
    std::vector<std::pair<std::string, Tensor>*> slots;
    for (auto& p : ps.params) slots.push_back(&p);
    for (auto& b : ps.buffers) slots.push_back(&b);
    const auto& entries = manifest.at("tensors");
    if (entries.size() != slots.size()) {
        throw std::runtime_error("checkpoint: manifest lists " + std::to_string(entries.size()) +
                                 " tensors, model has " + std::to_string(slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& entry = entries[i];
        const std::string name = entry.at("name").get<std::string>();
        if (name != slots[i]->first) {
            throw std::runtime_error("checkpoint: tensor " + std::to_string(i) + " is '" + name + "', model expects '" +
                                     slots[i]->first + "'");
        }
        Tensor loaded = load_tensor(dir / entry.at("file").get<std::string>());
        if (loaded.shape() != slots[i]->second.shape()) {
            throw std::runtime_error("checkpoint: '" + name + "' has shape " + shape_str(loaded.shape()) +
                                     ", model expects " + shape_str(slots[i]->second.shape()));
        }
        staged.emplace_back(slots[i]->second, std::move(loaded));
    }
    for (auto& [target, source] : staged) {
        auto dst = target.mutable_data();
        const auto src = source.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return {std::move(model), manifest.value("epoch", std::size_t{0})};
}

}  // namespace ecf::model
