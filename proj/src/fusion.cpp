#include "ecf/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ecf/image.hpp"

namespace ecf::fusion {

Tensor energy_weights(const Tensor& features, const EnergyConfig& cfg) {
    if (!(cfg.lambda > 0.0)) throw std::invalid_argument("energy_weights: lambda must be positive");
    if (features.rank() != 4) throw ShapeError("energy_weights expects (N, C, H, W), got " + shape_str(features.shape()));
    const auto [mu, var] = reduce_moments(features);
    const Tensor var_lambda = add_scalar(var, cfg.lambda);
    const Tensor numerator = mul_scalar(var_lambda, 4.0);                  // 4(s2 + l), (N, C, 1, 1)
    const Tensor spread = square(sub(features, mu));                       // (n - mu)^2
    const Tensor denominator = add(spread, mul_scalar(var_lambda, 2.0));   // + 2 s2 + 2 l
    // 1 / (den / num) rather than num / den: den / num >= 0.5 rounds
    // monotonically, so the result never exceeds 2 and is exactly 2 at n == mu.
    return reciprocal(div(denominator, numerator));
}

Tensor activate(const Tensor& energy) {
    const auto e = energy.data();
    for (std::size_t i = 0; i < e.size(); ++i) {
        if (!(e[i] > 0.0)) throw DomainError("activate: non-positive energy", i);
    }
    return sigmoid(reciprocal(energy));
}

EcfmParams EcfmParams::make(ParameterSet& ps, const Rng& root, const std::string& name, std::size_t channels,
                            std::size_t out_channels) {
    return {Conv::make(ps, root, name + ".proj", 2 * channels, out_channels, 1)};
}

EcfmOutput ecfm_forward(const Tensor& frame, const Tensor& event, const EcfmParams& params,
                        const EnergyConfig& cfg) {
    if (frame.shape() != event.shape()) {
        throw ShapeError("ecfm: frame features " + shape_str(frame.shape()) + " and event features " +
                         shape_str(event.shape()) + " differ");
    }
    if (params.proj.weight.dim(1) != 2 * frame.dim(1)) {
        throw ShapeError("ecfm: projection expects " + std::to_string(params.proj.weight.dim(1)) +
                         " input channels, got 2 x " + std::to_string(frame.dim(1)));
    }
    ActivationBundle bundle;
    bundle.frame = activate(energy_weights(frame, cfg));
    bundle.event = activate(energy_weights(event, cfg));
    bundle.cross = softmax(add(bundle.frame, bundle.event), {2, 3});

    const Tensor frame_fused = add(mul(bundle.cross, frame), mul(bundle.frame, frame));
    const Tensor event_fused = add(mul(bundle.cross, event), mul(bundle.event, event));
    return {params.proj(concat({frame_fused, event_fused}, 1)), bundle};
}

Tensor fuse_add(const Tensor& frame, const Tensor& event) {
    if (frame.shape() != event.shape()) {
        throw ShapeError("fuse_add: " + shape_str(frame.shape()) + " vs " + shape_str(event.shape()));
    }
    return add(frame, event);
}

AdditiveAttentionParams AdditiveAttentionParams::make(ParameterSet& ps, const Rng& root, const std::string& name,
                                                      std::size_t channels) {
    AdditiveAttentionParams p;
    p.frame_proj = Conv::make(ps, root, name + ".frame_proj", channels, channels, 1);
    p.frame_bn = BatchNorm::make(ps, name + ".frame_bn", channels);
    p.event_proj = Conv::make(ps, root, name + ".event_proj", channels, channels, 1);
    p.event_bn = BatchNorm::make(ps, name + ".event_bn", channels);
    p.gate = Conv::make(ps, root, name + ".gate", channels, 1, 1);
    p.gate_bn = BatchNorm::make(ps, name + ".gate_bn", 1);
    return p;
}

Tensor fuse_additive_attention(const Tensor& frame, const Tensor& event, AdditiveAttentionParams& params,
                               Mode mode) {
    if (frame.shape() != event.shape()) {
        throw ShapeError("additive attention: " + shape_str(frame.shape()) + " vs " + shape_str(event.shape()));
    }
    const Tensor wf = params.frame_bn(params.frame_proj(frame), mode);
    const Tensor we = params.event_bn(params.event_proj(event), mode);
    const Tensor alpha = sigmoid(params.gate_bn(params.gate(relu(add(wf, we))), mode));
    return mul(event, alpha);
}

std::vector<std::uint8_t> scale_to_bytes(std::span<const double> values) {
    std::vector<std::uint8_t> bytes(values.size(), 0);
    if (values.empty()) return bytes;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return bytes;
    for (std::size_t i = 0; i < values.size(); ++i) {
        bytes[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) / range * 255.0));
    }
    return bytes;
}

std::vector<DumpedMap> dump_activations(const ActivationBundle& bundle, std::size_t sample, std::size_t stage,
                                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const Tensor& ref = bundle.frame;
    if (sample >= ref.dim(0)) throw std::out_of_range("dump_activations: sample index out of range");
    const std::size_t C = ref.dim(1);
    const std::size_t H = ref.dim(2);
    const std::size_t W = ref.dim(3);
    std::vector<DumpedMap> written;
    const std::pair<const char*, const Tensor*> maps[] = {
        {"frame", &bundle.frame}, {"event", &bundle.event}, {"cross", &bundle.cross}};
    for (const auto& [modality, tensor] : maps) {
        const bool is_cross = std::string(modality) == "cross";
        for (std::size_t c = 0; c < C; ++c) {
            const double* base = tensor->data().data() + (sample * C + c) * H * W;
            std::vector<double> plane(base, base + H * W);
            if (is_cross) {
                for (double& v : plane) v *= static_cast<double>(H * W);
            }
            const std::string name =
                "stage" + std::to_string(stage) + "_" + modality + "_c" + std::to_string(c) + ".pgm";
            write_pgm(dir / name, H, W, scale_to_bytes(plane));
            written.push_back({stage, modality, c, name});
        }
    }
    return written;
}

void write_activation_index(const std::filesystem::path& dir, const std::vector<DumpedMap>& maps) {
    nlohmann::ordered_json index = nlohmann::ordered_json::array();
    for (const DumpedMap& m : maps) {
        index.push_back({{"stage", m.stage}, {"modality", m.modality}, {"channel", m.channel},
                         {"file", m.file.string()}});
    }
    std::ofstream os(dir / "activations.json");
    if (!os) throw std::runtime_error("cannot write " + (dir / "activations.json").string());
    os << index.dump(2) << '\n';
}

}  // namespace ecf::fusion
