#pragma once

// Synthetic driving scenes: a road seen from a forward camera with a skyline
// above the horizon. Road curvature bends the lane markings in the frame;
// the vehicle's yaw rate (speed x curvature) slides the skyline sideways and
// forward motion scrolls the road texture, which is what the events see.
// Includes the dataset balancing filters, the train/test split and loading.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecf/events.hpp"
#include "ecf/image.hpp"
#include "ecf/rng.hpp"
#include "ecf/tensor.hpp"

namespace ecf::data {

/// Steering-wheel degrees per unit of normalized steering.
inline constexpr double kDefaultDegreesPerUnit = 45.0;

struct ScenarioParams {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t samples_per_drive = 8;
    std::int64_t sample_interval_us = 250'000;
    std::int64_t frame_gap_us = events::kDefaultWindowUs;
    double curvature_max = 0.04;        // 1/m; steering = curvature / curvature_max
    double curvature_scale = 1.0;       // 0 gives a straight road
    double straight_fraction = 0.5;     // share of straight segments
    double segment_min_s = 2.0;
    double segment_max_s = 6.0;
    double speed_min_kmh = 5.0;
    double speed_max_kmh = 60.0;
    double lateral_wobble_m = 0.4;      // nuisance offset of the car in its lane
    double brightness_jitter = 0.25;    // per-sample gain in [1 - j, 1 + j]
    double exposure_fault_fraction = 0.35;  // frames badly under- or overexposed
    double pixel_noise = 0.01;          // per-frame Gaussian sensor noise
    double event_noise = 0.01;          // radiance noise seen by the event sensor
    double contrast = events::kDefaultContrast;
    double degrees_per_unit = kDefaultDegreesPerUnit;

    void validate() const;
};

nlohmann::ordered_json to_json(const ScenarioParams& p);
ScenarioParams scenario_from_json(const nlohmann::json& j);

enum class Split { none, train, test };
const char* to_string(Split s);
Split parse_split(const std::string& name);

struct SampleRecord {
    std::size_t id = 0;
    std::string frame_a;  // paths relative to the dataset root
    std::string frame_b;
    std::string events;
    double steering = 0.0;
    double speed_kmh = 0.0;
    std::int64_t t_us = 0;
    Split split = Split::none;
};

struct FilterRules {
    bool speed = true;
    double min_speed_kmh = 15.0;
    bool prune = true;
    double band_degrees = 5.0;
    double prune_fraction = 0.7;
    bool outliers = true;
    double sigma_multiple = 3.0;
    std::uint64_t seed = 0;
};

/// Drop counts accumulated over every filter pass applied to a manifest.
struct FilterReport {
    std::vector<std::string> applied;
    std::size_t dropped_speed = 0;
    std::size_t dropped_pruned = 0;
    std::size_t dropped_outlier = 0;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::uint64_t seed = 0;
    ScenarioParams scenario;
    std::vector<SampleRecord> samples;
    FilterReport filters;
    double test_fraction = 0.0;  // 0 until split
    std::uint64_t split_seed = 0;

    std::vector<std::size_t> indices_of(Split s) const;
    std::size_t count(Split s) const { return indices_of(s).size(); }
};

inline constexpr int kManifestVersion = 1;

void write_manifest(const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& root);

/// One rendered sample before it touches disk.
struct RenderedSample {
    Image frame_a;
    Image frame_b;
    events::EventStream events;
    double steering = 0.0;
    double speed_kmh = 0.0;
    std::int64_t t_us = 0;
};

/// Deterministic in (seed, params, id). Frames pass through the camera model
/// (exposure gain, noise, clipping, 8-bit quantization); events are
/// simulated from the same scene pair in the radiance domain.
RenderedSample render_sample(const ScenarioParams& params, std::uint64_t seed, std::size_t id);

/// Writes frames/, events/, labels.csv and manifest.json under out_dir.
DatasetManifest gen_dataset(std::size_t n, std::uint64_t seed, const ScenarioParams& params,
                            const std::filesystem::path& out_dir);

/// Applies the enabled rules in order: speed floor, seeded pruning of the
/// near-zero steering band, then |s| > k sigma per split group. Throws
/// std::runtime_error if nothing survives.
DatasetManifest filter_dataset(const DatasetManifest& manifest, const FilterRules& rules);

/// Seeded shuffle; round(n * test_fraction) samples become test.
DatasetManifest split_dataset(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed);

struct Batch {
    Tensor frames;    // (B, 1, H, W), frame b of each pair
    Tensor events;    // (B, 2, H, W)
    Tensor steering;  // (B)
    std::vector<std::size_t> ids;
};

/// indices address manifest.samples. Missing files are reported together.
Batch load_batch(const DatasetManifest& manifest, const std::vector<std::size_t>& indices,
                 events::Normalize normalize);

}  // namespace ecf::data
