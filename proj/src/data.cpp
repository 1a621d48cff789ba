#include "ecf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ecf::data {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void ScenarioParams::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("scenario: " + what); };
    if (height < 8 || width < 8) fail("geometry must be at least 8x8");
    // three stride-2 stages downstream
    if (height % 8 || width % 8) fail("height and width must be multiples of 8");
    if (samples_per_drive == 0) fail("samples_per_drive must be positive");
    if (sample_interval_us <= 0 || frame_gap_us <= 0) fail("intervals must be positive");
    if (!(curvature_max > 0.0)) fail("curvature_max must be positive");
    if (curvature_scale < 0.0 || curvature_scale > 1.0) fail("curvature_scale must lie in [0, 1]");
    if (straight_fraction < 0.0 || straight_fraction > 1.0) fail("straight_fraction must lie in [0, 1]");
    if (!(segment_min_s > 0.0) || segment_max_s < segment_min_s) fail("bad segment length range");
    if (!(speed_min_kmh > 0.0) || speed_max_kmh < speed_min_kmh) fail("bad speed range");
    if (brightness_jitter < 0.0 || brightness_jitter >= 1.0) fail("brightness_jitter must lie in [0, 1)");
    if (pixel_noise < 0.0 || event_noise < 0.0 || lateral_wobble_m < 0.0) fail("noise levels must be non-negative");
    if (exposure_fault_fraction < 0.0 || exposure_fault_fraction > 1.0) fail("exposure_fault_fraction must lie in [0, 1]");
    if (!(contrast > 0.0)) fail("contrast must be positive");
    if (!(degrees_per_unit > 0.0)) fail("degrees_per_unit must be positive");
}

ordered_json to_json(const ScenarioParams& p) {
    return {{"height", p.height},
            {"width", p.width},
            {"samples_per_drive", p.samples_per_drive},
            {"sample_interval_us", p.sample_interval_us},
            {"frame_gap_us", p.frame_gap_us},
            {"curvature_max", p.curvature_max},
            {"curvature_scale", p.curvature_scale},
            {"straight_fraction", p.straight_fraction},
            {"segment_min_s", p.segment_min_s},
            {"segment_max_s", p.segment_max_s},
            {"speed_min_kmh", p.speed_min_kmh},
            {"speed_max_kmh", p.speed_max_kmh},
            {"lateral_wobble_m", p.lateral_wobble_m},
            {"brightness_jitter", p.brightness_jitter},
            {"exposure_fault_fraction", p.exposure_fault_fraction},
            {"pixel_noise", p.pixel_noise},
            {"event_noise", p.event_noise},
            {"contrast", p.contrast},
            {"degrees_per_unit", p.degrees_per_unit}};
}

ScenarioParams scenario_from_json(const json& j) {
    ScenarioParams p;
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("height", p.height);
    get("width", p.width);
    get("samples_per_drive", p.samples_per_drive);
    get("sample_interval_us", p.sample_interval_us);
    get("frame_gap_us", p.frame_gap_us);
    get("curvature_max", p.curvature_max);
    get("curvature_scale", p.curvature_scale);
    get("straight_fraction", p.straight_fraction);
    get("segment_min_s", p.segment_min_s);
    get("segment_max_s", p.segment_max_s);
    get("speed_min_kmh", p.speed_min_kmh);
    get("speed_max_kmh", p.speed_max_kmh);
    get("lateral_wobble_m", p.lateral_wobble_m);
    get("brightness_jitter", p.brightness_jitter);
    get("exposure_fault_fraction", p.exposure_fault_fraction);
    get("pixel_noise", p.pixel_noise);
    get("event_noise", p.event_noise);
    get("contrast", p.contrast);
    get("degrees_per_unit", p.degrees_per_unit);
    p.validate();
    return p;
}

const char* to_string(Split s) {
    switch (s) {
        case Split::none: return "none";
        case Split::train: return "train";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& name) {
    if (name == "none") return Split::none;
    if (name == "train") return Split::train;
    if (name == "test") return Split::test;
    throw std::invalid_argument("unknown split tag '" + name + "'");
}

std::vector<std::size_t> DatasetManifest::indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].split == s) out.push_back(i);
    }
    return out;
}

namespace {

// ---- scene model ---------------------------------------------------------

constexpr double kCameraHeight = 1.5;   // m
constexpr double kLaneHalfWidth = 1.75;
constexpr double kMarkingHalfWidth = 0.08;
constexpr double kRoadHalfWidth = 3.5;
constexpr double kDashPeriod = 6.0;
constexpr double kHazeDistance = 60.0;
constexpr double kBuildingWidthRad = 0.06;
constexpr double kIntegrationStepS = 1e-3;
// exposure gains of a faulty frame camera: underexposed or blown out
constexpr double kDarkGain[2] = {0.03, 0.1};
constexpr double kGlareGain[2] = {4.0, 8.0};

double hash_unit(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    const std::uint64_t h = mix64(a ^ mix64(b ^ mix64(c)));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::uint64_t lattice(double v) { return static_cast<std::uint64_t>(static_cast<std::int64_t>(std::floor(v))); }

// Smooth 2-D value noise in [0, 1).
double value_noise(double u, double v, std::uint64_t seed) {
    const double fu = u - std::floor(u);
    const double fv = v - std::floor(v);
    const std::uint64_t iu = lattice(u);
    const std::uint64_t iv = lattice(v);
    const double su = fu * fu * (3.0 - 2.0 * fu);
    const double sv = fv * fv * (3.0 - 2.0 * fv);
    const double a = hash_unit(seed, iu, iv);
    const double b = hash_unit(seed, iu + 1, iv);
    const double c = hash_unit(seed, iu, iv + 1);
    const double d = hash_unit(seed, iu + 1, iv + 1);
    return (a + (b - a) * su) + ((c + (d - c) * su) - (a + (b - a) * su)) * sv;
}

struct Drive {
    std::vector<double> seg_start;   // seconds
    std::vector<double> seg_target;  // normalized steering of each segment
    double speed_base = 30.0;
    double speed_amp = 0.0;
    double speed_phase = 0.0;
    double wobble_phase = 0.0;
    std::uint64_t texture_seed = 0;
};

Drive make_drive(const ScenarioParams& p, std::uint64_t seed, std::size_t drive) {
    Rng rng = Rng(seed).fork(hash_name("drive") ^ mix64(drive));
    Drive d;
    const double span = static_cast<double>(p.samples_per_drive) * static_cast<double>(p.sample_interval_us) * 1e-6 +
                        1.0;
    double t = -rng.uniform(0.0, p.segment_max_s);
    while (t < span) {
        double target = 0.0;
        if (!rng.bernoulli(p.straight_fraction)) {
            const double magnitude = rng.uniform(0.1, 1.0);
            target = (rng.bernoulli(0.5) ? magnitude : -magnitude) * p.curvature_scale;
        }
        d.seg_start.push_back(t);
        d.seg_target.push_back(target);
        t += rng.uniform(p.segment_min_s, p.segment_max_s);
    }
    d.speed_base = rng.uniform(p.speed_min_kmh, p.speed_max_kmh);
    d.speed_amp = 0.15 * d.speed_base;
    d.speed_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    d.wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    d.texture_seed = rng.next_u64();
    return d;
}

// Normalized steering at time t: segment targets joined by smoothstep ramps.
double steering_at(const Drive& d, double t) {
    std::size_t i = 0;
    while (i + 1 < d.seg_start.size() && d.seg_start[i + 1] <= t) ++i;
    if (i == 0) return d.seg_target[0];
    const double ramp = 1.0;
    const double f = std::clamp((t - d.seg_start[i]) / ramp, 0.0, 1.0);
    const double s = f * f * (3.0 - 2.0 * f);
    return d.seg_target[i - 1] + (d.seg_target[i] - d.seg_target[i - 1]) * s;
}

double speed_at(const ScenarioParams& p, const Drive& d, double t) {
    const double v = d.speed_base + d.speed_amp * std::sin(2.0 * std::numbers::pi * t / 8.0 + d.speed_phase);
    return std::max(v, 0.5 * p.speed_min_kmh);
}

struct Pose {
    double odometer = 0.0;  // m travelled
    double heading = 0.0;   // rad, integral of yaw rate
};

Pose pose_at(const ScenarioParams& p, const Drive& d, double t) {
    Pose pose;
    const auto steps = static_cast<std::size_t>(std::floor(t / kIntegrationStepS));
    auto advance = [&](double t0, double dt) {
        const double tm = t0 + 0.5 * dt;
        const double v = speed_at(p, d, tm) / 3.6;
        pose.odometer += v * dt;
        pose.heading += v * steering_at(d, tm) * p.curvature_max * dt;
    };
    for (std::size_t k = 0; k < steps; ++k) advance(static_cast<double>(k) * kIntegrationStepS, kIntegrationStepS);
    const double rest = t - static_cast<double>(steps) * kIntegrationStepS;
    if (rest > 0.0) advance(static_cast<double>(steps) * kIntegrationStepS, rest);
    return pose;
}

struct View {
    double curvature;  // 1/m
    double offset;     // m, car's lateral position in its lane
    Pose pose;
};

double shade(const ScenarioParams& p, const Drive& d, const View& view, double y, double x) {
    const double f = 0.9 * static_cast<double>(p.width);
    const double horizon = 0.3 * static_cast<double>(p.height);
    const double cx = 0.5 * static_cast<double>(p.width);
    if (y < horizon) {
        const double azimuth = view.pose.heading + (x - cx) / f;
        const double b = std::floor(azimuth / kBuildingWidthRad);
        const std::uint64_t key = lattice(b);
        const double building_h = horizon * (0.15 + 0.7 * hash_unit(d.texture_seed, 7, key));
        if (horizon - y < building_h) return 0.1 + 0.2 * hash_unit(d.texture_seed, 8, key);
        return 0.9 - 0.15 * (y / horizon);
    }
    const double z = kCameraHeight * f / std::max(y - horizon, 1e-3);
    const double lateral = (x - cx) * z / f;
    const double u = lateral - (0.5 * view.curvature * z * z - view.offset);
    const double w = view.pose.odometer + z;
    double v;
    if (std::fabs(u) > kRoadHalfWidth) {
        v = 0.45 + 0.3 * value_noise(u * 0.8, w * 0.8, d.texture_seed ^ 0x51);
    } else {
        v = 0.3 + 0.12 * value_noise(u * 2.0, w * 2.0, d.texture_seed ^ 0x52);
        const bool left = std::fabs(u + kLaneHalfWidth) < kMarkingHalfWidth;
        const bool right = std::fabs(u - kLaneHalfWidth) < kMarkingHalfWidth &&
                           std::fmod(std::fmod(w, kDashPeriod) + kDashPeriod, kDashPeriod) < 0.5 * kDashPeriod;
        if (left || right) v = 0.95;
    }
    const double haze = std::exp(-z / kHazeDistance);
    return 0.6 + (v - 0.6) * haze;
}

Image render_view(const ScenarioParams& p, const Drive& d, const View& view) {
    constexpr int kSubY = 4;
    constexpr int kSubX = 8;
    Image img(p.height, p.width);
    for (std::size_t r = 0; r < p.height; ++r) {
        for (std::size_t c = 0; c < p.width; ++c) {
            double acc = 0.0;
            for (int sy = 0; sy < kSubY; ++sy) {
                for (int sx = 0; sx < kSubX; ++sx) {
                    acc += shade(p, d, view, static_cast<double>(r) + (sy + 0.5) / kSubY,
                                 static_cast<double>(c) + (sx + 0.5) / kSubX);
                }
            }
            img(r, c) = acc / (kSubY * kSubX);
        }
    }
    return img;
}

void finish_frame(Image& img, double gain, double noise, Rng& rng) {
    for (double& v : img.pixels) {
        double s = v * gain;
        if (noise > 0.0) s += noise * rng.normal();
        s = std::clamp(s, 0.0, 1.0);
        v = std::round(255.0 * s) / 255.0;
    }
}

std::string sample_stem(std::size_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", id);
    return buf;
}

std::string fmt_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

RenderedSample render_sample(const ScenarioParams& p, std::uint64_t seed, std::size_t id) {
    p.validate();
    const std::size_t drive_index = id / p.samples_per_drive;
    const std::size_t k = id % p.samples_per_drive;
    const Drive d = make_drive(p, seed, drive_index);

    const double t = static_cast<double>(k) * static_cast<double>(p.sample_interval_us) * 1e-6 + 0.5;
    const double gap = static_cast<double>(p.frame_gap_us) * 1e-6;
    auto view_at = [&](double tv) {
        return View{steering_at(d, tv) * p.curvature_max,
                    p.lateral_wobble_m * std::sin(2.0 * std::numbers::pi * tv / 5.0 + d.wobble_phase),
                    pose_at(p, d, tv)};
    };

    const Image radiance_a = render_view(p, d, view_at(t));
    const Image radiance_b = render_view(p, d, view_at(t + gap));
    Rng rng = Rng(seed).fork(hash_name("sample") ^ mix64(id));
    double gain = 1.0 + p.brightness_jitter * rng.uniform(-1.0, 1.0);
    if (rng.bernoulli(p.exposure_fault_fraction)) {
        gain = rng.bernoulli(0.5) ? rng.uniform(kDarkGain[0], kDarkGain[1]) : rng.uniform(kGlareGain[0], kGlareGain[1]);
    }

    RenderedSample s;
    s.frame_a = radiance_a;
    s.frame_b = radiance_b;
    finish_frame(s.frame_a, gain, p.pixel_noise, rng);
    finish_frame(s.frame_b, gain, p.pixel_noise, rng);
    // The event sensor sees log radiance directly: no exposure gain, no
    // clipping, no 8-bit quantization.
    Image ev_a = radiance_a;
    Image ev_b = radiance_b;
    for (Image* img : {&ev_a, &ev_b}) {
        for (double& v : img->pixels) v = std::max(v + p.event_noise * rng.normal(), 0.0);
    }
    s.events = events::simulate_events(ev_a, ev_b, p.contrast, 0, p.frame_gap_us);
    s.steering = std::clamp(steering_at(d, t + gap), -1.0, 1.0);
    s.speed_kmh = speed_at(p, d, t + gap);
    const std::int64_t drive_span = static_cast<std::int64_t>(p.samples_per_drive) * p.sample_interval_us + 1'000'000;
    s.t_us = static_cast<std::int64_t>(drive_index) * drive_span + static_cast<std::int64_t>(k) * p.sample_interval_us;
    return s;
}

DatasetManifest gen_dataset(std::size_t n, std::uint64_t seed, const ScenarioParams& params, const fs::path& out_dir) {
    if (n == 0) throw std::invalid_argument("gen_dataset: need at least one sample");
    params.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "frames", ec);
    if (!ec) fs::create_directories(out_dir / "events", ec);
    if (ec) throw std::runtime_error("gen_dataset: cannot create " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    m.root = out_dir;
    m.seed = seed;
    m.scenario = params;
    std::ofstream labels(out_dir / "labels.csv");
    if (!labels) throw std::runtime_error("gen_dataset: cannot write " + (out_dir / "labels.csv").string());
    labels << "id,steering,speed_kmh,t_us\n";
    for (std::size_t id = 0; id < n; ++id) {
        const RenderedSample s = render_sample(params, seed, id);
        const std::string stem = sample_stem(id);
        SampleRecord rec;
        rec.id = id;
        rec.frame_a = "frames/" + stem + "_a.pgm";
        rec.frame_b = "frames/" + stem + "_b.pgm";
        rec.events = "events/" + stem + ".csv";
        rec.steering = s.steering;
        rec.speed_kmh = s.speed_kmh;
        rec.t_us = s.t_us;
        write_pgm(out_dir / rec.frame_a, s.frame_a);
        write_pgm(out_dir / rec.frame_b, s.frame_b);
        events::write_events(out_dir / rec.events, s.events);
        labels << id << ',' << fmt_real(rec.steering) << ',' << fmt_real(rec.speed_kmh) << ',' << rec.t_us << '\n';
        m.samples.push_back(std::move(rec));
    }
    if (!labels) throw std::runtime_error("gen_dataset: write failed for labels.csv");
    write_manifest(m);
    return m;
}

DatasetManifest filter_dataset(const DatasetManifest& manifest, const FilterRules& rules) {
    DatasetManifest out = manifest;
    std::vector<SampleRecord> kept = manifest.samples;

    if (rules.speed) {
        const auto before = kept.size();
        std::erase_if(kept, [&](const SampleRecord& s) { return s.speed_kmh < rules.min_speed_kmh; });
        out.filters.dropped_speed += before - kept.size();
        out.filters.applied.push_back("speed");
    }
    if (rules.prune) {
        const double band = rules.band_degrees / manifest.scenario.degrees_per_unit;
        const Rng root(rules.seed);
        const auto before = kept.size();
        std::erase_if(kept, [&](const SampleRecord& s) {
            if (!(std::fabs(s.steering) < band)) return false;
            Rng draw = root.fork(s.id);
            return draw.bernoulli(rules.prune_fraction);
        });
        out.filters.dropped_pruned += before - kept.size();
        out.filters.applied.push_back("prune");
    }
    if (rules.outliers) {
        std::vector<bool> drop(kept.size(), false);
        for (Split group : {Split::none, Split::train, Split::test}) {
            double sum = 0.0;
            double sq = 0.0;
            std::size_t count = 0;
            for (const SampleRecord& s : kept) {
                if (s.split != group) continue;
                sum += s.steering;
                sq += s.steering * s.steering;
                ++count;
            }
            if (count == 0) continue;
            const double mean = sum / static_cast<double>(count);
            const double sigma = std::sqrt(std::max(sq / static_cast<double>(count) - mean * mean, 0.0));
            if (!(sigma > 0.0)) continue;
            for (std::size_t i = 0; i < kept.size(); ++i) {
                if (kept[i].split == group && std::fabs(kept[i].steering) > rules.sigma_multiple * sigma) drop[i] = true;
            }
        }
        std::vector<SampleRecord> survivors;
        for (std::size_t i = 0; i < kept.size(); ++i) {
            if (!drop[i]) survivors.push_back(kept[i]);
        }
        out.filters.dropped_outlier += kept.size() - survivors.size();
        out.filters.applied.push_back("outliers");
        kept = std::move(survivors);
    }
    if (kept.empty()) {
        throw std::runtime_error("filter_dataset: no samples survive (speed " + std::to_string(out.filters.dropped_speed) +
                                 ", pruned " + std::to_string(out.filters.dropped_pruned) + ", outliers " +
                                 std::to_string(out.filters.dropped_outlier) + " dropped)");
    }
    out.samples = std::move(kept);
    return out;
}

DatasetManifest split_dataset(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw std::invalid_argument("split_dataset: test fraction must lie in (0, 1)");
    }
    const std::size_t n = manifest.samples.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));

    DatasetManifest out = manifest;
    for (auto& s : out.samples) s.split = Split::train;
    for (std::size_t i = 0; i < n_test; ++i) out.samples[order[i]].split = Split::test;
    out.test_fraction = test_fraction;
    out.split_seed = seed;
    return out;
}

void write_manifest(const DatasetManifest& m) {
    ordered_json j;
    j["format_version"] = kManifestVersion;
    j["generator_seed"] = m.seed;
    j["scenario"] = to_json(m.scenario);
    j["filters"] = {{"applied", m.filters.applied},
                    {"dropped_speed", m.filters.dropped_speed},
                    {"dropped_pruned", m.filters.dropped_pruned},
                    {"dropped_outlier", m.filters.dropped_outlier}};
    j["split"] = {{"test_fraction", m.test_fraction}, {"seed", m.split_seed}};
    ordered_json samples = ordered_json::array();
    for (const SampleRecord& s : m.samples) {
        samples.push_back({{"id", s.id},
                           {"frame_a", s.frame_a},
                           {"frame_b", s.frame_b},
                           {"events", s.events},
                           {"steering", s.steering},
                           {"speed_kmh", s.speed_kmh},
                           {"t_us", s.t_us},
                           {"split", to_string(s.split)}});
    }
    j["samples"] = std::move(samples);
    std::ofstream os(m.root / "manifest.json");
    if (!os) throw std::runtime_error("cannot write " + (m.root / "manifest.json").string());
    os << j.dump(1) << '\n';
}

DatasetManifest read_manifest(const fs::path& root) {
    std::ifstream is(root / "manifest.json");
    if (!is) throw std::runtime_error("cannot open " + (root / "manifest.json").string());
    const json j = json::parse(is);
    if (j.at("format_version").get<int>() != kManifestVersion) {
        throw std::runtime_error("dataset manifest version " + j.at("format_version").dump() + " is not supported");
    }
    DatasetManifest m;
    m.root = root;
    m.seed = j.at("generator_seed").get<std::uint64_t>();
    m.scenario = scenario_from_json(j.at("scenario"));
    const json& f = j.at("filters");
    m.filters.applied = f.at("applied").get<std::vector<std::string>>();
    m.filters.dropped_speed = f.at("dropped_speed").get<std::size_t>();
    m.filters.dropped_pruned = f.at("dropped_pruned").get<std::size_t>();
    m.filters.dropped_outlier = f.at("dropped_outlier").get<std::size_t>();
    m.test_fraction = j.at("split").at("test_fraction").get<double>();
    m.split_seed = j.at("split").at("seed").get<std::uint64_t>();
    for (const json& s : j.at("samples")) {
        SampleRecord r;
        r.id = s.at("id").get<std::size_t>();
        r.frame_a = s.at("frame_a").get<std::string>();
        r.frame_b = s.at("frame_b").get<std::string>();
        r.events = s.at("events").get<std::string>();
        r.steering = s.at("steering").get<double>();
        r.speed_kmh = s.at("speed_kmh").get<double>();
        r.t_us = s.at("t_us").get<std::int64_t>();
        r.split = parse_split(s.at("split").get<std::string>());
        m.samples.push_back(std::move(r));
    }
    return m;
}

Batch load_batch(const DatasetManifest& manifest, const std::vector<std::size_t>& indices,
                 events::Normalize normalize) {
    if (indices.empty()) throw std::invalid_argument("load_batch: empty index list");
    std::vector<std::string> missing;
    for (std::size_t i : indices) {
        if (i >= manifest.samples.size()) {
            throw std::out_of_range("load_batch: index " + std::to_string(i) + " outside manifest of " +
                                    std::to_string(manifest.samples.size()));
        }
        const SampleRecord& s = manifest.samples[i];
        for (const std::string& rel : {s.frame_b, s.events}) {
            if (!fs::exists(manifest.root / rel)) missing.push_back((manifest.root / rel).string());
        }
    }
    if (!missing.empty()) {
        std::string msg = "load_batch: missing files:";
        for (const auto& p : missing) msg += "\n  " + p;
        throw std::runtime_error(msg);
    }

    const std::size_t H = manifest.scenario.height;
    const std::size_t W = manifest.scenario.width;
    const std::size_t B = indices.size();
    std::vector<double> frames(B * H * W);
    std::vector<double> ev(B * 2 * H * W);
    std::vector<double> steering(B);
    Batch batch;
    for (std::size_t b = 0; b < B; ++b) {
        const SampleRecord& s = manifest.samples[indices[b]];
        const Image img = read_pgm(manifest.root / s.frame_b);
        if (img.height != H || img.width != W) {
            throw std::runtime_error("load_batch: " + s.frame_b + " does not match the " + std::to_string(H) + "x" +
                                     std::to_string(W) + " dataset geometry");
        }
        std::copy(img.pixels.begin(), img.pixels.end(), frames.begin() + static_cast<std::ptrdiff_t>(b * H * W));
        const events::EventStream stream = events::read_events(manifest.root / s.events);
        if (stream.height != H || stream.width != W) {
            throw std::runtime_error("load_batch: " + s.events + " does not match the dataset geometry");
        }
        // the stream spans exactly the frame gap, so this is its one window
        const auto windows = events::bin_events(stream, stream.duration_us);
        const Tensor e = events::normalize_event_tensor(windows.back(), normalize);
        std::copy(e.data().begin(), e.data().end(), ev.begin() + static_cast<std::ptrdiff_t>(b * 2 * H * W));
        steering[b] = s.steering;
        batch.ids.push_back(s.id);
    }
    batch.frames = Tensor::from({B, 1, H, W}, std::move(frames));
    batch.events = Tensor::from({B, 2, H, W}, std::move(ev));
    batch.steering = Tensor::from({B}, std::move(steering));
    return batch;
}

}  // namespace ecf::data
