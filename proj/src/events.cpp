#include "ecf/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ecf::events {

void EventStream::validate() const {
    std::int64_t last = 0;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const Event& e = events[i];
        const std::string where = "event " + std::to_string(i);
        if (e.x >= width || e.y >= height) throw std::invalid_argument(where + " lies outside the sensor grid");
        if (e.polarity != 1 && e.polarity != -1) throw std::invalid_argument(where + " has polarity not in {+1,-1}");
        if (e.t_us < 0 || e.t_us >= duration_us) throw std::invalid_argument(where + " lies outside [0, duration)");
        if (e.t_us < last) throw std::invalid_argument(where + " breaks time order");
        last = e.t_us;
    }
}

double EventTensor::total() const {
    double acc = 0.0;
    for (double v : counts.data()) acc += v;
    return acc;
}

EventStream simulate_events(const Image& prev, const Image& next, double contrast, std::int64_t t0_us,
                            std::int64_t t1_us) {
    if (!(contrast > 0.0)) throw std::invalid_argument("simulate_events: contrast threshold must be positive");
    if (prev.height != next.height || prev.width != next.width) {
        throw std::invalid_argument("simulate_events: frames differ in geometry");
    }
    if (t0_us < 0 || t1_us <= t0_us) throw std::invalid_argument("simulate_events: need 0 <= t0 < t1");

    EventStream stream{prev.height, prev.width, t1_us, {}};
    const double span = static_cast<double>(t1_us - t0_us);
    for (std::size_t y = 0; y < prev.height; ++y) {
        for (std::size_t x = 0; x < prev.width; ++x) {
            const double delta = std::log(next(y, x) + kLogEpsilon) - std::log(prev(y, x) + kLogEpsilon);
            const auto k = static_cast<std::int64_t>(std::floor(std::fabs(delta) / contrast));
            const std::int8_t polarity = delta > 0.0 ? 1 : -1;
            for (std::int64_t i = 1; i <= k; ++i) {
                const double crossing = static_cast<double>(i) * contrast / std::fabs(delta);
                auto t = t0_us + static_cast<std::int64_t>(std::floor(span * crossing));
                t = std::min(t, t1_us - 1);
                stream.events.push_back(
                    {static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), t, polarity});
            }
        }
    }
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
    return stream;
}

std::vector<EventTensor> bin_events(const EventStream& stream, std::int64_t window_us) {
    if (window_us <= 0) throw std::invalid_argument("bin_events: window length must be positive");
    const auto n_windows = static_cast<std::size_t>((stream.duration_us + window_us - 1) / window_us);
    const std::size_t plane = stream.height * stream.width;
    std::vector<std::vector<double>> counts(n_windows, std::vector<double>(2 * plane, 0.0));
    for (const Event& e : stream.events) {
        const auto j = static_cast<std::size_t>(e.t_us / window_us);  // 0-based window
        if (e.t_us < 0 || j >= n_windows) continue;
        const std::size_t channel = e.polarity > 0 ? 0 : 1;
        counts[j][channel * plane + e.y * stream.width + e.x] += 1.0;
    }
    std::vector<EventTensor> out;
    out.reserve(n_windows);
    for (std::size_t j = 0; j < n_windows; ++j) {
        out.push_back({Tensor::from({2, stream.height, stream.width}, std::move(counts[j])), j + 1, window_us});
    }
    return out;
}

Normalize parse_normalize(const std::string& name) {
    if (name == "none") return Normalize::none;
    if (name == "unit_max") return Normalize::unit_max;
    if (name == "log1p") return Normalize::log1p;
    throw std::invalid_argument("unknown event normalization '" + name + "'");
}

const char* to_string(Normalize mode) {
    switch (mode) {
        case Normalize::none: return "none";
        case Normalize::unit_max: return "unit_max";
        case Normalize::log1p: return "log1p";
    }
    return "?";
}

Tensor normalize_event_tensor(const EventTensor& e, Normalize mode) {
    std::vector<double> v = e.counts.to_vector();
    switch (mode) {
        case Normalize::none: break;
        case Normalize::unit_max: {
            const double peak = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
            if (peak > 0.0) {
                for (double& c : v) c /= peak;
            }
            break;
        }
        case Normalize::log1p:
            for (double& c : v) c = std::log1p(c);
            break;
    }
    return Tensor::from(e.counts.shape(), std::move(v));
}

void write_events(const std::filesystem::path& csv_path, const EventStream& stream) {
    std::ofstream os(csv_path);
    if (!os) throw std::runtime_error("cannot open " + csv_path.string() + " for writing");
    os << "t_us,x,y,p\n";
    for (const Event& e : stream.events) os << e.t_us << ',' << e.x << ',' << e.y << ',' << int(e.polarity) << '\n';
    if (!os) throw std::runtime_error("write failed for " + csv_path.string());

    nlohmann::ordered_json side;
    side["height"] = stream.height;
    side["width"] = stream.width;
    side["duration_us"] = stream.duration_us;
    auto sidecar = csv_path;
    sidecar.replace_extension(".json");
    std::ofstream js(sidecar);
    if (!js) throw std::runtime_error("cannot open " + sidecar.string() + " for writing");
    js << side.dump(2) << '\n';
}

EventStream read_events(const std::filesystem::path& csv_path) {
    auto sidecar = csv_path;
    sidecar.replace_extension(".json");
    std::ifstream js(sidecar);
    if (!js) throw std::runtime_error("missing event sidecar " + sidecar.string());
    const auto side = nlohmann::json::parse(js);
    EventStream stream;
    stream.height = side.at("height").get<std::size_t>();
    stream.width = side.at("width").get<std::size_t>();
    stream.duration_us = side.at("duration_us").get<std::int64_t>();

    std::ifstream is(csv_path);
    if (!is) throw std::runtime_error("cannot open " + csv_path.string());
    std::string line;
    std::getline(is, line);
    if (line != "t_us,x,y,p") throw std::runtime_error(csv_path.string() + ": unexpected header '" + line + "'");
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        long long t = 0;
        long long x = 0;
        long long y = 0;
        int p = 0;
        char c1 = 0, c2 = 0, c3 = 0;
        if (!(row >> t >> c1 >> x >> c2 >> y >> c3 >> p) || c1 != ',' || c2 != ',' || c3 != ',' || x < 0 || y < 0) {
            throw std::runtime_error(csv_path.string() + ":" + std::to_string(line_no) + ": malformed event row");
        }
        stream.events.push_back({static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), t,
                                 static_cast<std::int8_t>(p)});
    }
    stream.validate();
    return stream;
}

}  // namespace ecf::events
