#pragma once

// Event generation from frame pairs and time binning into ON/OFF count grids.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ecf/image.hpp"
#include "ecf/tensor.hpp"

namespace ecf::events {

struct Event {
    std::uint32_t x = 0;  // column
    std::uint32_t y = 0;  // row
    std::int64_t t_us = 0;
    std::int8_t polarity = 1;  // +1 ON, -1 OFF

    friend bool operator==(const Event&, const Event&) = default;
};

struct EventStream {
    std::size_t height = 0;
    std::size_t width = 0;
    std::int64_t duration_us = 0;
    std::vector<Event> events;

    /// Throws std::invalid_argument if an event is off-grid, has a bad
    /// polarity, lies outside [0, duration) or breaks time order.
    void validate() const;
};

/// Window j (1-based) of a binned stream: channel 0 counts ON events,
/// channel 1 OFF events, as a (2, H, W) tensor.
struct EventTensor {
    Tensor counts;
    std::size_t window_index = 1;
    std::int64_t window_us = 0;

    double total() const;
};

inline constexpr double kLogEpsilon = 1e-5;
inline constexpr double kDefaultContrast = 0.2;
inline constexpr std::int64_t kDefaultWindowUs = 50'000;

/// Per pixel, d = log(next + 1e-5) - log(prev + 1e-5) triggers
/// floor(|d| / C) events of polarity sign(d). The i-th event sits at the
/// linear-interpolation crossing time t0 + (t1 - t0) * i C / |d|, floored to
/// whole microseconds and kept below t1. The stream spans [0, t1).
EventStream simulate_events(const Image& prev, const Image& next, double contrast, std::int64_t t0_us,
                            std::int64_t t1_us);

/// ceil(duration / T) windows; window j takes T(j-1) <= t < T j.
std::vector<EventTensor> bin_events(const EventStream& stream, std::int64_t window_us);

enum class Normalize { none, unit_max, log1p };

Normalize parse_normalize(const std::string& name);
const char* to_string(Normalize mode);

Tensor normalize_event_tensor(const EventTensor& e, Normalize mode);

/// CSV `t_us,x,y,p` plus a JSON sidecar (same stem, .json) with geometry and
/// duration.
void write_events(const std::filesystem::path& csv_path, const EventStream& stream);
EventStream read_events(const std::filesystem::path& csv_path);

}  // namespace ecf::events
