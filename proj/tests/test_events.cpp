#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ecf/events.hpp"
#include "support.hpp"

using namespace ecf;
using namespace ecf::events;

namespace {

EventStream random_stream(Rng& rng, std::size_t h, std::size_t w, std::int64_t duration, std::size_t count) {
    EventStream s{h, w, duration, {}};
    for (std::size_t i = 0; i < count; ++i) {
        s.events.push_back({static_cast<std::uint32_t>(rng.below(w)), static_cast<std::uint32_t>(rng.below(h)),
                            static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(duration))),
                            static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : -1)});
    }
    std::stable_sort(s.events.begin(), s.events.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
    return s;
}

}  // namespace

TEST_CASE("simulate_events: brightness-change rule") {
    Image prev(2, 2, 0.3), next(2, 2, 0.3);
    CHECK(simulate_events(prev, prev, 0.2, 0, 50'000).events.empty());

    prev(0, 1) = 0.1;
    next(0, 1) = 0.9;
    const double delta = std::log(0.90001) - std::log(0.10001);
    CHECK(delta == doctest::Approx(2.1971).epsilon(1e-4));
    const auto s = simulate_events(prev, next, 0.5, 0, 50'000);
    s.validate();
    REQUIRE(s.events.size() == static_cast<std::size_t>(std::floor(delta / 0.5)));
    CHECK(s.events.size() == 4);
    for (const Event& e : s.events) {
        CHECK(e.polarity == 1);
        CHECK(e.x == 1);
        CHECK(e.y == 0);
        CHECK(e.t_us < 50'000);
    }
    // i-th crossing at i C / |delta| of the interval, floored to microseconds
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(s.events[i].t_us ==
              static_cast<std::int64_t>(std::floor(50'000.0 * static_cast<double>(i + 1) * 0.5 / delta)));
    }

    const auto back = simulate_events(next, prev, 0.5, 0, 50'000);
    REQUIRE(back.events.size() == 4);
    for (const Event& e : back.events) CHECK(e.polarity == -1);

    CHECK_THROWS((void)simulate_events(prev, next, 0.0, 0, 50'000));
    CHECK_THROWS((void)simulate_events(prev, next, 0.2, 10, 10));
    CHECK_THROWS((void)simulate_events(prev, Image(3, 2, 0.3), 0.2, 0, 10));
}

TEST_CASE("simulate_events: swap antisymmetry and sub-threshold silence on random frames") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        Image a(6, 5), b(6, 5);
        for (double& v : a.pixels) v = rng.uniform();
        for (double& v : b.pixels) v = rng.uniform();
        const auto fwd = simulate_events(a, b, 0.2, 0, 50'000);
        const auto rev = simulate_events(b, a, 0.2, 0, 50'000);
        CHECK(fwd.events.size() == rev.events.size());
        const auto on_fwd = std::count_if(fwd.events.begin(), fwd.events.end(), [](auto& e) { return e.polarity > 0; });
        const auto off_rev = std::count_if(rev.events.begin(), rev.events.end(), [](auto& e) { return e.polarity < 0; });
        CHECK(on_fwd == off_rev);

        Image c = a;
        for (double& v : c.pixels) v = v * 1.05;  // |delta| < log(1.05) < 0.2
        CHECK(simulate_events(a, c, 0.2, 0, 50'000).events.empty());
    }
}

TEST_CASE("bin_events: windows are half-open") {
    EventStream empty{4, 4, 100'000, {}};
    auto w = bin_events(empty, 50'000);
    REQUIRE(w.size() == 2);
    CHECK(w[0].total() == 0.0);
    CHECK(w[1].total() == 0.0);
    CHECK(w[1].window_index == 2);

    EventStream s{4, 4, 100'000, {{0, 0, 10'000, 1}, {0, 0, 20'000, 1}, {0, 0, 60'000, -1}}};
    w = bin_events(s, 50'000);
    CHECK(w[0].counts.at({0, 0, 0}) == 2.0);
    CHECK(w[0].counts.at({1, 0, 0}) == 0.0);
    CHECK(w[1].counts.at({1, 0, 0}) == 1.0);
    CHECK(w[1].counts.at({0, 0, 0}) == 0.0);

    EventStream edge{2, 2, 100'000, {{1, 1, 50'000, 1}}};
    w = bin_events(edge, 50'000);
    CHECK(w[0].total() == 0.0);
    CHECK(w[1].total() == 1.0);

    EventStream odd{2, 2, 120'000, {}};
    CHECK(bin_events(odd, 50'000).size() == 3);
    CHECK_THROWS((void)bin_events(odd, 0));
}

TEST_CASE("bin_events: conservation and partition on random streams") {
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const std::int64_t duration = 1 + static_cast<std::int64_t>(rng.below(200'000));
        const std::int64_t window = 1 + static_cast<std::int64_t>(rng.below(80'000));
        const auto s = random_stream(rng, 3, 4, duration, rng.below(300));
        const auto bins = bin_events(s, window);
        CHECK(bins.size() == static_cast<std::size_t>((duration + window - 1) / window));
        double total = 0.0;
        for (const auto& b : bins) {
            total += b.total();
            for (double c : b.counts.to_vector()) CHECK(c == std::floor(c));
        }
        CHECK(total == static_cast<double>(s.events.size()));
        for (const Event& e : s.events) {
            int hits = 0;
            for (const auto& b : bins) {
                const auto lo = window * static_cast<std::int64_t>(b.window_index - 1);
                if (e.t_us >= lo && e.t_us < lo + window) ++hits;
            }
            CHECK(hits == 1);
        }
    }
}

TEST_CASE("stream validation") {
    EventStream s{2, 2, 100, {{2, 0, 5, 1}}};
    CHECK_THROWS(s.validate());
    s.events = {{0, 0, 100, 1}};
    CHECK_THROWS(s.validate());
    s.events = {{0, 0, 5, 0}};
    CHECK_THROWS(s.validate());
    s.events = {{0, 0, 5, 1}, {0, 0, 4, 1}};
    CHECK_THROWS(s.validate());
    s.events = {{1, 1, 4, -1}, {0, 0, 4, 1}};
    CHECK_NOTHROW(s.validate());
}

TEST_CASE("normalize_event_tensor") {
    EventTensor zero{Tensor::zeros({2, 2, 2}), 1, 50'000};
    for (auto mode : {Normalize::none, Normalize::unit_max, Normalize::log1p}) {
        for (double v : normalize_event_tensor(zero, mode).to_vector()) CHECK(v == 0.0);
    }
    EventTensor e{Tensor::from({2, 1, 1}, {0, 4}), 1, 50'000};
    CHECK(normalize_event_tensor(e, Normalize::none).to_vector() == std::vector<double>{0, 4});
    CHECK(normalize_event_tensor(e, Normalize::unit_max).to_vector() == std::vector<double>{0, 1});
    CHECK(normalize_event_tensor(e, Normalize::log1p).to_vector()[1] == doctest::Approx(1.6094379124).epsilon(1e-10));
    CHECK(parse_normalize("log1p") == Normalize::log1p);
    CHECK_THROWS((void)parse_normalize("sqrt"));
}

TEST_CASE("event file round-trip") {
    Rng rng(23);
    const auto s = random_stream(rng, 5, 7, 50'000, 40);
    const auto dir = testing::scratch_dir("events");
    write_events(dir / "s.csv", s);
    CHECK(std::filesystem::exists(dir / "s.json"));
    const auto back = read_events(dir / "s.csv");
    CHECK(back.height == 5);
    CHECK(back.width == 7);
    CHECK(back.duration_us == 50'000);
    CHECK(back.events == s.events);
    CHECK_THROWS((void)read_events(dir / "missing.csv"));
}
