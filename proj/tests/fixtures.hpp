#pragma once

// Small on-disk fixtures shared by the unit tests and the acceptance run.

#include <filesystem>
#include <vector>

#include "ecf/data.hpp"
#include "ecf/harness.hpp"
#include "ecf/model.hpp"

namespace testing {

// A dataset whose test split carries the given labels, and next to it a
// checkpoint whose mu head is the constant `y_hat` (zero weights). Returns a
// config pointing eval at both.
inline ecf::harness::RunConfig constant_eval_fixture(const std::filesystem::path& dir, const std::vector<double>& y,
                                                     double y_hat) {
    using namespace ecf;
    harness::RunConfig cfg;
    cfg.data_dir = dir / "data";
    cfg.out_dir = dir / "run";
    data::ScenarioParams p;
    p.samples_per_drive = 4;
    auto m = data::gen_dataset(y.size() + 2, 1, p, cfg.data_dir);
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        m.samples[i].split = i < y.size() ? data::Split::test : data::Split::train;
        if (i < y.size()) m.samples[i].steering = y[i];
    }
    data::write_manifest(m);

    model::Model net(cfg.model);
    for (auto& [name, t] : net.parameters().params) {
        if (name == "decoder.mu.weight") {
            for (double& v : t.mutable_data()) v = 0.0;
        }
        if (name == "decoder.mu.bias") t.mutable_data()[0] = y_hat;
    }
    model::save_checkpoint(net, cfg.out_dir / "checkpoint");
    return cfg;
}

}  // namespace testing
