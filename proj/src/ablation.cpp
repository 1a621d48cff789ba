#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

#include "ecf/harness.hpp"

namespace ecf::harness {

namespace fs = std::filesystem;

double AblationCell::mean_rmse() const {
    return std::accumulate(rmse.begin(), rmse.end(), 0.0) / static_cast<double>(rmse.size());
}

double AblationCell::mean_mae() const {
    return std::accumulate(mae.begin(), mae.end(), 0.0) / static_cast<double>(mae.size());
}

namespace {

using model::FusionVariant;

std::string num(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

const AblationCell* find(const std::vector<AblationCell>& cells, const std::string& group, const std::string& label) {
    for (const auto& c : cells) {
        if (c.group == group && c.label == label) return &c;
    }
    return nullptr;
}

}  // namespace

AblationResult run_ablation(const RunConfig& cfg, std::ostream& log) {
    cfg.validate();
    const data::DatasetManifest manifest = data::read_manifest(cfg.data_dir);
    const Tensors tr = load_split(manifest, data::Split::train, cfg.normalize);
    Tensors val = load_split(manifest, data::Split::test, cfg.normalize);
    {
        std::vector<std::size_t> rows(val.size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return val.t_us[a] < val.t_us[b]; });
        val = gather(val, rows);
    }
    log << "ablation: train " << tr.size() << ", validation " << val.size() << ", seeds " << cfg.ablation_seeds.size()
        << ", epochs " << cfg.epochs << "\n";

    AblationResult result;
    // Reference RMSEs from the published ablations.
    result.cells = {
        {"fusion", "ecfm", FusionVariant::ecfm, true, true, 0.0801, {}, {}},
        {"fusion", "additive_attention", FusionVariant::additive_attention, true, true, 0.2986, {}, {}},
        {"fusion", "add", FusionVariant::add, true, true, 0.3499, {}, {}},
        {"fusion", "frames_only", FusionVariant::frames_only, true, true, 0.4609, {}, {}},
        {"fusion", "events_only", FusionVariant::events_only, true, true, 0.5102, {}, {}},
        {"decoder", "integrate+energy", FusionVariant::ecfm, true, true, 0.0801, {}, {}},
        {"decoder", "integrate", FusionVariant::ecfm, true, false, 0.0909, {}, {}},
        {"decoder", "energy", FusionVariant::ecfm, false, true, 0.0898, {}, {}},
        {"decoder", "none", FusionVariant::ecfm, false, false, 0.1016, {}, {}},
    };

    for (AblationCell& cell : result.cells) {
        if (cell.group == "decoder" && cell.integrate && cell.energy_loss) {
            // identical configuration to the ECFM fusion cell
            const AblationCell* same = find(result.cells, "fusion", "ecfm");
            cell.rmse = same->rmse;
            cell.mae = same->mae;
            continue;
        }
        for (std::size_t k = 0; k < cfg.ablation_seeds.size(); ++k) {
            RunConfig run = cfg;
            run.seed = cfg.ablation_seeds[k];
            run.model.fusion = cell.fusion;
            run.model.decoder.integrate = cell.integrate;
            run.loss.energy_weight = cell.energy_loss ? cfg.loss.energy_weight : 0.0;
            run.write_checkpoints = false;
            TrainResult r = train(run, tr, val, nullptr);
            cell.rmse.push_back(r.best.rmse);
            cell.mae.push_back(r.best.mae);
            log << "  " << cell.group << "/" << cell.label << " seed " << run.seed << ": rmse " << num(r.best.rmse)
                << " mae " << num(r.best.mae) << " (best epoch " << r.best_epoch << ")\n";
            if (k == 0 && cell.group == "fusion") {
                result.traces.push_back({cell.label, evaluate(*r.best_model, val).predictions});
            }
        }
    }

    auto mean_of = [&](const char* group, const char* label) { return find(result.cells, group, label)->mean_rmse(); };
    const double best_single = std::min(mean_of("fusion", "frames_only"), mean_of("fusion", "events_only"));
    result.fusion_order_ok = mean_of("fusion", "ecfm") < mean_of("fusion", "additive_attention") &&
                             mean_of("fusion", "additive_attention") < mean_of("fusion", "add") &&
                             mean_of("fusion", "add") < best_single;
    const double both = mean_of("decoder", "integrate+energy");
    result.decoder_order_ok = both < mean_of("decoder", "integrate") && both < mean_of("decoder", "energy") &&
                              both < mean_of("decoder", "none");
    return result;
}

void write_ablation_csv(const fs::path& path, const AblationResult& r) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    const std::size_t seeds = r.cells.empty() ? 0 : r.cells.front().rmse.size();
    os << "group,variant,integrate,energy_loss";
    for (std::size_t k = 0; k < seeds; ++k) os << ",rmse_run" << k;
    os << ",rmse_mean,mae_mean,rank,reference_rmse,reference_rank\n";
    for (const AblationCell& c : r.cells) {
        std::size_t rank = 1;
        std::size_t reference_rank = 1;
        for (const AblationCell& o : r.cells) {
            if (o.group != c.group) continue;
            if (o.mean_rmse() < c.mean_rmse()) ++rank;
            if (o.reference_rmse < c.reference_rmse) ++reference_rank;
        }
        os << c.group << ',' << c.label << ',' << (c.integrate ? 1 : 0) << ',' << (c.energy_loss ? 1 : 0);
        for (double v : c.rmse) os << ',' << num(v);
        os << ',' << num(c.mean_rmse()) << ',' << num(c.mean_mae()) << ',' << rank << ',' << num(c.reference_rmse, 4) << ','
           << reference_rank << '\n';
    }
}

void write_traces_svg(const fs::path& path, const std::vector<Trace>& traces) {
    if (traces.empty()) throw std::invalid_argument("traces: nothing to plot");
    const double w = 900.0;
    const double h = 360.0;
    const double left = 50.0;
    const double right = 150.0;
    const double top = 20.0;
    const double bottom = 30.0;
    const std::size_t n = traces.front().predictions.size();
    auto px = [&](std::size_t i) { return left + (w - left - right) * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(n - 1, 1)); };
    auto py = [&](double v) { return top + (h - top - bottom) * (1.0 - (std::clamp(v, -1.2, 1.2) + 1.2) / 2.4); };
    const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (double v : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
        os << "<line x1=\"" << left << "\" x2=\"" << w - right << "\" y1=\"" << num(py(v), 2) << "\" y2=\"" << num(py(v), 2)
           << "\" stroke=\"#ddd\"/><text x=\"" << left - 6 << "\" y=\"" << num(py(v) + 4, 2) << "\" text-anchor=\"end\">"
           << num(v, 1) << "</text>\n";
    }
    os << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 8
       << "\" text-anchor=\"middle\">validation samples in time order</text>\n";
    auto polyline = [&](const std::vector<double>& ys, const char* color, double width) {
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width << "\" points=\"";
        for (std::size_t i = 0; i < ys.size(); ++i) os << num(px(i), 2) << ',' << num(py(ys[i]), 2) << ' ';
        os << "\"/>\n";
    };
    std::vector<double> truth;
    for (const auto& p : traces.front().predictions) truth.push_back(p.y);
    polyline(truth, "black", 2.0);
    double ly = top + 10;
    os << "<text x=\"" << w - right + 10 << "\" y=\"" << ly << "\">ground truth</text>\n";
    for (std::size_t t = 0; t < traces.size(); ++t) {
        std::vector<double> ys;
        for (const auto& p : traces[t].predictions) ys.push_back(p.y_hat);
        const char* color = colors[t % 6];
        polyline(ys, color, 1.0);
        ly += 16;
        os << "<text x=\"" << w - right + 10 << "\" y=\"" << ly << "\" fill=\"" << color << "\">" << traces[t].label << "</text>\n";
    }
    os << "</svg>\n";
}

int cmd_ablation(const RunConfig& cfg, std::ostream& log) {
    const AblationResult r = run_ablation(cfg, log);
    fs::create_directories(cfg.out_dir);
    write_ablation_csv(cfg.out_dir / "ablation.csv", r);
    write_traces_svg(cfg.out_dir / "traces.svg", r.traces);
    log << "\n" << "group    variant              rmse(mean)  mae(mean)  reference rmse\n";
    for (const AblationCell& c : r.cells) {
        char line[128];
        std::snprintf(line, sizeof line, "%-8s %-20s %10.5f %10.5f %10.4f\n", c.group.c_str(), c.label.c_str(), c.mean_rmse(),
                      c.mean_mae(), c.reference_rmse);
        log << line;
    }
    log << (r.fusion_order_ok ? "PASS" : "FAIL") << " fusion ordering ecfm < additive_attention < add < best single modality\n"
        << (r.decoder_order_ok ? "PASS" : "FAIL") << " decoder ordering: integrate+energy lowest of four\n";
    return r.fusion_order_ok && r.decoder_order_ok ? 0 : 1;
}

}  // namespace ecf::harness
