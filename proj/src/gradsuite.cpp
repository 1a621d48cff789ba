// Finite-difference check of every differentiable op and of the composite
// graphs built from them.

#include <algorithm>
#include <cmath>
#include <set>

#include "ecf/gradcheck.hpp"
#include "ecf/harness.hpp"

namespace ecf::harness {

namespace {

constexpr double kOpTolerance = 1e-5;
constexpr double kCompositeTolerance = 1e-4;

// Values in [lo, hi] with magnitude at least `gap` (keeps kinks and poles away).
Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi, double gap = 0.0) {
    std::vector<double> v(numel_of(shape));
    for (double& x : v) {
        do {
            x = rng.uniform(lo, hi);
        } while (std::fabs(x) < gap);
    }
    return Tensor::from(std::move(shape), std::move(v));
}

// Contracts an op output with fixed random weights so every output element
// carries an O(1) gradient.
Tensor contract(const Tensor& y, std::uint64_t salt) {
    Rng rng(0xC0FFEE ^ salt);
    return sum(mul(y, random_tensor(rng, y.shape(), -1.0, 1.0)));
}

struct Item {
    std::string name;
    std::vector<std::string> covers;
    ScalarProgram program;
    std::vector<Tensor> inputs;
    double tolerance = kOpTolerance;
    std::size_t max_coords = 0;
};

// sigmoid with a backward rule off by 1 %, for the negative control.
Tensor corrupted_sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
    std::vector<double> y = out;
    return record_op("corrupted_sigmoid", x.shape(), std::move(out), {x},
                     [y](std::span<const double> g, std::span<std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += 1.01 * g[i] * y[i] * (1.0 - y[i]);
                     });
}

std::vector<Item> build_items(bool corrupt) {
    std::vector<Item> items;
    Rng rng(20240611);
    auto unary_item = [&](const char* name, Tensor (*fn)(const Tensor&), double lo, double hi, double gap) {
        items.push_back({name, {name}, [fn](const std::vector<Tensor>& in) { return contract(fn(in[0]), 1); },
                         {random_tensor(rng, {2, 3, 4}, lo, hi, gap)}});
    };
    unary_item("relu", relu, -2.0, 2.0, 0.05);
    unary_item("sigmoid", sigmoid, -3.0, 3.0, 0.0);
    unary_item("exp", exp, -1.5, 1.5, 0.0);
    unary_item("log", log, 0.3, 2.5, 0.0);
    unary_item("sqrt", sqrt, 0.3, 2.5, 0.0);
    unary_item("abs", abs, -2.0, 2.0, 0.05);
    unary_item("neg", neg, -2.0, 2.0, 0.0);
    unary_item("reciprocal", reciprocal, -2.0, 2.0, 0.3);
    unary_item("square", square, -2.0, 2.0, 0.0);

    auto binary_item = [&](const char* name, Tensor (*fn)(const Tensor&, const Tensor&), Shape b_shape,
                           double gap) {
        const std::string label = std::string(name) + (b_shape == Shape{2, 3, 4} ? "" : " (broadcast)");
        items.push_back({label, {name}, [fn](const std::vector<Tensor>& in) { return contract(fn(in[0], in[1]), 2); },
                         {random_tensor(rng, {2, 3, 4}, -2.0, 2.0), random_tensor(rng, b_shape, -2.0, 2.0, gap)}});
    };
    for (const Shape& bs : {Shape{2, 3, 4}, Shape{2, 1, 4}}) {
        binary_item("add", add, bs, 0.0);
        binary_item("sub", sub, bs, 0.0);
        binary_item("mul", mul, bs, 0.0);
        binary_item("div", div, bs, 0.4);
    }

    items.push_back({"add_scalar", {"add_scalar"},
                     [](const std::vector<Tensor>& in) { return contract(add_scalar(in[0], 0.7), 3); },
                     {random_tensor(rng, {3, 4}, -2.0, 2.0)}});
    items.push_back({"mul_scalar", {"mul_scalar"},
                     [](const std::vector<Tensor>& in) { return contract(mul_scalar(in[0], -1.3), 4); },
                     {random_tensor(rng, {3, 4}, -2.0, 2.0)}});
    {
        // keep entries clear of the clamp bounds
        Tensor x = random_tensor(rng, {3, 5}, -2.0, 2.0);
        for (double& v : x.mutable_data()) {
            if (std::fabs(std::fabs(v) - 1.0) < 0.05) v *= 1.2;
        }
        items.push_back({"clamp", {"clamp"},
                         [](const std::vector<Tensor>& in) { return contract(clamp(in[0], -1.0, 1.0), 5); }, {x}});
    }
    items.push_back({"softmax (spatial)", {"softmax"},
                     [](const std::vector<Tensor>& in) { return contract(softmax(in[0], {2, 3}), 6); },
                     {random_tensor(rng, {2, 2, 3, 3}, -2.0, 2.0)}});
    items.push_back({"reduce_moments", {"reduce_moments"},
                     [](const std::vector<Tensor>& in) {
                         const auto m = reduce_moments(in[0]);
                         return add(contract(m.mean, 7), contract(m.var, 8));
                     },
                     {random_tensor(rng, {2, 2, 3, 3}, -2.0, 2.0)}});
    items.push_back({"conv2d 3x3 stride 2 pad 1", {"conv2d"},
                     [](const std::vector<Tensor>& in) {
                         return contract(conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1}), 9);
                     },
                     {random_tensor(rng, {2, 2, 5, 5}, -1.0, 1.0), random_tensor(rng, {3, 2, 3, 3}, -1.0, 1.0),
                      random_tensor(rng, {3}, -1.0, 1.0)}});
    items.push_back({"conv2d 1x1", {"conv2d"},
                     [](const std::vector<Tensor>& in) { return contract(conv2d(in[0], in[1], in[2]), 10); },
                     {random_tensor(rng, {2, 4, 3, 3}, -1.0, 1.0), random_tensor(rng, {2, 4, 1, 1}, -1.0, 1.0),
                      random_tensor(rng, {2}, -1.0, 1.0)}});
    items.push_back({"conv2d 3x3 no bias", {"conv2d"},
                     [](const std::vector<Tensor>& in) {
                         return contract(conv2d(in[0], in[1], std::nullopt, {.stride = 1, .padding = 1}), 11);
                     },
                     {random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0), random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0)}});
    items.push_back({"batchnorm2d train", {"batchnorm2d"},
                     [](const std::vector<Tensor>& in) {
                         BatchNormState st = BatchNormState::fresh(in[0].dim(1));
                         return contract(batchnorm2d(in[0], in[1], in[2], st, Mode::train), 12);
                     },
                     {random_tensor(rng, {3, 2, 3, 3}, -2.0, 2.0), random_tensor(rng, {2}, 0.5, 1.5),
                      random_tensor(rng, {2}, -0.5, 0.5)}});
    {
        BatchNormState st{random_tensor(rng, {2}, -0.5, 0.5), random_tensor(rng, {2}, 0.5, 2.0), 0.1};
        items.push_back({"batchnorm2d eval", {"batchnorm2d"},
                         [st](const std::vector<Tensor>& in) mutable {
                             return contract(batchnorm2d(in[0], in[1], in[2], st, Mode::eval), 13);
                         },
                         {random_tensor(rng, {2, 2, 3, 3}, -2.0, 2.0), random_tensor(rng, {2}, 0.5, 1.5),
                          random_tensor(rng, {2}, -0.5, 0.5)}});
    }
    items.push_back({"dropout p=0.5", {"dropout"},
                     [](const std::vector<Tensor>& in) {
                         Rng mask(77);
                         return contract(dropout(in[0], 0.5, Mode::train, mask), 14);
                     },
                     {random_tensor(rng, {4, 5}, -2.0, 2.0)}});
    items.push_back({"linear", {"linear"},
                     [](const std::vector<Tensor>& in) { return contract(linear(in[0], in[1], in[2]), 15); },
                     {random_tensor(rng, {3, 4}, -1.0, 1.0), random_tensor(rng, {5, 4}, -1.0, 1.0),
                      random_tensor(rng, {5}, -1.0, 1.0)}});
    items.push_back({"concat (channels)", {"concat"},
                     [](const std::vector<Tensor>& in) { return contract(concat({in[0], in[1]}, 1), 16); },
                     {random_tensor(rng, {2, 2, 3}, -1.0, 1.0), random_tensor(rng, {2, 3, 3}, -1.0, 1.0)}});
    items.push_back({"reshape", {"reshape"},
                     [](const std::vector<Tensor>& in) { return contract(reshape(in[0], {4, 3}), 17); },
                     {random_tensor(rng, {2, 6}, -1.0, 1.0)}});
    items.push_back({"flatten", {"flatten"},
                     [](const std::vector<Tensor>& in) { return contract(flatten(in[0]), 18); },
                     {random_tensor(rng, {2, 2, 3}, -1.0, 1.0)}});
    items.push_back({"narrow", {"narrow"},
                     [](const std::vector<Tensor>& in) { return contract(narrow(in[0], 1, 1, 2), 19); },
                     {random_tensor(rng, {2, 4, 3}, -1.0, 1.0)}});
    items.push_back({"mean_pool2d", {"mean_pool2d"},
                     [](const std::vector<Tensor>& in) { return contract(mean_pool2d(in[0], 2, 2), 20); },
                     {random_tensor(rng, {2, 2, 5, 4}, -1.0, 1.0)}});
    items.push_back({"sum", {"sum"}, [](const std::vector<Tensor>& in) { return mul_scalar(sum(square(in[0])), 0.5); },
                     {random_tensor(rng, {3, 4}, -1.0, 1.0)}});
    items.push_back({"mean", {"mean"}, [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); },
                     {random_tensor(rng, {3, 4}, -1.0, 1.0)}});
    items.push_back({"energy_score_full", {"energy_score_full"},
                     [](const std::vector<Tensor>& in) { return losses::energy_score_full(in[0], in[1]); },
                     {random_tensor(rng, {3, 7}, -2.0, 2.0), random_tensor(rng, {3, 1}, -1.0, 1.0)}});
    items.push_back({"energy_score_fast", {"energy_score_fast"},
                     [](const std::vector<Tensor>& in) { return losses::energy_score_fast(in[0], in[1]); },
                     {random_tensor(rng, {3, 7}, -2.0, 2.0), random_tensor(rng, {3, 1}, -1.0, 1.0)}});
    items.push_back({"sample_gaussian", {"sample_gaussian"},
                     [](const std::vector<Tensor>& in) {
                         Rng eps(31);
                         const auto pred = losses::GaussianPrediction::from_raw(in[0], in[1]);
                         return contract(losses::sample_gaussian(pred, 5, eps), 21);
                     },
                     {random_tensor(rng, {2, 1}, -1.0, 1.0), random_tensor(rng, {2, 1}, -2.0, 1.0)}});
    items.push_back({"smooth_l1", {"smooth_l1"},
                     [](const std::vector<Tensor>& in) { return losses::smooth_l1(in[0], in[1], 1.0); },
                     {Tensor::from({4, 1}, {0.3, -2.0, 1.6, -0.2}), Tensor::from({4, 1}, {-0.1, 0.4, 0.1, 0.5})}});

    // ---- composites
    items.push_back({"energy weights + activation", {},
                     [](const std::vector<Tensor>& in) {
                         return contract(fusion::activate(fusion::energy_weights(in[0], {})), 22);
                     },
                     {random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0)}, kOpTolerance});
    {
        ParameterSet ps;
        const Rng root(5);
        fusion::EcfmParams p = fusion::EcfmParams::make(ps, root, "ecfm", 2, 3);
        items.push_back({"ECFM forward", {},
                         [](const std::vector<Tensor>& in) {
                             const fusion::EcfmParams params{Conv{in[2], in[3], {}}};
                             return contract(fusion::ecfm_forward(in[0], in[1], params, {}).fused, 23);
                         },
                         {random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0), random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0),
                          p.proj.weight.clone(), p.proj.bias.clone()},
                         kOpTolerance});
    }
    {
        ParameterSet ps;
        const Rng root(6);
        auto p = fusion::AdditiveAttentionParams::make(ps, root, "att", 2);
        items.push_back({"additive attention", {},
                         [p](const std::vector<Tensor>& in) mutable {
                             return contract(fusion::fuse_additive_attention(in[0], in[1], p, Mode::train), 24);
                         },
                         {random_tensor(rng, {3, 2, 3, 3}, -1.0, 1.0), random_tensor(rng, {3, 2, 3, 3}, -1.0, 1.0)},
                         kCompositeTolerance});
    }
    items.push_back({"total loss (smooth L1 + energy score)", {},
                     [](const std::vector<Tensor>& in) {
                         Rng eps(41);
                         losses::LossConfig cfg;
                         cfg.samples = 64;
                         const auto pred = losses::GaussianPrediction::from_raw(in[0], in[1]);
                         return losses::total_loss(pred, in[2], cfg, eps);
                     },
                     {random_tensor(rng, {3, 1}, -1.0, 1.0), random_tensor(rng, {3, 1}, -2.0, 1.0),
                      random_tensor(rng, {3, 1}, -1.0, 1.0)},
                     kCompositeTolerance});
    {
        // Whole network plus loss on a 2 x 16 x 16 batch; parameters are
        // sampled so the check stays fast.
        model::ModelConfig mc;
        mc.backbone.height = 16;
        mc.backbone.width = 16;
        mc.seed = 3;
        auto net = std::make_shared<model::Model>(mc);
        std::vector<Tensor> inputs{random_tensor(rng, {2, 1, 16, 16}, 0.0, 1.0),
                                   random_tensor(rng, {2, 2, 16, 16}, 0.0, 1.0),
                                   Tensor::from({2, 1}, {0.3, -0.5})};
        for (const auto& [name, t] : net->parameters().params) inputs.push_back(t);
        items.push_back({"end-to-end: model forward + total loss (2x16x16)", {},
                         [net](const std::vector<Tensor>& in) {
                             Rng drop(51);
                             Rng eps(52);
                             losses::LossConfig cfg;
                             cfg.samples = 64;
                             const auto out = net->forward(in[0], in[1], Mode::train, drop);
                             return losses::total_loss(out.prediction, in[2], cfg, eps);
                         },
                         inputs, kCompositeTolerance, 6});
    }
    if (corrupt) {
        items.push_back({"negative control: corrupted sigmoid backward", {},
                         [](const std::vector<Tensor>& in) { return contract(corrupted_sigmoid(in[0]), 25); },
                         {random_tensor(rng, {2, 3}, -2.0, 2.0)}});
    }
    return items;
}

}  // namespace

const std::vector<std::string>& registered_ops() {
    static const std::vector<std::string> ops{
        "relu",       "sigmoid",   "exp",         "log",        "sqrt",           "abs",
        "neg",        "reciprocal", "square",     "add",        "sub",            "mul",
        "div",        "add_scalar", "mul_scalar", "clamp",      "softmax",        "reduce_moments",
        "conv2d",     "batchnorm2d", "dropout",   "linear",     "concat",         "reshape",
        "flatten",    "narrow",     "mean_pool2d", "sum",       "mean",           "energy_score_full",
        "energy_score_fast", "sample_gaussian", "smooth_l1"};
    return ops;
}

std::vector<GradCheckItem> run_gradcheck_suite(bool corrupt) {
    std::vector<GradCheckItem> out;
    std::set<std::string> covered;
    for (Item& item : build_items(corrupt)) {
        GradCheckOptions opts;
        opts.max_coords_per_input = item.max_coords;
        const GradCheckReport r = grad_check(item.program, item.inputs, opts);
        const double err = r.non_finite.empty() ? r.max_rel_error : std::numeric_limits<double>::infinity();
        out.push_back({item.name, item.covers.empty() ? "composite" : "op", err, item.tolerance, r.coords_checked});
        covered.insert(item.covers.begin(), item.covers.end());
    }
    for (const std::string& op : registered_ops()) {
        if (!covered.count(op)) out.push_back({"uncovered op " + op, "op", std::numeric_limits<double>::infinity(), 0.0, 0});
    }
    return out;
}

int cmd_gradcheck(bool corrupt, std::ostream& log) {
    const auto items = run_gradcheck_suite(corrupt);
    bool ok = true;
    char line[160];
    for (const GradCheckItem& it : items) {
        std::snprintf(line, sizeof line, "%-4s %-52s %-9s max rel err %.3e  (< %.0e, %zu coords)\n",
                      it.passed() ? "ok" : "FAIL", it.name.c_str(), it.kind.c_str(), it.max_rel_error, it.threshold,
                      it.coords);
        log << line;
        ok = ok && it.passed();
    }
    log << "covered " << registered_ops().size() << " registered ops; " << items.size() << " items, "
        << (ok ? "all passed" : "FAILURES") << "\n";
    return ok ? 0 : 1;
}

}  // namespace ecf::harness
