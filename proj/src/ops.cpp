#include "ecf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ecf {

namespace {

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(op) + " expects a rank-" + std::to_string(rank) + " tensor, got " +
                         shape_str(x.shape()));
    }
}

// Flat index into b for every flat index of a, under singleton expansion.
std::vector<std::size_t> broadcast_map(const Shape& a, const Shape& b) {
    const auto b_strides = strides_of(b);
    const std::size_t rank = a.size();
    const std::size_t n = numel_of(a);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> coord(rank, 0);
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        map[i] = j;
        // odometer increment over a's extents, tracking b's offset
        for (std::size_t axis = rank; axis-- > 0;) {
            if (b[axis] != 1) j += b_strides[axis];
            if (++coord[axis] < a[axis]) break;
            if (b[axis] != 1) j -= a[axis] * b_strides[axis];
            coord[axis] = 0;
        }
    }
    return map;
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    bool ok = a.rank() == b.rank();
    for (std::size_t axis = 0; ok && axis < a.rank(); ++axis) {
        ok = b.shape()[axis] == a.shape()[axis] || b.shape()[axis] == 1;
    }
    if (!ok) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are incompatible");
    }
}

double sigmoid_scalar(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

const char* to_string(UnaryKind kind) {
    switch (kind) {
        case UnaryKind::relu: return "relu";
        case UnaryKind::sigmoid: return "sigmoid";
        case UnaryKind::exp: return "exp";
        case UnaryKind::log: return "log";
        case UnaryKind::sqrt: return "sqrt";
        case UnaryKind::abs: return "abs";
        case UnaryKind::neg: return "neg";
        case UnaryKind::reciprocal: return "reciprocal";
    }
    return "?";
}

const char* to_string(BinaryKind kind) {
    switch (kind) {
        case BinaryKind::add: return "add";
        case BinaryKind::sub: return "sub";
        case BinaryKind::mul: return "mul";
        case BinaryKind::div: return "div";
    }
    return "?";
}

Tensor unary(UnaryKind kind, const Tensor& x) {
    const auto in = x.data();
    const std::size_t n = in.size();
    for (std::size_t i = 0; i < n; ++i) {
        if ((kind == UnaryKind::log || kind == UnaryKind::sqrt) && !(in[i] > 0.0)) {
            throw DomainError(std::string(to_string(kind)) + " of non-positive value " + std::to_string(in[i]), i);
        }
        if (kind == UnaryKind::reciprocal && in[i] == 0.0) throw DomainError("reciprocal of zero", i);
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = in[i];
        switch (kind) {
            case UnaryKind::relu: out[i] = v > 0.0 ? v : 0.0; break;
            case UnaryKind::sigmoid: out[i] = sigmoid_scalar(v); break;
            case UnaryKind::exp: out[i] = std::exp(v); break;
            case UnaryKind::log: out[i] = std::log(v); break;
            case UnaryKind::sqrt: out[i] = std::sqrt(v); break;
            case UnaryKind::abs: out[i] = std::fabs(v); break;
            case UnaryKind::neg: out[i] = -v; break;
            case UnaryKind::reciprocal: out[i] = 1.0 / v; break;
        }
    }
    return record_op(to_string(kind), x.shape(), std::move(out), {x},
                     [kind, x](std::span<const double> g, std::span<std::span<double>> grads) {
                         auto gx = grads[0];
                         if (gx.empty()) return;
                         const auto in = x.data();
                         for (std::size_t i = 0; i < in.size(); ++i) {
                             const double v = in[i];
                             double d = 0.0;
                             switch (kind) {
                                 case UnaryKind::relu: d = v > 0.0 ? 1.0 : 0.0; break;
                                 case UnaryKind::sigmoid: {
                                     const double s = sigmoid_scalar(v);
                                     d = s * (1.0 - s);
                                     break;
                                 }
                                 case UnaryKind::exp: d = std::exp(v); break;
                                 case UnaryKind::log: d = 1.0 / v; break;
                                 case UnaryKind::sqrt: d = 0.5 / std::sqrt(v); break;
                                 case UnaryKind::abs: d = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); break;
                                 case UnaryKind::neg: d = -1.0; break;
                                 case UnaryKind::reciprocal: d = -1.0 / (v * v); break;
                             }
                             gx[i] += g[i] * d;
                         }
                     });
}

Tensor relu(const Tensor& x) { return unary(UnaryKind::relu, x); }
Tensor sigmoid(const Tensor& x) { return unary(UnaryKind::sigmoid, x); }
Tensor exp(const Tensor& x) { return unary(UnaryKind::exp, x); }
Tensor log(const Tensor& x) { return unary(UnaryKind::log, x); }
Tensor sqrt(const Tensor& x) { return unary(UnaryKind::sqrt, x); }
Tensor abs(const Tensor& x) { return unary(UnaryKind::abs, x); }
Tensor neg(const Tensor& x) { return unary(UnaryKind::neg, x); }
Tensor reciprocal(const Tensor& x) { return unary(UnaryKind::reciprocal, x); }

Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
    check_broadcast(a, b, to_string(kind));
    const bool expand = !same_shape(a, b);
    std::vector<std::size_t> map;
    if (expand) map = broadcast_map(a.shape(), b.shape());
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t n = av.size();
    if (kind == BinaryKind::div) {
        for (std::size_t j = 0; j < bv.size(); ++j) {
            if (bv[j] == 0.0) throw DomainError("division by zero", j);
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[i];
        const double y = bv[expand ? map[i] : i];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
            case BinaryKind::div: out[i] = x / y; break;
        }
    }
    return record_op(to_string(kind), a.shape(), std::move(out), {a, b},
                     [kind, a, b, map = std::move(map)](std::span<const double> g,
                                                        std::span<std::span<double>> grads) {
                         auto ga = grads[0];
                         auto gb = grads[1];
                         const auto av = a.data();
                         const auto bv = b.data();
                         const bool expand = !map.empty();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             const std::size_t j = expand ? map[i] : i;
                             double da = 0.0;
                             double db = 0.0;
                             switch (kind) {
                                 case BinaryKind::add: da = 1.0; db = 1.0; break;
                                 case BinaryKind::sub: da = 1.0; db = -1.0; break;
                                 case BinaryKind::mul: da = bv[j]; db = av[i]; break;
                                 case BinaryKind::div:
                                     da = 1.0 / bv[j];
                                     db = -av[i] / (bv[j] * bv[j]);
                                     break;
                             }
                             if (!ga.empty()) ga[i] += g[i] * da;
                             if (!gb.empty()) gb[j] += g[i] * db;
                         }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::div, a, b); }

Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v += c;
    return record_op("add_scalar", x.shape(), std::move(out), {x},
                     [](std::span<const double> g, std::span<std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i];
                     });
}

Tensor mul_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= c;
    return record_op("mul_scalar", x.shape(), std::move(out), {x},
                     [c](std::span<const double> g, std::span<std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i] * c;
                     });
}

Tensor square(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= v;
    return record_op("square", x.shape(), std::move(out), {x},
                     [x](std::span<const double> g, std::span<std::span<double>> grads) {
                         const auto in = x.data();
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += 2.0 * in[i] * g[i];
                     });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = std::clamp(v, lo, hi);
    return record_op("clamp", x.shape(), std::move(out), {x},
                     [x, lo, hi](std::span<const double> g, std::span<std::span<double>> grads) {
                         const auto in = x.data();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             if (in[i] >= lo && in[i] <= hi) grads[0][i] += g[i];
                         }
                     });
}

Tensor softmax(const Tensor& x, const std::vector<std::size_t>& axes) {
    if (axes.empty()) throw std::invalid_argument("softmax: empty axis set");
    std::vector<bool> normalized(x.rank(), false);
    for (std::size_t axis : axes) {
        if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
        normalized[axis] = true;
    }
    // group id = flat index over the axes that are not normalized
    Shape group_shape = x.shape();
    for (std::size_t axis = 0; axis < x.rank(); ++axis) {
        if (normalized[axis]) group_shape[axis] = 1;
    }
    const auto group = broadcast_map(x.shape(), group_shape);
    const std::size_t n_groups = numel_of(group_shape);
    const auto in = x.data();

    std::vector<double> max_v(n_groups, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < in.size(); ++i) max_v[group[i]] = std::max(max_v[group[i]], in[i]);
    std::vector<double> out(in.size());
    std::vector<double> total(n_groups, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - max_v[group[i]]);
        total[group[i]] += out[i];
    }
    for (std::size_t i = 0; i < in.size(); ++i) out[i] /= total[group[i]];

    std::vector<double> y = out;
    return record_op("softmax", x.shape(), std::move(out), {x},
                     [group, n_groups, y = std::move(y)](std::span<const double> g,
                                                         std::span<std::span<double>> grads) {
                         std::vector<double> dot(n_groups, 0.0);
                         for (std::size_t i = 0; i < g.size(); ++i) dot[group[i]] += g[i] * y[i];
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += y[i] * (g[i] - dot[group[i]]);
                     });
}

Moments reduce_moments(const Tensor& x) {
    require_rank(x, 4, "reduce_moments");
    const std::size_t nc = x.dim(0) * x.dim(1);
    const std::size_t m = x.dim(2) * x.dim(3);
    const auto in = x.data();
    std::vector<double> mu(nc, 0.0);
    std::vector<double> var(nc, 0.0);
    for (std::size_t s = 0; s < nc; ++s) {
        const double* p = in.data() + s * m;
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += p[i];
        mu[s] = acc / static_cast<double>(m);
        double sq = 0.0;
        for (std::size_t i = 0; i < m; ++i) sq += (p[i] - mu[s]) * (p[i] - mu[s]);
        var[s] = sq / static_cast<double>(m);
    }
    const Shape out_shape{x.dim(0), x.dim(1), 1, 1};
    Tensor mean_t = record_op("moments_mean", out_shape, mu, {x},
                              [m](std::span<const double> g, std::span<std::span<double>> grads) {
                                  const double inv = 1.0 / static_cast<double>(m);
                                  for (std::size_t s = 0; s < g.size(); ++s) {
                                      for (std::size_t i = 0; i < m; ++i) grads[0][s * m + i] += g[s] * inv;
                                  }
                              });
    // d var / d x_i = 2 (x_i - mu) / M; the mu dependence cancels.
    Tensor var_t = record_op("moments_var", out_shape, std::move(var), {x},
                             [x, m, mu](std::span<const double> g, std::span<std::span<double>> grads) {
                                 const auto in = x.data();
                                 const double scale = 2.0 / static_cast<double>(m);
                                 for (std::size_t s = 0; s < g.size(); ++s) {
                                     for (std::size_t i = 0; i < m; ++i) {
                                         grads[0][s * m + i] += g[s] * scale * (in[s * m + i] - mu[s]);
                                     }
                                 }
                             });
    return {mean_t, var_t};
}

namespace {

struct ConvGeometry {
    std::size_t n, c_in, h, w, c_out, k, stride, pad, h_out, w_out;
    std::size_t patch() const { return c_in * k * k; }
    std::size_t pixels() const { return h_out * w_out; }
    bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

// col is (c_in * k * k, ld); one sample fills columns [0, h_out * w_out).
void im2col(const ConvGeometry& g, const double* x, double* col, std::size_t ld) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = col + ((c * g.k + ky) * g.k + kx) * ld;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                            ix < static_cast<std::ptrdiff_t>(g.w);
                        row[oy * g.w_out + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const ConvGeometry& g, const double* col, std::size_t ld, double* dx) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = col + ((c * g.k + ky) * g.k + kx) * ld;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        dx[(c * g.h + iy) * g.w + ix] += row[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

// y += sum_r a[r] * x[r] over rows of length n, four rows per pass.
void accumulate_rows(double* y, const double* a, std::size_t a_stride, const double* x, std::size_t x_stride,
                     std::size_t rows, std::size_t n) {
    std::size_t r = 0;
    for (; r + 4 <= rows; r += 4) {
        const double a0 = a[r * a_stride], a1 = a[(r + 1) * a_stride];
        const double a2 = a[(r + 2) * a_stride], a3 = a[(r + 3) * a_stride];
        const double* x0 = x + r * x_stride;
        const double* x1 = x0 + x_stride;
        const double* x2 = x1 + x_stride;
        const double* x3 = x2 + x_stride;
        for (std::size_t p = 0; p < n; ++p) y[p] += (a0 * x0[p] + a1 * x1[p]) + (a2 * x2[p] + a3 * x3[p]);
    }
    for (; r < rows; ++r) {
        const double ar = a[r * a_stride];
        const double* xr = x + r * x_stride;
        for (std::size_t p = 0; p < n; ++p) y[p] += ar * xr[p];
    }
}

double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t p = 0;
    for (; p + 4 <= n; p += 4) {
        s0 += a[p] * b[p];
        s1 += a[p + 1] * b[p + 1];
        s2 += a[p + 2] * b[p + 2];
        s3 += a[p + 3] * b[p + 3];
    }
    for (; p < n; ++p) s0 += a[p] * b[p];
    return (s0 + s1) + (s2 + s3);
}

// Whole-batch column matrix (K, N * P) so the GEMM loops run over N * P.
std::vector<double> batch_columns(const ConvGeometry& g, const double* x) {
    const std::size_t K = g.patch();
    const std::size_t P = g.pixels();
    const std::size_t ld = g.n * P;
    std::vector<double> col(K * ld);
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* src = x + n * g.c_in * g.h * g.w;
        if (g.direct()) {
            for (std::size_t kk = 0; kk < K; ++kk) std::copy(src + kk * P, src + (kk + 1) * P, col.data() + kk * ld + n * P);
        } else {
            im2col(g, src, col.data() + n * P, ld);
        }
    }
    return col;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias, Conv2dOptions opts) {
    require_rank(x, 4, "conv2d input");
    require_rank(weight, 4, "conv2d weight");
    if (weight.dim(1) != x.dim(1)) {
        throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
    }
    if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: kernel must be square");
    if (opts.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), opts.stride, opts.padding,
                   0, 0};
    if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
    }
    g.h_out = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.w_out = (g.w + 2 * g.pad - g.k) / g.stride + 1;
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.c_out)) {
        throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(g.c_out) + " output channels");
    }

    const std::size_t K = g.patch();
    const std::size_t P = g.pixels();
    const std::size_t ld = g.n * P;
    const auto wv = weight.data();
    const std::vector<double> col = batch_columns(g, x.data().data());
    std::vector<double> prod(g.c_out * ld, 0.0);
    for (std::size_t co = 0; co < g.c_out; ++co) {
        accumulate_rows(prod.data() + co * ld, wv.data() + co * K, 1, col.data(), ld, K, ld);
    }
    std::vector<double> out(g.n * g.c_out * P);
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t co = 0; co < g.c_out; ++co) {
            const double b = bias ? bias->data()[co] : 0.0;
            const double* src = prod.data() + co * ld + n * P;
            double* dst = out.data() + (n * g.c_out + co) * P;
            for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
        }
    }

    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return record_op("conv2d", {g.n, g.c_out, g.h_out, g.w_out}, std::move(out), std::move(inputs),
                     [g, x, weight](std::span<const double> gout, std::span<std::span<double>> grads) {
                         const std::size_t K = g.patch();
                         const std::size_t P = g.pixels();
                         const std::size_t ld = g.n * P;
                         auto gx = grads[0];
                         auto gw = grads[1];
                         // gout regrouped as (Cout, N * P)
                         std::vector<double> gt(g.c_out * ld);
                         for (std::size_t n = 0; n < g.n; ++n) {
                             for (std::size_t co = 0; co < g.c_out; ++co) {
                                 const double* src = gout.data() + (n * g.c_out + co) * P;
                                 std::copy(src, src + P, gt.data() + co * ld + n * P);
                             }
                         }
                         if (grads.size() > 2 && !grads[2].empty()) {
                             for (std::size_t co = 0; co < g.c_out; ++co) {
                                 double acc = 0.0;
                                 for (std::size_t p = 0; p < ld; ++p) acc += gt[co * ld + p];
                                 grads[2][co] += acc;
                             }
                         }
                         if (!gw.empty()) {
                             const std::vector<double> col = batch_columns(g, x.data().data());
                             for (std::size_t co = 0; co < g.c_out; ++co) {
                                 for (std::size_t kk = 0; kk < K; ++kk) {
                                     gw[co * K + kk] += dot(gt.data() + co * ld, col.data() + kk * ld, ld);
                                 }
                             }
                         }
                         if (!gx.empty()) {
                             const auto wv = weight.data();
                             std::vector<double> dcol(K * ld, 0.0);
                             for (std::size_t kk = 0; kk < K; ++kk) {
                                 accumulate_rows(dcol.data() + kk * ld, wv.data() + kk, K, gt.data(), ld, g.c_out, ld);
                             }
                             for (std::size_t n = 0; n < g.n; ++n) {
                                 double* dx = gx.data() + n * g.c_in * g.h * g.w;
                                 if (g.direct()) {
                                     for (std::size_t kk = 0; kk < K; ++kk) {
                                         const double* src = dcol.data() + kk * ld + n * P;
                                         for (std::size_t p = 0; p < P; ++p) dx[kk * P + p] += src[p];
                                     }
                                 } else {
                                     col2im(g, dcol.data() + n * P, ld, dx);
                                 }
                             }
                         }
                     });
}

BatchNormState BatchNormState::fresh(std::size_t channels) {
    return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0), 0.1};
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode,
                   double eps) {
    require_rank(x, 4, "batchnorm2d");
    if (!(eps > 0.0)) throw std::invalid_argument("batchnorm2d: eps must be positive");
    const std::size_t N = x.dim(0);
    const std::size_t C = x.dim(1);
    const std::size_t HW = x.dim(2) * x.dim(3);
    const std::size_t m = N * HW;
    if (m == 0) throw ShapeError("batchnorm2d: empty batch");
    for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
        if (t->rank() != 1 || t->dim(0) != C) {
            throw ShapeError("batchnorm2d: per-channel tensor " + shape_str(t->shape()) + " does not match " +
                             std::to_string(C) + " channels");
        }
    }
    const auto xv = x.data();
    std::vector<double> mu(C, 0.0);
    std::vector<double> invstd(C, 0.0);
    if (mode == Mode::train) {
        auto rm = state.running_mean.mutable_data();
        auto rv = state.running_var.mutable_data();
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* p = xv.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) acc += p[i];
            }
            mu[c] = acc / static_cast<double>(m);
            double sq = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* p = xv.data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mu[c]) * (p[i] - mu[c]);
            }
            const double var = sq / static_cast<double>(m);
            invstd[c] = 1.0 / std::sqrt(var + eps);
            const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
            rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mu[c];
            rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
        }
    } else {
        const auto rm = state.running_mean.data();
        const auto rv = state.running_var.data();
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = rm[c];
            invstd[c] = 1.0 / std::sqrt(rv[c] + eps);
        }
    }

    const auto gv = gamma.data();
    const auto bv = beta.data();
    std::vector<double> out(xv.size());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                out[base + i] = gv[c] * (xv[base + i] - mu[c]) * invstd[c] + bv[c];
            }
        }
    }

    const bool batch_stats = mode == Mode::train;
    return record_op("batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, mu, invstd, N, C, HW, m, batch_stats](std::span<const double> g,
                                                                      std::span<std::span<double>> grads) {
                         const auto xv = x.data();
                         const auto gv = gamma.data();
                         for (std::size_t c = 0; c < C; ++c) {
                             double sum_g = 0.0;
                             double sum_gxhat = 0.0;
                             for (std::size_t n = 0; n < N; ++n) {
                                 const std::size_t base = (n * C + c) * HW;
                                 for (std::size_t i = 0; i < HW; ++i) {
                                     const double xhat = (xv[base + i] - mu[c]) * invstd[c];
                                     sum_g += g[base + i];
                                     sum_gxhat += g[base + i] * xhat;
                                 }
                             }
                             if (!grads[1].empty()) grads[1][c] += sum_gxhat;
                             if (!grads[2].empty()) grads[2][c] += sum_g;
                             if (grads[0].empty()) continue;
                             const double scale = gv[c] * invstd[c];
                             const double md = static_cast<double>(m);
                             for (std::size_t n = 0; n < N; ++n) {
                                 const std::size_t base = (n * C + c) * HW;
                                 for (std::size_t i = 0; i < HW; ++i) {
                                     if (batch_stats) {
                                         const double xhat = (xv[base + i] - mu[c]) * invstd[c];
                                         grads[0][base + i] +=
                                             scale * (g[base + i] - sum_g / md - xhat * sum_gxhat / md);
                                     } else {
                                         grads[0][base + i] += scale * g[base + i];
                                     }
                                 }
                             }
                         }
                     });
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
    if (mode == Mode::eval || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (double& v : mask) v = rng.uniform() < p ? 0.0 : keep_scale;
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return record_op("dropout", x.shape(), std::move(out), {x},
                     [mask = std::move(mask)](std::span<const double> g, std::span<std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i] * mask[i];
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
    require_rank(x, 2, "linear input");
    require_rank(weight, 2, "linear weight");
    const std::size_t N = x.dim(0);
    const std::size_t in = x.dim(1);
    const std::size_t outn = weight.dim(0);
    if (weight.dim(1) != in) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != outn)) {
        throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const auto xv = x.data();
    const auto wv = weight.data();
    std::vector<double> out(N * outn);
    for (std::size_t n = 0; n < N; ++n) {
        const double* xr = xv.data() + n * in;
        for (std::size_t o = 0; o < outn; ++o) {
            const double* wr = wv.data() + o * in;
            double acc = bias ? bias->data()[o] : 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            out[n * outn + o] = acc;
        }
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return record_op("linear", {N, outn}, std::move(out), std::move(inputs),
                     [x, weight, N, in, outn](std::span<const double> g, std::span<std::span<double>> grads) {
                         const auto xv = x.data();
                         const auto wv = weight.data();
                         for (std::size_t n = 0; n < N; ++n) {
                             const double* gr = g.data() + n * outn;
                             const double* xr = xv.data() + n * in;
                             for (std::size_t o = 0; o < outn; ++o) {
                                 const double go = gr[o];
                                 if (!grads[0].empty()) {
                                     double* gx = grads[0].data() + n * in;
                                     const double* wr = wv.data() + o * in;
                                     for (std::size_t i = 0; i < in; ++i) gx[i] += go * wr[i];
                                 }
                                 if (!grads[1].empty()) {
                                     double* gw = grads[1].data() + o * in;
                                     for (std::size_t i = 0; i < in; ++i) gw[i] += go * xr[i];
                                 }
                                 if (grads.size() > 2 && !grads[2].empty()) grads[2][o] += go;
                             }
                         }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no tensors");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const Tensor& t : parts) {
        bool ok = t.rank() == first.size();
        for (std::size_t a = 0; ok && a < first.size(); ++a) ok = a == axis || t.shape()[a] == first[a];
        if (!ok) {
            throw ShapeError("concat: " + shape_str(t.shape()) + " does not match " + shape_str(first) +
                             " off axis " + std::to_string(axis));
        }
        out_shape[axis] += t.shape()[axis];
    }
    std::size_t outer = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];

    std::vector<std::size_t> widths;
    for (const Tensor& t : parts) widths.push_back(t.shape()[axis] * inner);
    const std::size_t row = out_shape[axis] * inner;
    std::vector<double> out(outer * row);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src.data() + o * widths[k], widths[k], out.data() + o * row + offset);
        }
        offset += widths[k];
    }
    return record_op("concat", out_shape, std::move(out), parts,
                     [outer, row, widths](std::span<const double> g, std::span<std::span<double>> grads) {
                         std::size_t offset = 0;
                         for (std::size_t k = 0; k < widths.size(); ++k) {
                             if (!grads[k].empty()) {
                                 for (std::size_t o = 0; o < outer; ++o) {
                                     const double* src = g.data() + o * row + offset;
                                     double* dst = grads[k].data() + o * widths[k];
                                     for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
                                 }
                             }
                             offset += widths[k];
                         }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return record_op("reshape", std::move(shape), x.to_vector(), {x},
                     [](std::span<const double> g, std::span<std::span<double>> grads) {
                         for (std::size_t i = 0; i < g.size(); ++i) grads[0][i] += g[i];
                     });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.dim(0), x.numel() / x.dim(0)}); }

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
        throw ShapeError("narrow: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range on axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    std::size_t outer = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
    const std::size_t row = x.dim(axis) * inner;
    const std::size_t width = length * inner;
    const std::size_t offset = start * inner;
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<double> out(outer * width);
    const auto src = x.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src.data() + o * row + offset, width, out.data() + o * width);
    return record_op("narrow", out_shape, std::move(out), {x},
                     [outer, row, width, offset](std::span<const double> g, std::span<std::span<double>> grads) {
                         for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < width; ++i) grads[0][o * row + offset + i] += g[o * width + i];
                         }
                     });
}

Tensor mean_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    require_rank(x, 4, "mean_pool2d");
    if (out_h == 0 || out_w == 0 || out_h > x.dim(2) || out_w > x.dim(3)) {
        throw ShapeError("mean_pool2d: cannot pool " + shape_str(x.shape()) + " to " + std::to_string(out_h) + "x" +
                         std::to_string(out_w));
    }
    const std::size_t NC = x.dim(0) * x.dim(1);
    const std::size_t H = x.dim(2);
    const std::size_t W = x.dim(3);
    // bin i covers [floor(i*H/out), ceil((i+1)*H/out))
    auto bins = [](std::size_t in, std::size_t out) {
        std::vector<std::pair<std::size_t, std::size_t>> b(out);
        for (std::size_t i = 0; i < out; ++i) b[i] = {i * in / out, ((i + 1) * in + out - 1) / out};
        return b;
    };
    const auto ybins = bins(H, out_h);
    const auto xbins = bins(W, out_w);
    const auto in = x.data();
    std::vector<double> out(NC * out_h * out_w);
    for (std::size_t s = 0; s < NC; ++s) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                double acc = 0.0;
                for (std::size_t y = ybins[oy].first; y < ybins[oy].second; ++y) {
                    for (std::size_t xx = xbins[ox].first; xx < xbins[ox].second; ++xx) acc += in[(s * H + y) * W + xx];
                }
                const double count = static_cast<double>((ybins[oy].second - ybins[oy].first) *
                                                         (xbins[ox].second - xbins[ox].first));
                out[(s * out_h + oy) * out_w + ox] = acc / count;
            }
        }
    }
    return record_op("mean_pool2d", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                     [NC, H, W, out_h, out_w, ybins, xbins](std::span<const double> g,
                                                            std::span<std::span<double>> grads) {
                         for (std::size_t s = 0; s < NC; ++s) {
                             for (std::size_t oy = 0; oy < out_h; ++oy) {
                                 for (std::size_t ox = 0; ox < out_w; ++ox) {
                                     const double count = static_cast<double>(
                                         (ybins[oy].second - ybins[oy].first) * (xbins[ox].second - xbins[ox].first));
                                     const double share = g[(s * out_h + oy) * out_w + ox] / count;
                                     for (std::size_t y = ybins[oy].first; y < ybins[oy].second; ++y) {
                                         for (std::size_t xx = xbins[ox].first; xx < xbins[ox].second; ++xx) {
                                             grads[0][(s * H + y) * W + xx] += share;
                                         }
                                     }
                                 }
                             }
                         }
                     });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return record_op("sum", {1}, {acc}, {x}, [](std::span<const double> g, std::span<std::span<double>> grads) {
        for (double& v : grads[0]) v += g[0];
    });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

}  // namespace ecf
