// SPDX-License-Identifier: Apache-2.0

#include "mote/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <string>

namespace mote {

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
}

bool tracking(const std::vector<Tensor>& inputs) {
    if (!grad_enabled()) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor& t) { return t.requires_grad(); });
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " +
                             shape_to_string(a.shape()));
    }
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " +
                             shape_to_string(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

std::size_t last_axis_width(const char* op, const Tensor& x) {
    if (x.rank() == 0) throw DimensionError(std::string(op) + ": scalar input");
    return x.shape().back();
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    const bool track = tracking({&x});
    Tensor y(x.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, df]() mutable {
            const auto gy = y.grad();
            const auto xv = x.data();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i]);
        });
    }
    return y;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()));
    }
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> C(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = C.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    add_macs(static_cast<std::uint64_t>(m) * k * n);
    const bool track = tracking({&a, &b});
    Tensor c({m, n}, std::move(C), track);
    if (track) {
        Tape::current().record({a, b}, c, [a, b, c, m, k, n]() mutable {
            const auto G = c.grad();
            if (a.requires_grad()) {
                const auto Bv = b.data();
                auto GA = a.mutable_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = G.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = Bv.data() + p * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        GA[i * k + p] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                const auto Av = a.data();
                auto GB = b.mutable_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = G.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = Av[i * k + p];
                        double* gbrow = GB.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    const std::size_t r = a.rows(), c = a.cols();
    const auto A = a.data();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
    const bool track = tracking({&a});
    Tensor t({c, r}, std::move(out), track);
    if (track) {
        Tape::current().record({a}, t, [a, t, r, c]() mutable {
            const auto G = t.grad();
            auto GA = a.mutable_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) GA[i * c + j] += G[j * r + i];
        });
    }
    return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
    const bool track = tracking({&a, &b});
    Tensor y(a.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({a, b}, y, [a, b, y]() mutable {
            const auto G = y.grad();
            if (a.requires_grad()) {
                auto ga = a.mutable_grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += G[i];
            }
            if (b.requires_grad()) {
                auto gb = b.mutable_grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += G[i];
            }
        });
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
    const bool track = tracking({&a, &b});
    Tensor y(a.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({a, b}, y, [a, b, y]() mutable {
            const auto G = y.grad();
            if (a.requires_grad()) {
                auto ga = a.mutable_grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += G[i];
            }
            if (b.requires_grad()) {
                auto gb = b.mutable_grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= G[i];
            }
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    const bool track = tracking({&a, &b});
    Tensor y(a.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({a, b}, y, [a, b, y]() mutable {
            const auto G = y.grad();
            if (a.requires_grad()) {
                const auto Bv = b.data();
                auto ga = a.mutable_grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += G[i] * Bv[i];
            }
            if (b.requires_grad()) {
                const auto Av = a.data();
                auto gb = b.mutable_grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += G[i] * Av[i];
            }
        });
    }
    return y;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_matrix("add_bias", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (bias.rank() != 1 || bias.dim(0) != c) {
        throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) +
                             " does not match rows of " + shape_to_string(x.shape()));
    }
    const auto X = x.data();
    const auto Bv = bias.data();
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] + Bv[j];
    const bool track = tracking({&x, &bias});
    Tensor y(x.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({x, bias}, y, [x, bias, y, r, c]() mutable {
            const auto G = y.grad();
            if (x.requires_grad()) {
                auto gx = x.mutable_grad();
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += G[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.mutable_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb[j] += G[i * c + j];
            }
        });
    }
    return y;
}

Tensor scale(const Tensor& x, double factor) {
    return unary(
        x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const bool track = tracking({&x});
    Tensor y = Tensor::scalar(acc, track);
    if (track) {
        Tape::current().record({x}, y, [x, y]() mutable {
            const double g = y.grad()[0];
            auto gx = x.mutable_grad();
            for (auto& v : gx) v += g;
        });
    }
    return y;
}

Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean_all: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis) {
    const auto s = split_axis(x.shape(), axis);
    if (s.n == 0) throw DimensionError("mean: empty axis");
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    const auto X = x.data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t a = 0; a < s.n; ++a)
            for (std::size_t i = 0; i < s.inner; ++i)
                out[o * s.inner + i] += X[(o * s.n + a) * s.inner + i];
    const double inv = 1.0 / static_cast<double>(s.n);
    for (auto& v : out) v *= inv;
    const bool track = tracking({&x});
    Tensor y(std::move(out_shape), std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, s, inv]() mutable {
            const auto G = y.grad();
            auto gx = x.mutable_grad();
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t a = 0; a < s.n; ++a)
                    for (std::size_t i = 0; i < s.inner; ++i)
                        gx[(o * s.n + a) * s.inner + i] += G[o * s.inner + i] * inv;
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                             shape_to_string(shape));
    }
    const auto X = x.data();
    const bool track = tracking({&x});
    Tensor y(std::move(shape), std::vector<double>(X.begin(), X.end()), track);
    if (track) {
        Tape::current().record({x}, y, [x, y]() mutable {
            const auto G = y.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += G[i];
        });
    }
    return y;
}

Tensor tile_rows(const Tensor& x, std::size_t times) {
    require_matrix("tile_rows", x);
    const auto X = x.data();
    std::vector<double> out;
    out.reserve(X.size() * times);
    for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), X.begin(), X.end());
    const bool track = tracking({&x});
    Tensor y({x.rows() * times, x.cols()}, std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, times]() mutable {
            const auto G = y.grad();
            auto gx = x.mutable_grad();
            const std::size_t n = gx.size();
            for (std::size_t t = 0; t < times; ++t)
                for (std::size_t i = 0; i < n; ++i) gx[i] += G[t * n + i];
        });
    }
    return y;
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (first.empty()) throw DimensionError("concat: scalar inputs");
    Shape out_shape = first;
    out_shape[0] = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        if (p.rank() != first.size() ||
            !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
            throw DimensionError("concat: " + shape_to_string(p.shape()) + " does not stack with " +
                                 shape_to_string(first));
        }
        out_shape[0] += p.shape()[0];
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    const bool track = tracking(parts);
    Tensor y(std::move(out_shape), std::move(out), track);
    if (track) {
        Tape::current().record(parts, y, [parts, y]() mutable {
            const auto G = y.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t n = p.numel();
                if (p.requires_grad()) {
                    auto gp = p.mutable_grad();
                    for (std::size_t i = 0; i < n; ++i) gp[i] += G[offset + i];
                }
                offset += n;
            }
        });
    }
    return y;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_matrix("gather_rows", x);
    const std::size_t c = x.cols();
    const auto X = x.data();
    std::vector<double> out;
    out.reserve(rows.size() * c);
    for (auto r : rows) {
        if (r >= x.rows()) {
            throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " +
                                 shape_to_string(x.shape()));
        }
        out.insert(out.end(), X.begin() + static_cast<std::ptrdiff_t>(r * c),
                   X.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    }
    const bool track = tracking({&x});
    Tensor y({rows.size(), c}, std::move(out), track);
    if (track) {
        std::vector<std::size_t> idx(rows.begin(), rows.end());
        Tape::current().record({x}, y, [x, y, idx, c]() mutable {
            const auto G = y.grad();
            auto gx = x.mutable_grad();
            for (std::size_t k = 0; k < idx.size(); ++k)
                for (std::size_t j = 0; j < c; ++j) gx[idx[k] * c + j] += G[k * c + j];
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t c = last_axis_width("layer_norm", x);
    if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
        throw DimensionError("layer_norm: gain " + shape_to_string(gain.shape()) + " / bias " +
                             shape_to_string(bias.shape()) + " do not match " +
                             shape_to_string(x.shape()));
    }
    const std::size_t r = x.numel() / c;
    const auto X = x.data();
    const auto Gn = gain.data();
    const auto Bn = bias.data();
    std::vector<double> xhat(X.size());
    std::vector<double> inv_std(r);
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = X.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mu) * inv_std[i];
            out[i * c + j] = xhat[i * c + j] * Gn[j] + Bn[j];
        }
    }
    const bool track = tracking({&x, &gain, &bias});
    Tensor y(x.shape(), std::move(out), track);
    if (track) {
        Tape::current().record(
            {x, gain, bias}, y,
            [x, gain, bias, y, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c]() mutable {
                const auto G = y.grad();
                const auto Gn = gain.data();
                if (gain.requires_grad()) {
                    auto gg = gain.mutable_grad();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gg[j] += G[i * c + j] * xhat[i * c + j];
                }
                if (bias.requires_grad()) {
                    auto gb = bias.mutable_grad();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gb[j] += G[i * c + j];
                }
                if (x.requires_grad()) {
                    auto gx = x.mutable_grad();
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t i = 0; i < r; ++i) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                            const double d = G[i * c + j] * Gn[j];
                            m1 += d;
                            m2 += d * xhat[i * c + j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for (std::size_t j = 0; j < c; ++j) {
                            const double d = G[i * c + j] * Gn[j];
                            gx[i * c + j] += inv_std[i] * (d - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            });
    }
    return y;
}

Tensor gelu(const Tensor& x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    return unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + a * v * v * v))); },
        [](double v) {
            const double u = k * (v + a * v * v * v);
            const double th = std::tanh(u);
            const double du = k * (1.0 + 3.0 * a * v * v);
            return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto s = split_axis(x.shape(), axis);
    const auto X = x.data();
    std::vector<double> out(X.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t a = 0; a < s.n; ++a) mx = std::max(mx, X[at(a)]);
            double z = 0.0;
            for (std::size_t a = 0; a < s.n; ++a) {
                out[at(a)] = std::exp(X[at(a)] - mx);
                z += out[at(a)];
            }
            for (std::size_t a = 0; a < s.n; ++a) out[at(a)] /= z;
        }
    }
    const bool track = tracking({&x});
    Tensor y(x.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, s]() mutable {
            const auto G = y.grad();
            const auto P = y.data();
            auto gx = x.mutable_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
                    double dot = 0.0;
                    for (std::size_t a = 0; a < s.n; ++a) dot += G[at(a)] * P[at(a)];
                    for (std::size_t a = 0; a < s.n; ++a) gx[at(a)] += P[at(a)] * (G[at(a)] - dot);
                }
            }
        });
    }
    return y;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
    const auto s = split_axis(x.shape(), axis);
    const auto X = x.data();
    std::vector<double> out(X.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t a = 0; a < s.n; ++a) mx = std::max(mx, X[at(a)]);
            double z = 0.0;
            for (std::size_t a = 0; a < s.n; ++a) z += std::exp(X[at(a)] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t a = 0; a < s.n; ++a) out[at(a)] = X[at(a)] - lse;
        }
    }
    const bool track = tracking({&x});
    Tensor y(x.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, s]() mutable {
            const auto G = y.grad();
            const auto L = y.data();
            auto gx = x.mutable_grad();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    auto at = [&](std::size_t a) { return (o * s.n + a) * s.inner + i; };
                    double gsum = 0.0;
                    for (std::size_t a = 0; a < s.n; ++a) gsum += G[at(a)];
                    for (std::size_t a = 0; a < s.n; ++a)
                        gx[at(a)] += G[at(a)] - std::exp(L[at(a)]) * gsum;
                }
            }
        });
    }
    return y;
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
    if (logits.rank() != 1) {
        throw DimensionError("cross_entropy: expected rank-1 logits, got " +
                             shape_to_string(logits.shape()));
    }
    const std::size_t t = target;
    return cross_entropy(reshape(logits, {1, logits.dim(0)}), std::span<const std::size_t>(&t, 1));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_matrix("cross_entropy", logits);
    const std::size_t b = logits.rows(), c = logits.cols();
    if (targets.size() != b) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for logits " + shape_to_string(logits.shape()));
    }
    for (auto t : targets) {
        if (t >= c) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                                    " outside " + std::to_string(c) + " classes");
        }
    }
    const Tensor logp = log_softmax(logits, 1);
    const auto L = logp.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < b; ++i) acc -= L[i * c + targets[i]];
    const double inv_b = 1.0 / static_cast<double>(b);
    const bool track = tracking({&logp});
    Tensor y = Tensor::scalar(acc * inv_b, track);
    if (track) {
        std::vector<std::size_t> idx(targets.begin(), targets.end());
        Tape::current().record({logp}, y, [logp, y, idx, c, inv_b]() mutable {
            const double g = y.grad()[0];
            auto gl = logp.mutable_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) gl[i * c + idx[i]] -= g * inv_b;
        });
    }
    return y;
}

Tensor kl_divergence(const Tensor& target_probs, const Tensor& logits) {
    require_matrix("kl_divergence", logits);
    require_same_shape("kl_divergence", target_probs, logits);
    const std::size_t b = logits.rows();
    const Tensor logq = log_softmax(logits, 1);
    const auto P = target_probs.data();
    std::vector<double> plogp(P.size());
    for (std::size_t i = 0; i < P.size(); ++i) plogp[i] = P[i] > 0.0 ? P[i] * std::log(P[i]) : 0.0;
    const Tensor cross = sum(mul(target_probs.detach(), logq));
    double neg_entropy = 0.0;
    for (double v : plogp) neg_entropy += v;
    const Tensor entropy_term = Tensor::scalar(neg_entropy);
    return scale(sub(entropy_term, cross), 1.0 / static_cast<double>(b));
}

Tensor l2_norm(const Tensor& x) {
    const std::size_t c = last_axis_width("l2_norm", x);
    const std::size_t r = x.numel() / c;
    const auto X = x.data();
    std::vector<double> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += X[i * c + j] * X[i * c + j];
        out[i] = std::sqrt(acc);
    }
    const bool track = tracking({&x});
    Tensor y(drop_last(x.shape()), std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, r, c]() mutable {
            const auto G = y.grad();
            const auto N = y.data();
            const auto Xv = x.data();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < r; ++i) {
                if (N[i] == 0.0) continue;  // subgradient 0 at the origin
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += G[i] * Xv[i * c + j] / N[i];
            }
        });
    }
    return y;
}

Tensor normalize_rows(const Tensor& x) {
    const std::size_t c = last_axis_width("normalize_rows", x);
    const std::size_t r = x.numel() / c;
    const auto X = x.data();
    std::vector<double> norms(r);
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += X[i * c + j] * X[i * c + j];
        norms[i] = std::sqrt(acc);
        if (norms[i] == 0.0) throw std::domain_error("normalize_rows: zero-norm row");
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] / norms[i];
    }
    const bool track = tracking({&x});
    Tensor y(x.shape(), std::move(out), track);
    if (track) {
        Tape::current().record({x}, y, [x, y, norms = std::move(norms), r, c]() mutable {
            const auto G = y.grad();
            const auto U = y.data();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += G[i * c + j] * U[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    gx[i * c + j] += (G[i * c + j] - U[i * c + j] * dot) / norms[i];
            }
        });
    }
    return y;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape("mse", a, b);
    const Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

Tensor squared_distance(const Tensor& a, const Tensor& b) {
    require_matrix("squared_distance", a);
    require_same_shape("squared_distance", a, b);
    const std::size_t r = a.rows(), c = a.cols();
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double d = A[i * c + j] - B[i * c + j];
            out[i] += d * d;
        }
    const bool track = tracking({&a, &b});
    Tensor y({r}, std::move(out), track);
    if (track) {
        Tape::current().record({a, b}, y, [a, b, y, r, c]() mutable {
            const auto G = y.grad();
            const auto Av = a.data();
            const auto Bv = b.data();
            if (a.requires_grad()) {
                auto ga = a.mutable_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        ga[i * c + j] += 2.0 * G[i] * (Av[i * c + j] - Bv[i * c + j]);
            }
            if (b.requires_grad()) {
                auto gb = b.mutable_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        gb[i * c + j] -= 2.0 * G[i] * (Av[i * c + j] - Bv[i * c + j]);
            }
        });
    }
    return y;
}

Tensor weighted_sum(const std::vector<Tensor>& parts, std::span<const double> coeffs) {
    if (parts.empty()) throw DimensionError("weighted_sum: no inputs");
    if (parts.size() != coeffs.size()) {
        throw DimensionError("weighted_sum: " + std::to_string(parts.size()) + " tensors but " +
                             std::to_string(coeffs.size()) + " coefficients");
    }
    for (const auto& p : parts) require_same_shape("weighted_sum", parts.front(), p);
    std::vector<double> out(parts.front().numel(), 0.0);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto P = parts[k].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * P[i];
    }
    const bool track = tracking(parts);
    Tensor y(parts.front().shape(), std::move(out), track);
    if (track) {
        std::vector<double> w(coeffs.begin(), coeffs.end());
        Tape::current().record(parts, y, [parts, y, w]() mutable {
            const auto G = y.grad();
            for (std::size_t k = 0; k < parts.size(); ++k) {
                if (!parts[k].requires_grad()) continue;
                auto gp = parts[k].mutable_grad();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += w[k] * G[i];
            }
        });
    }
    return y;
}

Tensor average(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("average: no inputs");
    for (const auto& p : parts) require_same_shape("average", parts.front(), p);
    const auto first = parts.front().data();
    std::vector<double> out(first.begin(), first.end());
    for (std::size_t k = 1; k < parts.size(); ++k) {
        const auto P = parts[k].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += P[i];
    }
    const double n = static_cast<double>(parts.size());
    for (auto& v : out) v /= n;
    const bool track = tracking(parts);
    Tensor y(parts.front().shape(), std::move(out), track);
    if (track) {
        Tape::current().record(parts, y, [parts, y, n]() mutable {
            const auto G = y.grad();
            for (auto& p : parts) {
                if (!p.requires_grad()) continue;
                auto gp = p.mutable_grad();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += G[i] / n;
            }
        });
    }
    return y;
}

namespace {

void check_attention_layout(const char* op, const Tensor& x, std::size_t frames, std::size_t heads) {
    require_matrix(op, x);
    if (frames == 0 || heads == 0) throw DimensionError(std::string(op) + ": zero frames or heads");
    if (x.rows() % frames != 0) {
        throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) +
                             " rows are not a whole number of " + std::to_string(frames) +
                             "-frame sequences");
    }
    if (x.cols() % heads != 0) {
        throw DimensionError(std::string(op) + ": width " + std::to_string(x.cols()) +
                             " not divisible by " + std::to_string(heads) + " heads");
    }
}

}  // namespace

Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t frames, std::size_t heads) {
    check_attention_layout("attention_scores", q, frames, heads);
    require_same_shape("attention_scores", q, k);
    const std::size_t rows = q.rows(), d = q.cols(), dh = d / heads, batch = rows / frames;
    const std::size_t w = heads * frames;
    const auto Q = q.data();
    const auto K = k.data();
    std::vector<double> out(rows * w);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < frames; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t s = 0; s < frames; ++s) {
                    const double* qr = Q.data() + (b * frames + t) * d + h * dh;
                    const double* kr = K.data() + (b * frames + s) * d + h * dh;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) acc += qr[j] * kr[j];
                    out[(b * frames + t) * w + h * frames + s] = acc;
                }
    add_macs(static_cast<std::uint64_t>(batch) * frames * frames * d);
    const bool track = tracking({&q, &k});
    Tensor y({rows, w}, std::move(out), track);
    if (track) {
        Tape::current().record({q, k}, y, [q, k, y, frames, heads, batch, d, dh, w]() mutable {
            const auto G = y.grad();
            const auto Qv = q.data();
            const auto Kv = k.data();
            const bool gq_on = q.requires_grad(), gk_on = k.requires_grad();
            std::span<double> gq, gk;
            if (gq_on) gq = q.mutable_grad();
            if (gk_on) gk = k.mutable_grad();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t t = 0; t < frames; ++t)
                    for (std::size_t h = 0; h < heads; ++h)
                        for (std::size_t s = 0; s < frames; ++s) {
                            const double g = G[(b * frames + t) * w + h * frames + s];
                            const std::size_t qo = (b * frames + t) * d + h * dh;
                            const std::size_t ko = (b * frames + s) * d + h * dh;
                            for (std::size_t j = 0; j < dh; ++j) {
                                if (gq_on) gq[qo + j] += g * Kv[ko + j];
                                if (gk_on) gk[ko + j] += g * Qv[qo + j];
                            }
                        }
        });
    }
    return y;
}

Tensor attention_mix(const Tensor& p, const Tensor& v, std::size_t frames, std::size_t heads) {
    check_attention_layout("attention_mix", v, frames, heads);
    require_matrix("attention_mix", p);
    const std::size_t rows = v.rows(), d = v.cols(), dh = d / heads, batch = rows / frames;
    const std::size_t w = heads * frames;
    if (p.rows() != rows || p.cols() != w) {
        throw DimensionError("attention_mix: weights " + shape_to_string(p.shape()) +
                             " do not match values " + shape_to_string(v.shape()));
    }
    const auto P = p.data();
    const auto V = v.data();
    std::vector<double> out(rows * d, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < frames; ++t)
            for (std::size_t h = 0; h < heads; ++h) {
                double* orow = out.data() + (b * frames + t) * d + h * dh;
                for (std::size_t s = 0; s < frames; ++s) {
                    const double a = P[(b * frames + t) * w + h * frames + s];
                    const double* vr = V.data() + (b * frames + s) * d + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) orow[j] += a * vr[j];
                }
            }
    add_macs(static_cast<std::uint64_t>(batch) * frames * frames * d);
    const bool track = tracking({&p, &v});
    Tensor y({rows, d}, std::move(out), track);
    if (track) {
        Tape::current().record({p, v}, y, [p, v, y, frames, heads, batch, d, dh, w]() mutable {
            const auto G = y.grad();
            const auto Pv = p.data();
            const auto Vv = v.data();
            const bool gp_on = p.requires_grad(), gv_on = v.requires_grad();
            std::span<double> gp, gv;
            if (gp_on) gp = p.mutable_grad();
            if (gv_on) gv = v.mutable_grad();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t t = 0; t < frames; ++t)
                    for (std::size_t h = 0; h < heads; ++h) {
                        const double* grow = G.data() + (b * frames + t) * d + h * dh;
                        for (std::size_t s = 0; s < frames; ++s) {
                            const std::size_t pi = (b * frames + t) * w + h * frames + s;
                            const std::size_t vo = (b * frames + s) * d + h * dh;
                            if (gp_on) {
                                double acc = 0.0;
                                for (std::size_t j = 0; j < dh; ++j) acc += grow[j] * Vv[vo + j];
                                gp[pi] += acc;
                            }
                            if (gv_on) {
                                const double a = Pv[pi];
                                for (std::size_t j = 0; j < dh; ++j) gv[vo + j] += a * grow[j];
                            }
                        }
                    }
        });
    }
    return y;
}

}  // namespace mote
