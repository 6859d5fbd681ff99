#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pfmda/tensor.hpp"

namespace pfmda {

namespace detail {

// Returns the gradient buffer of parent i, or nullptr if it takes no gradient.
inline std::vector<double>* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? &p.grad : nullptr;
}

inline const std::vector<double>& parent_value(Node& self, std::size_t i) { return self.parents[i]->value; }

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
    if (a.dim() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (auto* g = detail::parent_grad(self, k))
                for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& av = detail::parent_value(self, 0);
        const auto& bv = detail::parent_value(self, 1);
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (auto* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * av[i];
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_result("scale", a.shape(), std::move(out), {a}, [s](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * s;
    });
}

/// x + bias broadcast along the last axis.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.dim() == 0 || bias.dim() != 1 || bias.extent(0) != x.shape().back())
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                             shape_str(x.shape()));
    const std::size_t n = bias.extent(0);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
    return make_result("add_bias", x.shape(), std::move(out), {x, bias}, [n](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % n] += self.grad[i];
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
        const auto& xv = detail::parent_value(self, 0);
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (xv[i] > 0.0) (*g)[i] += self.grad[i];
    });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    return make_result("gelu", x.shape(), std::move(out), {x}, [](Node& self) {
        const auto& xv = detail::parent_value(self, 0);
        auto* g = detail::parent_grad(self, 0);
        if (!g) return;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
            (*g)[i] += self.grad[i] * (cdf + xv[i] * pdf);
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return make_result("sigmoid", x.shape(), std::move(out), {x}, [](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double y = self.value[i];
                (*g)[i] += self.grad[i] * y * (1.0 - y);
            }
    });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    return make_result("reshape", std::move(shape), x.values(), {x}, [](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank("transpose", a, 2);
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return make_result("transpose", {n, m}, std::move(out), {a}, [m, n](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
    });
}

/// Columns [start, start+count) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    detail::require_rank("slice_cols", x, 2);
    const std::size_t m = x.extent(0), n = x.extent(1);
    if (start + count > n) throw DimensionError("slice_cols: range exceeds " + std::to_string(n) + " columns");
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + start + j];
    return make_result("slice_cols", {m, count}, std::move(out), {x}, [m, n, start, count](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < count; ++j) (*g)[i * n + start + j] += self.grad[i * count + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].extent(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank("concat_cols", p, 2);
        if (p.extent(0) != m) throw DimensionError("concat_cols: row count mismatch");
        widths.push_back(p.extent(1));
        total += p.extent(1);
    }
    std::vector<double> out(m * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + offset + j] = parts[k][i * widths[k] + j];
        offset += widths[k];
    }
    return make_result("concat_cols", {m, total}, std::move(out), parts, [m, total, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (auto* g = detail::parent_grad(self, k))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) (*g)[i * widths[k] + j] += self.grad[i * total + off + j];
            off += widths[k];
        }
    });
}

/// Stacks equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("stack: no inputs");
    const Shape inner = parts[0].shape();
    const std::size_t n = parts[0].numel();
    std::vector<double> out;
    out.reserve(n * parts.size());
    for (const auto& p : parts) {
        if (p.shape() != inner) throw DimensionError("stack: inconsistent shapes");
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    Shape shape{parts.size()};
    shape.insert(shape.end(), inner.begin(), inner.end());
    return make_result("stack", std::move(shape), std::move(out), parts, [n](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k)
            if (auto* g = detail::parent_grad(self, k))
                for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[k * n + i];
    });
}

/// x[index] along the leading axis.
inline Tensor select(const Tensor& x, std::size_t index) {
    if (x.dim() < 2 || index >= x.extent(0))
        throw DimensionError("select: index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
    Shape inner(x.shape().begin() + 1, x.shape().end());
    const std::size_t n = shape_numel(inner);
    std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(index * n),
                            x.values().begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
    return make_result("select", std::move(inner), std::move(out), {x}, [n, index](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < n; ++i) (*g)[index * n + i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_result("sum", {1}, {s}, {x}, [](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (auto& v : *g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    const double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_result("mean", {1}, {s * inv}, {x}, [inv](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (auto& v : *g) v += self.grad[0] * inv;
    });
}

/// Mean of |x|. The subgradient at 0 is taken as 0.
inline Tensor mean_abs(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean_abs of empty tensor");
    const double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.values()) s += std::abs(v);
    return make_result("mean_abs", {1}, {s * inv}, {x}, [inv](Node& self) {
        const auto& xv = detail::parent_value(self, 0);
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) {
                const double sign = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
                (*g)[i] += self.grad[0] * inv * sign;
            }
    });
}

/// Euclidean norm of the flattened tensor. The subgradient at 0 is taken as 0.
inline Tensor l2_norm(const Tensor& x) {
    double ss = 0.0;
    for (double v : x.values()) ss += v * v;
    const double norm = std::sqrt(ss);
    return make_result("l2_norm", {1}, {norm}, {x}, [](Node& self) {
        const auto& xv = detail::parent_value(self, 0);
        const double nrm = self.value[0];
        if (nrm == 0.0) return;
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * xv[i] / nrm;
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k)
        throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = &bv[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        const auto& av = detail::parent_value(self, 0);
        const auto& bv = detail::parent_value(self, 1);
        const auto& g = self.grad;
        // dA = G * B^T
        if (auto* ga = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
                    (*ga)[i * k + p] += acc;
                }
        // dB = A^T * G
        if (auto* gb = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
                }
    });
}

/// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank("softmax_rows", x, 2);
    const std::size_t m = x.extent(0), n = x.extent(1);
    if (n == 0) throw DimensionError("softmax_rows: empty row dimension");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &x.values()[i * n];
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return make_result("softmax_rows", {m, n}, std::move(out), {x}, [m, n](Node& self) {
        auto* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                (*g)[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution and normalization
// ---------------------------------------------------------------------------

/// 3x3 cross-correlation, stride 1, zero padding 1. Accepts C×H×W or B×C×H×W.
inline Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.dim() != 3 && x.dim() != 4) throw DimensionError("conv3x3: input must be CxHxW or BxCxHxW");
    const bool batched = x.dim() == 4;
    const std::size_t batch = batched ? x.extent(0) : 1;
    const std::size_t cin = x.extent(batched ? 1 : 0);
    const std::size_t h = x.extent(batched ? 2 : 1), wd = x.extent(batched ? 3 : 2);
    if (w.dim() != 4 || w.extent(2) != 3 || w.extent(3) != 3)
        throw DimensionError("conv3x3: kernel must be Cout x Cin x 3 x 3, got " + shape_str(w.shape()));
    if (w.extent(1) != cin)
        throw DimensionError("conv3x3: kernel expects " + std::to_string(w.extent(1)) + " input channels, input has " +
                             std::to_string(cin));
    const std::size_t cout = w.extent(0);
    if (bias.dim() != 1 || bias.extent(0) != cout) throw DimensionError("conv3x3: bias must have Cout entries");
    if (h == 0 || wd == 0) throw DimensionError("conv3x3: empty spatial extent");

    const std::size_t plane = h * wd;
    std::vector<double> out(batch * cout * plane);
    const auto& xv = x.values();
    const auto& wv = w.values();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            double* op = &out[(b * cout + co) * plane];
            std::fill(op, op + plane, bias[co]);
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* ip = &xv[(b * cin + ci) * plane];
                const double* kp = &wv[(co * cin + ci) * 9];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const double kval = kp[ky * 3 + kx];
                        const int dy = ky - 1, dx = kx - 1;
                        const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
                        const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? wd - 1 : wd;
                        for (std::size_t y = y0; y < y1; ++y) {
                            double* orow = op + y * wd;
                            const double* irow = ip + (y + dy) * wd + dx;
                            for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += kval * irow[xx];
                        }
                    }
            }
        }
    Shape shape = batched ? Shape{batch, cout, h, wd} : Shape{cout, h, wd};
    return make_result("conv3x3", std::move(shape), std::move(out), {x, w, bias},
                       [batch, cin, cout, h, wd, plane](Node& self) {
        const auto& xv = detail::parent_value(self, 0);
        const auto& wv = detail::parent_value(self, 1);
        auto* gx = detail::parent_grad(self, 0);
        auto* gw = detail::parent_grad(self, 1);
        auto* gb = detail::parent_grad(self, 2);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
                const double* gp = &self.grad[(b * cout + co) * plane];
                if (gb)
                    for (std::size_t i = 0; i < plane; ++i) (*gb)[co] += gp[i];
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* ip = &xv[(b * cin + ci) * plane];
                    double* gip = gx ? &(*gx)[(b * cin + ci) * plane] : nullptr;
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const std::size_t kidx = (co * cin + ci) * 9 + static_cast<std::size_t>(ky * 3 + kx);
                            const double kval = wv[kidx];
                            const int dy = ky - 1, dx = kx - 1;
                            const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
                            const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? wd - 1 : wd;
                            double acc = 0.0;
                            for (std::size_t y = y0; y < y1; ++y) {
                                const double* grow = gp + y * wd;
                                const std::size_t off = (y + dy) * wd + dx;
                                for (std::size_t xx = x0; xx < x1; ++xx) {
                                    acc += grow[xx] * ip[off + xx];
                                    if (gip) gip[off + xx] += grow[xx] * kval;
                                }
                            }
                            if (gw) (*gw)[kidx] += acc;
                        }
                }
            }
    });
}

/// Running statistics of a batch-normalization layer.
struct BatchNormStats {
    Tensor mean;
    Tensor var;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel batch normalization over B×C×H×W. In training mode the batch
/// statistics normalize the input and update `stats`; otherwise `stats` is used.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormStats& stats,
                         bool training) {
    detail::require_rank("batch_norm", x, 4);
    const std::size_t batch = x.extent(0), c = x.extent(1), plane = x.extent(2) * x.extent(3);
    if (gamma.numel() != c || beta.numel() != c || stats.mean.numel() != c || stats.var.numel() != c)
        throw DimensionError("batch_norm: parameter size does not match " + std::to_string(c) + " channels");
    const double count = static_cast<double>(batch * plane);
    std::vector<double> mu(c), inv_std(c);
    const auto& xv = x.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (training) {
            double s = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < plane; ++i) s += xv[(b * c + ch) * plane + i];
            const double m = s / count;
            double v = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = xv[(b * c + ch) * plane + i] - m;
                    v += d * d;
                }
            v /= count;
            mu[ch] = m;
            inv_std[ch] = 1.0 / std::sqrt(v + stats.eps);
            const double unbiased = count > 1.0 ? v * count / (count - 1.0) : v;
            Tensor running_mean = stats.mean, running_var = stats.var;
            auto rm = running_mean.data();
            auto rv = running_var.data();
            rm[ch] = (1.0 - stats.momentum) * rm[ch] + stats.momentum * m;
            rv[ch] = (1.0 - stats.momentum) * rv[ch] + stats.momentum * unbiased;
        } else {
            mu[ch] = stats.mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + stats.eps);
        }
    }
    std::vector<double> xhat(x.numel()), out(x.numel());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * c + ch) * plane + i;
                xhat[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
                out[idx] = gamma[ch] * xhat[idx] + beta[ch];
            }
    return make_result("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [batch, c, plane, count, training, xhat = std::move(xhat), inv_std](Node& self) {
        const auto& gv = detail::parent_value(self, 1);
        auto* gx = detail::parent_grad(self, 0);
        auto* gg = detail::parent_grad(self, 1);
        auto* gbeta = detail::parent_grad(self, 2);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t idx = (b * c + ch) * plane + i;
                    sum_g += self.grad[idx];
                    sum_gx += self.grad[idx] * xhat[idx];
                }
            if (gg) (*gg)[ch] += sum_gx;
            if (gbeta) (*gbeta)[ch] += sum_g;
            if (!gx) continue;
            const double k = gv[ch] * inv_std[ch];
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t idx = (b * c + ch) * plane + i;
                    if (training)
                        (*gx)[idx] += k * (self.grad[idx] - sum_g / count - xhat[idx] * sum_gx / count);
                    else
                        (*gx)[idx] += k * self.grad[idx];
                }
        }
    });
}

/// Normalizes each row of an M×N matrix, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require_rank("layer_norm", x, 2);
    const std::size_t m = x.extent(0), n = x.extent(1);
    if (gamma.numel() != n || beta.numel() != n) throw DimensionError("layer_norm: gamma/beta size mismatch");
    std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = &x.values()[i * n];
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += row[j];
        const double mu = s / static_cast<double>(n);
        double v = 0.0;
        for (std::size_t j = 0; j < n; ++j) v += (row[j] - mu) * (row[j] - mu);
        v /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(v + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (row[j] - mu) * inv_std[i];
            out[i * n + j] = gamma[j] * xhat[i * n + j] + beta[j];
        }
    }
    return make_result("layer_norm", {m, n}, std::move(out), {x, gamma, beta},
                       [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = detail::parent_value(self, 1);
        auto* gx = detail::parent_grad(self, 0);
        auto* gg = detail::parent_grad(self, 1);
        auto* gb = detail::parent_grad(self, 2);
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double gij = self.grad[i * n + j];
                if (gg) (*gg)[j] += gij * xhat[i * n + j];
                if (gb) (*gb)[j] += gij;
                const double d = gij * gv[j];
                sum_d += d;
                sum_dx += d * xhat[i * n + j];
            }
            if (!gx) continue;
            for (std::size_t j = 0; j < n; ++j) {
                const double d = self.grad[i * n + j] * gv[j];
                (*gx)[i * n + j] += inv_std[i] * (d - sum_d / dn - xhat[i * n + j] * sum_dx / dn);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Patch layout
// ---------------------------------------------------------------------------

namespace detail {
// Maps (token, feature) of a patch matrix to an index into a C×H×W volume.
// Tokens run row-major over the patch grid; features run (channel, py, px).
inline std::vector<std::size_t> patch_index_map(std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
    const std::size_t gh = h / p, gw = w / p, feat = c * p * p;
    std::vector<std::size_t> map(gh * gw * feat);
    for (std::size_t ty = 0; ty < gh; ++ty)
        for (std::size_t tx = 0; tx < gw; ++tx)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t py = 0; py < p; ++py)
                    for (std::size_t px = 0; px < p; ++px) {
                        const std::size_t token = ty * gw + tx;
                        const std::size_t f = (ch * p + py) * p + px;
                        map[token * feat + f] = (ch * h + ty * p + py) * w + tx * p + px;
                    }
    return map;
}
}  // namespace detail

/// C×H×W -> N×(C·p·p) non-overlapping patches.
inline Tensor patchify(const Tensor& x, std::size_t patch) {
    detail::require_rank("patchify", x, 3);
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw DimensionError("patchify: " + shape_str(x.shape()) + " not divisible by patch size " +
                             std::to_string(patch));
    auto map = detail::patch_index_map(c, h, w, patch);
    std::vector<double> out(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = x[map[i]];
    const std::size_t tokens = (h / patch) * (w / patch);
    return make_result("patchify", {tokens, c * patch * patch}, std::move(out), {x}, [map](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < map.size(); ++i) (*g)[map[i]] += self.grad[i];
    });
}

/// Inverse of patchify: N×(C·p·p) -> C×H×W.
inline Tensor unpatchify(const Tensor& t, std::size_t c, std::size_t h, std::size_t w, std::size_t patch) {
    detail::require_rank("unpatchify", t, 2);
    if (patch == 0 || h % patch != 0 || w % patch != 0 || t.extent(0) != (h / patch) * (w / patch) ||
        t.extent(1) != c * patch * patch)
        throw DimensionError("unpatchify: " + shape_str(t.shape()) + " incompatible with " +
                             shape_str({c, h, w}) + " and patch " + std::to_string(patch));
    auto map = detail::patch_index_map(c, h, w, patch);
    std::vector<double> out(c * h * w);
    for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] = t[i];
    return make_result("unpatchify", {c, h, w}, std::move(out), {t}, [map](Node& self) {
        if (auto* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < map.size(); ++i) (*g)[i] += self.grad[map[i]];
    });
}

/// y = x·W + b for a token matrix.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

}  // namespace pfmda
