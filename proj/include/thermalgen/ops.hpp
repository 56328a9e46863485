#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "thermalgen/tensor.hpp"

// Differentiable primitives. Every op computes its result eagerly and, when a
// tape is active and an input requires grad, records the matching vector-Jacobian
// product. Layout is row-major; images are NHWC.

namespace thermalgen {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline TensorNode* raw(const Tensor& t) { return t.node_ptr().get(); }

/// Maps each output element of a broadcast binary op to its operand offsets.
struct BroadcastPlan {
    Shape out;
    bool a_full = false;
    bool b_full = false;
    std::vector<std::size_t> ia;
    std::vector<std::size_t> ib;

    std::size_t a_index(std::size_t i) const { return a_full ? i : ia[i]; }
    std::size_t b_index(std::size_t i) const { return b_full ? i : ib[i]; }
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out.assign(rank, 1);
    std::vector<std::size_t> da(rank, 1), db(rank, 1);
    for (std::size_t i = 0; i < a.size(); ++i) da[rank - a.size() + i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) db[rank - b.size() + i] = b[i];
    for (std::size_t i = 0; i < rank; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
            throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        plan.out[i] = std::max(da[i], db[i]);
    }
    const std::size_t n = numel(plan.out);
    plan.a_full = numel(a) == n;
    plan.b_full = numel(b) == n;

    auto build = [&](const std::vector<std::size_t>& dims, std::vector<std::size_t>& index) {
        std::vector<std::size_t> stride(rank, 0);
        std::size_t s = 1;
        for (std::size_t i = rank; i-- > 0;) {
            stride[i] = dims[i] == 1 ? 0 : s;
            s *= dims[i];
        }
        index.resize(n);
        std::vector<std::size_t> counter(rank, 0);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n; ++k) {
            index[k] = offset;
            for (std::size_t d = rank; d-- > 0;) {
                ++counter[d];
                offset += stride[d];
                if (counter[d] < plan.out[d]) break;
                offset -= stride[d] * counter[d];
                counter[d] = 0;
            }
        }
    };
    if (!plan.a_full) build(da, plan.ia);
    if (!plan.b_full) build(db, plan.ib);
    return plan;
}

enum class BinaryKind { add, sub, mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
    const std::size_t n = numel(plan->out);
    Buffer out(n);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[plan->a_index(i)];
        const double y = bv[plan->b_index(i)];
        out[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
    }
    Tensor result = make_output(plan->out, std::move(out), "binary op");
    if (should_record({&a, &b})) {
        record({&a, &b}, result, [an = raw(a), bn = raw(b), on = raw(result), plan, kind]() {
            const auto& g = on->grad;
            if (double* ga = grad_of(an)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double d = kind == BinaryKind::mul ? g[i] * bn->value[plan->b_index(i)] : g[i];
                    ga[plan->a_index(i)] += d;
                }
            }
            if (double* gb = grad_of(bn)) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    double d = g[i];
                    if (kind == BinaryKind::sub) d = -d;
                    if (kind == BinaryKind::mul) d *= an->value[plan->a_index(i)];
                    gb[plan->b_index(i)] += d;
                }
            }
        });
    }
    return result;
}

/// Elementwise map with derivative expressed through input x and output y.
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
    auto xv = x.values();
    Buffer out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    Tensor result = make_output(x.shape(), std::move(out), name);
    if (should_record({&x})) {
        record({&x}, result, [xn = raw(x), on = raw(result), df]() {
            double* gx = grad_of(xn);
            const auto& g = on->grad;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xn->value[i], on->value[i]);
        });
    }
    return result;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::mul); }

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor abs(const Tensor& x) {
    return detail::unary(
        x, "abs", [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary(
        x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor silu(const Tensor& x) {
    return detail::unary(
        x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    return detail::unary(
        x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

/// Clamp with a straight zero gradient outside [lo, hi].
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary(
        x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor result = detail::make_output({1}, {s}, "sum");
    if (detail::should_record({&x})) {
        detail::record({&x}, result, [xn = detail::raw(x), on = detail::raw(result)]() {
            double* gx = detail::grad_of(xn);
            const double g = on->grad[0];
            for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
        });
    }
    return result;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    auto xv = x.values();
    Buffer out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double* o = out.data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
    Tensor result = detail::make_output(x.shape(), std::move(out), "softmax");
    if (detail::should_record({&x})) {
        detail::record({&x}, result, [xn = detail::raw(x), on = detail::raw(result), rows, cols]() {
            double* gx = detail::grad_of(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * cols;
                const double* g = on->grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
            }
        });
    }
    return result;
}

/// Layer normalization over the last axis without affine parameters.
inline Tensor layernorm(const Tensor& x, double eps = 1e-6) {
    if (!(eps > 0.0)) throw DomainError("layernorm epsilon must be positive");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    auto xv = x.values();
    Buffer out(xv.size());
    auto inv_std = std::make_shared<Buffer>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += in[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (in[c] - mu) * is;
    }
    Tensor result = detail::make_output(x.shape(), std::move(out), "layernorm");
    if (detail::should_record({&x})) {
        detail::record({&x}, result, [xn = detail::raw(x), on = detail::raw(result), rows, cols, inv_std]() {
            double* gx = detail::grad_of(xn);
            const double n = static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * cols;
                const double* g = on->grad.data() + r * cols;
                double gsum = 0.0, gy = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    gsum += g[c];
                    gy += g[c] * y[c];
                }
                const double is = (*inv_std)[r];
                for (std::size_t c = 0; c < cols; ++c) {
                    gx[r * cols + c] += is * (g[c] - gsum / n - y[c] * gy / n);
                }
            }
        });
    }
    return result;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    Buffer out(static_cast<std::size_t>(m * n));
    detail::MatMap(out.data(), m, n).noalias() =
        detail::ConstMatMap(a.values().data(), m, k) * detail::ConstMatMap(b.values().data(), k, n);
    Tensor result = detail::make_output({a.dim(0), b.dim(1)}, std::move(out), "matmul");
    if (detail::should_record({&a, &b})) {
        detail::record({&a, &b}, result, [an = detail::raw(a), bn = detail::raw(b), on = detail::raw(result), m, k, n]() {
            detail::ConstMatMap g(on->grad.data(), m, n);
            if (double* ga = detail::grad_of(an)) {
                detail::MatMap(ga, m, k).noalias() += g * detail::ConstMatMap(bn->value.data(), k, n).transpose();
            }
            if (double* gb = detail::grad_of(bn)) {
                detail::MatMap(gb, k, n).noalias() += detail::ConstMatMap(an->value.data(), m, k).transpose() * g;
            }
        });
    }
    return result;
}

/// y = x W + b over the last axis of x; leading axes are flattened.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
    if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
        throw DimensionError("linear shape mismatch: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(1))) {
        throw DimensionError("linear bias shape " + shape_str(b.shape()) + " does not match " + shape_str(w.shape()));
    }
    const auto k = static_cast<Eigen::Index>(w.dim(0));
    const auto n = static_cast<Eigen::Index>(w.dim(1));
    const auto m = static_cast<Eigen::Index>(x.numel() / w.dim(0));
    Buffer out(static_cast<std::size_t>(m * n));
    detail::MatMap o(out.data(), m, n);
    o.noalias() = detail::ConstMatMap(x.values().data(), m, k) * detail::ConstMatMap(w.values().data(), k, n);
    if (b.defined()) {
        o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), n);
    }
    Shape shape = x.shape();
    shape.back() = w.dim(1);
    Tensor result = detail::make_output(std::move(shape), std::move(out), "linear");
    const bool has_bias = b.defined();
    const bool rec = has_bias ? detail::should_record({&x, &w, &b}) : detail::should_record({&x, &w});
    if (rec) {
        std::vector<const Tensor*> inputs{&x, &w};
        if (has_bias) inputs.push_back(&b);
        detail::record(inputs, result,
                       [xn = detail::raw(x), wn = detail::raw(w), bn = has_bias ? detail::raw(b) : nullptr,
                        on = detail::raw(result), m, k, n]() {
                           detail::ConstMatMap g(on->grad.data(), m, n);
                           if (double* gx = detail::grad_of(xn)) {
                               detail::MatMap(gx, m, k).noalias() +=
                                   g * detail::ConstMatMap(wn->value.data(), k, n).transpose();
                           }
                           if (double* gw = detail::grad_of(wn)) {
                               detail::MatMap(gw, k, n).noalias() +=
                                   detail::ConstMatMap(xn->value.data(), m, k).transpose() * g;
                           }
                           if (bn) {
                               if (double* gb = detail::grad_of(bn)) {
                                   Eigen::Map<Eigen::RowVectorXd>(gb, n) += g.colwise().sum();
                               }
                           }
                       });
    }
    return result;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Tensor result = detail::make_output(std::move(shape), Buffer(x.values().begin(), x.values().end()),
                                        "reshape");
    if (detail::should_record({&x})) {
        detail::record({&x}, result, [xn = detail::raw(x), on = detail::raw(result)]() {
            double* gx = detail::grad_of(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
        });
    }
    return result;
}

/// Gathers x[src[i]] into out[i]; the backward scatters. Base of all pure
/// index-permutation ops (permute, patchify, slice).
namespace detail {
inline Tensor gather(const Tensor& x, Shape out_shape, std::shared_ptr<std::vector<std::size_t>> src,
                     const char* name) {
    auto xv = x.values();
    Buffer out(src->size());
    for (std::size_t i = 0; i < src->size(); ++i) out[i] = xv[(*src)[i]];
    Tensor result = make_output(std::move(out_shape), std::move(out), name);
    if (should_record({&x})) {
        record({&x}, result, [xn = raw(x), on = raw(result), src]() {
            double* gx = grad_of(xn);
            for (std::size_t i = 0; i < src->size(); ++i) gx[(*src)[i]] += on->grad[i];
        });
    }
    return result;
}
}  // namespace detail

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t rank = x.rank();
    if (axes.size() != rank) throw DimensionError("permute axes do not match rank");
    std::vector<std::size_t> in_stride(rank);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
        in_stride[i] = s;
        s *= x.dim(i);
    }
    Shape out_shape(rank);
    std::vector<bool> seen(rank, false);
    for (std::size_t i = 0; i < rank; ++i) {
        if (axes[i] >= rank || seen[axes[i]]) throw DimensionError("permute axes are not a permutation");
        seen[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
    std::vector<std::size_t> counter(rank, 0);
    for (std::size_t k = 0; k < src->size(); ++k) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < rank; ++d) off += counter[d] * in_stride[axes[d]];
        (*src)[k] = off;
        for (std::size_t d = rank; d-- > 0;) {
            if (++counter[d] < out_shape[d]) break;
            counter[d] = 0;
        }
    }
    return detail::gather(x, std::move(out_shape), std::move(src), "permute");
}

/// Contiguous range [start, start + length) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
        throw DimensionError("slice out of range for " + shape_str(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t along = x.dim(axis);
    auto src = std::make_shared<std::vector<std::size_t>>();
    src->reserve(outer * length * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t a = start; a < start + length; ++a) {
            for (std::size_t i = 0; i < inner; ++i) src->push_back((o * along + a) * inner + i);
        }
    }
    Shape shape = x.shape();
    shape[axis] = length;
    return detail::gather(x, std::move(shape), std::move(src), "slice");
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw DimensionError("concat axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw DimensionError("concat rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.dim(d) != ref[d]) {
                throw DimensionError("concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(ref));
            }
        }
        total += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    Shape shape = ref;
    shape[axis] = total;
    Buffer out(numel(shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        auto pv = p.values();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * total * inner + offset);
        }
        offset += chunk;
    }
    Tensor result = detail::make_output(std::move(shape), std::move(out), "concat");
    bool rec = false;
    for (const auto& p : parts) rec = rec || detail::should_record({&p});
    if (rec) {
        std::vector<const Tensor*> inputs;
        std::vector<detail::TensorNode*> nodes;
        for (const auto& p : parts) {
            inputs.push_back(&p);
            nodes.push_back(detail::raw(p));
        }
        detail::record(inputs, result, [nodes, on = detail::raw(result), outer, inner, total]() {
            std::size_t offset = 0;
            for (auto* node : nodes) {
                const std::size_t chunk = node->value.size() / outer;
                if (double* g = detail::grad_of(node)) {
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = on->grad.data() + o * total * inner + offset;
                        for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                    }
                }
                offset += chunk;
            }
        });
    }
    return result;
}

/// Splits [B, H, W, C] (or [H, W, C]) into non-overlapping p x p patches:
/// [B, (H/p)(W/p), p*p*C], patches in row-major grid order and each patch
/// flattened as (row, col, channel).
inline Tensor patchify(const Tensor& x, std::size_t p) {
    const bool batched = x.rank() == 4;
    if (!batched && x.rank() != 3) throw DimensionError("patchify expects [B,H,W,C] or [H,W,C]");
    const std::size_t b = batched ? x.dim(0) : 1;
    const std::size_t h = x.dim(batched ? 1 : 0), w = x.dim(batched ? 2 : 1), c = x.dim(batched ? 3 : 2);
    if (p == 0 || h % p != 0 || w % p != 0) {
        throw DimensionError("spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by patch size " + std::to_string(p));
    }
    const std::size_t gh = h / p, gw = w / p;
    auto src = std::make_shared<std::vector<std::size_t>>();
    src->reserve(x.numel());
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx)
                for (std::size_t py = 0; py < p; ++py)
                    for (std::size_t px = 0; px < p; ++px)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            src->push_back(((n * h + gy * p + py) * w + gx * p + px) * c + ch);
    Shape shape = batched ? Shape{b, gh * gw, p * p * c} : Shape{gh * gw, p * p * c};
    return detail::gather(x, std::move(shape), std::move(src), "patchify");
}

/// Inverse of patchify: [B, (h/p)(w/p), p*p*C] -> [B, h, w, C] (unbatched likewise).
inline Tensor unpatchify(const Tensor& tokens, std::size_t h, std::size_t w, std::size_t p) {
    const bool batched = tokens.rank() == 3;
    if (!batched && tokens.rank() != 2) throw DimensionError("unpatchify expects [B,N,D] or [N,D]");
    if (p == 0 || h % p != 0 || w % p != 0) throw DimensionError("unpatchify dims not divisible by patch size");
    const std::size_t b = batched ? tokens.dim(0) : 1;
    const std::size_t n_tok = tokens.dim(batched ? 1 : 0), d = tokens.dim(batched ? 2 : 1);
    const std::size_t gh = h / p, gw = w / p;
    if (n_tok != gh * gw || d % (p * p) != 0) {
        throw DimensionError("token shape " + shape_str(tokens.shape()) + " incompatible with " + std::to_string(h) +
                             "x" + std::to_string(w) + " and patch " + std::to_string(p));
    }
    const std::size_t c = d / (p * p);
    auto src = std::make_shared<std::vector<std::size_t>>();
    src->reserve(tokens.numel());
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t tok = (y / p) * gw + x / p;
                    const std::size_t within = ((y % p) * p + x % p) * c + ch;
                    src->push_back((n * n_tok + tok) * d + within);
                }
    Shape shape = batched ? Shape{b, h, w, c} : Shape{h, w, c};
    return detail::gather(tokens, std::move(shape), std::move(src), "unpatchify");
}

/// Multi-head scaled dot-product attention. q: [B, Nq, W], k and v: [B, Nk, W].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() || q.dim(0) != k.dim(0) ||
        q.dim(2) != k.dim(2)) {
        throw DimensionError("attention shape mismatch: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()));
    }
    const std::size_t width = q.dim(2);
    if (heads == 0 || width % heads != 0) throw DimensionError("attention width not divisible by heads");
    const std::size_t batch = q.dim(0);
    const auto nq = static_cast<Eigen::Index>(q.dim(1));
    const auto nk = static_cast<Eigen::Index>(k.dim(1));
    const auto hd = static_cast<Eigen::Index>(width / heads);
    const auto ow = static_cast<Eigen::Index>(width);
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    // Saved softmax probabilities, one [nq, nk] block per (batch, head).
    auto probs = std::make_shared<Buffer>(batch * heads * static_cast<std::size_t>(nq * nk));
    Buffer out(q.numel());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t qoff = b * static_cast<std::size_t>(nq) * width + h * static_cast<std::size_t>(hd);
            const std::size_t koff = b * static_cast<std::size_t>(nk) * width + h * static_cast<std::size_t>(hd);
            detail::ConstStridedMap qm(q.values().data() + qoff, nq, hd, Eigen::OuterStride<>(ow));
            detail::ConstStridedMap km(k.values().data() + koff, nk, hd, Eigen::OuterStride<>(ow));
            detail::ConstStridedMap vm(v.values().data() + koff, nk, hd, Eigen::OuterStride<>(ow));
            detail::MatMap pm(probs->data() + (b * heads + h) * static_cast<std::size_t>(nq * nk), nq, nk);
            pm.noalias() = (qm * km.transpose()) * sc;
            for (Eigen::Index r = 0; r < nq; ++r) {
                const double mx = pm.row(r).maxCoeff();
                pm.row(r) = (pm.row(r).array() - mx).exp();
                pm.row(r) /= pm.row(r).sum();
            }
            detail::StridedMap om(out.data() + qoff, nq, hd, Eigen::OuterStride<>(ow));
            om.noalias() = pm * vm;
        }
    }
    Tensor result = detail::make_output(q.shape(), std::move(out), "attention");
    if (detail::should_record({&q, &k, &v})) {
        detail::record({&q, &k, &v}, result,
                       [qn = detail::raw(q), kn = detail::raw(k), vn = detail::raw(v), on = detail::raw(result), probs,
                        batch, heads, nq, nk, hd, ow, sc, width]() {
                           double* gq = detail::grad_of(qn);
                           double* gk = detail::grad_of(kn);
                           double* gv = detail::grad_of(vn);
                           detail::RowMat dp(nq, nk);
                           for (std::size_t b = 0; b < batch; ++b) {
                               for (std::size_t h = 0; h < heads; ++h) {
                                   const std::size_t qoff =
                                       b * static_cast<std::size_t>(nq) * width + h * static_cast<std::size_t>(hd);
                                   const std::size_t koff =
                                       b * static_cast<std::size_t>(nk) * width + h * static_cast<std::size_t>(hd);
                                   const Eigen::OuterStride<> st(ow);
                                   detail::ConstStridedMap go(on->grad.data() + qoff, nq, hd, st);
                                   detail::ConstStridedMap qm(qn->value.data() + qoff, nq, hd, st);
                                   detail::ConstStridedMap km(kn->value.data() + koff, nk, hd, st);
                                   detail::ConstStridedMap vm(vn->value.data() + koff, nk, hd, st);
                                   detail::ConstMatMap pm(
                                       probs->data() + (b * heads + h) * static_cast<std::size_t>(nq * nk), nq, nk);
                                   if (gv) detail::StridedMap(gv + koff, nk, hd, st).noalias() += pm.transpose() * go;
                                   dp.noalias() = go * vm.transpose();
                                   for (Eigen::Index r = 0; r < nq; ++r) {
                                       const double dot = dp.row(r).dot(pm.row(r));
                                       dp.row(r) = pm.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
                                   }
                                   if (gq) detail::StridedMap(gq + qoff, nq, hd, st).noalias() += (dp * km) * sc;
                                   if (gk)
                                       detail::StridedMap(gk + koff, nk, hd, st).noalias() +=
                                           (dp.transpose() * qm) * sc;
                               }
                           }
                       });
    }
    return result;
}

/// 2-D convolution, NHWC input [B, H, W, Ci], kernel [kh, kw, Ci, Co], zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != x.dim(3)) {
        throw DimensionError("conv2d shape mismatch: " + shape_str(x.shape()) + " * " + shape_str(w.shape()));
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(3))) throw DimensionError("conv2d bias mismatch");
    if (stride == 0) throw DomainError("conv2d stride must be positive");
    const std::size_t batch = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3);
    const std::size_t kh = w.dim(0), kw = w.dim(1), co = w.dim(3);
    if (h + 2 * pad < kh || wd + 2 * pad < kw) throw DimensionError("conv2d kernel larger than padded input");
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t rows = batch * ho * wo;
    const std::size_t cols = kh * kw * ci;

    // im2col index: -1 marks zero padding
    auto index = std::make_shared<std::vector<std::int64_t>>(rows * kh * kw);
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::size_t r = (n * ho + oy) * wo + ox;
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const auto iy = static_cast<std::int64_t>(oy * stride + ky) - static_cast<std::int64_t>(pad);
                        const auto ix = static_cast<std::int64_t>(ox * stride + kx) - static_cast<std::int64_t>(pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(h) &&
                                            ix < static_cast<std::int64_t>(wd);
                        (*index)[r * kh * kw + ky * kw + kx] =
                            inside ? static_cast<std::int64_t>(((n * h + static_cast<std::size_t>(iy)) * wd +
                                                                static_cast<std::size_t>(ix)) *
                                                               ci)
                                   : -1;
                    }
            }
    auto col = std::make_shared<Buffer>(rows * cols, 0.0);
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < kh * kw; ++k) {
            const std::int64_t off = (*index)[r * kh * kw + k];
            if (off >= 0) std::copy_n(xv.data() + off, ci, col->data() + r * cols + k * ci);
        }
    }
    const auto er = static_cast<Eigen::Index>(rows);
    const auto ec = static_cast<Eigen::Index>(cols);
    const auto eo = static_cast<Eigen::Index>(co);
    Buffer out(rows * co);
    detail::MatMap om(out.data(), er, eo);
    om.noalias() = detail::ConstMatMap(col->data(), er, ec) * detail::ConstMatMap(w.values().data(), ec, eo);
    if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), eo);
    Tensor result = detail::make_output({batch, ho, wo, co}, std::move(out), "conv2d");

    const bool has_bias = b.defined();
    const bool rec = has_bias ? detail::should_record({&x, &w, &b}) : detail::should_record({&x, &w});
    if (rec) {
        std::vector<const Tensor*> inputs{&x, &w};
        if (has_bias) inputs.push_back(&b);
        detail::record(inputs, result,
                       [xn = detail::raw(x), wn = detail::raw(w), bn = has_bias ? detail::raw(b) : nullptr,
                        on = detail::raw(result), col, index, er, ec, eo, ci, taps = kh * kw]() {
                           detail::ConstMatMap g(on->grad.data(), er, eo);
                           if (double* gw = detail::grad_of(wn)) {
                               detail::MatMap(gw, ec, eo).noalias() +=
                                   detail::ConstMatMap(col->data(), er, ec).transpose() * g;
                           }
                           if (bn) {
                               if (double* gb = detail::grad_of(bn)) {
                                   Eigen::Map<Eigen::RowVectorXd>(gb, eo) += g.colwise().sum();
                               }
                           }
                           if (double* gx = detail::grad_of(xn)) {
                               detail::RowMat gcol(er, ec);
                               gcol.noalias() = g * detail::ConstMatMap(wn->value.data(), ec, eo).transpose();
                               for (Eigen::Index r = 0; r < er; ++r) {
                                   for (std::size_t k = 0; k < taps; ++k) {
                                       const std::int64_t off = (*index)[static_cast<std::size_t>(r) * taps + k];
                                       if (off < 0) continue;
                                       const double* src = gcol.data() + r * ec + static_cast<Eigen::Index>(k * ci);
                                       for (std::size_t c = 0; c < ci; ++c) gx[off + static_cast<std::int64_t>(c)] += src[c];
                                   }
                               }
                           }
                       });
    }
    return result;
}

}  // namespace thermalgen
