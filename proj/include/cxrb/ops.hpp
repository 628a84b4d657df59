#pragma once

// Differentiable operations over Tensor. Every op takes the graph to record
// into as its first argument; pass nullptr for inference. Nothing is recorded
// when no input requires a gradient.
//
// Layouts: images are [N, C, H, W], conv kernels [F, C, kh, kw], dense
// weights [D, M]. Convolution runs as im2col + GEMM (Eigen) over fixed-size
// column tiles; reductions across tiles go through per-group partial sums
// combined in a fixed order, so results do not depend on the worker count.

#include "cxrb/parallel.hpp"
#include "cxrb/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace cxrb {

enum class Activation { relu, sigmoid };

namespace detail {

inline constexpr std::size_t kConvTile = 1024;
inline constexpr std::size_t kReduceGroups = 32;
inline constexpr double kBceEpsilon = 1e-7;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <class T>
using StridedCols = Eigen::Map<ColMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedCols = Eigen::Map<const ColMat<T>, 0, Eigen::OuterStride<>>;

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

struct ConvGeometry {
    std::size_t n, c, h, w;      // input
    std::size_t f, kh, kw;       // kernel
    std::size_t stride, pad;
    std::size_t ho, wo;          // output

    std::size_t patch() const { return c * kh * kw; }
    std::size_t out_plane() const { return ho * wo; }
    std::size_t in_plane() const { return h * w; }
};

template <class T>
std::vector<T>& scratch(std::size_t size)
{
    thread_local std::vector<T> buf;
    if (buf.size() < size) buf.resize(size);
    return buf;
}

// dst[x - x0] = src[x*stride + off] for x in [lo, hi), zero elsewhere in [x0, x1).
template <class T>
void copy_span(const T* src, std::ptrdiff_t off, std::ptrdiff_t stride, std::ptrdiff_t lo, std::ptrdiff_t hi,
               std::ptrdiff_t x0, std::ptrdiff_t x1, T* dst)
{
    const auto a = std::clamp(lo, x0, x1);
    const auto b = std::clamp(hi, a, x1);
    std::fill(dst, dst + (a - x0), T(0));
    if (stride == 1) {
        std::copy(src + a + off, src + b + off, dst + (a - x0));
    } else {
        for (auto x = a; x < b; ++x) dst[x - x0] = src[x * stride + off];
    }
    std::fill(dst + (b - x0), dst + (x1 - x0), T(0));
}

// Row r = (c*kh+i)*kw+j of `cols` holds input[c, oy*s+i-p, ox*s+j-p] for the
// output pixels t0..t0+len (zero outside the image).
template <class T>
void im2col_tile(const ConvGeometry& g, const T* image, std::size_t t0, std::size_t len, T* cols)
{
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto stride = static_cast<std::ptrdiff_t>(g.stride);
    for (std::size_t c = 0; c < g.c; ++c) {
        const T* plane = image + c * g.in_plane();
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = cols + ((c * g.kh + i) * g.kw + j) * len;
                // Output columns whose source column lies inside the image.
                const auto off = static_cast<std::ptrdiff_t>(j) - pad;
                const std::ptrdiff_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
                const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(
                    static_cast<std::ptrdiff_t>(g.wo),
                    (static_cast<std::ptrdiff_t>(g.w) - 1 - off) / stride + 1);
                std::size_t t = 0;
                while (t < len) {
                    const std::size_t p = t0 + t;
                    const std::size_t oy = p / g.wo;
                    const std::size_t x0 = p % g.wo;
                    const std::size_t x1 = std::min(g.wo, x0 + (len - t));
                    T* dst = row + t;
                    const auto iy = static_cast<std::ptrdiff_t>(oy) * stride + static_cast<std::ptrdiff_t>(i) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + (x1 - x0), T(0));
                    } else {
                        const T* src = plane + static_cast<std::size_t>(iy) * g.w;
                        copy_span(src, off, stride, lo, hi, static_cast<std::ptrdiff_t>(x0),
                                  static_cast<std::ptrdiff_t>(x1), dst);
                    }
                    t += x1 - x0;
                }
            }
        }
    }
}

// Row r = (f*kh+i)*kw+j of `cols` holds gout[f, (y+p-i)/s, (x+p-j)/s] for the
// input pixels q0..q0+len, or zero when no output position maps there.
template <class T>
void gather_output_grad_tile(const ConvGeometry& g, const T* gout, std::size_t q0, std::size_t len, T* cols)
{
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto stride = static_cast<std::ptrdiff_t>(g.stride);
    const auto source = [&](std::size_t in, std::size_t k, std::size_t limit) -> std::ptrdiff_t {
        const auto num = static_cast<std::ptrdiff_t>(in) + pad - static_cast<std::ptrdiff_t>(k);
        if (num < 0 || num % stride != 0) return -1;
        const auto o = num / stride;
        return o < static_cast<std::ptrdiff_t>(limit) ? o : -1;
    };
    for (std::size_t f = 0; f < g.f; ++f) {
        const T* plane = gout + f * g.out_plane();
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = cols + ((f * g.kh + i) * g.kw + j) * len;
                std::size_t t = 0;
                while (t < len) {
                    const std::size_t q = q0 + t;
                    const std::size_t y = q / g.w;
                    const std::size_t x0 = q % g.w;
                    const std::size_t x1 = std::min(g.w, x0 + (len - t));
                    T* dst = row + t;
                    const auto oy = source(y, i, g.ho);
                    if (oy < 0) {
                        std::fill(dst, dst + (x1 - x0), T(0));
                    } else if (stride == 1) {
                        const T* src = plane + static_cast<std::size_t>(oy) * g.wo;
                        const auto off = pad - static_cast<std::ptrdiff_t>(j);
                        copy_span(src, off, std::ptrdiff_t{1}, std::max<std::ptrdiff_t>(0, -off),
                                  static_cast<std::ptrdiff_t>(g.wo) - off, static_cast<std::ptrdiff_t>(x0),
                                  static_cast<std::ptrdiff_t>(x1), dst);
                    } else {
                        const T* src = plane + static_cast<std::size_t>(oy) * g.wo;
                        for (std::size_t x = x0; x < x1; ++x) {
                            const auto ox = source(x, j, g.wo);
                            dst[x - x0] = ox >= 0 ? src[ox] : T(0);
                        }
                    }
                    t += x1 - x0;
                }
            }
        }
    }
}

template <class T>
void require_rank(const Tensor<T>& t, std::size_t rank, std::string_view what)
{
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got shape "
                         + to_string(t.shape()));
}

} // namespace detail

/// 2-D cross-correlation with zero padding.
template <class T>
Tensor<T> conv2d(Graph<T>* graph, const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0)
{
    using namespace detail;
    require_rank(input, 4, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    require_rank(bias, 1, "conv2d bias");
    if (stride == 0) throw ShapeError("conv2d stride must be positive");
    ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                   kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
    if (kernel.dim(1) != g.c)
        throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) + ", kernel "
                         + to_string(kernel.shape()));
    if (bias.dim(0) != g.f) throw ShapeError("conv2d bias length must equal kernel count");
    if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw)
        throw ShapeError("conv2d kernel larger than padded input");
    if ((g.h + 2 * padding - g.kh) % stride != 0 || (g.w + 2 * padding - g.kw) % stride != 0)
        throw ShapeError("conv2d output size is not integral for input " + to_string(input.shape())
                         + " with stride " + std::to_string(stride));
    g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
    g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

    Tensor<T> out(Shape{g.n, g.f, g.ho, g.wo});
    const std::size_t tiles = ceil_div(g.out_plane(), kConvTile);
    const bool recording = records(graph, {&input, &kernel, &bias});
    {
        const T* in = input.data().data();
        const T* bptr = bias.data().data();
        T* optr = out.data().data();
        // Row-major [F, patch] weights read as column-major [patch, F]; output
        // rows read as columns, so the pixel axis is the long GEMM dimension.
        Eigen::Map<const ColMat<T>> weights(kernel.data().data(), g.patch(), g.f);
        parallel_for(g.n * tiles, [&](std::size_t chunk) {
            const std::size_t n = chunk / tiles;
            const std::size_t t0 = (chunk % tiles) * kConvTile;
            const std::size_t len = std::min(kConvTile, g.out_plane() - t0);
            T* buf = scratch<T>(g.patch() * len).data();
            im2col_tile(g, in + n * g.c * g.in_plane(), t0, len, buf);
            Eigen::Map<const ColMat<T>> cols(buf, len, g.patch());
            StridedCols<T> dst(optr + n * g.f * g.out_plane() + t0, len, g.f, Eigen::OuterStride<>(g.out_plane()));
            dst.noalias() = cols * weights;
            for (std::size_t f = 0; f < g.f; ++f) dst.col(f).array() += bptr[f];
        });
    }
    check_finite(out, "conv2d");

    if (recording) {
        auto xb = input.storage();
        auto kb = kernel.storage();
        auto bb = bias.storage();
        auto ob = out.storage();
        graph->record("conv2d", {xb, kb, bb}, ob, [g, xb, kb, bb, ob] {
            const T* gout = ob->grad.data();
            if (xb->requires_grad) {
                // Kernel rearranged to [F*kh*kw, C] so that grad_in = gathered(gout) * K'.
                const std::size_t kk = g.kh * g.kw;
                ColMat<T> rearranged(g.f * kk, g.c);
                for (std::size_t f = 0; f < g.f; ++f)
                    for (std::size_t c = 0; c < g.c; ++c)
                        for (std::size_t k = 0; k < kk; ++k)
                            rearranged(f * kk + k, c) = kb->data[(f * g.c + c) * kk + k];
                const std::size_t in_tiles = ceil_div(g.in_plane(), kConvTile);
                T* gin = xb->grad.data();
                parallel_for(g.n * in_tiles, [&](std::size_t chunk) {
                    const std::size_t n = chunk / in_tiles;
                    const std::size_t q0 = (chunk % in_tiles) * kConvTile;
                    const std::size_t len = std::min(kConvTile, g.in_plane() - q0);
                    auto& buf = scratch<T>(g.f * kk * len);
                    gather_output_grad_tile(g, gout + n * g.f * g.out_plane(), q0, len, buf.data());
                    Eigen::Map<const ColMat<T>> cols(buf.data(), len, g.f * kk);
                    StridedCols<T> dst(gin + n * g.c * g.in_plane() + q0, len, g.c, Eigen::OuterStride<>(g.in_plane()));
                    dst.noalias() += cols * rearranged;
                });
            }
            if (kb->requires_grad || bb->requires_grad) {
                const std::size_t tiles = ceil_div(g.out_plane(), kConvTile);
                const std::size_t total = g.n * tiles;
                const std::size_t groups = std::min(total, kReduceGroups);
                const std::size_t wsize = g.f * g.patch();
                std::vector<T> wpartial(groups * wsize, T(0));
                std::vector<double> bpartial(groups * g.f, 0.0);
                const T* in = xb->data.data();
                parallel_for(groups, [&](std::size_t grp) {
                    Eigen::Map<ColMat<T>> pw(wpartial.data() + grp * wsize, g.patch(), g.f);
                    double* pb = bpartial.data() + grp * g.f;
                    for (std::size_t chunk = grp * total / groups; chunk < (grp + 1) * total / groups; ++chunk) {
                        const std::size_t n = chunk / tiles;
                        const std::size_t t0 = (chunk % tiles) * kConvTile;
                        const std::size_t len = std::min(kConvTile, g.out_plane() - t0);
                        ConstStridedCols<T> go(gout + n * g.f * g.out_plane() + t0, len, g.f,
                                               Eigen::OuterStride<>(g.out_plane()));
                        if (kb->requires_grad) {
                            auto& buf = scratch<T>(g.patch() * len);
                            im2col_tile(g, in + n * g.c * g.in_plane(), t0, len, buf.data());
                            Eigen::Map<const ColMat<T>> cols(buf.data(), len, g.patch());
                            pw.noalias() += cols.transpose() * go;
                        }
                        for (std::size_t f = 0; f < g.f; ++f) {
                            double s = 0.0;
                            for (std::size_t t = 0; t < len; ++t) s += go(t, f);
                            pb[f] += s;
                        }
                    }
                });
                if (kb->requires_grad) {
                    for (std::size_t i = 0; i < wsize; ++i) {
                        double s = 0.0;
                        for (std::size_t grp = 0; grp < groups; ++grp) s += wpartial[grp * wsize + i];
                        kb->grad[i] += static_cast<T>(s);
                    }
                }
                if (bb->requires_grad) {
                    for (std::size_t f = 0; f < g.f; ++f) {
                        double s = 0.0;
                        for (std::size_t grp = 0; grp < groups; ++grp) s += bpartial[grp * g.f + f];
                        bb->grad[f] += static_cast<T>(s);
                    }
                }
            }
        });
    }
    return out;
}

/// Non-overlapping max pooling. Ties resolve to the first cell in row-major order.
template <class T>
Tensor<T> maxpool2d(Graph<T>* graph, const Tensor<T>& input, std::size_t window)
{
    detail::require_rank(input, 4, "maxpool2d input");
    if (window == 0) throw ShapeError("maxpool2d window must be positive");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % window != 0 || w % window != 0)
        throw ShapeError("maxpool2d: " + to_string(input.shape()) + " not divisible by window "
                         + std::to_string(window));
    const std::size_t ho = h / window, wo = w / window;
    Tensor<T> out(Shape{n, c, ho, wo});
    std::vector<std::uint32_t> argmax(out.numel());
    const T* in = input.data().data();
    T* optr = out.data().data();
    parallel_for(n * c, [&](std::size_t p) {
        const T* plane = in + p * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = oy * window * w + ox * window;
                for (std::size_t i = 0; i < window; ++i)
                    for (std::size_t j = 0; j < window; ++j) {
                        const std::size_t idx = (oy * window + i) * w + ox * window + j;
                        if (plane[idx] > plane[best]) best = idx;
                    }
                const std::size_t o = p * ho * wo + oy * wo + ox;
                optr[o] = plane[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    });
    if (detail::records(graph, {&input})) {
        auto xb = input.storage();
        auto ob = out.storage();
        graph->record("maxpool2d", {xb}, ob, [xb, ob, argmax = std::move(argmax), h, w, ho, wo, planes = n * c] {
            parallel_for(planes, [&](std::size_t p) {
                for (std::size_t o = p * ho * wo; o < (p + 1) * ho * wo; ++o)
                    xb->grad[p * h * w + argmax[o]] += ob->grad[o];
            });
        });
    }
    return out;
}

/// Nearest-neighbour 2x upsampling.
template <class T>
Tensor<T> upsample2x(Graph<T>* graph, const Tensor<T>& input)
{
    detail::require_rank(input, 4, "upsample2x input");
    const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
    const T* in = input.data().data();
    T* optr = out.data().data();
    parallel_for(n * c, [&](std::size_t p) {
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t x = 0; x < 2 * w; ++x)
                optr[p * 4 * h * w + y * 2 * w + x] = in[p * h * w + (y / 2) * w + x / 2];
    });
    if (detail::records(graph, {&input})) {
        auto xb = input.storage();
        auto ob = out.storage();
        graph->record("upsample2x", {xb}, ob, [xb, ob, h, w, planes = n * c] {
            parallel_for(planes, [&](std::size_t p) {
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        const T* g = ob->grad.data() + p * 4 * h * w + 2 * y * 2 * w + 2 * x;
                        xb->grad[p * h * w + y * w + x] += (g[0] + g[1]) + (g[2 * w] + g[2 * w + 1]);
                    }
            });
        });
    }
    return out;
}

/// Stacks b's channels after a's.
template <class T>
Tensor<T> concat_channels(Graph<T>* graph, const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_rank(a, 4, "concat_channels lhs");
    detail::require_rank(b, 4, "concat_channels rhs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
    Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
    auto dst = out.data().begin();
    for (std::size_t i = 0; i < n; ++i) {
        dst = std::copy_n(a.data().begin() + i * ca * plane, ca * plane, dst);
        dst = std::copy_n(b.data().begin() + i * cb * plane, cb * plane, dst);
    }
    if (detail::records(graph, {&a, &b})) {
        auto ab = a.storage();
        auto bb = b.storage();
        auto ob = out.storage();
        graph->record("concat_channels", {ab, bb}, ob, [ab, bb, ob, n, ca, cb, plane] {
            for (std::size_t i = 0; i < n; ++i) {
                const T* g = ob->grad.data() + i * (ca + cb) * plane;
                if (ab->requires_grad)
                    for (std::size_t k = 0; k < ca * plane; ++k) ab->grad[i * ca * plane + k] += g[k];
                if (bb->requires_grad)
                    for (std::size_t k = 0; k < cb * plane; ++k) bb->grad[i * cb * plane + k] += g[ca * plane + k];
            }
        });
    }
    return out;
}

/// relu: max(0, x). sigmoid: 1/(1+exp(-x)) with the exponent clamped to
/// [-30, 30] and the result kept strictly inside (0, 1) at T's precision.
template <class T>
Tensor<T> activation(Graph<T>* graph, const Tensor<T>& input, Activation kind)
{
    Tensor<T> out(input.shape());
    const auto in = input.data();
    auto o = out.data();
    if (kind == Activation::relu) {
        for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
    } else {
        const T hi = std::nextafter(T(1), T(0));
        const T lo = std::numeric_limits<T>::min();
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double x = std::clamp(static_cast<double>(in[i]), -30.0, 30.0);
            o[i] = std::clamp(static_cast<T>(1.0 / (1.0 + std::exp(-x))), lo, hi);
        }
    }
    detail::check_finite(out, "activation");
    if (detail::records(graph, {&input})) {
        auto xb = input.storage();
        auto ob = out.storage();
        if (kind == Activation::relu) {
            graph->record("relu", {xb}, ob, [xb, ob] {
                for (std::size_t i = 0; i < xb->data.size(); ++i)
                    if (xb->data[i] > T(0)) xb->grad[i] += ob->grad[i];
            });
        } else {
            graph->record("sigmoid", {xb}, ob, [xb, ob] {
                for (std::size_t i = 0; i < xb->data.size(); ++i) {
                    const T s = ob->data[i];
                    xb->grad[i] += ob->grad[i] * s * (T(1) - s);
                }
            });
        }
    }
    return out;
}

template <class T>
Tensor<T> relu(Graph<T>* graph, const Tensor<T>& input)
{
    return activation(graph, input, Activation::relu);
}

template <class T>
Tensor<T> sigmoid(Graph<T>* graph, const Tensor<T>& input)
{
    return activation(graph, input, Activation::sigmoid);
}

/// [N, C, H, W] (or any rank >= 2) -> [N, C*H*W].
template <class T>
Tensor<T> flatten(Graph<T>* graph, const Tensor<T>& input)
{
    if (input.rank() < 2) throw ShapeError("flatten needs rank >= 2, got " + to_string(input.shape()));
    const std::size_t n = input.dim(0);
    Tensor<T> out(Shape{n, input.numel() / n}, std::vector<T>(input.data().begin(), input.data().end()));
    if (detail::records(graph, {&input})) {
        auto xb = input.storage();
        auto ob = out.storage();
        graph->record("flatten", {xb}, ob, [xb, ob] {
            for (std::size_t i = 0; i < xb->grad.size(); ++i) xb->grad[i] += ob->grad[i];
        });
    }
    return out;
}

/// Affine map x·W + b with double accumulation.
template <class T>
Tensor<T> dense(Graph<T>* graph, const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias)
{
    detail::require_rank(input, 2, "dense input");
    detail::require_rank(weights, 2, "dense weights");
    detail::require_rank(bias, 1, "dense bias");
    const std::size_t n = input.dim(0), d = input.dim(1), m = weights.dim(1);
    if (weights.dim(0) != d || bias.dim(0) != m)
        throw ShapeError("dense: input " + to_string(input.shape()) + ", weights " + to_string(weights.shape())
                         + ", bias " + to_string(bias.shape()));
    Tensor<T> out(Shape{n, m});
    const T* x = input.data().data();
    const T* wt = weights.data().data();
    std::vector<double> acc(m);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < m; ++k) acc[k] = bias[k];
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = x[r * d + i];
            for (std::size_t k = 0; k < m; ++k) acc[k] += xi * wt[i * m + k];
        }
        for (std::size_t k = 0; k < m; ++k) out[r * m + k] = static_cast<T>(acc[k]);
    }
    detail::check_finite(out, "dense");
    if (detail::records(graph, {&input, &weights, &bias})) {
        auto xb = input.storage();
        auto wb = weights.storage();
        auto bb = bias.storage();
        auto ob = out.storage();
        graph->record("dense", {xb, wb, bb}, ob, [xb, wb, bb, ob, n, d, m] {
            const T* go = ob->grad.data();
            if (xb->requires_grad)
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < d; ++i) {
                        double s = 0.0;
                        for (std::size_t k = 0; k < m; ++k) s += static_cast<double>(go[r * m + k]) * wb->data[i * m + k];
                        xb->grad[r * d + i] += static_cast<T>(s);
                    }
            if (wb->requires_grad)
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t k = 0; k < m; ++k) {
                        double s = 0.0;
                        for (std::size_t r = 0; r < n; ++r) s += static_cast<double>(xb->data[r * d + i]) * go[r * m + k];
                        wb->grad[i * m + k] += static_cast<T>(s);
                    }
            if (bb->requires_grad)
                for (std::size_t k = 0; k < m; ++k) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < n; ++r) s += go[r * m + k];
                    bb->grad[k] += static_cast<T>(s);
                }
        });
    }
    return out;
}

/// Multiplies every element by a constant.
template <class T>
Tensor<T> scale(Graph<T>* graph, const Tensor<T>& input, T factor)
{
    Tensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] * factor;
    detail::check_finite(out, "scale");
    if (detail::records(graph, {&input})) {
        auto xb = input.storage();
        auto ob = out.storage();
        graph->record("scale", {xb}, ob, [xb, ob, factor] {
            for (std::size_t i = 0; i < xb->grad.size(); ++i) xb->grad[i] += ob->grad[i] * factor;
        });
    }
    return out;
}

/// Scalar Σ x[i]·weights[i], accumulated in double. An empty weight vector means all ones.
template <class T>
Tensor<T> weighted_sum(Graph<T>* graph, const Tensor<T>& input, std::vector<T> weights = {})
{
    if (!weights.empty() && weights.size() != input.numel())
        throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for "
                         + std::to_string(input.numel()) + " elements");
    if (weights.empty()) weights.assign(input.numel(), T(1));
    double s = 0.0;
    for (std::size_t i = 0; i < input.numel(); ++i) s += static_cast<double>(input[i]) * weights[i];
    auto out = Tensor<T>::scalar(static_cast<T>(s));
    detail::check_finite(out, "weighted_sum");
    if (detail::records(graph, {&input})) {
        auto xb = input.storage();
        auto ob = out.storage();
        graph->record("weighted_sum", {xb}, ob, [xb, ob, weights = std::move(weights)] {
            for (std::size_t i = 0; i < xb->grad.size(); ++i) xb->grad[i] += ob->grad[0] * weights[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sum(Graph<T>* graph, const Tensor<T>& input)
{
    return weighted_sum(graph, input);
}

/// Mean binary cross-entropy. Predictions are clamped to [1e-7, 1-1e-7];
/// the gradient is taken at the clamped value (no zeroing at the clamp).
/// Only `pred` is differentiated.
template <class T>
Tensor<T> bce_loss(Graph<T>* graph, const Tensor<T>& pred, const Tensor<T>& target)
{
    if (pred.shape() != target.shape())
        throw ShapeError("bce_loss: pred " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
    constexpr double eps = detail::kBceEpsilon;
    const std::size_t n = pred.numel();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(static_cast<double>(pred[i]), eps, 1.0 - eps);
        const double y = target[i];
        total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    auto out = Tensor<T>::scalar(static_cast<T>(std::max(0.0, total / static_cast<double>(n))));
    if (detail::records(graph, {&pred})) {
        auto pb = pred.storage();
        auto tb = target.storage();
        auto ob = out.storage();
        graph->record("bce_loss", {pb, tb}, ob, [pb, tb, ob, n] {
            const double g = static_cast<double>(ob->grad[0]) / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double p = std::clamp(static_cast<double>(pb->data[i]), detail::kBceEpsilon,
                                            1.0 - detail::kBceEpsilon);
                const double y = tb->data[i];
                pb->grad[i] += static_cast<T>(g * (p - y) / (p * (1.0 - p)));
            }
        });
    }
    return out;
}

} // namespace cxrb
