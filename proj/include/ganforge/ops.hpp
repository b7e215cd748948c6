#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ganforge/errors.hpp"
#include "ganforge/tape.hpp"
#include "ganforge/tensor.hpp"
#include "ganforge/threads.hpp"

namespace ganforge {

namespace detail {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    return (a >= 0) ? a / b : -((-a + b - 1) / b);
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    return (a >= 0) ? (a + b - 1) / b : -((-a) / b);
}

// Broadcast rules: equal rank with per-dim extents matching or 1, or a
// 1-element operand against anything.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (numel(a) == 1 && a.size() != b.size()) return b;
    if (numel(b) == 1 && a.size() != b.size()) return a;
    if (a.size() != b.size())
        throw ShapeError(std::string(op) + ": rank mismatch between " + shape_str(a) + " and " + shape_str(b));
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || b[i] == 1)
            out[i] = a[i];
        else if (a[i] == 1)
            out[i] = b[i];
        else
            throw ShapeError(std::string(op) + ": incompatible extents at dim " + std::to_string(i) + " between " +
                             shape_str(a) + " and " + shape_str(b));
    }
    return out;
}

// Row-major strides with 0 where the operand broadcasts.
inline std::vector<std::int64_t> broadcast_strides(const Shape& operand, const Shape& out) {
    std::vector<std::int64_t> strides(out.size(), 0);
    if (numel(operand) == 1) return strides;
    std::int64_t acc = 1;
    for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
        const std::int64_t ext = operand[static_cast<std::size_t>(i)];
        strides[static_cast<std::size_t>(i)] = (ext == 1) ? 0 : acc;
        acc *= ext;
    }
    return strides;
}

template <typename S, typename F>
Tensor<S> binary_map(const Tensor<S>& a, const Tensor<S>& b, F f, const char* op) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    Tensor<S> out(out_shape);
    const std::int64_t n = out.size();
    if (a.same_shape(b)) {
        const S* pa = a.data();
        const S* pb = b.data();
        S* po = out.data();
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    const Shape ash = (a.size() == 1 && a.shape().size() != out_shape.size()) ? Shape(out_shape.size(), 1) : a.shape();
    const Shape bsh = (b.size() == 1 && b.shape().size() != out_shape.size()) ? Shape(out_shape.size(), 1) : b.shape();
    const auto sa = broadcast_strides(ash, out_shape);
    const auto sb = broadcast_strides(bsh, out_shape);
    std::vector<std::int64_t> idx(out_shape.size(), 0);
    std::int64_t off_a = 0, off_b = 0;
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::int64_t flat = 0; flat < n; ++flat) {
        po[flat] = f(pa[off_a], pb[off_b]);
        for (int d = static_cast<int>(out_shape.size()) - 1; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            ++idx[du];
            off_a += sa[du];
            off_b += sb[du];
            if (idx[du] < out_shape[du]) break;
            off_a -= sa[du] * out_shape[du];
            off_b -= sb[du] * out_shape[du];
            idx[du] = 0;
        }
    }
    return out;
}

}  // namespace detail

// Sums `g` down to `target` shape, undoing broadcast expansion.
template <typename S>
Tensor<S> reduce_to_shape(const Tensor<S>& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor<S> out(target);
    if (out.size() == 1) {
        S acc = 0;
        const S* p = g.data();
        for (std::int64_t i = 0; i < g.size(); ++i) acc += p[i];
        out.at(0) = acc;
        return out;
    }
    if (target.size() != g.shape().size())
        throw ShapeError("reduce_to_shape: rank mismatch " + shape_str(g.shape()) + " -> " + shape_str(target));
    const auto strides = detail::broadcast_strides(target, g.shape());
    std::vector<std::int64_t> idx(g.shape().size(), 0);
    std::int64_t off = 0;
    const S* p = g.data();
    S* po = out.data();
    for (std::int64_t flat = 0; flat < g.size(); ++flat) {
        po[off] += p[flat];
        for (int d = static_cast<int>(g.shape().size()) - 1; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            ++idx[du];
            off += strides[du];
            if (idx[du] < g.shape()[du]) break;
            off -= strides[du] * g.shape()[du];
            idx[du] = 0;
        }
    }
    return out;
}

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::binary_map(a, b, [](S x, S y) { return x + y; }, "add");
    out.require_finite("add");
    if (tape.recording()) {
        const Shape as = a.shape(), bs = b.shape();
        tape.record(out.id(), {a.id(), b.id()}, [=](const Tensor<S>& dout, GradMap<S>& grads) {
            accumulate_grad(grads, a.id(), reduce_to_shape(dout, as));
            accumulate_grad(grads, b.id(), reduce_to_shape(dout, bs));
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::binary_map(a, b, [](S x, S y) { return x * y; }, "mul");
    out.require_finite("mul");
    if (tape.recording()) {
        tape.record(out.id(), {a.id(), b.id()}, [=](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> da = detail::binary_map(dout, b, [](S x, S y) { return x * y; }, "mul.grad");
            Tensor<S> db = detail::binary_map(dout, a, [](S x, S y) { return x * y; }, "mul.grad");
            accumulate_grad(grads, a.id(), reduce_to_shape(da, a.shape()));
            accumulate_grad(grads, b.id(), reduce_to_shape(db, b.shape()));
        });
    }
    return out;
}

// scale * x + shift, elementwise with scalar coefficients.
template <typename S>
Tensor<S> affine(Tape<S>& tape, const Tensor<S>& x, S scale, S shift) {
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = scale * px[i] + shift;
    out.require_finite("affine");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [xid = x.id(), scale](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(dout.shape());
            const S* pd = dout.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < dout.size(); ++i) pdx[i] = scale * pd[i];
            accumulate_grad(grads, xid, dx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> neg(Tape<S>& tape, const Tensor<S>& x) {
    return affine(tape, x, S(-1), S(0));
}

template <typename S>
Tensor<S> log(Tape<S>& tape, const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        if (!(px[i] > S(0)))
            throw DomainError("log: non-positive value " + std::to_string(static_cast<double>(px[i])) +
                              " at flat index " + std::to_string(i));
        po[i] = std::log(px[i]);
    }
    out.require_finite("log");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [x](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(x.shape());
            const S* pd = dout.data();
            const S* px2 = x.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < x.size(); ++i) pdx[i] = pd[i] / px2[i];
            accumulate_grad(grads, x.id(), dx);
        });
    }
    return out;
}

// Mean over all elements; the reduction that turns batch terms into a loss.
template <typename S>
Tensor<S> mean(Tape<S>& tape, const Tensor<S>& x) {
    if (x.size() == 0) throw ArgumentError("mean: empty tensor");
    S acc = 0;
    const S* px = x.data();
    for (std::int64_t i = 0; i < x.size(); ++i) acc += px[i];
    Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(x.size()));
    out.require_finite("mean");
    if (tape.recording()) {
        const Shape xs = x.shape();
        const std::int64_t n = x.size();
        tape.record(out.id(), {x.id()}, [xid = x.id(), xs, n](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx = Tensor<S>::full(xs, dout.at(0) / static_cast<S>(n));
            accumulate_grad(grads, xid, dx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& x, Shape shape) {
    Tensor<S> out = x.viewed(std::move(shape));
    if (tape.recording()) {
        const Shape xs = x.shape();
        tape.record(out.id(), {x.id()}, [xid = x.id(), xs](const Tensor<S>& dout, GradMap<S>& grads) {
            accumulate_grad(grads, xid, dout.viewed(xs).clone());
        });
    }
    return out;
}

template <typename S>
Tensor<S> flatten(Tape<S>& tape, const Tensor<S>& x) {
    return reshape(tape, x, Shape{x.size()});
}

template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
    out.require_finite("relu");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [x](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(x.shape());
            const S* pd = dout.data();
            const S* px2 = x.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < x.size(); ++i) pdx[i] = px2[i] >= S(0) ? pd[i] : S(0);
            accumulate_grad(grads, x.id(), dx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> leaky_relu(Tape<S>& tape, const Tensor<S>& x, S slope) {
    if (!(slope > S(0) && slope < S(1)))
        throw ArgumentError("leaky_relu: slope must lie in (0,1), got " + std::to_string(static_cast<double>(slope)));
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = px[i] >= S(0) ? px[i] : slope * px[i];
    out.require_finite("leaky_relu");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [x, slope](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(x.shape());
            const S* pd = dout.data();
            const S* px2 = x.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < x.size(); ++i) pdx[i] = px2[i] >= S(0) ? pd[i] : slope * pd[i];
            accumulate_grad(grads, x.id(), dx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> tanh(Tape<S>& tape, const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = std::tanh(px[i]);
    out.require_finite("tanh");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [xid = x.id(), out](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(out.shape());
            const S* pd = dout.data();
            const S* py = out.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < out.size(); ++i) pdx[i] = pd[i] * (S(1) - py[i] * py[i]);
            accumulate_grad(grads, xid, dx);
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const S v = px[i];
        po[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
    }
    out.require_finite("sigmoid");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [xid = x.id(), out](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(out.shape());
            const S* pd = dout.data();
            const S* py = out.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < out.size(); ++i) pdx[i] = pd[i] * py[i] * (S(1) - py[i]);
            accumulate_grad(grads, xid, dx);
        });
    }
    return out;
}

// Gradient passes only strictly inside (lo, hi); pinned values are constants.
template <typename S>
Tensor<S> clamp(Tape<S>& tape, const Tensor<S>& x, S lo, S hi) {
    if (!(lo <= hi)) throw ArgumentError("clamp: lo must not exceed hi");
    Tensor<S> out(x.shape());
    const S* px = x.data();
    S* po = out.data();
    for (std::int64_t i = 0; i < x.size(); ++i) po[i] = std::min(hi, std::max(lo, px[i]));
    out.require_finite("clamp");
    if (tape.recording()) {
        tape.record(out.id(), {x.id()}, [x, lo, hi](const Tensor<S>& dout, GradMap<S>& grads) {
            Tensor<S> dx(x.shape());
            const S* pd = dout.data();
            const S* px2 = x.data();
            S* pdx = dx.data();
            for (std::int64_t i = 0; i < x.size(); ++i) pdx[i] = (px2[i] > lo && px2[i] < hi) ? pd[i] : S(0);
            accumulate_grad(grads, x.id(), dx);
        });
    }
    return out;
}

namespace detail {

template <typename S>
void conv2d_check(const Tensor<S>& input, const Tensor<S>& weight, const std::optional<Tensor<S>>& bias,
                  std::int64_t stride, std::int64_t padding, bool transposed) {
    if (stride <= 0) throw ArgumentError("conv: stride must be positive, got " + std::to_string(stride));
    if (padding < 0) throw ArgumentError("conv: padding must be non-negative, got " + std::to_string(padding));
    if (input.rank() != 4)
        throw ShapeError("conv: input must be rank-4 [N,C,H,W], got " + shape_str(input.shape()));
    if (weight.rank() != 4)
        throw ShapeError("conv: weight must be rank-4, got " + shape_str(weight.shape()));
    const std::int64_t in_channels = input.dim(1);
    const std::int64_t weight_in = transposed ? weight.dim(0) : weight.dim(1);
    const std::int64_t out_channels = transposed ? weight.dim(1) : weight.dim(0);
    if (in_channels != weight_in)
        throw ShapeError("conv: input has " + std::to_string(in_channels) + " channels but weight expects " +
                         std::to_string(weight_in) + " (input " + shape_str(input.shape()) + ", weight " +
                         shape_str(weight.shape()) + ")");
    if (bias && (bias->rank() != 1 || bias->dim(0) != out_channels))
        throw ShapeError("conv: bias must be [" + std::to_string(out_channels) + "], got " + shape_str(bias->shape()));
}

// out[n,o,oh,ow] = sum_{c,kh,kw} in[n,c,oh*s-p+kh, ow*s-p+kw] * w[o,c,kh,kw]
template <typename S>
void conv2d_forward_kernel(const Tensor<S>& input, const Tensor<S>& weight, const S* bias, Tensor<S>& out,
                           std::int64_t stride, std::int64_t padding) {
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    const std::int64_t OH = out.dim(2), OW = out.dim(3);
    const S* in = input.data();
    const S* w = weight.data();
    S* po = out.data();
    parallel_for(N * O, [&](std::int64_t task) {
        const std::int64_t n = task / O, o = task % O;
        S* out_plane = po + (n * O + o) * OH * OW;
        const S b = bias ? bias[o] : S(0);
        for (std::int64_t i = 0; i < OH * OW; ++i) out_plane[i] = b;
        for (std::int64_t c = 0; c < C; ++c) {
            const S* in_chan = in + (n * C + c) * H * W;
            const S* w_chan = w + (o * C + c) * KH * KW;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const S wv = w_chan[kh * KW + kw];
                    if (wv == S(0)) continue;
                    const std::int64_t oh_lo = std::max<std::int64_t>(0, ceil_div(padding - kh, stride));
                    const std::int64_t oh_hi = std::min<std::int64_t>(OH - 1, floor_div(H - 1 + padding - kh, stride));
                    const std::int64_t ow_lo = std::max<std::int64_t>(0, ceil_div(padding - kw, stride));
                    const std::int64_t ow_hi = std::min<std::int64_t>(OW - 1, floor_div(W - 1 + padding - kw, stride));
                    for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        const S* in_row = in_chan + ih * W;
                        S* out_row = out_plane + oh * OW;
                        for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                            out_row[ow] += wv * in_row[ow * stride - padding + kw];
                    }
                }
            }
        }
    });
}

// dIn[n,c,ih,iw] += sum over positions that read it in the forward pass.
template <typename S>
void conv2d_backward_input_kernel(const Tensor<S>& dout, const Tensor<S>& weight, Tensor<S>& din,
                                  std::int64_t stride, std::int64_t padding) {
    const std::int64_t N = din.dim(0), C = din.dim(1), H = din.dim(2), W = din.dim(3);
    const std::int64_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    const std::int64_t OH = dout.dim(2), OW = dout.dim(3);
    const S* pd = dout.data();
    const S* w = weight.data();
    S* pi = din.data();
    parallel_for(N * C, [&](std::int64_t task) {
        const std::int64_t n = task / C, c = task % C;
        S* din_plane = pi + (n * C + c) * H * W;
        for (std::int64_t o = 0; o < O; ++o) {
            const S* dout_plane = pd + (n * O + o) * OH * OW;
            const S* w_chan = w + (o * C + c) * KH * KW;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const S wv = w_chan[kh * KW + kw];
                    if (wv == S(0)) continue;
                    const std::int64_t oh_lo = std::max<std::int64_t>(0, ceil_div(padding - kh, stride));
                    const std::int64_t oh_hi = std::min<std::int64_t>(OH - 1, floor_div(H - 1 + padding - kh, stride));
                    const std::int64_t ow_lo = std::max<std::int64_t>(0, ceil_div(padding - kw, stride));
                    const std::int64_t ow_hi = std::min<std::int64_t>(OW - 1, floor_div(W - 1 + padding - kw, stride));
                    for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        S* din_row = din_plane + ih * W;
                        const S* dout_row = dout_plane + oh * OW;
                        for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                            din_row[ow * stride - padding + kw] += wv * dout_row[ow];
                    }
                }
            }
        }
    });
}

template <typename S>
void conv2d_backward_weight_kernel(const Tensor<S>& dout, const Tensor<S>& input, Tensor<S>& dweight,
                                   std::int64_t stride, std::int64_t padding) {
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = dweight.dim(0), KH = dweight.dim(2), KW = dweight.dim(3);
    const std::int64_t OH = dout.dim(2), OW = dout.dim(3);
    const S* pd = dout.data();
    const S* in = input.data();
    S* pw = dweight.data();
    parallel_for(O, [&](std::int64_t o) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const std::int64_t oh_lo = std::max<std::int64_t>(0, ceil_div(padding - kh, stride));
                    const std::int64_t oh_hi = std::min<std::int64_t>(OH - 1, floor_div(H - 1 + padding - kh, stride));
                    const std::int64_t ow_lo = std::max<std::int64_t>(0, ceil_div(padding - kw, stride));
                    const std::int64_t ow_hi = std::min<std::int64_t>(OW - 1, floor_div(W - 1 + padding - kw, stride));
                    S acc = 0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const S* dout_plane = pd + (n * O + o) * OH * OW;
                        const S* in_chan = in + (n * C + c) * H * W;
                        for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                            const std::int64_t ih = oh * stride - padding + kh;
                            const S* in_row = in_chan + ih * W - padding + kw;
                            const S* dout_row = dout_plane + oh * OW;
                            for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) acc += dout_row[ow] * in_row[ow * stride];
                        }
                    }
                    pw[((o * C + c) * KH + kh) * KW + kw] = acc;
                }
            }
        }
    });
}

template <typename S>
void channel_sum_kernel(const Tensor<S>& dout, Tensor<S>& dbias) {
    const std::int64_t N = dout.dim(0), O = dout.dim(1), plane = dout.dim(2) * dout.dim(3);
    const S* pd = dout.data();
    S* pb = dbias.data();
    for (std::int64_t o = 0; o < O; ++o) {
        S acc = 0;
        for (std::int64_t n = 0; n < N; ++n) {
            const S* p = pd + (n * O + o) * plane;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
        }
        pb[o] = acc;
    }
}

// out[n,o,ih*s-p+kh, iw*s-p+kw] += in[n,c,ih,iw] * w[c,o,kh,kw]
template <typename S>
void conv_transpose2d_forward_kernel(const Tensor<S>& input, const Tensor<S>& weight, const S* bias, Tensor<S>& out,
                                     std::int64_t stride, std::int64_t padding) {
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    const std::int64_t OH = out.dim(2), OW = out.dim(3);
    const S* in = input.data();
    const S* w = weight.data();
    S* po = out.data();
    parallel_for(N * O, [&](std::int64_t task) {
        const std::int64_t n = task / O, o = task % O;
        S* out_plane = po + (n * O + o) * OH * OW;
        const S b = bias ? bias[o] : S(0);
        for (std::int64_t i = 0; i < OH * OW; ++i) out_plane[i] = b;
        for (std::int64_t c = 0; c < C; ++c) {
            const S* in_chan = in + (n * C + c) * H * W;
            const S* w_chan = w + (c * O + o) * KH * KW;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const S wv = w_chan[kh * KW + kw];
                    if (wv == S(0)) continue;
                    // valid input rows/cols whose scatter target stays in range
                    const std::int64_t ih_lo = std::max<std::int64_t>(0, ceil_div(padding - kh, stride));
                    const std::int64_t ih_hi = std::min<std::int64_t>(H - 1, floor_div(OH - 1 + padding - kh, stride));
                    const std::int64_t iw_lo = std::max<std::int64_t>(0, ceil_div(padding - kw, stride));
                    const std::int64_t iw_hi = std::min<std::int64_t>(W - 1, floor_div(OW - 1 + padding - kw, stride));
                    for (std::int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                        const std::int64_t oh = ih * stride - padding + kh;
                        const S* in_row = in_chan + ih * W;
                        S* out_row = out_plane + oh * OW - padding + kw;
                        for (std::int64_t iw = iw_lo; iw <= iw_hi; ++iw) out_row[iw * stride] += wv * in_row[iw];
                    }
                }
            }
        }
    });
}

// Gather form of the adjoint: dIn[n,c,ih,iw] = sum_{o,kh,kw} w[c,o,kh,kw] * dOut[n,o,ih*s-p+kh, iw*s-p+kw]
template <typename S>
void conv_transpose2d_backward_input_kernel(const Tensor<S>& dout, const Tensor<S>& weight, Tensor<S>& din,
                                            std::int64_t stride, std::int64_t padding) {
    const std::int64_t N = din.dim(0), C = din.dim(1), H = din.dim(2), W = din.dim(3);
    const std::int64_t O = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    const std::int64_t OH = dout.dim(2), OW = dout.dim(3);
    const S* pd = dout.data();
    const S* w = weight.data();
    S* pi = din.data();
    parallel_for(N * C, [&](std::int64_t task) {
        const std::int64_t n = task / C, c = task % C;
        S* din_plane = pi + (n * C + c) * H * W;
        for (std::int64_t o = 0; o < O; ++o) {
            const S* dout_plane = pd + (n * O + o) * OH * OW;
            const S* w_chan = w + (c * O + o) * KH * KW;
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const S wv = w_chan[kh * KW + kw];
                    if (wv == S(0)) continue;
                    const std::int64_t ih_lo = std::max<std::int64_t>(0, ceil_div(padding - kh, stride));
                    const std::int64_t ih_hi = std::min<std::int64_t>(H - 1, floor_div(OH - 1 + padding - kh, stride));
                    const std::int64_t iw_lo = std::max<std::int64_t>(0, ceil_div(padding - kw, stride));
                    const std::int64_t iw_hi = std::min<std::int64_t>(W - 1, floor_div(OW - 1 + padding - kw, stride));
                    for (std::int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                        const std::int64_t oh = ih * stride - padding + kh;
                        S* din_row = din_plane + ih * W;
                        const S* dout_row = dout_plane + oh * OW - padding + kw;
                        for (std::int64_t iw = iw_lo; iw <= iw_hi; ++iw) din_row[iw] += wv * dout_row[iw * stride];
                    }
                }
            }
        }
    });
}

template <typename S>
void conv_transpose2d_backward_weight_kernel(const Tensor<S>& dout, const Tensor<S>& input, Tensor<S>& dweight,
                                             std::int64_t stride, std::int64_t padding) {
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = dweight.dim(1), KH = dweight.dim(2), KW = dweight.dim(3);
    const std::int64_t OH = dout.dim(2), OW = dout.dim(3);
    const S* pd = dout.data();
    const S* in = input.data();
    S* pw = dweight.data();
    parallel_for(C, [&](std::int64_t c) {
        for (std::int64_t o = 0; o < O; ++o) {
            for (std::int64_t kh = 0; kh < KH; ++kh) {
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const std::int64_t ih_lo = std::max<std::int64_t>(0, ceil_div(padding - kh, stride));
                    const std::int64_t ih_hi = std::min<std::int64_t>(H - 1, floor_div(OH - 1 + padding - kh, stride));
                    const std::int64_t iw_lo = std::max<std::int64_t>(0, ceil_div(padding - kw, stride));
                    const std::int64_t iw_hi = std::min<std::int64_t>(W - 1, floor_div(OW - 1 + padding - kw, stride));
                    S acc = 0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const S* in_chan = in + (n * C + c) * H * W;
                        const S* dout_plane = pd + (n * O + o) * OH * OW;
                        for (std::int64_t ih = ih_lo; ih <= ih_hi; ++ih) {
                            const std::int64_t oh = ih * stride - padding + kh;
                            const S* in_row = in_chan + ih * W;
                            const S* dout_row = dout_plane + oh * OW - padding + kw;
                            for (std::int64_t iw = iw_lo; iw <= iw_hi; ++iw) acc += in_row[iw] * dout_row[iw * stride];
                        }
                    }
                    pw[((c * O + o) * KH + kh) * KW + kw] = acc;
                }
            }
        }
    });
}

}  // namespace detail

// Cross-correlation (no kernel flip). input [N,C,H,W], weight [O,C,kh,kw].
template <typename S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& input, const Tensor<S>& weight,
                 const std::optional<Tensor<S>>& bias, std::int64_t stride, std::int64_t padding) {
    detail::conv2d_check(input, weight, bias, stride, padding, false);
    const std::int64_t N = input.dim(0), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    if (H + 2 * padding < KH || W + 2 * padding < KW)
        throw ShapeError("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) +
                         " exceeds padded input " + shape_str(input.shape()) + " with padding " +
                         std::to_string(padding));
    const std::int64_t OH = (H + 2 * padding - KH) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - KW) / stride + 1;
    Tensor<S> out(Shape{N, O, OH, OW});
    detail::conv2d_forward_kernel(input, weight, bias ? bias->data() : nullptr, out, stride, padding);
    out.require_finite("conv2d");
    if (tape.recording()) {
        std::vector<std::int64_t> parents{input.id(), weight.id()};
        if (bias) parents.push_back(bias->id());
        const std::int64_t bias_id = bias ? bias->id() : -1;
        tape.record(out.id(), parents,
                    [input, weight, bias_id, stride, padding](const Tensor<S>& dout, GradMap<S>& grads) {
                        Tensor<S> din(input.shape());
                        detail::conv2d_backward_input_kernel(dout, weight, din, stride, padding);
                        accumulate_grad(grads, input.id(), din);
                        Tensor<S> dw(weight.shape());
                        detail::conv2d_backward_weight_kernel(dout, input, dw, stride, padding);
                        accumulate_grad(grads, weight.id(), dw);
                        if (bias_id >= 0) {
                            Tensor<S> db(Shape{dout.dim(1)});
                            detail::channel_sum_kernel(dout, db);
                            accumulate_grad(grads, bias_id, db);
                        }
                    });
    }
    return out;
}

// Linear adjoint of conv2d with the same (stride, padding).
// input [N,C,H,W], weight [C,O,kh,kw], output spatial (H-1)*stride - 2*padding + kh.
template <typename S>
Tensor<S> conv_transpose2d(Tape<S>& tape, const Tensor<S>& input, const Tensor<S>& weight,
                           const std::optional<Tensor<S>>& bias, std::int64_t stride, std::int64_t padding) {
    detail::conv2d_check(input, weight, bias, stride, padding, true);
    const std::int64_t N = input.dim(0), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
    const std::int64_t OH = (H - 1) * stride - 2 * padding + KH;
    const std::int64_t OW = (W - 1) * stride - 2 * padding + KW;
    if (OH <= 0 || OW <= 0)
        throw GeometryError("conv_transpose2d: output extent " + std::to_string(OH) + "x" + std::to_string(OW) +
                            " is not positive for input " + shape_str(input.shape()) + ", kernel " +
                            std::to_string(KH) + ", stride " + std::to_string(stride) + ", padding " +
                            std::to_string(padding));
    Tensor<S> out(Shape{N, O, OH, OW});
    detail::conv_transpose2d_forward_kernel(input, weight, bias ? bias->data() : nullptr, out, stride, padding);
    out.require_finite("conv_transpose2d");
    if (tape.recording()) {
        std::vector<std::int64_t> parents{input.id(), weight.id()};
        if (bias) parents.push_back(bias->id());
        const std::int64_t bias_id = bias ? bias->id() : -1;
        tape.record(out.id(), parents,
                    [input, weight, bias_id, stride, padding](const Tensor<S>& dout, GradMap<S>& grads) {
                        Tensor<S> din(input.shape());
                        detail::conv_transpose2d_backward_input_kernel(dout, weight, din, stride, padding);
                        accumulate_grad(grads, input.id(), din);
                        Tensor<S> dw(weight.shape());
                        detail::conv_transpose2d_backward_weight_kernel(dout, input, dw, stride, padding);
                        accumulate_grad(grads, weight.id(), dw);
                        if (bias_id >= 0) {
                            Tensor<S> db(Shape{dout.dim(1)});
                            detail::channel_sum_kernel(dout, db);
                            accumulate_grad(grads, bias_id, db);
                        }
                    });
    }
    return out;
}

}  // namespace ganforge
