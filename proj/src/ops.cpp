#include "spectra/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>

namespace spectra::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_finite(const char* op, const Tensor& t) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + ": non-finite value in output");
        }
    }
}

bool track(const Tape& tape, std::initializer_list<const Tensor*> ts) {
    if (!tape.recording()) {
        return false;
    }
    for (const Tensor* t : ts) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

std::int64_t prod(const Shape& s, int from, int to) {
    std::int64_t p = 1;
    for (int i = from; i < to; ++i) {
        p *= s[static_cast<std::size_t>(i)];
    }
    return p;
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

// --- relu kink freezing -----------------------------------------------------

struct ReluFreeze {
    enum class Phase { off, capture, replay };
    Phase phase = Phase::off;
    std::vector<std::shared_ptr<std::vector<std::uint8_t>>> masks;
    std::size_t cursor = 0;
};

thread_local ReluFreeze g_relu_freeze;

}  // namespace

void relu_freeze_capture() {
    g_relu_freeze.phase = ReluFreeze::Phase::capture;
    g_relu_freeze.masks.clear();
    g_relu_freeze.cursor = 0;
}

void relu_freeze_replay() {
    g_relu_freeze.phase = ReluFreeze::Phase::replay;
    g_relu_freeze.cursor = 0;
}

void relu_freeze_off() {
    g_relu_freeze.phase = ReluFreeze::Phase::off;
    g_relu_freeze.masks.clear();
    g_relu_freeze.cursor = 0;
}

// --- elementwise ------------------------------------------------------------

Tensor relu(Tape& tape, const Tensor& input) {
    const auto& x = input.data();
    const std::size_t n = x.size();

    auto mask = std::make_shared<std::vector<std::uint8_t>>();
    if (g_relu_freeze.phase == ReluFreeze::Phase::replay) {
        if (g_relu_freeze.cursor >= g_relu_freeze.masks.size()) {
            throw std::logic_error("relu: frozen mask replay exhausted");
        }
        mask = g_relu_freeze.masks[g_relu_freeze.cursor++];
        if (mask->size() != n) {
            throw std::logic_error("relu: frozen mask shape mismatch");
        }
    } else {
        mask->resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            // derivative at exactly 0 is 0, so the mask is strict
            (*mask)[i] = x[i] > 0.0 ? 1 : 0;
        }
        if (g_relu_freeze.phase == ReluFreeze::Phase::capture) {
            g_relu_freeze.masks.push_back(mask);
        }
    }

    Tensor out(input.shape());
    auto& y = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = (*mask)[i] ? x[i] : 0.0;
    }
    check_finite("relu", out);

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input}, out, [xi, oi, mask]() {
            if (!xi->requires_grad) return;
            auto& gx = detail::grad_buffer(*xi);
            const auto& go = oi->grad;
            for (std::size_t i = 0; i < go.size(); ++i) {
                if ((*mask)[i]) gx[i] += go[i];
            }
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = ad[i] + bd[i];
    }
    check_finite("add", out);

    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.shared_impl();
        auto bi = b.shared_impl();
        auto oi = out.shared_impl();
        tape.record({a, b}, out, [ai, bi, oi]() {
            const auto& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::grad_buffer(*ai);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_buffer(*bi);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor add_broadcast(Tape& tape, const Tensor& a, const Tensor& b) {
    if (b.dim() >= a.dim()) {
        shape_error("add_broadcast", "b must have lower rank than a");
    }
    const int off = a.dim() - b.dim();
    for (int i = 0; i < b.dim(); ++i) {
        if (a.shape()[static_cast<std::size_t>(off + i)] != b.shape()[static_cast<std::size_t>(i)]) {
            shape_error("add_broadcast",
                        shape_str(b.shape()) + " is not a suffix of " + shape_str(a.shape()));
        }
    }
    const std::size_t nb = static_cast<std::size_t>(b.size());
    Tensor out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = ad[i] + bd[i % nb];
    }
    check_finite("add_broadcast", out);

    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.shared_impl();
        auto bi = b.shared_impl();
        auto oi = out.shared_impl();
        tape.record({a, b}, out, [ai, bi, oi, nb]() {
            const auto& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::grad_buffer(*ai);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_buffer(*bi);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] += go[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_error("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = ad[i] * bd[i];
    }
    check_finite("mul", out);

    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.shared_impl();
        auto bi = b.shared_impl();
        auto oi = out.shared_impl();
        tape.record({a, b}, out, [ai, bi, oi]() {
            const auto& go = oi->grad;
            if (ai->requires_grad) {
                auto& ga = detail::grad_buffer(*ai);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_buffer(*bi);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
    Tensor out(a.shape());
    const auto& ad = a.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = ad[i] * factor;
    }
    check_finite("scale", out);

    if (track(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.shared_impl();
        auto oi = out.shared_impl();
        tape.record({a}, out, [ai, oi, factor]() {
            if (!ai->requires_grad) return;
            auto& ga = detail::grad_buffer(*ai);
            const auto& go = oi->grad;
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
        });
    }
    return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) {
        acc += v;
    }
    Tensor out = Tensor::scalar(acc);
    check_finite("sum", out);

    if (track(tape, {&a})) {
        out.set_requires_grad(true);
        auto ai = a.shared_impl();
        auto oi = out.shared_impl();
        tape.record({a}, out, [ai, oi]() {
            if (!ai->requires_grad) return;
            auto& ga = detail::grad_buffer(*ai);
            const double g = oi->grad[0];
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

// --- shape ops ----------------------------------------------------------------

Tensor reshape(Tape& tape, const Tensor& input, Shape target) {
    if (numel(target) != input.size()) {
        shape_error("reshape", shape_str(input.shape()) + " -> " + shape_str(target));
    }
    Tensor out(std::move(target), input.data());
    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input}, out, [xi, oi]() {
            if (!xi->requires_grad) return;
            auto& gx = detail::grad_buffer(*xi);
            const auto& go = oi->grad;
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] =
            st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
    }
    return st;
}

// out[idx with axes a/b swapped] = in[idx]; runs over the input linearly.
void permuted_copy(const Shape& in_shape, int a, int b, const double* in, double* out,
                   bool accumulate_into_out) {
    Shape out_shape = in_shape;
    std::swap(out_shape[static_cast<std::size_t>(a)], out_shape[static_cast<std::size_t>(b)]);
    const auto out_strides = row_major_strides(out_shape);
    const int rank = static_cast<int>(in_shape.size());
    std::vector<std::int64_t> out_stride_for_in_axis(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        int j = i;
        if (i == a) j = b;
        else if (i == b) j = a;
        out_stride_for_in_axis[static_cast<std::size_t>(i)] = out_strides[static_cast<std::size_t>(j)];
    }
    const std::int64_t n = numel(in_shape);
    std::vector<std::int64_t> coord(static_cast<std::size_t>(rank), 0);
    for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t o = 0;
        for (int i = 0; i < rank; ++i) {
            o += coord[static_cast<std::size_t>(i)] * out_stride_for_in_axis[static_cast<std::size_t>(i)];
        }
        if (accumulate_into_out) {
            out[o] += in[flat];
        } else {
            out[o] = in[flat];
        }
        for (int i = rank - 1; i >= 0; --i) {
            if (++coord[static_cast<std::size_t>(i)] < in_shape[static_cast<std::size_t>(i)]) break;
            coord[static_cast<std::size_t>(i)] = 0;
        }
    }
}

}  // namespace

Tensor transpose(Tape& tape, const Tensor& input, int axis_a, int axis_b) {
    const int rank = input.dim();
    if (axis_a < 0 || axis_a >= rank || axis_b < 0 || axis_b >= rank) {
        shape_error("transpose", "axes out of range for " + shape_str(input.shape()));
    }
    Shape out_shape = input.shape();
    std::swap(out_shape[static_cast<std::size_t>(axis_a)], out_shape[static_cast<std::size_t>(axis_b)]);
    Tensor out(out_shape);
    permuted_copy(input.shape(), axis_a, axis_b, input.data().data(), out.data().data(), false);

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto oi = out.shared_impl();
        const Shape in_shape = input.shape();
        tape.record({input}, out, [xi, oi, in_shape, axis_a, axis_b, out_shape]() {
            if (!xi->requires_grad) return;
            auto& gx = detail::grad_buffer(*xi);
            // swapping the same axes maps the output grad back
            permuted_copy(out_shape, axis_a, axis_b, oi->grad.data(), gx.data(), true);
        });
    }
    return out;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        shape_error("concat", "no inputs");
    }
    const int rank = parts.front().dim();
    if (axis < 0 || axis >= rank) {
        shape_error("concat", "axis out of range");
    }
    Shape out_shape = parts.front().shape();
    int axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.dim() != rank) {
            shape_error("concat", "rank mismatch");
        }
        for (int i = 0; i < rank; ++i) {
            if (i != axis && p.shape()[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
                shape_error("concat", "extent mismatch off the concat axis");
            }
        }
        axis_total += p.extent(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    const std::int64_t outer = prod(out_shape, 0, axis);
    const std::int64_t inner = prod(out_shape, axis + 1, rank);
    Tensor out(out_shape);
    auto& y = out.data();
    const std::int64_t out_block = static_cast<std::int64_t>(axis_total) * inner;
    std::vector<std::int64_t> part_blocks;
    std::int64_t offset = 0;
    for (const Tensor& p : parts) {
        const std::int64_t block = static_cast<std::int64_t>(p.extent(axis)) * inner;
        const auto& pd = p.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(pd.data() + o * block, block, y.data() + o * out_block + offset);
        }
        part_blocks.push_back(block);
        offset += block;
    }
    check_finite("concat", out);

    bool any = false;
    for (const Tensor& p : parts) {
        any = any || p.requires_grad();
    }
    if (tape.recording() && any) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        for (const Tensor& p : parts) {
            impls.push_back(p.shared_impl());
        }
        auto oi = out.shared_impl();
        tape.record(parts, out, [impls, oi, part_blocks, outer, out_block]() {
            const auto& go = oi->grad;
            std::int64_t off = 0;
            for (std::size_t p = 0; p < impls.size(); ++p) {
                const std::int64_t block = part_blocks[p];
                if (impls[p]->requires_grad) {
                    auto& g = detail::grad_buffer(*impls[p]);
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = go.data() + o * out_block + off;
                        double* dst = g.data() + o * block;
                        for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                }
                off += block;
            }
        });
    }
    return out;
}

Tensor mean_over_axis(Tape& tape, const Tensor& input, int axis) {
    const int rank = input.dim();
    if (axis < 0 || axis >= rank) {
        shape_error("mean_over_axis", "axis out of range for " + shape_str(input.shape()));
    }
    const std::int64_t outer = prod(input.shape(), 0, axis);
    const std::int64_t k = input.extent(axis);
    const std::int64_t inner = prod(input.shape(), axis + 1, rank);
    Shape out_shape;
    for (int i = 0; i < rank; ++i) {
        if (i != axis) out_shape.push_back(input.shape()[static_cast<std::size_t>(i)]);
    }
    Tensor out(out_shape);
    const auto& x = input.data();
    auto& y = out.data();
    const double inv_k = 1.0 / static_cast<double>(k);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < k; ++j) {
                acc += x[(o * k + j) * inner + i];
            }
            y[o * inner + i] = acc * inv_k;
        }
    }
    check_finite("mean_over_axis", out);

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input}, out, [xi, oi, outer, k, inner, inv_k]() {
            if (!xi->requires_grad) return;
            auto& gx = detail::grad_buffer(*xi);
            const auto& go = oi->grad;
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t j = 0; j < k; ++j) {
                    for (std::int64_t i = 0; i < inner; ++i) {
                        gx[(o * k + j) * inner + i] += go[o * inner + i] * inv_k;
                    }
                }
            }
        });
    }
    return out;
}

// --- dense algebra --------------------------------------------------------

Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.dim() < 1 || weight.dim() != 2 || bias.dim() != 1) {
        shape_error("linear", "expected input [...,in], weight [out,in], bias [out]");
    }
    const int in_features = input.shape().back();
    const int out_features = weight.extent(0);
    if (weight.extent(1) != in_features || bias.extent(0) != out_features) {
        shape_error("linear", shape_str(input.shape()) + " x " + shape_str(weight.shape()) +
                                  " + " + shape_str(bias.shape()));
    }
    const std::int64_t rows = input.size() / in_features;
    Shape out_shape = input.shape();
    out_shape.back() = out_features;
    Tensor out(out_shape);

    CMapMat x(input.data().data(), rows, in_features);
    CMapMat w(weight.data().data(), out_features, in_features);
    MapMat y(out.data().data(), rows, out_features);
    y.noalias() = x * w.transpose();
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out_features);
    check_finite("linear", out);

    if (track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto wi = weight.shared_impl();
        auto bi = bias.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input, weight, bias}, out, [xi, wi, bi, oi, rows, in_features, out_features]() {
            CMapMat go(oi->grad.data(), rows, out_features);
            if (xi->requires_grad) {
                MapMat gx(detail::grad_buffer(*xi).data(), rows, in_features);
                CMapMat w(wi->data.data(), out_features, in_features);
                gx.noalias() += go * w;
            }
            if (wi->requires_grad) {
                MapMat gw(detail::grad_buffer(*wi).data(), out_features, in_features);
                CMapMat x(xi->data.data(), rows, in_features);
                gw.noalias() += go.transpose() * x;
            }
            if (bi->requires_grad) {
                Eigen::Map<Eigen::RowVectorXd> gb(detail::grad_buffer(*bi).data(), out_features);
                gb += go.colwise().sum();
            }
        });
    }
    return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || b.dim() != a.dim()) {
        shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int rank = a.dim();
    for (int i = 0; i < rank - 2; ++i) {
        if (a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)]) {
            shape_error("matmul", "leading extents differ");
        }
    }
    const std::int64_t m = a.shape()[static_cast<std::size_t>(rank - 2)];
    const std::int64_t k = a.shape()[static_cast<std::size_t>(rank - 1)];
    const std::int64_t k2 = b.shape()[static_cast<std::size_t>(rank - 2)];
    const std::int64_t n = b.shape()[static_cast<std::size_t>(rank - 1)];
    if (k != k2) {
        shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(rank - 1)] = static_cast<int>(n);
    const std::int64_t batch = prod(a.shape(), 0, rank - 2);
    Tensor out(out_shape);
    for (std::int64_t s = 0; s < batch; ++s) {
        CMapMat xa(a.data().data() + s * m * k, m, k);
        CMapMat xb(b.data().data() + s * k * n, k, n);
        MapMat y(out.data().data() + s * m * n, m, n);
        y.noalias() = xa * xb;
    }
    check_finite("matmul", out);

    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.shared_impl();
        auto bi = b.shared_impl();
        auto oi = out.shared_impl();
        tape.record({a, b}, out, [ai, bi, oi, batch, m, k, n]() {
            for (std::int64_t s = 0; s < batch; ++s) {
                CMapMat go(oi->grad.data() + s * m * n, m, n);
                if (ai->requires_grad) {
                    MapMat ga(detail::grad_buffer(*ai).data() + s * m * k, m, k);
                    CMapMat xb(bi->data.data() + s * k * n, k, n);
                    ga.noalias() += go * xb.transpose();
                }
                if (bi->requires_grad) {
                    MapMat gb(detail::grad_buffer(*bi).data() + s * k * n, k, n);
                    CMapMat xa(ai->data.data() + s * m * k, m, k);
                    gb.noalias() += xa.transpose() * go;
                }
            }
        });
    }
    return out;
}

// --- normalization ----------------------------------------------------------

Tensor softmax(Tape& tape, const Tensor& input, int axis) {
    const int rank = input.dim();
    if (axis < 0 || axis >= rank) {
        shape_error("softmax", "axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(input.shape()));
    }
    const std::int64_t outer = prod(input.shape(), 0, axis);
    const std::int64_t k = input.extent(axis);
    const std::int64_t inner = prod(input.shape(), axis + 1, rank);
    Tensor out(input.shape());
    const auto& x = input.data();
    auto& y = out.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * k * inner + i;
            double mx = x[static_cast<std::size_t>(base)];
            for (std::int64_t j = 1; j < k; ++j) {
                mx = std::max(mx, x[static_cast<std::size_t>(base + j * inner)]);
            }
            double denom = 0.0;
            for (std::int64_t j = 0; j < k; ++j) {
                const double e = std::exp(x[static_cast<std::size_t>(base + j * inner)] - mx);
                y[static_cast<std::size_t>(base + j * inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (std::int64_t j = 0; j < k; ++j) {
                y[static_cast<std::size_t>(base + j * inner)] *= inv;
            }
        }
    }
    check_finite("softmax", out);

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input}, out, [xi, oi, outer, k, inner]() {
            if (!xi->requires_grad) return;
            auto& gx = detail::grad_buffer(*xi);
            const auto& go = oi->grad;
            const auto& y = oi->data;
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::int64_t base = o * k * inner + i;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < k; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * inner);
                        dot += go[idx] * y[idx];
                    }
                    for (std::int64_t j = 0; j < k; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * inner);
                        gx[idx] += y[idx] * (go[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

Tensor layernorm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 double eps) {
    if (eps <= 0.0) {
        throw std::invalid_argument("layernorm: eps must be positive");
    }
    if (input.dim() < 1 || gamma.dim() != 1 || beta.dim() != 1) {
        shape_error("layernorm", "expected input [...,k], gamma/beta [k]");
    }
    const std::int64_t k = input.shape().back();
    if (gamma.extent(0) != k || beta.extent(0) != k) {
        shape_error("layernorm", "gamma/beta extent must match the last axis");
    }
    const std::int64_t rows = input.size() / k;
    Tensor out(input.shape());
    auto xhat = std::make_shared<std::vector<double>>(input.data().size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    const auto& x = input.data();
    const auto& g = gamma.data();
    const auto& bt = beta.data();
    auto& y = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * k;
        double mean = 0.0;
        for (std::int64_t j = 0; j < k; ++j) mean += xr[j];
        mean /= static_cast<double>(k);
        double var = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(k);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = istd;
        for (std::int64_t j = 0; j < k; ++j) {
            const double xh = (xr[j] - mean) * istd;
            (*xhat)[static_cast<std::size_t>(r * k + j)] = xh;
            y[static_cast<std::size_t>(r * k + j)] = g[static_cast<std::size_t>(j)] * xh +
                                                     bt[static_cast<std::size_t>(j)];
        }
    }
    check_finite("layernorm", out);

    if (track(tape, {&input, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto gi = gamma.shared_impl();
        auto bi = beta.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input, gamma, beta}, out, [xi, gi, bi, oi, xhat, inv_std, rows, k]() {
            const auto& go = oi->grad;
            if (gi->requires_grad) {
                auto& gg = detail::grad_buffer(*gi);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < k; ++j) {
                        const auto idx = static_cast<std::size_t>(r * k + j);
                        gg[static_cast<std::size_t>(j)] += go[idx] * (*xhat)[idx];
                    }
                }
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_buffer(*bi);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < k; ++j) {
                        gb[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(r * k + j)];
                    }
                }
            }
            if (xi->requires_grad) {
                auto& gx = detail::grad_buffer(*xi);
                const auto& g = gi->data;
                for (std::int64_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t j = 0; j < k; ++j) {
                        const auto idx = static_cast<std::size_t>(r * k + j);
                        const double dxh = go[idx] * g[static_cast<std::size_t>(j)];
                        s1 += dxh;
                        s2 += dxh * (*xhat)[idx];
                    }
                    s1 /= static_cast<double>(k);
                    s2 /= static_cast<double>(k);
                    const double istd = (*inv_std)[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < k; ++j) {
                        const auto idx = static_cast<std::size_t>(r * k + j);
                        const double dxh = go[idx] * g[static_cast<std::size_t>(j)];
                        gx[idx] += istd * (dxh - s1 - (*xhat)[idx] * s2);
                    }
                }
            }
        });
    }
    return out;
}

Tensor batchnorm(Tape& tape, const Tensor& input, int channel_axis, const Tensor& gamma,
                 const Tensor& beta, double eps, Mode mode, Tensor& running_mean,
                 Tensor& running_var, double momentum) {
    if (eps <= 0.0) {
        throw std::invalid_argument("batchnorm: eps must be positive");
    }
    const int rank = input.dim();
    if (channel_axis < 0 || channel_axis >= rank) {
        shape_error("batchnorm", "channel axis out of range");
    }
    const std::int64_t channels = input.extent(channel_axis);
    if (gamma.size() != channels || beta.size() != channels || running_mean.size() != channels ||
        running_var.size() != channels) {
        shape_error("batchnorm", "gamma/beta/running stats must have the channel extent");
    }
    const std::int64_t outer = prod(input.shape(), 0, channel_axis);
    const std::int64_t inner = prod(input.shape(), channel_axis + 1, rank);
    const std::int64_t m = outer * inner;  // reduction set per channel

    const bool batch_stats = mode == Mode::train && input.extent(0) > 1;

    std::vector<double> mean(static_cast<std::size_t>(channels));
    std::vector<double> var(static_cast<std::size_t>(channels));
    const auto& x = input.data();
    if (batch_stats) {
        for (std::int64_t c = 0; c < channels; ++c) {
            double s = 0.0;
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* xc = x.data() + (o * channels + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) s += xc[i];
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* xc = x.data() + (o * channels + c) * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    const double d = xc[i] - mu;
                    v += d * d;
                }
            }
            mean[static_cast<std::size_t>(c)] = mu;
            var[static_cast<std::size_t>(c)] = v / static_cast<double>(m);
        }
        auto& rm = running_mean.data();
        auto& rv = running_var.data();
        for (std::int64_t c = 0; c < channels; ++c) {
            rm[static_cast<std::size_t>(c)] = (1.0 - momentum) * rm[static_cast<std::size_t>(c)] +
                                              momentum * mean[static_cast<std::size_t>(c)];
            rv[static_cast<std::size_t>(c)] = (1.0 - momentum) * rv[static_cast<std::size_t>(c)] +
                                              momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        mean = running_mean.data();
        var = running_var.data();
    }

    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
        (*inv_std)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
    }

    Tensor out(input.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto& y = out.data();
    const auto& g = gamma.data();
    const auto& bt = beta.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t c = 0; c < channels; ++c) {
            const std::int64_t base = (o * channels + c) * inner;
            const double mu = mean[static_cast<std::size_t>(c)];
            const double istd = (*inv_std)[static_cast<std::size_t>(c)];
            const double gc = g[static_cast<std::size_t>(c)];
            const double bc = bt[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < inner; ++i) {
                const double xh = (x[static_cast<std::size_t>(base + i)] - mu) * istd;
                (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                y[static_cast<std::size_t>(base + i)] = gc * xh + bc;
            }
        }
    }
    check_finite("batchnorm", out);

    if (track(tape, {&input, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto gi = gamma.shared_impl();
        auto bi = beta.shared_impl();
        auto oi = out.shared_impl();
        tape.record({input, gamma, beta}, out,
                    [xi, gi, bi, oi, xhat, inv_std, outer, channels, inner, m, batch_stats]() {
            const auto& go = oi->grad;
            std::vector<double> s1(static_cast<std::size_t>(channels), 0.0);
            std::vector<double> s2(static_cast<std::size_t>(channels), 0.0);
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t c = 0; c < channels; ++c) {
                    const std::int64_t base = (o * channels + c) * inner;
                    double a1 = 0.0, a2 = 0.0;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        const auto idx = static_cast<std::size_t>(base + i);
                        a1 += go[idx];
                        a2 += go[idx] * (*xhat)[idx];
                    }
                    s1[static_cast<std::size_t>(c)] += a1;
                    s2[static_cast<std::size_t>(c)] += a2;
                }
            }
            if (gi->requires_grad) {
                auto& gg = detail::grad_buffer(*gi);
                for (std::int64_t c = 0; c < channels; ++c) {
                    gg[static_cast<std::size_t>(c)] += s2[static_cast<std::size_t>(c)];
                }
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_buffer(*bi);
                for (std::int64_t c = 0; c < channels; ++c) {
                    gb[static_cast<std::size_t>(c)] += s1[static_cast<std::size_t>(c)];
                }
            }
            if (xi->requires_grad) {
                auto& gx = detail::grad_buffer(*xi);
                const auto& g = gi->data;
                const double inv_m = 1.0 / static_cast<double>(m);
                for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t c = 0; c < channels; ++c) {
                        const std::int64_t base = (o * channels + c) * inner;
                        const double gc = g[static_cast<std::size_t>(c)];
                        const double istd = (*inv_std)[static_cast<std::size_t>(c)];
                        const double m1 = batch_stats ? s1[static_cast<std::size_t>(c)] * inv_m : 0.0;
                        const double m2 = batch_stats ? s2[static_cast<std::size_t>(c)] * inv_m : 0.0;
                        for (std::int64_t i = 0; i < inner; ++i) {
                            const auto idx = static_cast<std::size_t>(base + i);
                            gx[idx] += gc * istd * (go[idx] - m1 - (*xhat)[idx] * m2);
                        }
                    }
                }
            }
        });
    }
    return out;
}

// --- convolutions -----------------------------------------------------------

namespace {

int conv_out_extent(const char* op, int in, int kernel, int pad) {
    const int out = in + 2 * pad - kernel + 1;
    if (out < 1) {
        shape_error(op, "non-positive output extent (" + std::to_string(out) + ")");
    }
    return out;
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::array<int, 2> pad) {
    const bool batched = input.dim() == 4;
    if (!batched && input.dim() != 3) {
        shape_error("conv2d", "input must be [C,H,W] or [B,C,H,W], got " + shape_str(input.shape()));
    }
    if (weight.dim() != 4 || bias.dim() != 1) {
        shape_error("conv2d", "weight must be [Co,Ci,kh,kw] and bias [Co]");
    }
    if (pad[0] < 0 || pad[1] < 0) {
        shape_error("conv2d", "negative padding");
    }
    const int batch = batched ? input.extent(0) : 1;
    const int ci = input.extent(batched ? 1 : 0);
    const int h = input.extent(batched ? 2 : 1);
    const int w = input.extent(batched ? 3 : 2);
    const int co = weight.extent(0);
    const int kh = weight.extent(2);
    const int kw = weight.extent(3);
    if (weight.extent(1) != ci) {
        shape_error("conv2d", "weight channel extent " + std::to_string(weight.extent(1)) +
                                  " vs input channels " + std::to_string(ci));
    }
    if (bias.extent(0) != co) {
        shape_error("conv2d", "bias extent vs output channels");
    }
    const int oh = conv_out_extent("conv2d", h, kh, pad[0]);
    const int ow = conv_out_extent("conv2d", w, kw, pad[1]);

    Shape out_shape = batched ? Shape{batch, co, oh, ow} : Shape{co, oh, ow};
    Tensor out(out_shape);
    const double* x = input.data().data();
    const double* wt = weight.data().data();
    const double* bs = bias.data().data();
    double* y = out.data().data();

    for (int b = 0; b < batch; ++b) {
        const double* xb = x + static_cast<std::int64_t>(b) * ci * h * w;
        double* yb = y + static_cast<std::int64_t>(b) * co * oh * ow;
        for (int c = 0; c < co; ++c) {
            double* yc = yb + static_cast<std::int64_t>(c) * oh * ow;
            std::fill_n(yc, static_cast<std::int64_t>(oh) * ow, bs[c]);
            for (int ic = 0; ic < ci; ++ic) {
                const double* xc = xb + static_cast<std::int64_t>(ic) * h * w;
                const double* wc = wt + (static_cast<std::int64_t>(c) * ci + ic) * kh * kw;
                for (int r = 0; r < kh; ++r) {
                    const int oh_lo = std::max(0, pad[0] - r);
                    const int oh_hi = std::min(oh - 1, h - 1 + pad[0] - r);
                    for (int s = 0; s < kw; ++s) {
                        const double wv = wc[r * kw + s];
                        const int ow_lo = std::max(0, pad[1] - s);
                        const int ow_hi = std::min(ow - 1, w - 1 + pad[1] - s);
                        const int off = s - pad[1];
                        for (int p = oh_lo; p <= oh_hi; ++p) {
                            const double* xrow = xc + static_cast<std::int64_t>(p + r - pad[0]) * w;
                            double* yrow = yc + static_cast<std::int64_t>(p) * ow;
                            for (int q = ow_lo; q <= ow_hi; ++q) {
                                yrow[q] += wv * xrow[q + off];
                            }
                        }
                    }
                }
            }
        }
    }
    check_finite("conv2d", out);

    if (track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto wi = weight.shared_impl();
        auto bi = bias.shared_impl();
        auto oi = out.shared_impl();
        const int ph = pad[0], pw = pad[1];
        tape.record({input, weight, bias}, out,
                    [xi, wi, bi, oi, batch, ci, h, w, co, kh, kw, oh, ow, ph, pw]() {
            const double* go = oi->grad.data();
            if (bi->requires_grad) {
                double* gb = detail::grad_buffer(*bi).data();
                for (int b = 0; b < batch; ++b) {
                    for (int c = 0; c < co; ++c) {
                        const double* g = go + (static_cast<std::int64_t>(b) * co + c) * oh * ow;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i) acc += g[i];
                        gb[c] += acc;
                    }
                }
            }
            const bool need_x = xi->requires_grad;
            const bool need_w = wi->requires_grad;
            if (!need_x && !need_w) return;
            double* gx = need_x ? detail::grad_buffer(*xi).data() : nullptr;
            double* gw = need_w ? detail::grad_buffer(*wi).data() : nullptr;
            const double* x = xi->data.data();
            const double* wt = wi->data.data();
            for (int b = 0; b < batch; ++b) {
                const double* xb = x + static_cast<std::int64_t>(b) * ci * h * w;
                double* gxb = need_x ? gx + static_cast<std::int64_t>(b) * ci * h * w : nullptr;
                for (int c = 0; c < co; ++c) {
                    const double* gc = go + (static_cast<std::int64_t>(b) * co + c) * oh * ow;
                    for (int ic = 0; ic < ci; ++ic) {
                        const double* xc = xb + static_cast<std::int64_t>(ic) * h * w;
                        const std::int64_t wbase = (static_cast<std::int64_t>(c) * ci + ic) * kh * kw;
                        for (int r = 0; r < kh; ++r) {
                            const int oh_lo = std::max(0, ph - r);
                            const int oh_hi = std::min(oh - 1, h - 1 + ph - r);
                            for (int s = 0; s < kw; ++s) {
                                const int ow_lo = std::max(0, pw - s);
                                const int ow_hi = std::min(ow - 1, w - 1 + pw - s);
                                const int off = s - pw;
                                if (need_w) {
                                    double acc = 0.0;
                                    for (int p = oh_lo; p <= oh_hi; ++p) {
                                        const double* xrow = xc + static_cast<std::int64_t>(p + r - ph) * w;
                                        const double* grow = gc + static_cast<std::int64_t>(p) * ow;
                                        for (int q = ow_lo; q <= ow_hi; ++q) {
                                            acc += grow[q] * xrow[q + off];
                                        }
                                    }
                                    gw[wbase + r * kw + s] += acc;
                                }
                                if (need_x) {
                                    const double wv = wt[wbase + r * kw + s];
                                    double* gxc = gxb + static_cast<std::int64_t>(ic) * h * w;
                                    for (int p = oh_lo; p <= oh_hi; ++p) {
                                        double* gxrow = gxc + static_cast<std::int64_t>(p + r - ph) * w;
                                        const double* grow = gc + static_cast<std::int64_t>(p) * ow;
                                        for (int q = ow_lo; q <= ow_hi; ++q) {
                                            gxrow[q + off] += wv * grow[q];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor conv3d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::array<int, 3> pad) {
    const bool batched = input.dim() == 5;
    if (!batched && input.dim() != 4) {
        shape_error("conv3d", "input must be [C,D,H,W] or [B,C,D,H,W], got " + shape_str(input.shape()));
    }
    if (weight.dim() != 5 || bias.dim() != 1) {
        shape_error("conv3d", "weight must be [Co,Ci,kd,kh,kw] and bias [Co]");
    }
    if (pad[0] < 0 || pad[1] < 0 || pad[2] < 0) {
        shape_error("conv3d", "negative padding");
    }
    const int batch = batched ? input.extent(0) : 1;
    const int ci = input.extent(batched ? 1 : 0);
    const int d = input.extent(batched ? 2 : 1);
    const int h = input.extent(batched ? 3 : 2);
    const int w = input.extent(batched ? 4 : 3);
    const int co = weight.extent(0);
    const int kd = weight.extent(2);
    const int kh = weight.extent(3);
    const int kw = weight.extent(4);
    if (weight.extent(1) != ci) {
        shape_error("conv3d", "weight channel extent vs input channels");
    }
    if (bias.extent(0) != co) {
        shape_error("conv3d", "bias extent vs output channels");
    }
    const int od = conv_out_extent("conv3d", d, kd, pad[0]);
    const int oh = conv_out_extent("conv3d", h, kh, pad[1]);
    const int ow = conv_out_extent("conv3d", w, kw, pad[2]);

    Shape out_shape = batched ? Shape{batch, co, od, oh, ow} : Shape{co, od, oh, ow};
    Tensor out(out_shape);
    const double* x = input.data().data();
    const double* wt = weight.data().data();
    const double* bs = bias.data().data();
    double* y = out.data().data();
    const std::int64_t in_chan = static_cast<std::int64_t>(d) * h * w;
    const std::int64_t out_chan = static_cast<std::int64_t>(od) * oh * ow;

    for (int b = 0; b < batch; ++b) {
        const double* xb = x + static_cast<std::int64_t>(b) * ci * in_chan;
        double* yb = y + static_cast<std::int64_t>(b) * co * out_chan;
        for (int c = 0; c < co; ++c) {
            double* yc = yb + static_cast<std::int64_t>(c) * out_chan;
            std::fill_n(yc, out_chan, bs[c]);
            for (int ic = 0; ic < ci; ++ic) {
                const double* xc = xb + static_cast<std::int64_t>(ic) * in_chan;
                const double* wc = wt + ((static_cast<std::int64_t>(c) * ci + ic) * kd) * kh * kw;
                for (int t = 0; t < kd; ++t) {
                    const int od_lo = std::max(0, pad[0] - t);
                    const int od_hi = std::min(od - 1, d - 1 + pad[0] - t);
                    for (int r = 0; r < kh; ++r) {
                        const int oh_lo = std::max(0, pad[1] - r);
                        const int oh_hi = std::min(oh - 1, h - 1 + pad[1] - r);
                        for (int s = 0; s < kw; ++s) {
                            const double wv = wc[(t * kh + r) * kw + s];
                            const int ow_lo = std::max(0, pad[2] - s);
                            const int ow_hi = std::min(ow - 1, w - 1 + pad[2] - s);
                            const int off = s - pad[2];
                            for (int u = od_lo; u <= od_hi; ++u) {
                                const double* xd = xc + static_cast<std::int64_t>(u + t - pad[0]) * h * w;
                                double* yd = yc + static_cast<std::int64_t>(u) * oh * ow;
                                for (int p = oh_lo; p <= oh_hi; ++p) {
                                    const double* xrow = xd + static_cast<std::int64_t>(p + r - pad[1]) * w;
                                    double* yrow = yd + static_cast<std::int64_t>(p) * ow;
                                    for (int q = ow_lo; q <= ow_hi; ++q) {
                                        yrow[q] += wv * xrow[q + off];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    check_finite("conv3d", out);

    if (track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        auto xi = input.shared_impl();
        auto wi = weight.shared_impl();
        auto bi = bias.shared_impl();
        auto oi = out.shared_impl();
        const int pd = pad[0], ph = pad[1], pw = pad[2];
        tape.record({input, weight, bias}, out,
                    [xi, wi, bi, oi, batch, ci, d, h, w, co, kd, kh, kw, od, oh, ow, pd, ph, pw,
                     in_chan, out_chan]() {
            const double* go = oi->grad.data();
            if (bi->requires_grad) {
                double* gb = detail::grad_buffer(*bi).data();
                for (int b = 0; b < batch; ++b) {
                    for (int c = 0; c < co; ++c) {
                        const double* g = go + (static_cast<std::int64_t>(b) * co + c) * out_chan;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < out_chan; ++i) acc += g[i];
                        gb[c] += acc;
                    }
                }
            }
            const bool need_x = xi->requires_grad;
            const bool need_w = wi->requires_grad;
            if (!need_x && !need_w) return;
            double* gx = need_x ? detail::grad_buffer(*xi).data() : nullptr;
            double* gw = need_w ? detail::grad_buffer(*wi).data() : nullptr;
            const double* x = xi->data.data();
            const double* wt = wi->data.data();
            for (int b = 0; b < batch; ++b) {
                const double* xb = x + static_cast<std::int64_t>(b) * ci * in_chan;
                double* gxb = need_x ? gx + static_cast<std::int64_t>(b) * ci * in_chan : nullptr;
                for (int c = 0; c < co; ++c) {
                    const double* gc = go + (static_cast<std::int64_t>(b) * co + c) * out_chan;
                    for (int ic = 0; ic < ci; ++ic) {
                        const double* xc = xb + static_cast<std::int64_t>(ic) * in_chan;
                        const std::int64_t wbase = ((static_cast<std::int64_t>(c) * ci + ic) * kd) * kh * kw;
                        for (int t = 0; t < kd; ++t) {
                            const int od_lo = std::max(0, pd - t);
                            const int od_hi = std::min(od - 1, d - 1 + pd - t);
                            for (int r = 0; r < kh; ++r) {
                                const int oh_lo = std::max(0, ph - r);
                                const int oh_hi = std::min(oh - 1, h - 1 + ph - r);
                                for (int s = 0; s < kw; ++s) {
                                    const int ow_lo = std::max(0, pw - s);
                                    const int ow_hi = std::min(ow - 1, w - 1 + pw - s);
                                    const int off = s - pw;
                                    const std::int64_t widx = wbase + (static_cast<std::int64_t>(t) * kh + r) * kw + s;
                                    if (need_w) {
                                        double acc = 0.0;
                                        for (int u = od_lo; u <= od_hi; ++u) {
                                            const double* xd = xc + static_cast<std::int64_t>(u + t - pd) * h * w;
                                            const double* gd = gc + static_cast<std::int64_t>(u) * oh * ow;
                                            for (int p = oh_lo; p <= oh_hi; ++p) {
                                                const double* xrow = xd + static_cast<std::int64_t>(p + r - ph) * w;
                                                const double* grow = gd + static_cast<std::int64_t>(p) * ow;
                                                for (int q = ow_lo; q <= ow_hi; ++q) {
                                                    acc += grow[q] * xrow[q + off];
                                                }
                                            }
                                        }
                                        gw[widx] += acc;
                                    }
                                    if (need_x) {
                                        const double wv = wt[widx];
                                        double* gxc = gxb + static_cast<std::int64_t>(ic) * in_chan;
                                        for (int u = od_lo; u <= od_hi; ++u) {
                                            double* gxd = gxc + static_cast<std::int64_t>(u + t - pd) * h * w;
                                            const double* gd = gc + static_cast<std::int64_t>(u) * oh * ow;
                                            for (int p = oh_lo; p <= oh_hi; ++p) {
                                                double* gxrow = gxd + static_cast<std::int64_t>(p + r - ph) * w;
                                                const double* grow = gd + static_cast<std::int64_t>(p) * ow;
                                                for (int q = ow_lo; q <= ow_hi; ++q) {
                                                    gxrow[q + off] += wv * grow[q];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// --- loss -------------------------------------------------------------------

Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.dim() != 2) {
        shape_error("cross_entropy", "logits must be [B,n], got " + shape_str(logits.shape()));
    }
    const int batch = logits.extent(0);
    const int classes = logits.extent(1);
    if (batch < 1 || static_cast<int>(labels.size()) != batch) {
        shape_error("cross_entropy", "labels must match the batch extent");
    }
    for (int b = 0; b < batch; ++b) {
        if (labels[static_cast<std::size_t>(b)] < 0 || labels[static_cast<std::size_t>(b)] >= classes) {
            throw std::out_of_range("cross_entropy: label " +
                                    std::to_string(labels[static_cast<std::size_t>(b)]) +
                                    " outside [0," + std::to_string(classes) + ")");
        }
    }

    const auto& x = logits.data();
    auto probs = std::make_shared<std::vector<double>>(x.size());
    double total = 0.0;
    for (int b = 0; b < batch; ++b) {
        const double* row = x.data() + static_cast<std::int64_t>(b) * classes;
        double mx = row[0];
        for (int j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < classes; ++j) {
            const double e = std::exp(row[j] - mx);
            (*probs)[static_cast<std::size_t>(b * classes + j)] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < classes; ++j) {
            (*probs)[static_cast<std::size_t>(b * classes + j)] *= inv;
        }
        const double lse = mx + std::log(denom);
        total += lse - row[labels[static_cast<std::size_t>(b)]];
    }
    Tensor out = Tensor::scalar(total / batch);
    check_finite("cross_entropy", out);

    if (track(tape, {&logits})) {
        out.set_requires_grad(true);
        auto xi = logits.shared_impl();
        auto oi = out.shared_impl();
        tape.record({logits}, out, [xi, oi, probs, labels, batch, classes]() {
            if (!xi->requires_grad) return;
            auto& gx = detail::grad_buffer(*xi);
            const double g = oi->grad[0] / batch;
            for (int b = 0; b < batch; ++b) {
                for (int j = 0; j < classes; ++j) {
                    const auto idx = static_cast<std::size_t>(b * classes + j);
                    const double onehot = j == labels[static_cast<std::size_t>(b)] ? 1.0 : 0.0;
                    gx[idx] += g * ((*probs)[idx] - onehot);
                }
            }
        });
    }
    return out;
}

}  // namespace spectra::ops
