#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "metadenoise/tensor.hpp"

namespace metadenoise::ad {

// Define-by-run reverse-mode autodiff. Every backward function emits nodes
// built from the same primitive set, so gradients are themselves
// differentiable graphs and second-order (and higher) derivatives come out of
// repeated calls to gradients(). This is what the meta-learning outer updates
// rely on.

template <typename T>
struct Node;

template <typename T>
using node = std::shared_ptr<Node<T>>;

template <typename T>
using BackwardFn =
    std::function<std::vector<node<T>>(const node<T>& self, const node<T>& grad)>;

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

template <typename T>
struct Node {
    Tensor<T> value;
    std::vector<node<T>> inputs;
    BackwardFn<T> backward;  // null for leaves and constants
    bool requires_grad = false;
    std::uint64_t id = 0;
    const char* op = "";
};

template <typename T>
node<T> leaf(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->id = next_node_id();
    n->op = "leaf";
    return n;
}

template <typename T>
node<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = false;
    n->id = next_node_id();
    n->op = "const";
    return n;
}

// value copy with the graph cut off (stop-gradient)
template <typename T>
node<T> detach(const node<T>& x) {
    return constant<T>(x->value);
}

template <typename T>
node<T> make_op(const char* op, Tensor<T> value, std::vector<node<T>> inputs,
                BackwardFn<T> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in && in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward = std::move(backward);
    n->id = next_node_id();
    n->op = op;
    return n;
}

// clang-format off
template <typename T> node<T> add(const node<T>&, const node<T>&);
template <typename T> node<T> neg(const node<T>&);
template <typename T> node<T> sub(const node<T>&, const node<T>&);
template <typename T> node<T> mul(const node<T>&, const node<T>&);
template <typename T> node<T> scale(const node<T>&, T);
template <typename T> node<T> sum_all(const node<T>&);
template <typename T> node<T> broadcast_scalar(const node<T>&, const std::vector<std::int64_t>&);
template <typename T> node<T> channel_sum(const node<T>&);
template <typename T> node<T> channel_repeat(const node<T>&, std::int64_t);
template <typename T> node<T> bias_broadcast(const node<T>&, std::int64_t, std::int64_t);
template <typename T> node<T> spatial_sum(const node<T>&);
template <typename T> node<T> reflect_pad(const node<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template <typename T> node<T> reflect_pad_adjoint(const node<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template <typename T> node<T> upsample_nearest2(const node<T>&);
template <typename T> node<T> downsample_sum2(const node<T>&);
template <typename T> node<T> concat_c(const node<T>&, const node<T>&);
template <typename T> node<T> slice_c(const node<T>&, std::int64_t, std::int64_t);
template <typename T> node<T> embed_c(const node<T>&, std::int64_t, std::int64_t);
template <typename T> node<T> crop2d(const node<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
template <typename T> node<T> embed2d(const node<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);
// clang-format on

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

template <typename T>
using ConstMat =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using Mat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// patch matrix: rows are output positions, cols are (kh,kw,Cin) taps
template <typename T>
void im2col(const Tensor<T>& x, std::int64_t kh, std::int64_t kw, std::int64_t stride,
            std::int64_t ho, std::int64_t wo, std::vector<T>& col) {
    const std::int64_t w = x.dim(1), ci = x.dim(2);
    const std::int64_t k = kh * kw * ci;
    col.assign(static_cast<std::size_t>(ho * wo * k), T(0));
    for (std::int64_t i = 0; i < ho; ++i) {
        for (std::int64_t j = 0; j < wo; ++j) {
            T* dst = col.data() + (i * wo + j) * k;
            for (std::int64_t a = 0; a < kh; ++a) {
                const T* src = x.data() + ((i * stride + a) * w + j * stride) * ci;
                std::memcpy(dst + a * kw * ci, src, sizeof(T) * static_cast<std::size_t>(kw * ci));
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
node<T> add(const node<T>& a, const node<T>& b) {
    detail::check_same_shape("add", a->value, b->value);
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_op<T>("add", std::move(out), {a, b},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {g, g};
                      });
}

template <typename T>
node<T> neg(const node<T>& a) {
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = -out[i];
    return make_op<T>("neg", std::move(out), {a},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {neg(g)};
                      });
}

template <typename T>
node<T> sub(const node<T>& a, const node<T>& b) {
    detail::check_same_shape("sub", a->value, b->value);
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_op<T>("sub", std::move(out), {a, b},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {g, neg(g)};
                      });
}

template <typename T>
node<T> mul(const node<T>& a, const node<T>& b) {
    detail::check_same_shape("mul", a->value, b->value);
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_op<T>("mul", std::move(out), {a, b},
                      [](const node<T>& self, const node<T>& g) -> std::vector<node<T>> {
                          return {mul(g, self->inputs[1]), mul(g, self->inputs[0])};
                      });
}

template <typename T>
node<T> scale(const node<T>& a, T s) {
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make_op<T>("scale", std::move(out), {a},
                      [s](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {scale(g, s)};
                      });
}

template <typename T>
node<T> abs(const node<T>& a) {
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::abs(out[i]);
    return make_op<T>("abs", std::move(out), {a},
                      [](const node<T>& self, const node<T>& g) -> std::vector<node<T>> {
                          const Tensor<T>& x = self->inputs[0]->value;
                          Tensor<T> sgn(x.shape());
                          for (std::int64_t i = 0; i < x.size(); ++i)
                              sgn[i] = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
                          return {mul(g, constant(std::move(sgn)))};
                      });
}

template <typename T>
node<T> leaky_relu(const node<T>& a, T slope) {
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i)
        if (out[i] < T(0)) out[i] *= slope;
    return make_op<T>("leaky_relu", std::move(out), {a},
                      [slope](const node<T>& self, const node<T>& g) -> std::vector<node<T>> {
                          const Tensor<T>& x = self->inputs[0]->value;
                          Tensor<T> m(x.shape());
                          for (std::int64_t i = 0; i < x.size(); ++i)
                              m[i] = x[i] >= T(0) ? T(1) : slope;
                          return {mul(g, constant(std::move(m)))};
                      });
}

template <typename T>
node<T> sigmoid(const node<T>& a) {
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = T(1) / (T(1) + std::exp(-out[i]));
    // dy/dx = y (1 - y); written through the output node so higher-order
    // derivatives stay exact
    return make_op<T>("sigmoid", std::move(out), {a},
                      [](const node<T>& self, const node<T>& g) -> std::vector<node<T>> {
                          return {mul(g, sub(self, mul(self, self)))};
                      });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts

template <typename T>
node<T> sum_all(const node<T>& a) {
    Tensor<T> out({1});
    double s = 0;
    for (std::int64_t i = 0; i < a->value.size(); ++i) s += static_cast<double>(a->value[i]);
    out[0] = static_cast<T>(s);
    return make_op<T>("sum_all", std::move(out), {a},
                      [](const node<T>& self, const node<T>& g) -> std::vector<node<T>> {
                          return {broadcast_scalar(g, self->inputs[0]->value.shape())};
                      });
}

template <typename T>
node<T> broadcast_scalar(const node<T>& s, const std::vector<std::int64_t>& shape) {
    if (s->value.size() != 1) throw std::invalid_argument("broadcast_scalar: non-scalar input");
    Tensor<T> out = Tensor<T>::full(shape, s->value[0]);
    return make_op<T>("broadcast_scalar", std::move(out), {s},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {sum_all(g)};
                      });
}

template <typename T>
node<T> mean_all(const node<T>& a) {
    return scale(sum_all(a), static_cast<T>(1.0 / static_cast<double>(a->value.size())));
}

// {H,W,C} -> {H,W,1}
template <typename T>
node<T> channel_sum(const node<T>& a) {
    const auto& sh = a->value.shape();
    const std::int64_t h = sh[0], w = sh[1], c = sh[2];
    Tensor<T> out({h, w, 1});
    for (std::int64_t p = 0; p < h * w; ++p) {
        double s = 0;
        for (std::int64_t k = 0; k < c; ++k) s += static_cast<double>(a->value[p * c + k]);
        out[p] = static_cast<T>(s);
    }
    return make_op<T>("channel_sum", std::move(out), {a},
                      [c](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {channel_repeat(g, c)};
                      });
}

// {H,W,1} -> {H,W,C}
template <typename T>
node<T> channel_repeat(const node<T>& a, std::int64_t c) {
    const auto& sh = a->value.shape();
    if (sh[2] != 1) throw std::invalid_argument("channel_repeat: input must have one channel");
    const std::int64_t h = sh[0], w = sh[1];
    Tensor<T> out({h, w, c});
    for (std::int64_t p = 0; p < h * w; ++p)
        for (std::int64_t k = 0; k < c; ++k) out[p * c + k] = a->value[p];
    return make_op<T>("channel_repeat", std::move(out), {a},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {channel_sum(g)};
                      });
}

// {C} bias tiled over an H x W grid
template <typename T>
node<T> bias_broadcast(const node<T>& b, std::int64_t h, std::int64_t w) {
    const std::int64_t c = b->value.size();
    Tensor<T> out({h, w, c});
    for (std::int64_t p = 0; p < h * w; ++p)
        for (std::int64_t k = 0; k < c; ++k) out[p * c + k] = b->value[k];
    return make_op<T>("bias_broadcast", std::move(out), {b},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {spatial_sum(g)};
                      });
}

// {H,W,C} -> {C}
template <typename T>
node<T> spatial_sum(const node<T>& a) {
    const auto& sh = a->value.shape();
    const std::int64_t hw = sh[0] * sh[1], c = sh[2];
    Tensor<T> out({c});
    std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t p = 0; p < hw; ++p)
        for (std::int64_t k = 0; k < c; ++k) acc[static_cast<std::size_t>(k)] += a->value[p * c + k];
    for (std::int64_t k = 0; k < c; ++k) out[k] = static_cast<T>(acc[static_cast<std::size_t>(k)]);
    return make_op<T>("spatial_sum", std::move(out), {a},
                      [sh](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {bias_broadcast(g, sh[0], sh[1])};
                      });
}

// ---------------------------------------------------------------------------
// geometry

template <typename T>
node<T> reflect_pad(const node<T>& x, std::int64_t pt, std::int64_t pb, std::int64_t pl,
                    std::int64_t pr) {
    const auto& sh = x->value.shape();
    const std::int64_t h = sh[0], w = sh[1], c = sh[2];
    if (pt >= h || pb >= h || pl >= w || pr >= w)
        throw std::invalid_argument("reflect_pad: pad exceeds image size");
    Tensor<T> out({h + pt + pb, w + pl + pr, c});
    for (std::int64_t r = 0; r < h + pt + pb; ++r) {
        const std::int64_t sr = detail::reflect_index(r - pt, h);
        for (std::int64_t q = 0; q < w + pl + pr; ++q) {
            const std::int64_t sq = detail::reflect_index(q - pl, w);
            for (std::int64_t k = 0; k < c; ++k) out.at(r, q, k) = x->value.at(sr, sq, k);
        }
    }
    return make_op<T>("reflect_pad", std::move(out), {x},
                      [pt, pb, pl, pr](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {reflect_pad_adjoint(g, pt, pb, pl, pr)};
                      });
}

template <typename T>
node<T> reflect_pad_adjoint(const node<T>& g, std::int64_t pt, std::int64_t pb, std::int64_t pl,
                            std::int64_t pr) {
    const auto& sh = g->value.shape();
    const std::int64_t h = sh[0] - pt - pb, w = sh[1] - pl - pr, c = sh[2];
    Tensor<T> out({h, w, c});
    for (std::int64_t r = 0; r < sh[0]; ++r) {
        const std::int64_t sr = detail::reflect_index(r - pt, h);
        for (std::int64_t q = 0; q < sh[1]; ++q) {
            const std::int64_t sq = detail::reflect_index(q - pl, w);
            for (std::int64_t k = 0; k < c; ++k) out.at(sr, sq, k) += g->value.at(r, q, k);
        }
    }
    return make_op<T>("reflect_pad_adjoint", std::move(out), {g},
                      [pt, pb, pl, pr](const node<T>&, const node<T>& u) -> std::vector<node<T>> {
                          return {reflect_pad(u, pt, pb, pl, pr)};
                      });
}

template <typename T>
node<T> upsample_nearest2(const node<T>& x) {
    const auto& sh = x->value.shape();
    const std::int64_t h = sh[0], w = sh[1], c = sh[2];
    Tensor<T> out({2 * h, 2 * w, c});
    for (std::int64_t i = 0; i < 2 * h; ++i)
        for (std::int64_t j = 0; j < 2 * w; ++j)
            for (std::int64_t k = 0; k < c; ++k) out.at(i, j, k) = x->value.at(i / 2, j / 2, k);
    return make_op<T>("upsample_nearest2", std::move(out), {x},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {downsample_sum2(g)};
                      });
}

template <typename T>
node<T> downsample_sum2(const node<T>& x) {
    const auto& sh = x->value.shape();
    if (sh[0] % 2 || sh[1] % 2) throw std::invalid_argument("downsample_sum2: odd dims");
    const std::int64_t h = sh[0] / 2, w = sh[1] / 2, c = sh[2];
    Tensor<T> out({h, w, c});
    for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            for (std::int64_t k = 0; k < c; ++k)
                out.at(i, j, k) = x->value.at(2 * i, 2 * j, k) + x->value.at(2 * i, 2 * j + 1, k) +
                                  x->value.at(2 * i + 1, 2 * j, k) +
                                  x->value.at(2 * i + 1, 2 * j + 1, k);
    return make_op<T>("downsample_sum2", std::move(out), {x},
                      [](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {upsample_nearest2(g)};
                      });
}

template <typename T>
node<T> concat_c(const node<T>& a, const node<T>& b) {
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    if (sa[0] != sb[0] || sa[1] != sb[1])
        throw std::invalid_argument("concat_c: spatial mismatch");
    const std::int64_t h = sa[0], w = sa[1], ca = sa[2], cb = sb[2];
    Tensor<T> out({h, w, ca + cb});
    for (std::int64_t p = 0; p < h * w; ++p) {
        std::memcpy(out.data() + p * (ca + cb), a->value.data() + p * ca,
                    sizeof(T) * static_cast<std::size_t>(ca));
        std::memcpy(out.data() + p * (ca + cb) + ca, b->value.data() + p * cb,
                    sizeof(T) * static_cast<std::size_t>(cb));
    }
    return make_op<T>("concat_c", std::move(out), {a, b},
                      [ca, cb](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {slice_c(g, 0, ca), slice_c(g, ca, ca + cb)};
                      });
}

template <typename T>
node<T> slice_c(const node<T>& x, std::int64_t c0, std::int64_t c1) {
    const auto& sh = x->value.shape();
    const std::int64_t h = sh[0], w = sh[1], c = sh[2];
    if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_c: bad channel range");
    Tensor<T> out({h, w, c1 - c0});
    for (std::int64_t p = 0; p < h * w; ++p)
        std::memcpy(out.data() + p * (c1 - c0), x->value.data() + p * c + c0,
                    sizeof(T) * static_cast<std::size_t>(c1 - c0));
    return make_op<T>("slice_c", std::move(out), {x},
                      [c0, c1, c](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {embed_c(g, c0, c)};
                      });
}

template <typename T>
node<T> embed_c(const node<T>& x, std::int64_t c0, std::int64_t ctot) {
    const auto& sh = x->value.shape();
    const std::int64_t h = sh[0], w = sh[1], c = sh[2];
    Tensor<T> out({h, w, ctot});
    for (std::int64_t p = 0; p < h * w; ++p)
        std::memcpy(out.data() + p * ctot + c0, x->value.data() + p * c,
                    sizeof(T) * static_cast<std::size_t>(c));
    return make_op<T>("embed_c", std::move(out), {x},
                      [c0, c](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {slice_c(g, c0, c0 + c)};
                      });
}

template <typename T>
node<T> crop2d(const node<T>& x, std::int64_t r0, std::int64_t c0, std::int64_t h,
               std::int64_t w) {
    const auto& sh = x->value.shape();
    if (r0 < 0 || c0 < 0 || r0 + h > sh[0] || c0 + w > sh[1])
        throw std::invalid_argument("crop2d: window out of range");
    const std::int64_t c = sh[2];
    Tensor<T> out({h, w, c});
    for (std::int64_t i = 0; i < h; ++i)
        std::memcpy(out.data() + i * w * c, x->value.data() + ((r0 + i) * sh[1] + c0) * c,
                    sizeof(T) * static_cast<std::size_t>(w * c));
    return make_op<T>("crop2d", std::move(out), {x},
                      [r0, c0, sh](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {embed2d(g, sh[0], sh[1], r0, c0)};
                      });
}

template <typename T>
node<T> embed2d(const node<T>& x, std::int64_t hout, std::int64_t wout, std::int64_t r0,
                std::int64_t c0) {
    const auto& sh = x->value.shape();
    const std::int64_t h = sh[0], w = sh[1], c = sh[2];
    Tensor<T> out({hout, wout, c});
    for (std::int64_t i = 0; i < h; ++i)
        std::memcpy(out.data() + ((r0 + i) * wout + c0) * c, x->value.data() + i * w * c,
                    sizeof(T) * static_cast<std::size_t>(w * c));
    return make_op<T>("embed2d", std::move(out), {x},
                      [r0, c0, h, w](const node<T>&, const node<T>& g) -> std::vector<node<T>> {
                          return {crop2d(g, r0, c0, h, w)};
                      });
}

// ---------------------------------------------------------------------------
// convolution triad. conv2d is valid (unpadded); its data/weight gradients are
// primitives of their own, and the three ops are closed under differentiation.

template <typename T>
node<T> conv2d(const node<T>& x, const node<T>& w, std::int64_t stride);
template <typename T>
node<T> conv2d_data_grad(const node<T>& g, const node<T>& w, std::int64_t stride,
                         std::int64_t h, std::int64_t wdt);
template <typename T>
node<T> conv2d_weight_grad(const node<T>& x, const node<T>& g, std::int64_t stride,
                           std::int64_t kh, std::int64_t kw);

template <typename T>
node<T> conv2d(const node<T>& x, const node<T>& w, std::int64_t stride) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 3 || ws.size() != 4) throw std::invalid_argument("conv2d: bad ranks");
    if (xs[2] != ws[2])
        throw std::invalid_argument("conv2d: channel mismatch " + x->value.shape_str() + " vs " +
                                    w->value.shape_str());
    const std::int64_t h = xs[0], wd = xs[1], kh = ws[0], kw = ws[1], co = ws[3];
    if (h < kh || wd < kw) throw std::invalid_argument("conv2d: kernel larger than input");
    const std::int64_t ho = (h - kh) / stride + 1, wo = (wd - kw) / stride + 1;
    const std::int64_t k = kh * kw * xs[2], p = ho * wo;

    std::vector<T> col;
    detail::im2col(x->value, kh, kw, stride, ho, wo, col);
    Tensor<T> out({ho, wo, co});
    detail::Mat<T>(out.data(), p, co).noalias() =
        detail::ConstMat<T>(col.data(), p, k) * detail::ConstMat<T>(w->value.data(), k, co);

    return make_op<T>(
        "conv2d", std::move(out), {x, w},
        [stride, h, wd, kh, kw](const node<T>& self, const node<T>& g) -> std::vector<node<T>> {
            return {conv2d_data_grad(g, self->inputs[1], stride, h, wd),
                    conv2d_weight_grad(self->inputs[0], g, stride, kh, kw)};
        });
}

template <typename T>
node<T> conv2d_data_grad(const node<T>& g, const node<T>& w, std::int64_t stride,
                         std::int64_t h, std::int64_t wdt) {
    const auto& gs = g->value.shape();
    const auto& ws = w->value.shape();
    const std::int64_t ho = gs[0], wo = gs[1], co = gs[2];
    const std::int64_t kh = ws[0], kw = ws[1], ci = ws[2];
    if (co != ws[3]) throw std::invalid_argument("conv2d_data_grad: channel mismatch");
    const std::int64_t k = kh * kw * ci, p = ho * wo;

    std::vector<T> colg(static_cast<std::size_t>(p * k));
    detail::Mat<T>(colg.data(), p, k).noalias() =
        detail::ConstMat<T>(g->value.data(), p, co) *
        detail::ConstMat<T>(w->value.data(), k, co).transpose();

    Tensor<T> out({h, wdt, ci});
    for (std::int64_t i = 0; i < ho; ++i) {
        for (std::int64_t j = 0; j < wo; ++j) {
            const T* src = colg.data() + (i * wo + j) * k;
            for (std::int64_t a = 0; a < kh; ++a) {
                T* dst = out.data() + ((i * stride + a) * wdt + j * stride) * ci;
                const T* s = src + a * kw * ci;
                for (std::int64_t t = 0; t < kw * ci; ++t) dst[t] += s[t];
            }
        }
    }
    return make_op<T>(
        "conv2d_data_grad", std::move(out), {g, w},
        [stride, kh, kw](const node<T>& self, const node<T>& u) -> std::vector<node<T>> {
            return {conv2d(u, self->inputs[1], stride),
                    conv2d_weight_grad(u, self->inputs[0], stride, kh, kw)};
        });
}

template <typename T>
node<T> conv2d_weight_grad(const node<T>& x, const node<T>& g, std::int64_t stride,
                           std::int64_t kh, std::int64_t kw) {
    const auto& xs = x->value.shape();
    const auto& gs = g->value.shape();
    const std::int64_t ci = xs[2], ho = gs[0], wo = gs[1], co = gs[2];
    const std::int64_t k = kh * kw * ci, p = ho * wo;

    std::vector<T> col;
    detail::im2col(x->value, kh, kw, stride, ho, wo, col);
    Tensor<T> out({kh, kw, ci, co});
    detail::Mat<T>(out.data(), k, co).noalias() =
        detail::ConstMat<T>(col.data(), p, k).transpose() *
        detail::ConstMat<T>(g->value.data(), p, co);

    const std::int64_t h = xs[0], wd = xs[1];
    return make_op<T>(
        "conv2d_weight_grad", std::move(out), {x, g},
        [stride, h, wd](const node<T>& self, const node<T>& u) -> std::vector<node<T>> {
            return {conv2d_data_grad(self->inputs[1], u, stride, h, wd),
                    conv2d(self->inputs[0], u, stride)};
        });
}

// ---------------------------------------------------------------------------
// backward pass

template <typename T>
std::vector<node<T>> gradients(const node<T>& root, const std::vector<node<T>>& targets) {
    if (root->value.size() != 1)
        throw std::invalid_argument("gradients: root must be scalar");

    std::unordered_map<Node<T>*, node<T>> grad;
    if (root->requires_grad) {
        // reachable requiring subgraph, reverse-topological by creation id
        std::vector<node<T>> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<node<T>> stack{root};
        seen.insert(root.get());
        while (!stack.empty()) {
            node<T> n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& in : n->inputs) {
                if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const node<T>& a, const node<T>& b) { return a->id > b->id; });

        grad[root.get()] = constant(Tensor<T>::scalar(T(1)));
        for (const auto& n : order) {
            auto it = grad.find(n.get());
            if (it == grad.end() || !n->backward) continue;
            std::vector<node<T>> contribs = n->backward(n, it->second);
            if (contribs.size() != n->inputs.size())
                throw std::logic_error("gradients: backward arity mismatch");
            for (std::size_t i = 0; i < contribs.size(); ++i) {
                const auto& in = n->inputs[i];
                if (!contribs[i] || !in || !in->requires_grad) continue;
                auto g = grad.find(in.get());
                if (g == grad.end())
                    grad.emplace(in.get(), contribs[i]);
                else
                    g->second = add(g->second, contribs[i]);
            }
        }
    }

    std::vector<node<T>> out;
    out.reserve(targets.size());
    for (const auto& t : targets) {
        auto it = grad.find(t.get());
        out.push_back(it != grad.end() ? it->second
                                       : constant(Tensor<T>::zeros(t->value.shape())));
    }
    return out;
}

template <typename T>
T scalar_value(const node<T>& n) {
    if (n->value.size() != 1) throw std::invalid_argument("scalar_value: non-scalar node");
    return n->value[0];
}

}  // namespace metadenoise::ad
