#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "metadenoise/autodiff.hpp"
#include "metadenoise/rng.hpp"
#include "metadenoise/tensor.hpp"

namespace metadenoise {

enum class NetVariant { sequential_heads, parallel_heads };

struct NetworkConfig {
    int in_channels = 3;
    int base_channels = 32;
    int depth = 2;  // number of encoder/decoder scales
    int head_channels = 72;
    int mask_channels = 24;
    int kernel_size = 3;
    NetVariant variant = NetVariant::sequential_heads;

    void validate() const {
        if (in_channels != 1 && in_channels != 3)
            throw std::invalid_argument("network config: in_channels must be 1 or 3");
        if (base_channels < 1 || head_channels < 1 || mask_channels < 1)
            throw std::invalid_argument("network config: channel counts must be >= 1");
        if (depth < 1) throw std::invalid_argument("network config: depth must be >= 1");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw std::invalid_argument("network config: kernel_size must be odd and >= 1");
    }

    std::int64_t pad_multiple() const { return std::int64_t(1) << depth; }
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> value;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

// theta1 = body + primary head + auxiliary head; the partitions are disjoint
// and fixed at construction
template <typename T>
struct ParamPartition {
    NetworkConfig config;
    ParamList<T> body;
    ParamList<T> primary_head;
    ParamList<T> auxiliary_head;
};

template <typename T>
struct MaskNetParams {
    NetworkConfig config;
    ParamList<T> params;
};

template <typename T>
struct HeadSnapshot {
    ParamList<T> primary_head;
    ParamList<T> auxiliary_head;
};

namespace nets {

enum class Act { linear, lrelu, sigmoid };

constexpr double kLeakySlope = 0.1;

struct ConvSpec {
    std::string name;
    int in_ch = 0;
    int out_ch = 0;
    int stride = 1;
    Act act = Act::lrelu;
    bool zero_init = false;
};

inline std::vector<ConvSpec> body_specs(const NetworkConfig& cfg) {
    auto ch = [&](int level) { return cfg.base_channels << level; };
    std::vector<ConvSpec> specs;
    specs.push_back({"stem", cfg.in_channels, ch(0)});
    for (int l = 0; l < cfg.depth; ++l) {
        specs.push_back({"enc" + std::to_string(l) + "a", ch(l), ch(l)});
        specs.push_back({"enc" + std::to_string(l) + "b", ch(l), ch(l)});
        specs.push_back({"down" + std::to_string(l), ch(l), ch(l + 1), 2});
    }
    specs.push_back({"bott", ch(cfg.depth), ch(cfg.depth)});
    for (int l = cfg.depth - 1; l >= 0; --l) {
        specs.push_back({"up" + std::to_string(l), ch(l + 1), ch(l)});
        specs.push_back({"dec" + std::to_string(l), 2 * ch(l), ch(l)});
    }
    return specs;
}

// three-conv refiner; the final conv is zero-initialized so a fresh network is
// the identity on the primary path
inline std::vector<ConvSpec> head_specs(const NetworkConfig& cfg, int in_ch) {
    return {
        {"c0", in_ch, cfg.head_channels},
        {"c1", cfg.head_channels, cfg.head_channels},
        {"c2", cfg.head_channels, cfg.in_channels, 1, Act::linear, true},
    };
}

inline int aux_head_in_channels(const NetworkConfig& cfg) {
    return cfg.variant == NetVariant::sequential_heads ? 2 * cfg.in_channels
                                                       : cfg.base_channels;
}

inline std::vector<ConvSpec> mask_specs(const NetworkConfig& cfg) {
    std::vector<ConvSpec> specs;
    specs.push_back({"m0", cfg.in_channels, cfg.mask_channels});
    for (int i = 1; i <= 3; ++i)
        specs.push_back({"m" + std::to_string(i), cfg.mask_channels, cfg.mask_channels});
    specs.push_back({"m4", cfg.mask_channels, 1, 1, Act::sigmoid});
    return specs;
}

template <typename T>
ParamList<T> build_params(const std::vector<ConvSpec>& specs, const NetworkConfig& cfg,
                          Rng& rng) {
    const std::int64_t k = cfg.kernel_size;
    ParamList<T> out;
    for (const auto& s : specs) {
        Tensor<T> w({k, k, s.in_ch, s.out_ch});
        if (!s.zero_init) {
            // fan-in init scaled for the leaky rectifier
            const double fan_in = static_cast<double>(k * k * s.in_ch);
            const double stddev = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
            for (std::int64_t i = 0; i < w.size(); ++i)
                w[i] = static_cast<T>(rng.normal(0.0, stddev));
        }
        out.push_back({s.name + ".w", std::move(w)});
        out.push_back({s.name + ".b", Tensor<T>({s.out_ch})});
    }
    return out;
}

template <typename T>
std::vector<ad::node<T>> wrap_params(const ParamList<T>& params, bool requires_grad) {
    std::vector<ad::node<T>> nodes;
    nodes.reserve(params.size());
    for (const auto& p : params)
        nodes.push_back(requires_grad ? ad::leaf(p.value) : ad::constant(p.value));
    return nodes;
}

template <typename T>
ad::node<T> conv_block(const ad::node<T>& x, const ad::node<T>& w, const ad::node<T>& b,
                       int stride, Act act) {
    const std::int64_t k = w->value.dim(0);
    const std::int64_t pad = (k - 1) / 2;
    ad::node<T> h = pad > 0 ? ad::reflect_pad(x, pad, pad, pad, pad) : x;
    h = ad::conv2d(h, w, stride);
    h = ad::add(h, ad::bias_broadcast(b, h->value.dim(0), h->value.dim(1)));
    switch (act) {
        case Act::lrelu: return ad::leaky_relu(h, static_cast<T>(kLeakySlope));
        case Act::sigmoid: return ad::sigmoid(h);
        case Act::linear: return h;
    }
    return h;
}

// walks a spec list, consuming (w,b) node pairs in build order
template <typename T>
class ParamCursor {
public:
    ParamCursor(const std::vector<ConvSpec>& specs, const std::vector<ad::node<T>>& nodes)
        : specs_(specs), nodes_(nodes) {
        if (nodes.size() != 2 * specs.size())
            throw std::invalid_argument("forward: parameter count does not match architecture");
    }

    ad::node<T> apply(const ad::node<T>& x) {
        const ConvSpec& s = specs_[idx_];
        const auto& w = nodes_[2 * idx_];
        const auto& b = nodes_[2 * idx_ + 1];
        if (w->value.dim(2) != s.in_ch)
            throw std::invalid_argument("forward: channel mismatch at " + s.name);
        ++idx_;
        return conv_block(x, w, b, s.stride, s.act);
    }

private:
    const std::vector<ConvSpec>& specs_;
    const std::vector<ad::node<T>>& nodes_;
    std::size_t idx_ = 0;
};

}  // namespace nets

// ---------------------------------------------------------------------------
// construction

template <typename T>
ParamPartition<T> build_multitask(const NetworkConfig& config, Rng& rng) {
    config.validate();
    ParamPartition<T> p;
    p.config = config;
    p.body = nets::build_params<T>(nets::body_specs(config), config, rng);
    p.primary_head =
        nets::build_params<T>(nets::head_specs(config, config.base_channels), config, rng);
    p.auxiliary_head = nets::build_params<T>(
        nets::head_specs(config, nets::aux_head_in_channels(config)), config, rng);
    return p;
}

template <typename T>
ParamPartition<T> build_parallel_baseline(const NetworkConfig& config, Rng& rng) {
    if (config.variant != NetVariant::parallel_heads)
        throw std::invalid_argument("build_parallel_baseline: variant must be parallel-heads");
    return build_multitask<T>(config, rng);
}

template <typename T>
MaskNetParams<T> build_maskgen(const NetworkConfig& config, Rng& rng) {
    config.validate();
    MaskNetParams<T> p;
    p.config = config;
    p.params = nets::build_params<T>(nets::mask_specs(config), config, rng);
    return p;
}

// ---------------------------------------------------------------------------
// forward passes (node level; see tensor-level wrappers below)

template <typename T>
struct MultitaskOut {
    ad::node<T> clean;         // predicted clean image I_n + residual
    ad::node<T> noisy_pred;    // auxiliary head output
    ad::node<T> residual;
    ad::node<T> pri_features;  // primary head's last hidden activation
};

template <typename T>
MultitaskOut<T> forward_multitask_nodes(const NetworkConfig& cfg,
                                        const std::vector<ad::node<T>>& body,
                                        const std::vector<ad::node<T>>& pri,
                                        const std::vector<ad::node<T>>& aux,
                                        const ad::node<T>& input) {
    const auto& sh = input->value.shape();
    if (sh.size() != 3 || sh[2] != cfg.in_channels)
        throw std::invalid_argument("forward_multitask: input channels do not match network");
    const std::int64_t h = sh[0], w = sh[1];
    const std::int64_t mult = cfg.pad_multiple();
    const std::int64_t ph = (mult - h % mult) % mult;
    const std::int64_t pw = (mult - w % mult) % mult;

    ad::node<T> x = (ph || pw) ? ad::reflect_pad(input, 0, ph, 0, pw) : input;

    auto body_specs = nets::body_specs(cfg);
    nets::ParamCursor<T> cursor(body_specs, body);

    ad::node<T> f = cursor.apply(x);  // stem
    std::vector<ad::node<T>> skips;
    for (int l = 0; l < cfg.depth; ++l) {
        f = cursor.apply(f);
        f = cursor.apply(f);
        skips.push_back(f);
        f = cursor.apply(f);  // strided downsample
    }
    f = cursor.apply(f);  // bottleneck
    for (int l = cfg.depth - 1; l >= 0; --l) {
        f = cursor.apply(ad::upsample_nearest2(f));
        f = cursor.apply(ad::concat_c(f, skips[static_cast<std::size_t>(l)]));
    }

    auto pri_specs = nets::head_specs(cfg, cfg.base_channels);
    nets::ParamCursor<T> pri_cursor(pri_specs, pri);
    ad::node<T> ph0 = pri_cursor.apply(f);
    ad::node<T> ph1 = pri_cursor.apply(ph0);
    ad::node<T> residual = pri_cursor.apply(ph1);
    ad::node<T> clean = ad::add(x, residual);

    ad::node<T> aux_in = cfg.variant == NetVariant::sequential_heads
                             ? ad::concat_c(clean, residual)
                             : f;
    auto aux_specs = nets::head_specs(cfg, nets::aux_head_in_channels(cfg));
    nets::ParamCursor<T> aux_cursor(aux_specs, aux);
    ad::node<T> ah0 = aux_cursor.apply(aux_in);
    ad::node<T> ah1 = aux_cursor.apply(ah0);
    ad::node<T> noisy_pred = aux_cursor.apply(ah1);

    MultitaskOut<T> out;
    if (ph || pw) {
        out.clean = ad::crop2d(clean, 0, 0, h, w);
        out.noisy_pred = ad::crop2d(noisy_pred, 0, 0, h, w);
        out.residual = ad::crop2d(residual, 0, 0, h, w);
        out.pri_features = ad::crop2d(ph1, 0, 0, h, w);
    } else {
        out.clean = clean;
        out.noisy_pred = noisy_pred;
        out.residual = residual;
        out.pri_features = ph1;
    }
    return out;
}

template <typename T>
ad::node<T> forward_maskgen_nodes(const NetworkConfig& cfg,
                                  const std::vector<ad::node<T>>& params,
                                  const ad::node<T>& input) {
    auto specs = nets::mask_specs(cfg);
    nets::ParamCursor<T> cursor(specs, params);
    ad::node<T> f = input;
    for (std::size_t i = 0; i < specs.size(); ++i) f = cursor.apply(f);
    return f;
}

// tensor-level wrappers for inference-style use

template <typename T>
struct MultitaskResult {
    Tensor<T> clean;
    Tensor<T> noisy_pred;
    Tensor<T> residual;
    Tensor<T> pri_features;
};

template <typename T>
MultitaskResult<T> forward_multitask(const ParamPartition<T>& params, const Tensor<T>& input) {
    auto body = nets::wrap_params(params.body, false);
    auto pri = nets::wrap_params(params.primary_head, false);
    auto aux = nets::wrap_params(params.auxiliary_head, false);
    auto out = forward_multitask_nodes(params.config, body, pri, aux, ad::constant(input));
    return {out.clean->value, out.noisy_pred->value, out.residual->value,
            out.pri_features->value};
}

template <typename T>
Tensor<T> forward_maskgen(const MaskNetParams<T>& params, const Tensor<T>& input) {
    auto nodes = nets::wrap_params(params.params, false);
    return forward_maskgen_nodes(params.config, nodes, ad::constant(input))->value;
}

// ---------------------------------------------------------------------------
// parameter bookkeeping

template <typename T>
std::int64_t count_parameters(const ParamList<T>& list) {
    std::int64_t n = 0;
    for (const auto& p : list) n += p.value.size();
    return n;
}

template <typename T>
std::int64_t count_parameters(const ParamPartition<T>& p) {
    return count_parameters(p.body) + count_parameters(p.primary_head) +
           count_parameters(p.auxiliary_head);
}

template <typename T>
std::int64_t count_parameters(const MaskNetParams<T>& p) {
    return count_parameters(p.params);
}

template <typename T>
HeadSnapshot<T> clone_heads(const ParamPartition<T>& p) {
    return {p.primary_head, p.auxiliary_head};
}

namespace nets {
template <typename T>
void check_compatible(const ParamList<T>& a, const ParamList<T>& b, const char* what) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(what) + ": parameter count mismatch");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape())
            throw std::invalid_argument(std::string(what) + ": mismatch at " + a[i].name);
}
}  // namespace nets

template <typename T>
ParamPartition<T> replace_heads(const ParamPartition<T>& p, const HeadSnapshot<T>& heads) {
    nets::check_compatible(p.primary_head, heads.primary_head, "replace_heads/primary");
    nets::check_compatible(p.auxiliary_head, heads.auxiliary_head, "replace_heads/auxiliary");
    ParamPartition<T> out;
    out.config = p.config;
    out.body = p.body;
    out.primary_head = heads.primary_head;
    out.auxiliary_head = heads.auxiliary_head;
    return out;
}

}  // namespace metadenoise
