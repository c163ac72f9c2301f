#pragma once

// Convolutional surrogate mapping a density field to its compliance
// sensitivity field: an encoder-decoder of flat (stride 1), down (stride 2)
// and up (transposed, stride 1/2) convolutions followed by a fully connected
// head, trained with Adam on MSE.
//
// Activations are kept batched as row-major matrices of shape
// channels x (batch * height * width); column n*H*W + y*W + x holds pixel
// (y, x) of sample n. Convolutions run as im2col + GEMM.

#include "cnnto/dataset.hpp"
#include "cnnto/error.hpp"
#include "cnnto/fem.hpp"
#include "cnnto/io.hpp"
#include "cnnto/rng.hpp"
#include "cnnto/version.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cnnto {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class LayerKind { flat, down, up, fully_connected };
enum class Activation { relu, linear };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::flat: return "flat";
        case LayerKind::down: return "down";
        case LayerKind::up: return "up";
        case LayerKind::fully_connected: return "fully_connected";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "flat") return LayerKind::flat;
    if (s == "down") return LayerKind::down;
    if (s == "up") return LayerKind::up;
    if (s == "fully_connected") return LayerKind::fully_connected;
    throw InputError("unknown layer kind '" + s + "'");
}

struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;  // row-major within each channel

    Tensor() = default;
    Tensor(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

    bool operator==(const Tensor&) const = default;
};

struct Shape3 {
    int channels = 0;
    int height = 0;
    int width = 0;

    int size() const { return channels * height * width; }
    bool operator==(const Shape3&) const = default;
};

struct ConvLayerSpec {
    LayerKind kind = LayerKind::flat;
    int in_channels = 1;
    int out_channels = 1;
    int kernel_h = 3;
    int kernel_w = 3;
    Activation activation = Activation::relu;

    /// 2 for down; up layers upsample by 2 (stride 1/2); 1 otherwise.
    int stride() const { return kind == LayerKind::down ? 2 : 1; }

    bool operator==(const ConvLayerSpec&) const = default;
};

/// Convolution geometry: a stride-s conv from in_h x in_w to out_h x out_w
/// with zero padding pad_top/pad_left before the first row/column.
struct ConvGeometry {
    int in_h = 0, in_w = 0;
    int out_h = 0, out_w = 0;
    int k_h = 0, k_w = 0;
    int stride = 1;
    int pad_top = 0, pad_left = 0;
};

namespace detail {

inline int same_pad(int in, int out, int k, int stride) {
    return std::max((out - 1) * stride + k - in, 0) / 2;
}

}  // namespace detail

/// Geometry of a conv layer on an input of size h x w. For up layers this
/// is the geometry of the stride-2 conv the transposed op is the adjoint of
/// (its "input" is the up layer's 2h x 2w output).
inline ConvGeometry layer_geometry(const ConvLayerSpec& l, int h, int w) {
    ConvGeometry g;
    g.k_h = l.kernel_h;
    g.k_w = l.kernel_w;
    switch (l.kind) {
        case LayerKind::flat:
            g.in_h = g.out_h = h;
            g.in_w = g.out_w = w;
            g.stride = 1;
            g.pad_top = (l.kernel_h - 1) / 2;
            g.pad_left = (l.kernel_w - 1) / 2;
            break;
        case LayerKind::down:
            g.in_h = h;
            g.in_w = w;
            g.out_h = (h + 1) / 2;
            g.out_w = (w + 1) / 2;
            g.stride = 2;
            g.pad_top = detail::same_pad(h, g.out_h, l.kernel_h, 2);
            g.pad_left = detail::same_pad(w, g.out_w, l.kernel_w, 2);
            break;
        case LayerKind::up:
            g.in_h = 2 * h;
            g.in_w = 2 * w;
            g.out_h = h;
            g.out_w = w;
            g.stride = 2;
            g.pad_top = detail::same_pad(2 * h, h, l.kernel_h, 2);
            g.pad_left = detail::same_pad(2 * w, w, l.kernel_w, 2);
            break;
        case LayerKind::fully_connected:
            throw InputError("layer_geometry: fully connected layers have no geometry");
    }
    return g;
}

inline Shape3 layer_output_shape(const ConvLayerSpec& l, const Shape3& in, int out_h, int out_w) {
    switch (l.kind) {
        case LayerKind::flat: return {l.out_channels, in.height, in.width};
        case LayerKind::down: return {l.out_channels, (in.height + 1) / 2, (in.width + 1) / 2};
        case LayerKind::up: return {l.out_channels, in.height * 2, in.width * 2};
        case LayerKind::fully_connected: return {1, out_h, out_w};
    }
    return {};
}

struct NetworkSpec {
    int height = 16;
    int width = 32;
    double channel_multiplier = 1.0;
    std::vector<ConvLayerSpec> layers;

    /// Output shape of every layer, in order.
    std::vector<Shape3> shape_trace() const {
        std::vector<Shape3> out;
        Shape3 s{1, height, width};
        for (const auto& l : layers) {
            s = layer_output_shape(l, s, height, width);
            out.push_back(s);
        }
        return out;
    }

    int down_stages() const {
        return static_cast<int>(std::count_if(layers.begin(), layers.end(),
                                              [](const ConvLayerSpec& l) { return l.kind == LayerKind::down; }));
    }

    std::size_t parameter_count() const;

    void validate() const {
        require(height >= 1 && width >= 1, "NetworkSpec: bad input size");
        require(!layers.empty(), "NetworkSpec: no layers");
        Shape3 s{1, height, width};
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string where = "NetworkSpec layer " + std::to_string(i) + ": ";
            require(l.in_channels == s.channels, where + "in_channels does not match previous output");
            require(l.out_channels >= 1, where + "out_channels must be >= 1");
            if (l.kind == LayerKind::fully_connected) {
                require(i + 1 == layers.size(), where + "fully connected layer must be last");
                require(l.out_channels == height * width, where + "fully connected output must be H*W");
            } else {
                require(l.kernel_h >= 1 && l.kernel_w >= 1, where + "bad kernel");
                if (l.kind == LayerKind::flat)
                    require(l.kernel_h % 2 == 1 && l.kernel_w % 2 == 1, where + "flat kernels must be odd");
                if (l.kind == LayerKind::up)
                    require(l.kernel_h >= 2 && l.kernel_w >= 2, where + "up kernels must be >= 2");
            }
            s = layer_output_shape(l, s, height, width);
        }
        require(s.size() == height * width, "NetworkSpec: output must have one value per element");
    }

    bool operator==(const NetworkSpec&) const = default;
};

/// Channel widths of the 18 convolution layers of the reference encoder-decoder.
inline constexpr std::array<int, 18> kReferenceChannels = {48,   128,  256,  256, 256, 512, 512, 1024, 1024,
                                                           1024, 1024, 512,  512, 256, 256, 256, 128,  48};
inline constexpr std::array<LayerKind, 18> kReferenceKinds = {
    LayerKind::down, LayerKind::flat, LayerKind::down, LayerKind::flat, LayerKind::flat, LayerKind::down,
    LayerKind::flat, LayerKind::flat, LayerKind::flat, LayerKind::flat, LayerKind::flat, LayerKind::flat,
    LayerKind::up,   LayerKind::flat, LayerKind::flat, LayerKind::up,   LayerKind::flat, LayerKind::up};

inline int scaled_channels(int c, double multiplier) {
    return std::max(1, static_cast<int>(std::lround(c * multiplier)));
}

/// The reference architecture: 18 conv layers (ReLU) then a linear fully
/// connected head from the last feature map to one value per element.
inline NetworkSpec reference_network(int height, int width, double channel_multiplier = 1.0,
                                     int flat_kernel = 3, int updown_kernel = 4) {
    require(channel_multiplier > 0.0, "reference_network: channel_multiplier must be > 0");
    NetworkSpec spec;
    spec.height = height;
    spec.width = width;
    spec.channel_multiplier = channel_multiplier;
    int in = 1;
    for (std::size_t i = 0; i < kReferenceChannels.size(); ++i) {
        const int out = scaled_channels(kReferenceChannels[i], channel_multiplier);
        const int k = kReferenceKinds[i] == LayerKind::flat ? flat_kernel : updown_kernel;
        spec.layers.push_back({kReferenceKinds[i], in, out, k, k, Activation::relu});
        in = out;
    }
    spec.layers.push_back({LayerKind::fully_connected, in, height * width, 0, 0, Activation::linear});
    return spec;
}

struct LayerParams {
    std::vector<double> weights;  // conv: out x in x k_h x k_w; fc: out x in
    std::vector<double> bias;     // out

    bool operator==(const LayerParams&) const = default;
};

struct NetworkParams {
    std::vector<LayerParams> layers;

    bool operator==(const NetworkParams&) const = default;

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.bias.size();
        return n;
    }

    template <class F>
    void for_each_array(F&& f) {
        for (auto& l : layers) {
            f(l.weights);
            f(l.bias);
        }
    }
};

inline std::pair<std::size_t, std::size_t> layer_param_sizes(const NetworkSpec& spec, std::size_t i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::fully_connected) {
        const auto trace = spec.shape_trace();
        const std::size_t in = i == 0 ? static_cast<std::size_t>(spec.height) * spec.width
                                      : static_cast<std::size_t>(trace[i - 1].size());
        return {in * l.out_channels, static_cast<std::size_t>(l.out_channels)};
    }
    return {static_cast<std::size_t>(l.out_channels) * l.in_channels * l.kernel_h * l.kernel_w,
            static_cast<std::size_t>(l.out_channels)};
}

inline std::size_t NetworkSpec::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto [w, b] = layer_param_sizes(*this, i);
        n += w + b;
    }
    return n;
}

inline NetworkParams zero_params(const NetworkSpec& spec) {
    spec.validate();
    NetworkParams p;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto [w, b] = layer_param_sizes(spec, i);
        p.layers.push_back({std::vector<double>(w, 0.0), std::vector<double>(b, 0.0)});
    }
    return p;
}

/// He (fan-in) initialization for ReLU layers, 1/fan_in variance for linear
/// layers; biases start at zero.
inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
    NetworkParams p = zero_params(spec);
    Rng rng(seed, 0x1417);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto [wn, bn] = layer_param_sizes(spec, i);
        double fan_in = static_cast<double>(wn) / l.out_channels;
        if (l.kind == LayerKind::up) fan_in /= 4.0;  // each output sees ~1/4 of the taps
        const double gain = l.activation == Activation::relu ? 2.0 : 1.0;
        const double sd = std::sqrt(gain / fan_in);
        for (auto& w : p.layers[i].weights) w = sd * rng.normal();
    }
    return p;
}

inline void check_params(const NetworkSpec& spec, const NetworkParams& params) {
    require(params.layers.size() == spec.layers.size(), "NetworkParams: layer count does not match spec");
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto [w, b] = layer_param_sizes(spec, i);
        require(params.layers[i].weights.size() == w && params.layers[i].bias.size() == b,
                "NetworkParams: parameter shape mismatch in layer " + std::to_string(i));
    }
}

namespace detail {

/// cols(c*kh*kw + ky*kw + kx, n*HWout + oy*out_w + ox) = x(c, n*HWin + iy*in_w + ix)
inline void im2col(const RowMatrix& x, const ConvGeometry& g, int batch, RowMatrix& cols) {
    const int channels = static_cast<int>(x.rows());
    const int hw_in = g.in_h * g.in_w;
    const int hw_out = g.out_h * g.out_w;
    cols.resize(static_cast<Eigen::Index>(channels) * g.k_h * g.k_w, static_cast<Eigen::Index>(batch) * hw_out);
    for (int c = 0; c < channels; ++c) {
        const double* src_c = x.row(c).data();
        for (int ky = 0; ky < g.k_h; ++ky)
            for (int kx = 0; kx < g.k_w; ++kx) {
                double* dst = cols.row((static_cast<Eigen::Index>(c) * g.k_h + ky) * g.k_w + kx).data();
                for (int n = 0; n < batch; ++n) {
                    const double* src = src_c + static_cast<std::size_t>(n) * hw_in;
                    double* d = dst + static_cast<std::size_t>(n) * hw_out;
                    for (int oy = 0; oy < g.out_h; ++oy) {
                        const int iy = oy * g.stride + ky - g.pad_top;
                        double* drow = d + oy * g.out_w;
                        if (iy < 0 || iy >= g.in_h) {
                            std::fill(drow, drow + g.out_w, 0.0);
                            continue;
                        }
                        const double* srow = src + iy * g.in_w;
                        for (int ox = 0; ox < g.out_w; ++ox) {
                            const int ix = ox * g.stride + kx - g.pad_left;
                            drow[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : 0.0;
                        }
                    }
                }
            }
    }
}

/// Adjoint of im2col: accumulates cols back into an image of `channels`.
inline void col2im(const RowMatrix& cols, const ConvGeometry& g, int batch, int channels, RowMatrix& x) {
    const int hw_in = g.in_h * g.in_w;
    const int hw_out = g.out_h * g.out_w;
    x.setZero(channels, static_cast<Eigen::Index>(batch) * hw_in);
    for (int c = 0; c < channels; ++c) {
        double* dst_c = x.row(c).data();
        for (int ky = 0; ky < g.k_h; ++ky)
            for (int kx = 0; kx < g.k_w; ++kx) {
                const double* src = cols.row((static_cast<Eigen::Index>(c) * g.k_h + ky) * g.k_w + kx).data();
                for (int n = 0; n < batch; ++n) {
                    double* d = dst_c + static_cast<std::size_t>(n) * hw_in;
                    const double* s = src + static_cast<std::size_t>(n) * hw_out;
                    for (int oy = 0; oy < g.out_h; ++oy) {
                        const int iy = oy * g.stride + ky - g.pad_top;
                        if (iy < 0 || iy >= g.in_h) continue;
                        double* drow = d + iy * g.in_w;
                        const double* srow = s + oy * g.out_w;
                        for (int ox = 0; ox < g.out_w; ++ox) {
                            const int ix = ox * g.stride + kx - g.pad_left;
                            if (ix >= 0 && ix < g.in_w) drow[ix] += srow[ox];
                        }
                    }
                }
            }
    }
}

/// Up-layer weights (out x in x kh x kw) rearranged to (out*kh*kw) x in.
inline RowMatrix up_weight_matrix(const ConvLayerSpec& l, const std::vector<double>& w) {
    const int kk = l.kernel_h * l.kernel_w;
    RowMatrix a(static_cast<Eigen::Index>(l.out_channels) * kk, l.in_channels);
    for (int o = 0; o < l.out_channels; ++o)
        for (int i = 0; i < l.in_channels; ++i)
            for (int k = 0; k < kk; ++k)
                a(static_cast<Eigen::Index>(o) * kk + k, i) = w[(static_cast<std::size_t>(o) * l.in_channels + i) * kk + k];
    return a;
}

inline void add_up_weight_gradient(const ConvLayerSpec& l, const RowMatrix& da, std::vector<double>& dw) {
    const int kk = l.kernel_h * l.kernel_w;
    for (int o = 0; o < l.out_channels; ++o)
        for (int i = 0; i < l.in_channels; ++i)
            for (int k = 0; k < kk; ++k)
                dw[(static_cast<std::size_t>(o) * l.in_channels + i) * kk + k] +=
                    da(static_cast<Eigen::Index>(o) * kk + k, i);
}

/// Per-sample flatten: (C x N*HW) -> (C*HW x N), feature index c*HW + p.
inline RowMatrix flatten_batch(const RowMatrix& x, int batch) {
    const int channels = static_cast<int>(x.rows());
    const int hw = static_cast<int>(x.cols()) / batch;
    RowMatrix out(static_cast<Eigen::Index>(channels) * hw, batch);
    for (int c = 0; c < channels; ++c)
        for (int n = 0; n < batch; ++n)
            for (int p = 0; p < hw; ++p) out(static_cast<Eigen::Index>(c) * hw + p, n) = x(c, static_cast<Eigen::Index>(n) * hw + p);
    return out;
}

inline RowMatrix unflatten_batch(const RowMatrix& f, int channels, int batch) {
    const int hw = static_cast<int>(f.rows()) / channels;
    RowMatrix out(channels, static_cast<Eigen::Index>(batch) * hw);
    for (int c = 0; c < channels; ++c)
        for (int n = 0; n < batch; ++n)
            for (int p = 0; p < hw; ++p) out(c, static_cast<Eigen::Index>(n) * hw + p) = f(static_cast<Eigen::Index>(c) * hw + p, n);
    return out;
}

}  // namespace detail

/// Activations kept by forward_batch for backward.
struct ForwardCache {
    int batch = 0;
    std::vector<RowMatrix> inputs;   // input of each layer (flattened for FC)
    std::vector<RowMatrix> columns;  // im2col buffers of flat/down layers
    std::vector<RowMatrix> outputs;  // post-activation output of each layer
};

namespace detail {

/// Runs layers [first, end) on batched activations `x` (shape of layer
/// `first`'s input). Returns the network output as (H*W) x batch.
inline RowMatrix forward_layers(const NetworkSpec& spec, const NetworkParams& params, RowMatrix x, int batch,
                                std::size_t first, ForwardCache* cache) {
    const auto trace = spec.shape_trace();
    if (cache) {
        cache->batch = batch;
        cache->inputs.resize(spec.layers.size());
        cache->columns.resize(spec.layers.size());
        cache->outputs.resize(spec.layers.size());
    }
    Shape3 in_shape = first == 0 ? Shape3{1, spec.height, spec.width} : trace[first - 1];
    RowMatrix cols;
    for (std::size_t i = first; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto& p = params.layers[i];
        RowMatrix y;
        switch (l.kind) {
            case LayerKind::flat:
            case LayerKind::down: {
                const ConvGeometry g = layer_geometry(l, in_shape.height, in_shape.width);
                im2col(x, g, batch, cols);
                Eigen::Map<const RowMatrix> w(p.weights.data(), l.out_channels,
                                              static_cast<Eigen::Index>(l.in_channels) * l.kernel_h * l.kernel_w);
                y.noalias() = w * cols;
                if (cache) cache->columns[i] = cols;
                break;
            }
            case LayerKind::up: {
                const ConvGeometry g = layer_geometry(l, in_shape.height, in_shape.width);
                const RowMatrix a = up_weight_matrix(l, p.weights);
                RowMatrix out_cols;
                out_cols.noalias() = a * x;
                col2im(out_cols, g, batch, l.out_channels, y);
                break;
            }
            case LayerKind::fully_connected: {
                x = flatten_batch(x, batch);
                Eigen::Map<const RowMatrix> w(p.weights.data(), l.out_channels, in_shape.size());
                y.noalias() = w * x;
                break;
            }
        }
        Eigen::Map<const Eigen::VectorXd> b(p.bias.data(), l.out_channels);
        y.colwise() += b;
        if (l.activation == Activation::relu) y = y.cwiseMax(0.0);
        if (cache) {
            cache->inputs[i] = std::move(x);
            cache->outputs[i] = y;
        }
        x = std::move(y);
        in_shape = trace[i];
    }
    // Conv heads emit 1 x (N*H*W); normalize to (H*W) x N.
    if (spec.layers.back().kind != LayerKind::fully_connected) x = flatten_batch(x, batch);
    return x;
}

}  // namespace detail

/// Input batch (1 x N*H*W) from density fields.
inline RowMatrix density_batch(const std::vector<const DensityField*>& fields, int height, int width) {
    const int hw = height * width;
    RowMatrix x(1, static_cast<Eigen::Index>(fields.size()) * hw);
    for (std::size_t n = 0; n < fields.size(); ++n) {
        require(fields[n]->nely() == height && fields[n]->nelx() == width, "density shape does not match network");
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c) x(0, static_cast<Eigen::Index>(n) * hw + r * width + c) = (*fields[n])(r, c);
    }
    return x;
}

inline RowMatrix forward_batch(const NetworkSpec& spec, const NetworkParams& params, const RowMatrix& input,
                               ForwardCache* cache = nullptr) {
    const int hw = spec.height * spec.width;
    require(input.rows() == 1 && input.cols() % hw == 0, "forward_batch: input must be 1 x (N*H*W)");
    const int batch = static_cast<int>(input.cols() / hw);
    return detail::forward_layers(spec, params, input, batch, 0, cache);
}

/// Single convolution layer on one tensor (flat, down or up).
inline Tensor conv2d_forward(const Tensor& input, std::span<const double> weights, std::span<const double> bias,
                             const ConvLayerSpec& layer) {
    require(layer.kind != LayerKind::fully_connected, "conv2d_forward: not a convolution layer");
    require(input.channels == layer.in_channels, "conv2d_forward: channel mismatch");
    require(weights.size() == static_cast<std::size_t>(layer.out_channels) * layer.in_channels * layer.kernel_h *
                                  layer.kernel_w,
            "conv2d_forward: weight size mismatch");
    require(bias.size() == static_cast<std::size_t>(layer.out_channels), "conv2d_forward: bias size mismatch");
    RowMatrix x(input.channels, input.height * input.width);
    for (int c = 0; c < input.channels; ++c)
        for (int k = 0; k < input.height * input.width; ++k)
            x(c, k) = input.data[static_cast<std::size_t>(c) * input.height * input.width + k];
    const Shape3 in{input.channels, input.height, input.width};
    const Shape3 out_shape = layer_output_shape(layer, in, 0, 0);
    const ConvGeometry g = layer_geometry(layer, in.height, in.width);
    RowMatrix cols, y;
    if (layer.kind == LayerKind::up) {
        const std::vector<double> w(weights.begin(), weights.end());
        RowMatrix out_cols = detail::up_weight_matrix(layer, w) * x;
        detail::col2im(out_cols, g, 1, layer.out_channels, y);
    } else {
        detail::im2col(x, g, 1, cols);
        Eigen::Map<const RowMatrix> w(weights.data(), layer.out_channels,
                                      static_cast<Eigen::Index>(layer.in_channels) * layer.kernel_h * layer.kernel_w);
        y = w * cols;
    }
    Eigen::Map<const Eigen::VectorXd> b(bias.data(), layer.out_channels);
    y.colwise() += b;
    if (layer.activation == Activation::relu) y = y.cwiseMax(0.0);
    Tensor out(out_shape.channels, out_shape.height, out_shape.width);
    std::copy(y.data(), y.data() + y.size(), out.data.begin());
    return out;
}

/// Estimated sensitivity field for one density field (raw network output,
/// not clamped).
inline SensitivityField forward(const NetworkSpec& spec, const NetworkParams& params, const DensityField& density) {
    spec.validate();
    check_params(spec, params);
    const int factor = 1 << spec.down_stages();
    if (spec.height % factor != 0 || spec.width % factor != 0)
        throw InputError("forward: H and W must be divisible by " + std::to_string(factor));
    if (density.nely() != spec.height || density.nelx() != spec.width)
        throw InputError("forward: density shape does not match the network input");
    const RowMatrix y = forward_batch(spec, params, density_batch({&density}, spec.height, spec.width));
    SensitivityField s{Eigen::MatrixXd(spec.height, spec.width)};
    for (int r = 0; r < spec.height; ++r)
        for (int c = 0; c < spec.width; ++c) s.values(r, c) = y(r * spec.width + c, 0);
    return s;
}

/// Reverse-mode gradients given dL/d(output) of shape (H*W) x batch.
inline NetworkParams backward(const NetworkSpec& spec, const NetworkParams& params, const ForwardCache& cache,
                              const RowMatrix& output_grad) {
    if (cache.batch <= 0 || cache.outputs.size() != spec.layers.size() || cache.outputs.back().size() == 0)
        throw InputError("backward: missing forward cache");
    const int batch = cache.batch;
    require(output_grad.rows() == spec.height * spec.width && output_grad.cols() == batch,
            "backward: output gradient shape mismatch");
    const auto trace = spec.shape_trace();
    NetworkParams grads = zero_params(spec);

    RowMatrix d = output_grad;
    if (spec.layers.back().kind != LayerKind::fully_connected) d = detail::unflatten_batch(d, 1, batch);
    for (std::size_t ii = spec.layers.size(); ii-- > 0;) {
        const auto& l = spec.layers[ii];
        const auto& p = params.layers[ii];
        auto& g = grads.layers[ii];
        const Shape3 in_shape = ii == 0 ? Shape3{1, spec.height, spec.width} : trace[ii - 1];
        if (l.activation == Activation::relu)
            d = d.cwiseProduct((cache.outputs[ii].array() > 0.0).cast<double>().matrix());
        Eigen::Map<Eigen::VectorXd>(g.bias.data(), l.out_channels) += d.rowwise().sum();
        RowMatrix dx;
        switch (l.kind) {
            case LayerKind::flat:
            case LayerKind::down: {
                const ConvGeometry geo = layer_geometry(l, in_shape.height, in_shape.width);
                const auto kcols = static_cast<Eigen::Index>(l.in_channels) * l.kernel_h * l.kernel_w;
                Eigen::Map<RowMatrix>(g.weights.data(), l.out_channels, kcols).noalias() +=
                    d * cache.columns[ii].transpose();
                if (ii > 0) {
                    Eigen::Map<const RowMatrix> w(p.weights.data(), l.out_channels, kcols);
                    RowMatrix dcols;
                    dcols.noalias() = w.transpose() * d;
                    detail::col2im(dcols, geo, batch, l.in_channels, dx);
                }
                break;
            }
            case LayerKind::up: {
                const ConvGeometry geo = layer_geometry(l, in_shape.height, in_shape.width);
                RowMatrix dcols;
                detail::im2col(d, geo, batch, dcols);
                RowMatrix da;
                da.noalias() = dcols * cache.inputs[ii].transpose();
                detail::add_up_weight_gradient(l, da, g.weights);
                if (ii > 0) {
                    const RowMatrix a = detail::up_weight_matrix(l, p.weights);
                    dx.noalias() = a.transpose() * dcols;
                }
                break;
            }
            case LayerKind::fully_connected: {
                const auto& xin = cache.inputs[ii];
                Eigen::Map<RowMatrix>(g.weights.data(), l.out_channels, xin.rows()).noalias() += d * xin.transpose();
                if (ii > 0) {
                    Eigen::Map<const RowMatrix> w(p.weights.data(), l.out_channels, xin.rows());
                    RowMatrix df;
                    df.noalias() = w.transpose() * d;
                    dx = detail::unflatten_batch(df, in_shape.channels, batch);
                }
                break;
            }
        }
        d = std::move(dx);
    }
    return grads;
}

struct AdamState {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    NetworkParams m;
    NetworkParams v;

    static AdamState for_params(const NetworkParams& params) {
        AdamState s;
        s.m = params;
        s.v = params;
        s.m.for_each_array([](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
        s.v.for_each_array([](std::vector<double>& a) { std::fill(a.begin(), a.end(), 0.0); });
        return s;
    }
};

/// One bias-corrected Adam update.
inline void adam_step(AdamState& state, NetworkParams& params, const NetworkParams& grads) {
    require(grads.layers.size() == params.layers.size(), "adam_step: gradient shape mismatch");
    if (state.m.layers.size() != params.layers.size()) {
        const AdamState fresh = AdamState::for_params(params);
        state.m = fresh.m;
        state.v = fresh.v;
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
        require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(),
                "adam_step: array size mismatch");
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            p[k] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    };
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        update(params.layers[i].weights, grads.layers[i].weights, state.m.layers[i].weights, state.v.layers[i].weights);
        update(params.layers[i].bias, grads.layers[i].bias, state.m.layers[i].bias, state.v.layers[i].bias);
    }
}

struct TrainConfig {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int epochs = 20;
    int batch_size = 16;
    std::uint64_t seed = 0;
    /// Divide every label field by its max |value| before fitting.
    bool normalize_labels = true;
};

struct TrainResult {
    NetworkParams params;
    std::vector<double> loss_history;  // mean MSE per epoch
};

/// Training target for one sample (optionally max-|value| normalized).
inline Eigen::VectorXd training_target(const TrainingSample& s, bool normalize) {
    const int h = static_cast<int>(s.sensitivity.values.rows());
    const int w = static_cast<int>(s.sensitivity.values.cols());
    Eigen::VectorXd t(h * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) t[r * w + c] = s.sensitivity.values(r, c);
    if (normalize) {
        const double m = t.cwiseAbs().maxCoeff();
        if (m > 0.0) t /= m;
    }
    return t;
}

/// Mean squared error and its gradient for a batch.
inline double mse_loss(const RowMatrix& output, const RowMatrix& target, RowMatrix* grad) {
    const RowMatrix diff = output - target;
    const double n = static_cast<double>(diff.size());
    if (grad) *grad = diff * (2.0 / n);
    return diff.squaredNorm() / n;
}

/// Mini-batch Adam on MSE, starting from `initial` (or a seeded init).
inline TrainResult train(const NetworkSpec& spec, const std::vector<TrainingSample>& samples,
                         const TrainConfig& config, std::optional<NetworkParams> initial = std::nullopt) {
    spec.validate();
    require(!samples.empty(), "train: empty dataset");
    require(config.epochs >= 0 && config.batch_size >= 1, "train: bad epochs/batch_size");
    for (const auto& s : samples)
        if (s.density.nely() != spec.height || s.density.nelx() != spec.width ||
            s.sensitivity.values.rows() != spec.height || s.sensitivity.values.cols() != spec.width)
            throw InputError("train: dataset shape does not match network spec");

    TrainResult result;
    result.params = initial ? std::move(*initial) : init_params(spec, config.seed);
    check_params(spec, result.params);
    AdamState adam = AdamState::for_params(result.params);
    adam.learning_rate = config.learning_rate;
    adam.beta1 = config.beta1;
    adam.beta2 = config.beta2;
    adam.epsilon = config.epsilon;

    const int hw = spec.height * spec.width;
    std::vector<Eigen::VectorXd> targets;
    targets.reserve(samples.size());
    for (const auto& s : samples) targets.push_back(training_target(s, config.normalize_labels));

    std::vector<int> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(config.seed, 0x5eed);
    int batch_index = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const int b = static_cast<int>(end - start);
            std::vector<const DensityField*> fields;
            RowMatrix target(hw, b);
            for (int k = 0; k < b; ++k) {
                fields.push_back(&samples[order[start + k]].density);
                target.col(k) = targets[order[start + k]];
            }
            ForwardCache cache;
            const RowMatrix out = forward_batch(spec, result.params, density_batch(fields, spec.height, spec.width), &cache);
            RowMatrix grad;
            const double loss = mse_loss(out, target, &grad);
            if (!std::isfinite(loss))
                throw NumericalError("train: non-finite loss at batch " + std::to_string(batch_index) +
                                     " (epoch " + std::to_string(epoch) + ")");
            loss_sum += loss * b;
            adam_step(adam, result.params, backward(spec, result.params, cache, grad));
        }
        result.loss_history.push_back(loss_sum / static_cast<double>(samples.size()));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Model files:
//   "CNNTOMD1" | u64 header_len | JSON header | f64le parameter blob
// The header embeds the NetworkSpec and, per layer, the blob offsets (in
// doubles) of the weights (out x in x kh x kw, or out x in for the fully
// connected head) followed by the biases.

inline nlohmann::json spec_to_json(const NetworkSpec& spec) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : spec.layers)
        layers.push_back({{"kind", to_string(l.kind)},
                          {"in_channels", l.in_channels},
                          {"out_channels", l.out_channels},
                          {"kernel_h", l.kernel_h},
                          {"kernel_w", l.kernel_w},
                          {"activation", l.activation == Activation::relu ? "relu" : "linear"}});
    return {{"height", spec.height}, {"width", spec.width}, {"channel_multiplier", spec.channel_multiplier},
            {"layers", layers}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
    NetworkSpec spec;
    try {
        spec.height = j.at("height").get<int>();
        spec.width = j.at("width").get<int>();
        spec.channel_multiplier = j.at("channel_multiplier").get<double>();
        for (const auto& l : j.at("layers")) {
            ConvLayerSpec c;
            c.kind = layer_kind_from_string(l.at("kind").get<std::string>());
            c.in_channels = l.at("in_channels").get<int>();
            c.out_channels = l.at("out_channels").get<int>();
            c.kernel_h = l.at("kernel_h").get<int>();
            c.kernel_w = l.at("kernel_w").get<int>();
            const auto act = l.at("activation").get<std::string>();
            require(act == "relu" || act == "linear", "unknown activation '" + act + "'");
            c.activation = act == "relu" ? Activation::relu : Activation::linear;
            spec.layers.push_back(c);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("network spec JSON: ") + e.what());
    }
    spec.validate();
    return spec;
}

struct Model {
    NetworkSpec spec;
    NetworkParams params;
};

inline void save_model(const std::filesystem::path& path, const NetworkSpec& spec, const NetworkParams& params) {
    spec.validate();
    check_params(spec, params);
    nlohmann::json offsets = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& l : params.layers) {
        offsets.push_back({{"weights_offset", offset}, {"weights_count", l.weights.size()},
                           {"bias_offset", offset + l.weights.size()}, {"bias_count", l.bias.size()}});
        offset += l.weights.size() + l.bias.size();
    }
    const nlohmann::json header = {{"format", "cnnto-model"}, {"format_version", 1},
                                   {"toolkit_version", kToolkitVersion}, {"spec", spec_to_json(spec)},
                                   {"parameters", offsets}, {"blob_doubles", offset}};
    auto out = open_for_write(path, true);
    write_container_header(out, "CNNTOMD1", header);
    for (const auto& l : params.layers) {
        for (double w : l.weights) write_le<double>(out, w);
        for (double b : l.bias) write_le<double>(out, b);
    }
    if (!out) throw InputError("save_model: I/O error on '" + path.string() + "'");
}

/// Loads a model; when `expected_mesh` is given the embedded H x W must match.
inline Model load_model(const std::filesystem::path& path, std::optional<GridMesh> expected_mesh = std::nullopt) {
    auto in = open_for_read(path, true);
    const auto header = read_container_header(in, "CNNTOMD1", "model '" + path.string() + "'");
    if (header.value("format", "") != "cnnto-model" || header.value("format_version", 0) != 1)
        throw InputError("model '" + path.string() + "': unsupported format or version");
    Model m;
    m.spec = spec_from_json(header.at("spec"));
    if (expected_mesh && (expected_mesh->nely != m.spec.height || expected_mesh->nelx != m.spec.width))
        throw InputError("model '" + path.string() + "' is for " + std::to_string(m.spec.height) + "x" +
                         std::to_string(m.spec.width) + " but the mesh is " + std::to_string(expected_mesh->nely) +
                         "x" + std::to_string(expected_mesh->nelx));
    m.params = zero_params(m.spec);
    for (auto& l : m.params.layers) {
        for (double& w : l.weights) w = read_le<double>(in);
        for (double& b : l.bias) b = read_le<double>(in);
    }
    return m;
}

} // namespace cnnto
