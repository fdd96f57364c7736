#pragma once

#include <optional>
#include <string>

#include "dfa/ops.hpp"
#include "dfa/tensor.hpp"

namespace dfa {

struct ConvParams {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    int kh = 1, kw = 1;
    int stride = 1;
    int padding = 0;
    bool has_bias = false;
    int64_t groups = 1;  // 1 (standard) or in_channels (depthwise)

    void validate() const;
    // floor((H + 2p - k)/s) + 1; throws ShapeError if any output extent < 1.
    Shape4 out_shape(const Shape4& in) const;
    int64_t param_count() const;
    int64_t macs(const Shape4& in) const;
};

namespace ops {

// Cross-correlation with zero padding. weight is (out, in/groups, kh, kw);
// bias, when present, is (1, out, 1, 1).
Tensor conv2d(const Tensor& x, const ConvParams& p, const Tensor& weight,
              const Tensor& bias = Tensor());

// Per-channel affine normalization. Train mode normalizes by batch statistics
// over (N,H,W) and blends them into the running buffers; eval mode uses the
// running buffers only.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double eps = 1e-5, double momentum = 0.1);

// Half-pixel-center bilinear interpolation by an integer factor >= 1:
// src = (dst + 0.5)/f - 0.5, clamped to [0, extent-1].
Tensor bilinear_upsample(const Tensor& x, int factor);

Tensor global_avg_pool(const Tensor& x);  // (N,C,H,W) -> (N,C,1,1)

// y = Wx + b on (N,C,1,1) inputs; weight (K,C,1,1), bias (1,K,1,1).
Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Mean over non-ignored pixels of -log softmax(logits)[label]; returns a
// (1,1,1,1) scalar. All-ignored batches give loss 0 and zero gradients.
Tensor softmax_cross_entropy(const Tensor& logits, const LabelMap& labels,
                             int32_t ignore_label = kIgnoreLabel);

LabelMap argmax_channels(const Tensor& logits);

}  // namespace ops

// Learnable layers. Construction draws fan-in-scaled normal weights
// (std = sqrt(2/fan_in)) and registers parameters under `name`.
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;

    void add_param(const std::string& name, const Tensor& t);
    void add_buffer(const std::string& name, const Tensor& t);
    int64_t total_param_elements() const;
    Tensor find(const std::string& name) const;  // params then buffers; throws if absent
};

struct Conv2dLayer {
    std::string name;
    ConvParams p;
    Tensor weight, bias;
    mutable Shape4 last_out{};

    Conv2dLayer() = default;
    Conv2dLayer(std::string name, ConvParams p, DType dtype, Rng& rng, ParamRegistry& reg);
    Tensor forward(const Tensor& x) const;
    Shape4 infer(const Shape4& in) const { return p.out_shape(in); }
};

struct BatchNormLayer {
    std::string name;
    int64_t channels = 0;
    double eps = 1e-5;
    double momentum = 0.1;
    Tensor gamma, beta, running_mean, running_var;
    mutable Shape4 last_out{};

    BatchNormLayer() = default;
    BatchNormLayer(std::string name, int64_t channels, DType dtype, ParamRegistry& reg);
    Tensor forward(const Tensor& x, bool training);
};

struct FcLayer {
    std::string name;
    int64_t in = 0, out = 0;
    Tensor weight, bias;
    mutable Shape4 last_out{};

    FcLayer() = default;
    FcLayer(std::string name, int64_t in, int64_t out, DType dtype, Rng& rng, ParamRegistry& reg);
    Tensor forward(const Tensor& x) const;
};

// conv -> BN -> ReLU
struct ConvBnRelu {
    Conv2dLayer conv;
    BatchNormLayer bn;

    ConvBnRelu() = default;
    ConvBnRelu(const std::string& name, ConvParams p, DType dtype, Rng& rng, ParamRegistry& reg);
    Tensor forward(const Tensor& x, bool training);
    Shape4 infer(const Shape4& in) const { return conv.infer(in); }
};

// Depthwise separable convolution block:
// conv_dw(k x k) -> BN -> ReLU -> conv_pw(1x1) -> BN -> ReLU.
// The stride, if any, lives on the depthwise stage.
struct SepConv {
    ConvBnRelu dw;
    ConvBnRelu pw;

    SepConv() = default;
    SepConv(const std::string& name, int64_t in_ch, int64_t out_ch, int k, int stride, DType dtype,
            Rng& rng, ParamRegistry& reg);
    Tensor forward(const Tensor& x, bool training);
    Shape4 infer(const Shape4& in) const { return pw.infer(dw.infer(in)); }
    int64_t param_count() const;
};

}  // namespace dfa
