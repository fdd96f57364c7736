#include <cmath>

#include "dfa/nn_ops.hpp"

namespace dfa {

void ParamRegistry::add_param(const std::string& name, const Tensor& t) {
    for (const auto& [n, _] : params)
        if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
    params.emplace_back(name, t);
}

void ParamRegistry::add_buffer(const std::string& name, const Tensor& t) {
    for (const auto& [n, _] : buffers)
        if (n == name) throw ConfigError("duplicate buffer name '" + name + "'");
    buffers.emplace_back(name, t);
}

int64_t ParamRegistry::total_param_elements() const {
    int64_t total = 0;
    for (const auto& [_, t] : params) total += t.numel();
    return total;
}

Tensor ParamRegistry::find(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    for (const auto& [n, t] : buffers)
        if (n == name) return t;
    throw ConfigError("no parameter or buffer named '" + name + "'");
}

Conv2dLayer::Conv2dLayer(std::string name_, ConvParams p_, DType dtype, Rng& rng,
                         ParamRegistry& reg)
    : name(std::move(name_)), p(p_) {
    p.validate();
    const int64_t fan_in = (p.in_channels / p.groups) * p.kh * p.kw;
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    weight = Tensor::randn({p.out_channels, p.in_channels / p.groups, p.kh, p.kw}, rng, 0.0, std,
                           dtype);
    weight.set_requires_grad(true);
    reg.add_param(name + ".weight", weight);
    if (p.has_bias) {
        bias = Tensor::zeros({1, p.out_channels, 1, 1}, dtype);
        bias.set_requires_grad(true);
        reg.add_param(name + ".bias", bias);
    }
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
    Tensor y = ops::conv2d(x, p, weight, bias);
    last_out = y.shape();
    return y;
}

BatchNormLayer::BatchNormLayer(std::string name_, int64_t channels_, DType dtype,
                               ParamRegistry& reg)
    : name(std::move(name_)), channels(channels_) {
    gamma = Tensor::full({1, channels, 1, 1}, 1.0, dtype);
    beta = Tensor::zeros({1, channels, 1, 1}, dtype);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    running_mean = Tensor::zeros({1, channels, 1, 1}, dtype);
    running_var = Tensor::full({1, channels, 1, 1}, 1.0, dtype);
    reg.add_param(name + ".gamma", gamma);
    reg.add_param(name + ".beta", beta);
    reg.add_buffer(name + ".running_mean", running_mean);
    reg.add_buffer(name + ".running_var", running_var);
}

Tensor BatchNormLayer::forward(const Tensor& x, bool training) {
    Tensor y = ops::batchnorm(x, gamma, beta, running_mean, running_var, training, eps, momentum);
    last_out = y.shape();
    return y;
}

FcLayer::FcLayer(std::string name_, int64_t in_, int64_t out_, DType dtype, Rng& rng,
                 ParamRegistry& reg)
    : name(std::move(name_)), in(in_), out(out_) {
    const double std = std::sqrt(2.0 / static_cast<double>(in));
    weight = Tensor::randn({out, in, 1, 1}, rng, 0.0, std, dtype);
    bias = Tensor::zeros({1, out, 1, 1}, dtype);
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
    reg.add_param(name + ".weight", weight);
    reg.add_param(name + ".bias", bias);
}

Tensor FcLayer::forward(const Tensor& x) const {
    Tensor y = ops::fully_connected(x, weight, bias);
    last_out = y.shape();
    return y;
}

ConvBnRelu::ConvBnRelu(const std::string& name, ConvParams p, DType dtype, Rng& rng,
                       ParamRegistry& reg)
    : conv(name + ".conv", p, dtype, rng, reg), bn(name + ".bn", p.out_channels, dtype, reg) {}

Tensor ConvBnRelu::forward(const Tensor& x, bool training) {
    return ops::relu(bn.forward(conv.forward(x), training));
}

SepConv::SepConv(const std::string& name, int64_t in_ch, int64_t out_ch, int k, int stride,
                 DType dtype, Rng& rng, ParamRegistry& reg)
    : dw(name + ".dw",
         ConvParams{in_ch, in_ch, k, k, stride, (k - 1) / 2, false, in_ch}, dtype, rng, reg),
      pw(name + ".pw", ConvParams{in_ch, out_ch, 1, 1, 1, 0, false, 1}, dtype, rng, reg) {}

Tensor SepConv::forward(const Tensor& x, bool training) {
    return pw.forward(dw.forward(x, training), training);
}

int64_t SepConv::param_count() const {
    return dw.conv.p.param_count() + 2 * dw.bn.channels + pw.conv.p.param_count() +
           2 * pw.bn.channels;
}

}  // namespace dfa
