#include "dfa/model.hpp"

namespace dfa {

ModelSpec build_dfanet(const ModelSpec& config) {
    if (config.num_backbones < 1 || config.num_backbones > 4)
        throw ConfigError("num_backbones must be in [1,4], got " +
                          std::to_string(config.num_backbones));
    if (config.num_classes < 2)
        throw ConfigError("num_classes must be >= 2, got " + std::to_string(config.num_classes));
    if (config.decoder_width < 1) throw ConfigError("decoder_width must be positive");
    if (config.interbackbone_upsample != 4)
        throw ConfigError("inter-backbone upsample factor is fixed at 4 by the halving cascade");
    return config;
}

StageInputs aggregated_stage_inputs(Variant v, int n) {
    const VariantWidths w = variant_widths(v);
    if (n <= 1) return {w.conv1_out, w.enc2.out, w.enc3.out};
    return {w.enc4.out + w.enc2.out, w.enc2.out + w.enc3.out, w.enc3.out + w.enc4.out};
}

Decoder::Decoder(const ModelSpec& spec, DType dtype, Rng& rng, ParamRegistry& reg) {
    const VariantWidths w = variant_widths(spec.variant);
    const int64_t dw = spec.decoder_width;
    for (int n = 1; n <= spec.num_backbones; ++n)
        ll_reduce.emplace_back("decoder.ll" + std::to_string(n),
                               ConvParams{w.enc2.out, dw, 1, 1, 1, 0, false, 1}, dtype, rng, reg);
    for (int n = 1; n <= spec.num_backbones; ++n)
        hl_reduce.emplace_back("decoder.hl" + std::to_string(n),
                               ConvParams{w.enc4.out, dw, 1, 1, 1, 0, false, 1}, dtype, rng, reg);
    hl_fuse = ConvBnRelu("decoder.hl_fuse",
                         ConvParams{dw * spec.num_backbones, dw, 1, 1, 1, 0, false, 1}, dtype, rng,
                         reg);
    head = Conv2dLayer("decoder.head", ConvParams{dw, spec.num_classes, 3, 3, 1, 1, true, 1},
                       dtype, rng, reg);
}

namespace {

// Upsamples t to the target extents; the cascade guarantees an integer factor.
Tensor up_to(const Tensor& t, int64_t th, int64_t tw, const char* what) {
    const Shape4& s = t.shape();
    if (s.h == th && s.w == tw) return t;
    if (th % s.h != 0 || tw % s.w != 0 || th / s.h != tw / s.w)
        throw ContractError(std::string("decoder ") + what + ": cannot upsample " + s.str() +
                            " to " + std::to_string(th) + "x" + std::to_string(tw));
    return ops::bilinear_upsample(t, static_cast<int>(th / s.h));
}

}  // namespace

Tensor Decoder::forward(const EncoderTrace& trace, bool training) {
    const size_t n_bb = trace.backbones.size();
    if (n_bb != ll_reduce.size())
        throw ContractError("decoder: trace has " + std::to_string(n_bb) + " backbones, decoder built for " +
                            std::to_string(ll_reduce.size()));
    const int64_t th = trace.backbones[0].enc2.shape().h;
    const int64_t tw = trace.backbones[0].enc2.shape().w;

    Tensor low;
    for (size_t i = 0; i < n_bb; ++i) {
        Tensor t = ll_reduce[i].forward(trace.backbones[i].enc2, training);
        t = up_to(t, th, tw, "low-level path");
        low = i == 0 ? t : ops::add(low, t);
    }

    std::vector<Tensor> high_parts;
    high_parts.reserve(n_bb);
    for (size_t i = 0; i < n_bb; ++i) {
        Tensor t = hl_reduce[i].forward(trace.backbones[i].fca, training);
        high_parts.push_back(up_to(t, th, tw, "high-level path"));
    }
    Tensor high = hl_fuse.forward(ops::concat_channels(high_parts), training);

    Tensor fused = ops::add(low, high);
    Tensor logits_q = head.forward(fused);
    return ops::bilinear_upsample(logits_q, 4);
}

DfaNet::DfaNet(const ModelSpec& config, uint64_t seed) : spec_(build_dfanet(config)) {
    Rng rng = make_rng(seed);
    backbones_.reserve(static_cast<size_t>(spec_.num_backbones));
    for (int n = 1; n <= spec_.num_backbones; ++n) {
        BackboneSpec bspec =
            build_backbone(spec_.variant, n == 1, aggregated_stage_inputs(spec_.variant, n));
        backbones_.emplace_back(bspec, spec_.dtype, rng, "backbone" + std::to_string(n),
                                registry_);
    }
    decoder_ = Decoder(spec_, spec_.dtype, rng, registry_);
}

EncoderTrace DfaNet::encoder_forward(const Tensor& x) {
    const Shape4& s = x.shape();
    if (s.c != 3)
        throw ShapeError("encoder: input must have 3 channels, got " + s.str());
    const int64_t div = spec_.required_divisor();
    if (s.h % div != 0 || s.w % div != 0)
        throw ShapeError("encoder: input extents must be divisible by " + std::to_string(div) +
                         " for " + std::to_string(spec_.num_backbones) + " backbones, got " +
                         s.str());

    auto check_aligned = [](const Tensor& a, const Tensor& b, int n, const char* stage) {
        if (a.shape().h != b.shape().h || a.shape().w != b.shape().w)
            throw ShapeError("backbone " + std::to_string(n) + " " + stage +
                             " aggregation: resolutions differ, " + a.shape().str() + " vs " +
                             b.shape().str());
    };

    EncoderTrace trace;
    trace.backbones.push_back(backbones_[0].forward(x, training_));
    for (int n = 2; n <= spec_.num_backbones; ++n) {
        const StageOutputs& prev = trace.backbones.back();
        Backbone& bb = backbones_[static_cast<size_t>(n - 1)];
        StageOutputs out;

        Tensor entry = ops::bilinear_upsample(prev.fca, spec_.interbackbone_upsample);
        check_aligned(entry, prev.enc2, n, "enc2");
        out.enc2 = bb.run_stage(0, ops::concat_channels({entry, prev.enc2}), training_);

        check_aligned(out.enc2, prev.enc3, n, "enc3");
        out.enc3 = bb.run_stage(1, ops::concat_channels({out.enc2, prev.enc3}), training_);

        check_aligned(out.enc3, prev.enc4, n, "enc4");
        out.enc4 = bb.run_stage(2, ops::concat_channels({out.enc3, prev.enc4}), training_);

        auto [fca, vec] = bb.run_attention(out.enc4, training_);
        out.fca = fca;
        out.attention_vector = vec;
        trace.backbones.push_back(std::move(out));
    }
    return trace;
}

Tensor DfaNet::decoder_forward(const EncoderTrace& trace) {
    return decoder_.forward(trace, training_);
}

Tensor DfaNet::forward(const Tensor& x) { return decoder_forward(encoder_forward(x)); }

}  // namespace dfa
