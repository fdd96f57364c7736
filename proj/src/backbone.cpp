#include "dfa/backbone.hpp"

namespace dfa {

VariantWidths variant_widths(Variant v) {
    VariantWidths w;
    if (v == Variant::A) {
        w.enc2 = {12, 12, 48};
        w.enc3 = {24, 24, 96};
        w.enc4 = {48, 48, 192};
    } else {
        w.enc2 = {8, 8, 32};
        w.enc3 = {16, 16, 64};
        w.enc4 = {32, 32, 128};
    }
    return w;
}

BackboneSpec build_backbone(Variant v, bool include_conv1, StageInputs stage_in) {
    BackboneSpec spec;
    spec.variant = v;
    spec.include_conv1 = include_conv1;
    spec.widths = variant_widths(v);
    if (include_conv1) {
        if (stage_in.enc2 == 0) stage_in.enc2 = spec.widths.conv1_out;
        if (stage_in.enc2 != spec.widths.conv1_out)
            throw ConfigError("enc2 input width must equal conv1 width (" +
                              std::to_string(spec.widths.conv1_out) + ") when conv1 is present");
    }
    if (stage_in.enc2 <= 0)
        throw ConfigError("enc2 input width must be positive");
    if (stage_in.enc3 == 0) stage_in.enc3 = spec.widths.enc2.out;
    if (stage_in.enc4 == 0) stage_in.enc4 = spec.widths.enc3.out;
    if (stage_in.enc3 <= 0 || stage_in.enc4 <= 0)
        throw ConfigError("stage input widths must be positive");
    spec.stage_in = stage_in;
    return spec;
}

XceptionBlock::XceptionBlock(const std::string& name, int64_t in_ch, BlockWidths w, int stride_,
                             DType dtype, Rng& rng, ParamRegistry& reg)
    : s1(name + ".sep1", in_ch, w.c1, 3, stride_, dtype, rng, reg),
      s2(name + ".sep2", w.c1, w.c2, 3, 1, dtype, rng, reg),
      s3(name + ".sep3", w.c2, w.out, 3, 1, dtype, rng, reg),
      stride(stride_) {
    if (in_ch != w.out || stride_ != 1) {
        proj.emplace(name + ".shortcut.conv",
                     ConvParams{in_ch, w.out, 1, 1, stride_, 0, false, 1}, dtype, rng, reg);
        proj_bn.emplace(name + ".shortcut.bn", w.out, dtype, reg);
    }
}

Tensor XceptionBlock::forward(const Tensor& x, bool training) {
    Tensor y = s3.forward(s2.forward(s1.forward(x, training), training), training);
    Tensor sc = proj ? proj_bn->forward(proj->forward(x), training) : x;
    return ops::add(y, sc);
}

Shape4 XceptionBlock::infer(const Shape4& in) const { return s3.infer(s2.infer(s1.infer(in))); }

Stage::Stage(const std::string& name, int64_t in_ch, BlockWidths w, int repeat, DType dtype,
             Rng& rng, ParamRegistry& reg) {
    blocks.reserve(static_cast<size_t>(repeat));
    int64_t cur = in_ch;
    for (int i = 0; i < repeat; ++i) {
        blocks.emplace_back(name + ".block" + std::to_string(i), cur, w, i == 0 ? 2 : 1, dtype,
                            rng, reg);
        cur = w.out;
    }
}

Tensor Stage::forward(const Tensor& x, bool training) {
    Tensor y = x;
    for (auto& b : blocks) y = b.forward(y, training);
    return y;
}

Shape4 Stage::infer(const Shape4& in) const {
    Shape4 s = in;
    for (const auto& b : blocks) s = b.infer(s);
    return s;
}

FcAttention::FcAttention(const std::string& name, int64_t channels, int64_t hidden, DType dtype,
                         Rng& rng, ParamRegistry& reg)
    : fc(name + ".fc", channels, hidden, dtype, rng, reg),
      conv(name + ".conv", ConvParams{hidden, channels, 1, 1, 1, 0, false, 1}, dtype, rng, reg) {}

std::pair<Tensor, Tensor> FcAttention::forward(const Tensor& enc4, bool /*training*/) const {
    Tensor pooled = ops::global_avg_pool(enc4);
    Tensor hidden = fc.forward(pooled);
    Tensor vec = conv.forward(hidden);
    if (squash) vec = ops::relu(vec);
    Tensor fca = ops::mul(enc4, vec);
    return {fca, vec};
}

Backbone::Backbone(const BackboneSpec& spec, DType dtype, Rng& rng, const std::string& name,
                   ParamRegistry& reg)
    : spec_(spec) {
    const VariantWidths& dims = spec.widths;
    if (spec.include_conv1)
        conv1_.emplace(name + ".conv1", ConvParams{3, dims.conv1_out, 3, 3, 2, 1, false, 1}, dtype,
                       rng, reg);
    enc2_ = Stage(name + ".enc2", spec.stage_in.enc2, dims.enc2, dims.enc2_repeat, dtype, rng, reg);
    enc3_ = Stage(name + ".enc3", spec.stage_in.enc3, dims.enc3, dims.enc3_repeat, dtype, rng, reg);
    enc4_ = Stage(name + ".enc4", spec.stage_in.enc4, dims.enc4, dims.enc4_repeat, dtype, rng, reg);
    attn_ = FcAttention(name + ".attn", dims.enc4.out, spec.fc_hidden, dtype, rng, reg);
}

Stage& Backbone::stage(int i) {
    switch (i) {
        case 0: return enc2_;
        case 1: return enc3_;
        case 2: return enc4_;
        default: throw ContractError("stage index out of range");
    }
}

const Stage& Backbone::stage(int i) const {
    return const_cast<Backbone*>(this)->stage(i);
}

Tensor Backbone::run_stage(int stage_index, const Tensor& x, bool training) {
    Stage& st = stage(stage_index);
    const int64_t want = st.blocks.front().s1.dw.conv.p.in_channels;
    if (x.shape().c != want) {
        static const char* names[] = {"enc2", "enc3", "enc4"};
        throw ShapeError(std::string("backbone stage ") + names[stage_index] + ": input has " +
                         std::to_string(x.shape().c) + " channels, expected " +
                         std::to_string(want));
    }
    return st.forward(x, training);
}

std::pair<Tensor, Tensor> Backbone::run_attention(const Tensor& enc4, bool training) {
    return attn_.forward(enc4, training);
}

StageOutputs Backbone::forward(const Tensor& x, bool training) {
    Tensor cur = x;
    if (conv1_) {
        if (x.shape().c != 3)
            throw ShapeError("backbone conv1: input has " + std::to_string(x.shape().c) +
                             " channels, expected 3");
        cur = conv1_->forward(cur, training);
    }
    StageOutputs out;
    out.enc2 = run_stage(0, cur, training);
    out.enc3 = run_stage(1, out.enc2, training);
    out.enc4 = run_stage(2, out.enc3, training);
    auto [fca, vec] = run_attention(out.enc4, training);
    out.fca = fca;
    out.attention_vector = vec;
    return out;
}

}  // namespace dfa
