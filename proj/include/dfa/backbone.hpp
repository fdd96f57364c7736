#pragma once

#include <optional>
#include <vector>

#include "dfa/nn_ops.hpp"

namespace dfa {

enum class Variant { A, B };

inline const char* variant_name(Variant v) { return v == Variant::A ? "A" : "B"; }

struct BlockWidths {
    int64_t c1 = 0, c2 = 0, out = 0;
};

// Stage widths and repeat counts for the two backbone variants:
//   A: conv1 8; enc2 (12,12,48)x4; enc3 (24,24,96)x6; enc4 (48,48,192)x4
//   B: conv1 8; enc2 (8,8,32)x4;   enc3 (16,16,64)x6; enc4 (32,32,128)x4
struct VariantWidths {
    int64_t conv1_out = 8;
    BlockWidths enc2, enc3, enc4;
    int enc2_repeat = 4, enc3_repeat = 6, enc4_repeat = 4;
};

VariantWidths variant_widths(Variant v);

// Per-stage input channel widths; for the first backbone these follow from
// the previous stage, for later backbones from the aggregation concats.
struct StageInputs {
    int64_t enc2 = 0, enc3 = 0, enc4 = 0;
};

struct BackboneSpec {
    Variant variant = Variant::A;
    bool include_conv1 = true;
    int64_t fc_hidden = 1000;
    StageInputs stage_in;  // closed channel widths for every stage entry
    VariantWidths widths;
};

// Validates and closes the channel arithmetic. When include_conv1 is set, the
// enc2 input must equal the conv1 width (the caller may pass 0 to accept it).
BackboneSpec build_backbone(Variant v, bool include_conv1, StageInputs stage_in);

// Per-backbone record of stage outputs consumed by aggregation and decoding.
struct StageOutputs {
    Tensor enc2, enc3, enc4;
    Tensor fca;               // attention-modulated enc4
    Tensor attention_vector;  // (N,C,1,1)
};

// One Xception block: three separable convs with an identity-or-projection
// shortcut. The stage's entry stride lives on the first block.
struct XceptionBlock {
    SepConv s1, s2, s3;
    std::optional<Conv2dLayer> proj;
    std::optional<BatchNormLayer> proj_bn;
    int stride = 1;

    XceptionBlock(const std::string& name, int64_t in_ch, BlockWidths w, int stride, DType dtype,
                  Rng& rng, ParamRegistry& reg);
    Tensor forward(const Tensor& x, bool training);
    Shape4 infer(const Shape4& in) const;
};

struct Stage {
    std::vector<XceptionBlock> blocks;

    Stage() = default;
    Stage(const std::string& name, int64_t in_ch, BlockWidths w, int repeat, DType dtype, Rng& rng,
          ParamRegistry& reg);
    Tensor forward(const Tensor& x, bool training);
    Shape4 infer(const Shape4& in) const;
};

// Channel reweighting head: global pool -> FC(C->hidden) -> 1x1 conv
// (hidden->C, no bias) -> channel-wise multiply with the input map.
struct FcAttention {
    FcLayer fc;
    Conv2dLayer conv;
    bool squash = false;  // optional ReLU on the attention vector, off by default

    FcAttention() = default;
    FcAttention(const std::string& name, int64_t channels, int64_t hidden, DType dtype, Rng& rng,
                ParamRegistry& reg);
    std::pair<Tensor, Tensor> forward(const Tensor& enc4, bool training) const;
    int64_t channels() const { return conv.p.out_channels; }
};

class Backbone {
  public:
    Backbone(const BackboneSpec& spec, DType dtype, Rng& rng, const std::string& name,
             ParamRegistry& reg);

    StageOutputs forward(const Tensor& x, bool training);
    // Runs stages on externally prepared inputs (aggregated concats).
    Tensor run_stage(int stage_index, const Tensor& x, bool training);  // 0=enc2,1=enc3,2=enc4
    std::pair<Tensor, Tensor> run_attention(const Tensor& enc4, bool training);

    const BackboneSpec& spec() const { return spec_; }
    bool has_conv1() const { return conv1_.has_value(); }
    ConvBnRelu& conv1() { return *conv1_; }
    Stage& stage(int i);
    const Stage& stage(int i) const;
    FcAttention& attention() { return attn_; }
    const FcAttention& attention() const { return attn_; }

  private:
    BackboneSpec spec_;
    std::optional<ConvBnRelu> conv1_;
    Stage enc2_, enc3_, enc4_;
    FcAttention attn_;
};

}  // namespace dfa
