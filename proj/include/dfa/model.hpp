#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dfa/backbone.hpp"

namespace dfa {

struct ModelSpec {
    Variant variant = Variant::A;
    int num_backbones = 3;  // [1,4]
    int64_t num_classes = 19;
    int64_t decoder_width = 32;
    int interbackbone_upsample = 4;
    DType dtype = DType::F32;

    // Input extents must be divisible by this so every stage extent stays
    // integral down to the deepest feature (scale 1/2^(N+3)).
    int64_t required_divisor() const { return int64_t(1) << (num_backbones + 3); }
};

// Validates the configuration and returns it with all derived widths closed.
ModelSpec build_dfanet(const ModelSpec& config);

// Stage input widths for backbone n (1-based) under sub-stage aggregation.
StageInputs aggregated_stage_inputs(Variant v, int n);

struct EncoderTrace {
    std::vector<StageOutputs> backbones;  // ordered n = 1..N
};

// Low-level path: per-backbone enc2 -> 1x1 conv to decoder_width -> upsample
// to 1/4 scale -> sum. High-level path: per-backbone fca -> 1x1 conv to
// decoder_width -> upsample to 1/4 scale -> concat -> 1x1 fuse conv. Head:
// 3x3 conv to num_classes on (LL + HL), then bilinear x4 to full resolution.
struct Decoder {
    std::vector<ConvBnRelu> ll_reduce;
    std::vector<ConvBnRelu> hl_reduce;
    ConvBnRelu hl_fuse;
    Conv2dLayer head;

    Decoder() = default;
    Decoder(const ModelSpec& spec, DType dtype, Rng& rng, ParamRegistry& reg);
    Tensor forward(const EncoderTrace& trace, bool training);
};

class DfaNet {
  public:
    DfaNet(const ModelSpec& config, uint64_t seed);
    DfaNet(DfaNet&&) = default;
    DfaNet& operator=(DfaNet&&) = default;
    DfaNet(const DfaNet&) = delete;

    const ModelSpec& spec() const { return spec_; }
    void set_training(bool t) { training_ = t; }
    bool training() const { return training_; }

    EncoderTrace encoder_forward(const Tensor& x);
    Tensor decoder_forward(const EncoderTrace& trace);
    Tensor forward(const Tensor& x);

    ParamRegistry& registry() { return registry_; }
    const ParamRegistry& registry() const { return registry_; }

    std::vector<Backbone>& backbones() { return backbones_; }
    const std::vector<Backbone>& backbones() const { return backbones_; }
    Decoder& decoder() { return decoder_; }
    const Decoder& decoder() const { return decoder_; }

  private:
    ModelSpec spec_;
    ParamRegistry registry_;
    std::vector<Backbone> backbones_;
    Decoder decoder_;
    bool training_ = false;
};

}  // namespace dfa
