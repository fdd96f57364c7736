#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dfa/backbone.hpp"
#include "test_helpers.hpp"

using namespace dfa;

namespace {

Backbone make_backbone(const BackboneSpec& spec, ParamRegistry& reg, DType dtype = DType::F32,
                       uint64_t seed = 0, const std::string& name = "backbone1") {
    Rng rng = make_rng(seed);
    return Backbone(spec, dtype, rng, name, reg);
}

}  // namespace

TEST_CASE("variant A spec carries the published stage widths") {
    BackboneSpec spec = build_backbone(Variant::A, true, {});
    CHECK(spec.widths.conv1_out == 8);
    CHECK(spec.widths.enc2.c1 == 12);
    CHECK(spec.widths.enc2.c2 == 12);
    CHECK(spec.widths.enc2.out == 48);
    CHECK(spec.widths.enc3.c1 == 24);
    CHECK(spec.widths.enc3.out == 96);
    CHECK(spec.widths.enc4.c1 == 48);
    CHECK(spec.widths.enc4.out == 192);
    CHECK(spec.widths.enc2_repeat == 4);
    CHECK(spec.widths.enc3_repeat == 6);
    CHECK(spec.widths.enc4_repeat == 4);
}

TEST_CASE("variant B enc3 builds six blocks of (16,16,64)") {
    BackboneSpec spec = build_backbone(Variant::B, true, {});
    CHECK(spec.widths.enc3.c1 == 16);
    CHECK(spec.widths.enc3.c2 == 16);
    CHECK(spec.widths.enc3.out == 64);
    ParamRegistry reg;
    Backbone bb = make_backbone(spec, reg);
    CHECK(bb.stage(1).blocks.size() == 6);
    for (const auto& b : bb.stage(1).blocks) {
        CHECK(b.s1.pw.conv.p.out_channels == 16);
        CHECK(b.s2.pw.conv.p.out_channels == 16);
        CHECK(b.s3.pw.conv.p.out_channels == 64);
    }
}

TEST_CASE("only the first block of a stage carries stride 2") {
    ParamRegistry reg;
    Backbone bb = make_backbone(build_backbone(Variant::A, true, {}), reg);
    for (int s = 0; s < 3; ++s)
        for (size_t i = 0; i < bb.stage(s).blocks.size(); ++i)
            CHECK(bb.stage(s).blocks[i].stride == (i == 0 ? 2 : 1));
}

TEST_CASE("aggregated enc2 entry of width 240 gets a 240->48 projection shortcut") {
    BackboneSpec spec = build_backbone(Variant::A, false, {240, 144, 288});
    ParamRegistry reg;
    Backbone bb = make_backbone(spec, reg, DType::F32, 0, "backbone2");
    const XceptionBlock& first = bb.stage(0).blocks[0];
    CHECK(first.s1.dw.conv.p.in_channels == 240);
    REQUIRE(first.proj.has_value());
    CHECK(first.proj->p.in_channels == 240);
    CHECK(first.proj->p.out_channels == 48);
    CHECK(first.proj->p.stride == 2);
    // later blocks at matching width keep the identity shortcut
    CHECK(!bb.stage(0).blocks[1].proj.has_value());
}

TEST_CASE("non-positive widths are config errors") {
    CHECK_THROWS_AS(build_backbone(Variant::A, false, {0, 0, 0}), ConfigError);
    CHECK_THROWS_AS(build_backbone(Variant::A, true, {16, 0, 0}), ConfigError);
}

TEST_CASE("variant A forward produces the halving cascade at 1024x1024") {
    ParamRegistry reg;
    Backbone bb = make_backbone(build_backbone(Variant::A, true, {}), reg);
    NoGradGuard ng;
    StageOutputs out = bb.forward(Tensor::zeros({1, 3, 1024, 1024}), false);
    CHECK(out.enc2.shape() == Shape4{1, 48, 256, 256});
    CHECK(out.enc3.shape() == Shape4{1, 96, 128, 128});
    CHECK(out.enc4.shape() == Shape4{1, 192, 64, 64});
    CHECK(out.fca.shape() == out.enc4.shape());
    CHECK(out.attention_vector.shape() == Shape4{1, 192, 1, 1});
}

TEST_CASE("variant B forward reaches enc4 (1,128,64,64) from 1024x1024") {
    ParamRegistry reg;
    Backbone bb = make_backbone(build_backbone(Variant::B, true, {}), reg);
    NoGradGuard ng;
    StageOutputs out = bb.forward(Tensor::zeros({1, 3, 1024, 1024}), false);
    CHECK(out.enc4.shape() == Shape4{1, 128, 64, 64});
}

TEST_CASE("conv1-less backbone consumes the aggregated entry directly") {
    ParamRegistry reg;
    Backbone bb = make_backbone(build_backbone(Variant::A, false, {240, 144, 288}), reg);
    NoGradGuard ng;
    Tensor entry = Tensor::zeros({1, 240, 256, 256});
    Tensor enc2 = bb.run_stage(0, entry, false);
    CHECK(enc2.shape() == Shape4{1, 48, 128, 128});
}

TEST_CASE("stage extent arithmetic: four stages from full resolution give 1/16 scale") {
    ParamRegistry reg;
    Backbone bb = make_backbone(build_backbone(Variant::A, true, {}), reg);
    for (int64_t size : {16, 64, 96, 1024}) {
        Shape4 s{1, 3, size, size};
        Shape4 c1 = bb.conv1().infer(s);
        Shape4 e2 = bb.stage(0).infer(c1);
        Shape4 e3 = bb.stage(1).infer(e2);
        Shape4 e4 = bb.stage(2).infer(e3);
        CHECK(e4.h == size / 16);
        CHECK(e4.w == size / 16);
    }
}

TEST_CASE("residual wiring: zeroed projection leaves only the conv path") {
    ParamRegistry reg;
    Rng rng = make_rng(3);
    XceptionBlock block("blk", 8, {4, 4, 16}, 2, DType::F32, rng, reg);
    Tensor x = Tensor::uniform({1, 8, 8, 8}, 4, 0.0, 1.0);

    REQUIRE(block.proj.has_value());
    block.proj->weight.fill_(0.0);
    Tensor with_zero_shortcut = block.forward(x, false);
    Tensor main_only = block.s3.forward(block.s2.forward(block.s1.forward(x, false), false), false);
    CHECK(test::bitwise_equal(with_zero_shortcut, main_only));
}

TEST_CASE("residual wiring: zeroed conv path leaves only the shortcut") {
    ParamRegistry reg;
    Rng rng = make_rng(5);
    XceptionBlock block("blk", 8, {4, 4, 16}, 2, DType::F32, rng, reg);
    Tensor x = Tensor::uniform({1, 8, 8, 8}, 6, 0.0, 1.0);

    block.s1.dw.conv.weight.fill_(0.0);
    block.s1.pw.conv.weight.fill_(0.0);
    block.s2.dw.conv.weight.fill_(0.0);
    block.s2.pw.conv.weight.fill_(0.0);
    block.s3.dw.conv.weight.fill_(0.0);
    block.s3.pw.conv.weight.fill_(0.0);
    Tensor out = block.forward(x, false);
    Tensor shortcut_only = block.proj_bn->forward(block.proj->forward(x), false);
    CHECK(test::bitwise_equal(out, shortcut_only));
}

TEST_CASE("fc attention is an exact channel-wise multiply") {
    ParamRegistry reg;
    Rng rng = make_rng(7);
    FcAttention attn("attn", 16, 100, DType::F32, rng, reg);
    Tensor enc4 = Tensor::randn({2, 16, 4, 4}, 8);

    SUBCASE("all-ones vector reproduces enc4 bitwise") {
        // zero everything, then bias the FC so the conv sees a constant that
        // lands the vector exactly on 1: conv weight picks one hidden unit.
        attn.fc.weight.fill_(0.0);
        attn.fc.bias.fill_(1.0);
        attn.conv.weight.fill_(0.0);
        for (int64_t c = 0; c < 16; ++c) attn.conv.weight.set(c, 0, 0, 0, 1.0);
        auto [fca, vec] = attn.forward(enc4, false);
        for (int64_t i = 0; i < vec.numel(); ++i) CHECK(vec.flat(i) == 1.0);
        CHECK(test::bitwise_equal(fca, enc4));
    }
    SUBCASE("all-zeros vector zeroes the output") {
        attn.conv.weight.fill_(0.0);
        auto [fca, vec] = attn.forward(enc4, false);
        for (int64_t i = 0; i < vec.numel(); ++i) CHECK(vec.flat(i) == 0.0);
        for (int64_t i = 0; i < fca.numel(); ++i) CHECK(fca.flat(i) == 0.0);
    }
    SUBCASE("fca equals enc4 times the broadcast vector bitwise") {
        auto [fca, vec] = attn.forward(enc4, false);
        CHECK(test::bitwise_equal(fca, ops::mul(enc4, vec)));
    }
}

TEST_CASE("attention head parameter count for C=192 is 385000") {
    ParamRegistry reg;
    Rng rng = make_rng(9);
    FcAttention attn("attn", 192, 1000, DType::F32, rng, reg);
    CHECK(reg.total_param_elements() == 192 * 1000 + 1000 + 1000 * 192);
    CHECK(reg.total_param_elements() == 385000);
}

TEST_CASE("backbone parameter count is independent of input resolution") {
    ParamRegistry r1, r2;
    Backbone a = make_backbone(build_backbone(Variant::A, true, {}), r1);
    NoGradGuard ng;
    a.forward(Tensor::zeros({1, 3, 32, 32}), false);
    const int64_t before = r1.total_param_elements();
    a.forward(Tensor::zeros({1, 3, 64, 64}), false);
    CHECK(r1.total_param_elements() == before);
    Backbone b = make_backbone(build_backbone(Variant::A, true, {}), r2);
    CHECK(r2.total_param_elements() == before);
}

TEST_CASE("backbone forward rejects wrong input channel counts naming the stage") {
    ParamRegistry reg;
    Backbone bb = make_backbone(build_backbone(Variant::A, true, {}), reg);
    NoGradGuard ng;
    CHECK_THROWS_AS(bb.forward(Tensor::zeros({1, 4, 64, 64}), false), ShapeError);
    try {
        bb.run_stage(1, Tensor::zeros({1, 32, 16, 16}), false);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("enc3") != std::string::npos);
    }
}
