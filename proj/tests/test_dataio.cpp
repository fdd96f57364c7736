#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dfa/dataio.hpp"
#include "test_helpers.hpp"

using namespace dfa;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::set<int32_t> label_values(const LabelMap& l) {
    return {l.data.begin(), l.data.end()};
}

}  // namespace

TEST_CASE("a 1x1 white P6 pixel loads as [1,1,1]") {
    TempDir td("dfa_ppm_white");
    {
        std::ofstream os(td.file("w.ppm"), std::ios::binary);
        os << "P6\n1 1\n255\n";
        os.put(static_cast<char>(255));
        os.put(static_cast<char>(255));
        os.put(static_cast<char>(255));
    }
    Tensor img = load_image_ppm(td.file("w.ppm"));
    CHECK(img.shape() == Shape4{1, 3, 1, 1});
    for (int64_t i = 0; i < 3; ++i) CHECK(img.flat(i) == 1.0f);
}

TEST_CASE("ppm/pgm roundtrip preserves bytes and comments are skipped") {
    TempDir td("dfa_ppm_round");
    Tensor img = Tensor::uniform({1, 3, 6, 5}, 1, 0.0, 1.0);
    save_image_ppm(img, td.file("a.ppm"));
    Tensor back = load_image_ppm(td.file("a.ppm"));
    // quantized to bytes: equal after one roundtrip
    save_image_ppm(back, td.file("b.ppm"));
    Tensor again = load_image_ppm(td.file("b.ppm"));
    CHECK(test::bitwise_equal(back, again));

    {
        std::ofstream os(td.file("c.pgm"), std::ios::binary);
        os << "P5\n# a comment line\n2 2\n255\n";
        for (char v : {0, 1, 2, 3}) os.put(v);
    }
    LabelMap l = load_labels_pgm(td.file("c.pgm"));
    CHECK(l.at(0, 0, 0) == 0);
    CHECK(l.at(0, 1, 1) == 3);
}

TEST_CASE("palette mask roundtrip preserves argmax classes") {
    TempDir td("dfa_mask");
    LabelMap mask(1, 4, 4, 0);
    for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 4; ++x) mask.at(0, y, x) = static_cast<int32_t>((y + x) % 5);
    save_mask_ppm(mask, td.file("m.ppm"));
    LabelMap back = mask_from_palette_ppm(td.file("m.ppm"), 5);
    CHECK(back == mask);
}

TEST_CASE("truncated payloads and malformed headers are parse errors with offsets") {
    TempDir td("dfa_ppm_bad");
    {
        std::ofstream os(td.file("t.ppm"), std::ios::binary);
        os << "P6\n4 4\n255\n";
        os.put(0);  // far short of 48 bytes
    }
    try {
        load_image_ppm(td.file("t.ppm"));
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
    {
        std::ofstream os(td.file("h.ppm"), std::ios::binary);
        os << "P3\n1 1\n255\n";
    }
    CHECK_THROWS_AS(load_image_ppm(td.file("h.ppm")), ParseError);
    {
        std::ofstream os(td.file("m.ppm"), std::ios::binary);
        os << "P6\n1 1\n65535\n";
    }
    CHECK_THROWS_AS(load_image_ppm(td.file("m.ppm")), ParseError);
}

TEST_CASE("toy dataset is deterministic and covers every class") {
    auto a = generate_toy_dataset(9, 8, 64, 4);
    auto b = generate_toy_dataset(9, 8, 64, 4);
    REQUIRE(a.size() == 8);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(test::bitwise_equal(a[i].image, b[i].image));
        CHECK(a[i].labels == b[i].labels);
    }

    for (const auto& s : a) {
        auto values = label_values(s.labels);
        for (int32_t k = 0; k < 4; ++k) CHECK(values.count(k) == 1);
        CHECK(values.count(kIgnoreLabel) == 0);
        for (int32_t v : values) CHECK(v < 4);
    }
    CHECK(!test::bitwise_equal(generate_toy_dataset(10, 1, 64, 4)[0].image, a[0].image));
}

TEST_CASE("dataset directory roundtrip") {
    TempDir td("dfa_dataset");
    auto samples = generate_toy_dataset(3, 5, 32, 3);
    write_dataset(td.path.string(), samples);
    CHECK(fs::exists(td.path / "images" / "0000.ppm"));
    CHECK(fs::exists(td.path / "labels" / "0004.pgm"));
    auto back = load_dataset(td.path.string());
    REQUIRE(back.size() == 5);
    for (size_t i = 0; i < back.size(); ++i) CHECK(back[i].labels == samples[i].labels);
}

TEST_CASE("augment identity config subtracts the mean and keeps labels") {
    auto samples = generate_toy_dataset(4, 1, 32, 3);
    AugmentConfig cfg;
    cfg.hflip_prob = 0.0;
    cfg.scale_lo = cfg.scale_hi = 1.0;
    cfg.crop_h = cfg.crop_w = 32;
    Rng rng = make_rng(5);
    SegSample out = augment(samples[0], cfg, rng);
    CHECK(out.labels == samples[0].labels);
    for (int64_t c = 0; c < 3; ++c)
        CHECK(out.image.at(0, c, 3, 7) ==
              doctest::Approx(samples[0].image.at(0, c, 3, 7) - cfg.mean[static_cast<size_t>(c)])
                  .epsilon(1e-6));
}

TEST_CASE("double horizontal flip is the identity") {
    auto samples = generate_toy_dataset(6, 1, 32, 3);
    AugmentConfig cfg;
    cfg.hflip_prob = 1.0;
    cfg.scale_lo = cfg.scale_hi = 1.0;
    cfg.crop_h = cfg.crop_w = 32;
    cfg.mean = {0, 0, 0};
    Rng r1 = make_rng(1), r2 = make_rng(2);
    SegSample once = augment(samples[0], cfg, r1);
    SegSample twice = augment(once, cfg, r2);
    CHECK(test::bitwise_equal(twice.image, samples[0].image));
    CHECK(twice.labels == samples[0].labels);
}

TEST_CASE("bad augment configs are rejected at validation") {
    AugmentConfig cfg;
    cfg.scale_lo = 2.0;
    cfg.scale_hi = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    AugmentConfig p;
    p.hflip_prob = 1.5;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("augmentation never invents label values; padding is 255") {
    auto samples = generate_toy_dataset(8, 4, 48, 5);
    AugmentConfig cfg;
    cfg.crop_h = cfg.crop_w = 64;  // larger than any downscaled result
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng = make_rng(seed);
        const SegSample& src = samples[seed % samples.size()];
        SegSample out = augment(src, cfg, rng);
        auto before = label_values(src.labels);
        before.insert(kIgnoreLabel);
        for (int32_t v : label_values(out.labels)) CHECK(before.count(v) == 1);
    }
}

TEST_CASE("nearest-neighbor label scaling introduces no new values") {
    auto samples = generate_toy_dataset(11, 2, 40, 4);
    for (const auto& s : samples) {
        for (int64_t size : {17, 23, 40, 61, 80}) {
            LabelMap scaled = resize_nearest(s.labels, size, size);
            auto before = label_values(s.labels);
            for (int32_t v : label_values(scaled)) CHECK(before.count(v) == 1);
        }
    }
}

TEST_CASE("checkpoint save/load roundtrips parameters bitwise") {
    TempDir td("dfa_ckpt");
    ModelSpec spec;
    spec.variant = Variant::B;
    spec.num_backbones = 2;
    spec.num_classes = 4;
    DfaNet model(spec, 42);
    save_checkpoint(model, td.file("m.ckpt"), {{"mean_r", "0.5"}});

    LoadedCheckpoint loaded = load_checkpoint(td.file("m.ckpt"));
    CHECK(loaded.config.at("mean_r") == "0.5");
    CHECK(loaded.config.at("variant") == "B");
    REQUIRE(loaded.model != nullptr);
    REQUIRE(loaded.model->registry().params.size() == model.registry().params.size());
    for (size_t i = 0; i < model.registry().params.size(); ++i) {
        CHECK(model.registry().params[i].first == loaded.model->registry().params[i].first);
        CHECK(test::bitwise_equal(model.registry().params[i].second,
                                  loaded.model->registry().params[i].second));
    }
    for (size_t i = 0; i < model.registry().buffers.size(); ++i)
        CHECK(test::bitwise_equal(model.registry().buffers[i].second,
                                  loaded.model->registry().buffers[i].second));
}

TEST_CASE("flipping one payload byte trips the CRC") {
    TempDir td("dfa_ckpt_crc");
    ModelSpec spec;
    spec.variant = Variant::B;
    spec.num_backbones = 1;
    spec.num_classes = 3;
    DfaNet model(spec, 1);
    const std::string path = td.file("m.ckpt");
    save_checkpoint(model, path);

    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(2000);
    char c;
    f.seekg(2000);
    f.get(c);
    f.seekp(2000);
    f.put(static_cast<char>(c ^ 0x01));
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("version and variant mismatches are named load errors") {
    TempDir td("dfa_ckpt_ver");
    ModelSpec spec;
    spec.variant = Variant::B;
    spec.num_backbones = 1;
    spec.num_classes = 3;
    DfaNet model(spec, 1);
    const std::string path = td.file("m.ckpt");
    save_checkpoint(model, path);

    SUBCASE("bumped version is rejected") {
        // rewrite the version field and fix up the CRC
        std::ifstream is(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), {});
        is.close();
        bytes[4] = 2;
        const uint32_t crc =
            crc32(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size() - 4);
        for (int i = 0; i < 4; ++i)
            bytes[bytes.size() - 4 + static_cast<size_t>(i)] =
                static_cast<char>((crc >> (8 * i)) & 0xFF);
        std::ofstream os(path, std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        os.close();
        try {
            load_checkpoint(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("version") != std::string::npos);
        }
    }

    SUBCASE("loading into a mismatched model is a spec error") {
        ModelSpec other = spec;
        other.variant = Variant::A;
        DfaNet wrong(other, 2);
        CHECK_THROWS_AS(load_checkpoint_into(wrong, path), ConfigError);
    }

    SUBCASE("loading into the matching model restores bitwise") {
        DfaNet same(spec, 99);
        load_checkpoint_into(same, path);
        for (size_t i = 0; i < model.registry().params.size(); ++i)
            CHECK(test::bitwise_equal(model.registry().params[i].second,
                                      same.registry().params[i].second));
    }
}
