#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "dfa/autograd.hpp"
#include "dfa/ops.hpp"
#include "dfa/tensor.hpp"
#include "test_helpers.hpp"

using namespace dfa;

TEST_CASE("tensor creation reads back row-major") {
    Tensor t = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(t.at(0, 0, 0, 0) == 1);
    CHECK(t.at(0, 0, 0, 1) == 2);
    CHECK(t.at(0, 0, 1, 0) == 3);
    CHECK(t.at(0, 0, 1, 1) == 4);
}

TEST_CASE("degenerate extent gives a valid empty tensor") {
    Tensor t = Tensor::from_values({1, 1, 0, 5}, {});
    CHECK(t.numel() == 0);
}

TEST_CASE("value count mismatch raises a size error") {
    CHECK_THROWS_AS(Tensor::from_values({1, 1, 2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("seeded random tensors are bitwise reproducible") {
    Tensor a = Tensor::randn({2, 3, 4, 5}, 7);
    Tensor b = Tensor::randn({2, 3, 4, 5}, 7);
    CHECK(test::bitwise_equal(a, b));
    Tensor c = Tensor::randn({2, 3, 4, 5}, 8);
    CHECK(!test::bitwise_equal(a, c));
}

TEST_CASE("elementwise add and relu") {
    Tensor a = Tensor::from_values({1, 1, 1, 2}, {1, 2});
    Tensor b = Tensor::from_values({1, 1, 1, 2}, {3, 4});
    Tensor s = ops::add(a, b);
    CHECK(s.at(0, 0, 0, 0) == 4);
    CHECK(s.at(0, 0, 0, 1) == 6);

    Tensor r = ops::relu(Tensor::from_values({1, 1, 1, 3}, {-1, 0, 2}));
    CHECK(r.at(0, 0, 0, 0) == 0);
    CHECK(r.at(0, 0, 0, 1) == 0);
    CHECK(r.at(0, 0, 0, 2) == 2);
}

TEST_CASE("channel-vector broadcast multiply") {
    Tensor x = Tensor::full({1, 3, 4, 4}, 1.0);
    Tensor v = Tensor::from_values({1, 3, 1, 1}, {2, 0, 1});
    Tensor y = ops::mul(x, v);
    for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
            CHECK(y.at(0, 0, h, w) == 2);
            CHECK(y.at(0, 1, h, w) == 0);
            CHECK(y.at(0, 2, h, w) == 1);
        }
}

TEST_CASE("incompatible shapes raise shape errors") {
    Tensor a = Tensor::zeros({1, 2, 3, 3});
    Tensor b = Tensor::zeros({1, 2, 3, 4});
    CHECK_THROWS_AS(ops::add(a, b), ShapeError);
}

TEST_CASE("concat_channels sums channel counts and preserves order") {
    Tensor a = Tensor::randn({1, 48, 8, 8}, 1);
    Tensor b = Tensor::randn({1, 96, 8, 8}, 2);
    Tensor c = ops::concat_channels({a, b});
    CHECK(c.shape() == Shape4{1, 144, 8, 8});

    // slicing back by the recorded boundaries reproduces each input bitwise
    CHECK(test::bitwise_equal(ops::slice_channels(c, 0, 48), a));
    CHECK(test::bitwise_equal(ops::slice_channels(c, 48, 144), b));
}

TEST_CASE("concat_channels single input is the identity") {
    Tensor a = Tensor::randn({2, 5, 3, 3}, 3);
    CHECK(test::bitwise_equal(ops::concat_channels({a}), a));
}

TEST_CASE("concat_channels rejects mismatched spatial extents") {
    Tensor a = Tensor::zeros({1, 2, 4, 4});
    Tensor b = Tensor::zeros({1, 2, 5, 4});
    CHECK_THROWS_AS(ops::concat_channels({a, b}), ShapeError);
}

TEST_CASE("backward: loss = sum(2x) gives grad 2 everywhere") {
    Tensor x = Tensor::randn({2, 3, 2, 2}, 11, 0.0, 1.0, DType::F64);
    x.set_requires_grad(true);
    Graph g;
    GraphScope scope(g);
    Tensor loss = ops::sum_all(ops::scale(x, 2.0));
    backward(loss, g);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad_tensor().flat(i) == doctest::Approx(2.0));
}

TEST_CASE("backward: loss = sum(x*x) at x=3 gives grad 6") {
    Tensor x = Tensor::from_values({1, 1, 1, 1}, {3}, DType::F64);
    x.set_requires_grad(true);
    Graph g;
    GraphScope scope(g);
    Tensor loss = ops::sum_all(ops::mul(x, x));
    backward(loss, g);
    CHECK(x.grad_tensor().flat(0) == doctest::Approx(6.0));
}

TEST_CASE("backward accumulates across calls until reset") {
    Tensor x = Tensor::from_values({1, 1, 1, 1}, {1}, DType::F64);
    x.set_requires_grad(true);
    Graph g;
    GraphScope scope(g);
    Tensor loss = ops::sum_all(ops::scale(x, 2.0));
    backward(loss, g);
    backward(loss, g);
    CHECK(x.grad_tensor().flat(0) == doctest::Approx(4.0));
    x.zero_grad();
    backward(loss, g);
    CHECK(x.grad_tensor().flat(0) == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor x = Tensor::zeros({1, 1, 1, 2}, DType::F64);
    x.set_requires_grad(true);
    Graph g;
    GraphScope scope(g);
    Tensor y = ops::scale(x, 1.0);
    CHECK_THROWS_AS(backward(y, g), ContractError);
}

TEST_CASE("backward of concat splits the gradient at channel boundaries") {
    Tensor a = Tensor::randn({1, 3, 4, 4}, 21, 0.0, 1.0, DType::F64);
    Tensor b = Tensor::randn({1, 5, 4, 4}, 22, 0.0, 1.0, DType::F64);
    a.set_requires_grad(true);
    b.set_requires_grad(true);

    Graph g;
    {
        GraphScope scope(g);
        Tensor cat = ops::concat_channels({a, b});
        backward(test::weighted_sum_loss(cat, 99), g);
    }
    Tensor ga = a.grad_tensor();
    Tensor gb = b.grad_tensor();

    // independent per-branch computation must agree
    Tensor a2 = a.clone();
    a2.set_requires_grad(true);
    Tensor r = Tensor::uniform({1, 8, 4, 4}, 99, 0.25, 1.0, DType::F64);
    Graph g2;
    {
        GraphScope scope(g2);
        backward(ops::sum_all(ops::mul(a2, ops::slice_channels(r, 0, 3))), g2);
    }
    CHECK(test::max_abs_diff(ga, a2.grad_tensor()) < 1e-12);

    Tensor b2 = b.clone();
    b2.set_requires_grad(true);
    Graph g3;
    {
        GraphScope scope(g3);
        backward(ops::sum_all(ops::mul(b2, ops::slice_channels(r, 3, 8))), g3);
    }
    CHECK(test::max_abs_diff(gb, b2.grad_tensor()) < 1e-12);
}

TEST_CASE("grad_check: linear map is exact to 1e-8") {
    Tensor x = Tensor::randn({1, 2, 3, 3}, 31, 0.0, 1.0, DType::F64);
    double err = grad_check(
        [](const Tensor& t) { return test::weighted_sum_loss(ops::scale(t, 1.7), 5); }, x, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check: composites of core ops stay under 1e-4 over 20 seeds") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Tensor x = test::nudged_randn({1, 4, 3, 3}, 100 + seed);
        Tensor v = Tensor::randn({1, 4, 1, 1}, 200 + seed, 0.0, 1.0, DType::F64);
        double err = grad_check(
            [&](const Tensor& t) {
                Tensor y = ops::mul(ops::relu(t), v);
                y = ops::add(y, ops::scale(t, 0.5));
                y = ops::concat_channels({y, ops::sub(t, v)});
                return test::weighted_sum_loss(y, 300 + seed);
            },
            x, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("grad_check rejects a non-deterministic builder") {
    Tensor x = Tensor::full({1, 1, 1, 1}, 1.0, DType::F64);
    int calls = 0;
    CHECK_THROWS_AS(grad_check(
                        [&calls](const Tensor& t) {
                            ++calls;
                            return ops::scale(t, static_cast<double>(calls));
                        },
                        x, 1e-5),
                    ContractError);
}

TEST_CASE("ops are bitwise identical across thread counts") {
    Tensor x = Tensor::randn({2, 6, 9, 9}, 41);
    runtime::set_num_threads(1);
    Tensor y1 = ops::relu(ops::scale(x, 3.0));
    runtime::set_num_threads(4);
    Tensor y4 = ops::relu(ops::scale(x, 3.0));
    runtime::set_num_threads(1);
    CHECK(test::bitwise_equal(y1, y4));
}

TEST_CASE("NaN production fails fast naming the op") {
    Tensor a = Tensor::full({1, 1, 1, 1}, 1e38f);
    try {
        Tensor y = ops::mul(a, a);  // overflows f32 to inf
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("tensor dump roundtrips through the raw format") {
    Tensor t = Tensor::randn({2, 3, 4, 5}, 17, 0.0, 1.0, DType::F64);
    const char* path = "tensor_dump_test.bin";
    save_tensor(t, path);
    Tensor back = load_tensor(path);
    CHECK(back.dtype() == DType::F64);
    CHECK(test::bitwise_equal(t, back));
    std::remove(path);
}

TEST_CASE("tensor dump header is the documented little-endian layout") {
    Tensor t = Tensor::from_values({1, 1, 1, 2}, {1.0, 2.0});
    const char* path = "tensor_dump_hdr.bin";
    save_tensor(t, path);
    FILE* f = std::fopen(path, "rb");
    REQUIRE(f != nullptr);
    unsigned char hdr[25];
    REQUIRE(std::fread(hdr, 1, 25, f) == 25);
    std::fclose(f);
    CHECK(hdr[0] == 'D');
    CHECK(hdr[1] == 'F');
    CHECK(hdr[2] == 'T');
    CHECK(hdr[3] == 'N');
    CHECK(hdr[4] == 1);  // version u32 LE
    CHECK(hdr[8] == 0);  // dtype code f32
    CHECK(hdr[9] == 1);  // dims n
    CHECK(hdr[13] == 1);
    CHECK(hdr[17] == 1);
    CHECK(hdr[21] == 2);
    std::remove(path);
}
