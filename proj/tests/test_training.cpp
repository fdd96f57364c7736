#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dfa/training.hpp"
#include "test_helpers.hpp"

using namespace dfa;

namespace {

TrainConfig base_config() {
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_iter = 500;
    cfg.crop_h = cfg.crop_w = 32;
    return cfg;
}

ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.variant = Variant::B;
    spec.num_backbones = 1;
    spec.num_classes = 3;
    return spec;
}

}  // namespace

TEST_CASE("poly schedule hits the published endpoints") {
    TrainConfig cfg = base_config();
    cfg.max_iter = 1000;
    CHECK(poly_lr(0, cfg) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(poly_lr(1000, cfg) == doctest::Approx(0.0).epsilon(1e-12));
    // midpoint: 0.2 * 0.5^0.9
    CHECK(poly_lr(500, cfg) == doctest::Approx(0.2 * std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK(poly_lr(500, cfg) == doctest::Approx(0.10717734625362931).epsilon(1e-10));
    CHECK_THROWS_AS(poly_lr(1001, cfg), ContractError);
}

TEST_CASE("poly schedule is strictly decreasing") {
    TrainConfig cfg = base_config();
    cfg.max_iter = 64;
    double prev = poly_lr(0, cfg);
    for (int64_t i = 1; i <= 64; ++i) {
        const double cur = poly_lr(i, cfg);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("sgd step: plain gradient descent when momentum and decay are off") {
    ParamRegistry reg;
    Tensor p = Tensor::from_values({1, 1, 1, 1}, {1.0});
    p.set_requires_grad(true);
    reg.add_param("w.weight", p);
    TrainConfig cfg = base_config();
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    SgdOptimizer opt(reg, cfg);
    p.ensure_grad();
    p.grad<float>()[0] = 0.25f;
    opt.step(0.1);
    CHECK(p.flat(0) == doctest::Approx(1.0 - 0.1 * 0.25).epsilon(1e-7));
    CHECK(opt.step_count() == 1);
}

TEST_CASE("sgd weight decay: p=1, g=0, wd=1e-5, lr=0.1 gives 0.999999") {
    ParamRegistry reg;
    Tensor p = Tensor::from_values({1, 1, 1, 1}, {1.0}, DType::F64);
    p.set_requires_grad(true);
    reg.add_param("w.weight", p);
    TrainConfig cfg = base_config();
    cfg.momentum = 0.0;
    cfg.weight_decay = 1e-5;
    SgdOptimizer opt(reg, cfg);
    p.ensure_grad();
    opt.step(0.1);
    CHECK(p.flat(0) == doctest::Approx(0.999999).epsilon(1e-12));
}

TEST_CASE("two momentum steps with constant unit gradient land on -2.9") {
    ParamRegistry reg;
    Tensor p = Tensor::zeros({1, 1, 1, 1}, DType::F64);
    p.set_requires_grad(true);
    reg.add_param("w.weight", p);
    TrainConfig cfg = base_config();
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    SgdOptimizer opt(reg, cfg);
    p.ensure_grad();
    p.grad<double>()[0] = 1.0;
    opt.step(1.0);
    CHECK(p.flat(0) == doctest::Approx(-1.0).epsilon(1e-12));
    opt.step(1.0);
    CHECK(p.flat(0) == doctest::Approx(-2.9).epsilon(1e-12));
}

TEST_CASE("an sgd step with lr=0 changes nothing") {
    ModelSpec spec = tiny_spec();
    DfaNet model(spec, 3);
    TrainConfig cfg = base_config();
    SgdOptimizer opt(model.registry(), cfg);
    std::vector<Tensor> before;
    for (auto& [n, t] : model.registry().params) before.push_back(t.clone());
    for (auto& [n, t] : model.registry().params) {
        t.ensure_grad();
        t.grad<float>()[0] = 1.0f;
    }
    opt.step(0.0);
    size_t i = 0;
    for (auto& [n, t] : model.registry().params)
        CHECK(test::bitwise_equal(t, before[i++]));
}

TEST_CASE("BN gamma/beta are exempt from weight decay") {
    ParamRegistry reg;
    Tensor w = Tensor::from_values({1, 1, 1, 1}, {1.0}, DType::F64);
    Tensor gamma = Tensor::from_values({1, 1, 1, 1}, {1.0}, DType::F64);
    w.set_requires_grad(true);
    gamma.set_requires_grad(true);
    reg.add_param("layer.weight", w);
    reg.add_param("layer.bn.gamma", gamma);
    TrainConfig cfg = base_config();
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.1;
    SgdOptimizer opt(reg, cfg);
    w.ensure_grad();
    gamma.ensure_grad();
    opt.step(1.0);
    CHECK(w.flat(0) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(gamma.flat(0) == doctest::Approx(1.0).epsilon(1e-12));  // untouched
}

TEST_CASE("mean_iou basics") {
    LabelMap gt(1, 2, 4, 0);
    for (int64_t x = 2; x < 4; ++x) {
        gt.at(0, 0, x) = 1;
        gt.at(0, 1, x) = 1;
    }

    SUBCASE("perfect prediction gives mIoU 1") {
        IoUResult r = mean_iou(gt, gt, 2);
        CHECK(r.defined);
        CHECK(r.miou == doctest::Approx(1.0));
    }
    SUBCASE("half-and-half ground truth, all-0 prediction: [0.5, 0] -> 0.25") {
        LabelMap pred(1, 2, 4, 0);
        IoUResult r = mean_iou(pred, gt, 2);
        CHECK(r.per_class[0] == doctest::Approx(0.5));
        CHECK(r.per_class[1] == doctest::Approx(0.0));
        CHECK(r.miou == doctest::Approx(0.25));
    }
    SUBCASE("all pixels ignored is undefined, not zero") {
        LabelMap ig(1, 2, 4, kIgnoreLabel);
        IoUResult r = mean_iou(gt, ig, 2);
        CHECK(!r.defined);
    }
    SUBCASE("out-of-range labels are data errors") {
        LabelMap bad = gt;
        bad.at(0, 0, 0) = 9;
        CHECK_THROWS_AS(mean_iou(gt, bad, 2), DataError);
    }
}

TEST_CASE("mean_iou is permutation-equivariant") {
    Rng rng = make_rng(17);
    std::uniform_int_distribution<int> d(0, 3);
    LabelMap gt(1, 8, 8, 0), pred(1, 8, 8, 0);
    for (auto& v : gt.data) v = d(rng);
    for (auto& v : pred.data) v = d(rng);
    IoUResult base = mean_iou(pred, gt, 4);

    const int perm[4] = {2, 0, 3, 1};
    LabelMap gt_p = gt, pred_p = pred;
    for (auto& v : gt_p.data) v = perm[v];
    for (auto& v : pred_p.data) v = perm[v];
    IoUResult permuted = mean_iou(pred_p, gt_p, 4);

    CHECK(permuted.miou == doctest::Approx(base.miou).epsilon(1e-12));
    for (int k = 0; k < 4; ++k)
        CHECK(permuted.per_class[static_cast<size_t>(perm[k])] ==
              doctest::Approx(base.per_class[static_cast<size_t>(k)]).epsilon(1e-12));
}

TEST_CASE("metrics csv format: iter,lr,loss[,miou]") {
    std::vector<MetricsRow> log{{0, 0.2, 1.5, std::nullopt}, {1, 0.19, 1.2, 0.5}};
    const std::string csv = metrics_to_csv(log);
    CHECK(csv.find("iter,lr,loss,miou") == 0);
    CHECK(csv.find("0,0.2") != std::string::npos);
    CHECK(csv.find("1,0.19") != std::string::npos);
    CHECK(csv.find(",0.5\n") != std::string::npos);
}

TEST_CASE("train_loop with max_iter=0 changes nothing and logs nothing") {
    DfaNet model(tiny_spec(), 5);
    auto data = generate_toy_dataset(1, 4, 32, 3);
    TrainConfig cfg = base_config();
    cfg.max_iter = 0;
    std::vector<Tensor> before;
    for (auto& [n, t] : model.registry().params) before.push_back(t.clone());
    TrainResult r = train_loop(model, data, {}, cfg);
    CHECK(r.log.empty());
    size_t i = 0;
    for (auto& [n, t] : model.registry().params)
        CHECK(test::bitwise_equal(t, before[i++]));
}

TEST_CASE("identical seeds give bitwise-identical loss curves") {
    auto data = generate_toy_dataset(2, 8, 32, 3);
    TrainConfig cfg = base_config();
    cfg.max_iter = 4;
    cfg.base_lr = 0.01;
    cfg.seed = 33;

    std::vector<double> first;
    for (int run = 0; run < 2; ++run) {
        DfaNet model(tiny_spec(), 7);
        TrainResult r = train_loop(model, data, {}, cfg);
        REQUIRE(r.log.size() == 4);
        if (run == 0)
            for (const auto& row : r.log) first.push_back(row.loss);
        else
            for (size_t i = 0; i < r.log.size(); ++i)
                CHECK(std::memcmp(&first[i], &r.log[i].loss, sizeof(double)) == 0);
    }
}

TEST_CASE("loss decreases over the first iterations on a fixed batch (3 seeds)") {
    auto data = generate_toy_dataset(3, 2, 32, 3);
    int successes = 0;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        DfaNet model(tiny_spec(), 50 + seed);
        TrainConfig cfg = base_config();
        cfg.batch_size = 2;
        cfg.max_iter = 10;
        cfg.base_lr = 1e-3;
        cfg.augment_enabled = false;  // fixed batch
        cfg.seed = seed;
        TrainResult r = train_loop(model, data, {}, cfg);
        const double early = (r.log[0].loss + r.log[1].loss) / 2.0;
        const double late = (r.log[8].loss + r.log[9].loss) / 2.0;
        if (late < early) ++successes;
    }
    CHECK(successes >= 2);
}

TEST_CASE("train_loop logs periodic mIoU on the eval split") {
    auto data = generate_toy_dataset(4, 4, 32, 3);
    DfaNet model(tiny_spec(), 8);
    TrainConfig cfg = base_config();
    cfg.max_iter = 4;
    cfg.eval_every = 2;
    cfg.base_lr = 0.01;
    TrainResult r = train_loop(model, data, data, cfg);
    REQUIRE(r.log.size() == 4);
    CHECK(!r.log[0].miou.has_value());
    CHECK(r.log[1].miou.has_value());
    CHECK(!r.log[2].miou.has_value());
    CHECK(r.log[3].miou.has_value());
}

TEST_CASE("predict pads to the divisor and crops back") {
    DfaNet model(tiny_spec(), 9);
    Tensor img = Tensor::uniform({1, 3, 20, 28}, 5, 0.0, 1.0);  // not divisible by 16
    LabelMap pred = predict(model, img, {0.485, 0.456, 0.406});
    CHECK(pred.h == 20);
    CHECK(pred.w == 28);
    for (int32_t v : pred.data) {
        CHECK(v >= 0);
        CHECK(v < 3);
    }
}
