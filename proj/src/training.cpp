#include "dfa/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dfa {

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (power <= 0.0) throw ConfigError("power must be positive");
    if (max_iter < 0) throw ConfigError("max_iter must be non-negative");
    if (crop_h < 1 || crop_w < 1) throw ConfigError("crop extents must be positive");
    if (eval_every < 1) throw ConfigError("eval_every must be positive");
    aug.validate();
}

double poly_lr(int64_t iter, const TrainConfig& cfg) {
    if (iter < 0 || iter > cfg.max_iter)
        throw ContractError("poly_lr: iter " + std::to_string(iter) + " outside [0," +
                            std::to_string(cfg.max_iter) + "]");
    if (cfg.max_iter == 0) return cfg.base_lr;
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
    return cfg.base_lr * std::pow(frac, cfg.power);
}

namespace {

bool is_bn_param(const std::string& name) {
    return name.ends_with(".gamma") || name.ends_with(".beta");
}

}  // namespace

SgdOptimizer::SgdOptimizer(ParamRegistry& registry, const TrainConfig& cfg)
    : registry_(&registry), momentum_(cfg.momentum), weight_decay_(cfg.weight_decay) {
    velocity_.reserve(registry.params.size());
    decay_exempt_.reserve(registry.params.size());
    for (const auto& [name, t] : registry.params) {
        velocity_.push_back(Tensor::zeros(t.shape(), t.dtype()));
        decay_exempt_.push_back(is_bn_param(name));
    }
}

void SgdOptimizer::step(double lr) {
    for (size_t i = 0; i < registry_->params.size(); ++i) {
        Tensor& p = registry_->params[i].second;
        Tensor& v = velocity_[i];
        const double wd = decay_exempt_[i] ? 0.0 : weight_decay_;
        const int64_t n = p.numel();
        if (!p.has_grad()) p.ensure_grad();
        if (p.dtype() == DType::F32) {
            auto pd = p.data<float>();
            auto gd = p.grad<float>();
            auto vd = v.data<float>();
            const float m = static_cast<float>(momentum_);
            const float w = static_cast<float>(wd);
            const float l = static_cast<float>(lr);
            for (int64_t j = 0; j < n; ++j) {
                const float g = gd[j] + w * pd[j];
                vd[j] = m * vd[j] + g;
                pd[j] -= l * vd[j];
            }
        } else {
            auto pd = p.data<double>();
            auto gd = p.grad<double>();
            auto vd = v.data<double>();
            for (int64_t j = 0; j < n; ++j) {
                const double g = gd[j] + wd * pd[j];
                vd[j] = momentum_ * vd[j] + g;
                pd[j] -= lr * vd[j];
            }
        }
    }
    ++steps_;
}

void SgdOptimizer::zero_grad() {
    for (auto& [name, t] : registry_->params) t.zero_grad();
}

IoUResult mean_iou(const LabelMap& pred, const LabelMap& gt, int num_classes,
                   int32_t ignore_label) {
    if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w)
        throw ShapeError("mean_iou: prediction and ground truth extents differ");
    std::vector<int64_t> confusion(static_cast<size_t>(num_classes) * num_classes, 0);
    for (size_t i = 0; i < gt.data.size(); ++i) {
        const int32_t g = gt.data[i];
        if (g == ignore_label) continue;
        const int32_t p = pred.data[i];
        if (g < 0 || g >= num_classes)
            throw DataError("mean_iou: ground-truth label " + std::to_string(g) + " out of range");
        if (p < 0 || p >= num_classes)
            throw DataError("mean_iou: predicted label " + std::to_string(p) + " out of range");
        ++confusion[static_cast<size_t>(g) * num_classes + p];
    }

    IoUResult r;
    r.per_class.assign(static_cast<size_t>(num_classes),
                       std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < num_classes; ++k) {
        int64_t tp = confusion[static_cast<size_t>(k) * num_classes + k];
        int64_t fp = 0, fn = 0;
        for (int j = 0; j < num_classes; ++j) {
            if (j == k) continue;
            fp += confusion[static_cast<size_t>(j) * num_classes + k];
            fn += confusion[static_cast<size_t>(k) * num_classes + j];
        }
        const int64_t denom = tp + fp + fn;
        if (denom == 0) continue;  // class absent from both; excluded from the mean
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        r.per_class[static_cast<size_t>(k)] = iou;
        sum += iou;
        ++present;
    }
    if (present > 0) {
        r.defined = true;
        r.miou = sum / present;
    }
    return r;
}

std::string metrics_to_csv(const std::vector<MetricsRow>& log) {
    std::ostringstream os;
    os << "iter,lr,loss,miou\n";
    os.precision(17);
    for (const auto& row : log) {
        os << row.iter << "," << row.lr << "," << row.loss << ",";
        if (row.miou) os << *row.miou;
        os << "\n";
    }
    return os.str();
}

namespace {

// Mean-subtracted copy of an image batch stacked into one tensor.
Tensor stack_images(const std::vector<const Tensor*>& images) {
    const Shape4& s0 = images.front()->shape();
    Tensor batch = Tensor::zeros({static_cast<int64_t>(images.size()), s0.c, s0.h, s0.w},
                                 images.front()->dtype());
    auto bd = batch.data<float>();
    const int64_t stride = s0.c * s0.h * s0.w;
    for (size_t i = 0; i < images.size(); ++i) {
        auto sd = images[i]->data<float>();
        std::copy_n(sd.data(), stride, bd.data() + static_cast<int64_t>(i) * stride);
    }
    return batch;
}

LabelMap stack_labels(const std::vector<const LabelMap*>& labels) {
    const LabelMap& l0 = *labels.front();
    LabelMap out(static_cast<int64_t>(labels.size()), l0.h, l0.w);
    const size_t stride = static_cast<size_t>(l0.h * l0.w);
    for (size_t i = 0; i < labels.size(); ++i)
        std::copy_n(labels[i]->data.data(), stride, out.data.data() + i * stride);
    return out;
}

Tensor subtract_mean(const Tensor& image, const std::array<double, 3>& mean) {
    Tensor out = image.clone();
    auto d = out.data<float>();
    const Shape4& s = image.shape();
    const int64_t plane = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < 3; ++c) {
            const float m = static_cast<float>(mean[static_cast<size_t>(c)]);
            float* p = d.data() + (n * s.c + c) * plane;
            for (int64_t i = 0; i < plane; ++i) p[i] -= m;
        }
    return out;
}

}  // namespace

LabelMap predict(DfaNet& model, const Tensor& image, const std::array<double, 3>& mean) {
    const Shape4& s = image.shape();
    const int64_t div = model.spec().required_divisor();
    const int64_t ph = (s.h + div - 1) / div * div;
    const int64_t pw = (s.w + div - 1) / div * div;
    Tensor input = subtract_mean(image, mean);
    if (ph != s.h || pw != s.w) {
        Tensor padded = Tensor::zeros({s.n, s.c, ph, pw}, input.dtype());
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t c = 0; c < s.c; ++c)
                for (int64_t y = 0; y < s.h; ++y)
                    for (int64_t x = 0; x < s.w; ++x)
                        padded.set(n, c, y, x, input.at(n, c, y, x));
        input = padded;
    }
    const bool was_training = model.training();
    model.set_training(false);
    LabelMap full;
    {
        NoGradGuard ng;
        full = ops::argmax_channels(model.forward(input));
    }
    model.set_training(was_training);
    if (ph == s.h && pw == s.w) return full;
    LabelMap cropped(full.n, s.h, s.w);
    for (int64_t n = 0; n < full.n; ++n)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) cropped.at(n, y, x) = full.at(n, y, x);
    return cropped;
}

IoUResult evaluate(DfaNet& model, const std::vector<SegSample>& samples,
                   const std::array<double, 3>& mean) {
    const int num_classes = static_cast<int>(model.spec().num_classes);
    // One confusion matrix across the whole split: accumulate by summing the
    // per-sample maps into a single flattened pair of label planes.
    std::vector<int32_t> all_pred, all_gt;
    for (const auto& s : samples) {
        LabelMap p = predict(model, s.image, mean);
        all_pred.insert(all_pred.end(), p.data.begin(), p.data.end());
        all_gt.insert(all_gt.end(), s.labels.data.begin(), s.labels.data.end());
    }
    LabelMap pred(1, 1, static_cast<int64_t>(all_pred.size()));
    LabelMap gt(1, 1, static_cast<int64_t>(all_gt.size()));
    pred.data = std::move(all_pred);
    gt.data = std::move(all_gt);
    return mean_iou(pred, gt, num_classes);
}

TrainResult train_loop(DfaNet& model, const std::vector<SegSample>& train_set,
                       const std::vector<SegSample>& eval_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty()) throw ContractError("train_loop: dataset is empty");

    TrainResult result;
    if (cfg.max_iter == 0) return result;

    SgdOptimizer opt(model.registry(), cfg);
    Rng shuffle_rng = make_rng(mix_seed(cfg.seed, 0xA001));
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    size_t cursor = 0;
    uint64_t sample_counter = 0;

    AugmentConfig aug = cfg.aug;
    aug.crop_h = cfg.crop_h;
    aug.crop_w = cfg.crop_w;

    for (int64_t iter = 0; iter < cfg.max_iter; ++iter) {
        std::vector<SegSample> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            const SegSample& s = train_set[order[cursor++]];
            if (cfg.augment_enabled) {
                Rng arng = make_rng(mix_seed(cfg.seed, ++sample_counter));
                batch.push_back(augment(s, aug, arng));
            } else {
                SegSample copy;
                copy.image = subtract_mean(s.image, aug.mean);
                copy.labels = s.labels;
                batch.push_back(std::move(copy));
            }
        }
        std::vector<const Tensor*> images;
        std::vector<const LabelMap*> labels;
        for (const auto& s : batch) {
            images.push_back(&s.image);
            labels.push_back(&s.labels);
        }
        const Tensor batch_images = stack_images(images);
        const LabelMap batch_labels = stack_labels(labels);

        const double lr = poly_lr(iter, cfg);
        model.set_training(true);
        double loss_value = 0.0;
        try {
            Graph graph;
            GraphScope scope(graph);
            Tensor logits = model.forward(batch_images);
            Tensor loss = ops::softmax_cross_entropy(logits, batch_labels);
            loss_value = loss.item();
            opt.zero_grad();
            backward(loss, graph);
        } catch (const NumericError& e) {
            throw NumericError("training aborted at iter " + std::to_string(iter) + " (lr " +
                               std::to_string(lr) + "): " + e.what());
        }
        opt.step(lr);

        MetricsRow row{iter, lr, loss_value, std::nullopt};
        if (!eval_set.empty() &&
            ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.max_iter)) {
            row.miou = evaluate(model, eval_set, aug.mean).miou;
        }
        result.log.push_back(row);
    }
    model.set_training(false);
    return result;
}

}  // namespace dfa
