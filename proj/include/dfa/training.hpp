#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dfa/dataio.hpp"
#include "dfa/model.hpp"

namespace dfa {

struct TrainConfig {
    int batch_size = 8;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    double base_lr = 2e-1;
    double power = 0.9;
    int64_t max_iter = 500;
    int64_t crop_h = 64, crop_w = 64;
    uint64_t seed = 0;
    int64_t eval_every = 100;
    bool augment_enabled = true;
    AugmentConfig aug;

    void validate() const;
};

// base_lr * (1 - iter/max_iter)^power
double poly_lr(int64_t iter, const TrainConfig& cfg);

// SGD with velocity-form momentum and decoupled-from-BN weight decay:
// g' = g + wd*p; v = momentum*v + g'; p -= lr*v. BN gamma/beta are exempt
// from weight decay.
class SgdOptimizer {
  public:
    SgdOptimizer(ParamRegistry& registry, const TrainConfig& cfg);
    void step(double lr);
    void zero_grad();
    int64_t step_count() const { return steps_; }

  private:
    ParamRegistry* registry_;
    double momentum_;
    double weight_decay_;
    std::vector<Tensor> velocity_;
    std::vector<bool> decay_exempt_;
    int64_t steps_ = 0;
};

struct IoUResult {
    std::vector<double> per_class;  // NaN for classes never seen
    double miou = 0.0;
    bool defined = false;  // false when every pixel was ignored
};

IoUResult mean_iou(const LabelMap& pred, const LabelMap& gt, int num_classes,
                   int32_t ignore_label = kIgnoreLabel);

struct MetricsRow {
    int64_t iter = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::optional<double> miou;
};

std::string metrics_to_csv(const std::vector<MetricsRow>& log);

struct TrainResult {
    std::vector<MetricsRow> log;
};

// Mean-subtract, pad to the model's divisor, forward in eval mode, argmax,
// crop back to the input extents.
LabelMap predict(DfaNet& model, const Tensor& image, const std::array<double, 3>& mean);

IoUResult evaluate(DfaNet& model, const std::vector<SegSample>& samples,
                   const std::array<double, 3>& mean);

// Seeded-shuffle batching, augmentation, forward/backward, SGD with the poly
// schedule; logs (iter, lr, loss) plus periodic mIoU on `eval_set`.
// Deterministic given cfg.seed. Non-finite losses abort with a NumericError
// naming the iteration, learning rate and offending op.
TrainResult train_loop(DfaNet& model, const std::vector<SegSample>& train_set,
                       const std::vector<SegSample>& eval_set, const TrainConfig& cfg);

}  // namespace dfa
