#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dfa/tensor.hpp"

namespace dfa {

// Execution tape. Ops append records in the order they run, which makes the
// record list topologically ordered by construction; backward() walks it in
// reverse exactly once.
class Graph {
  public:
    struct Record {
        const char* op;
        std::vector<std::shared_ptr<TensorData>> inputs;
        std::shared_ptr<TensorData> output;
        std::function<void()> backward;  // reads output grad, accumulates into input grads
    };

    void push(Record r) { records_.push_back(std::move(r)); }
    void clear() { records_.clear(); }
    size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }

    static Graph* current();

  private:
    friend class GraphScope;
    std::vector<Record> records_;
};

// Binds a graph as the recording target for the current thread.
class GraphScope {
  public:
    explicit GraphScope(Graph& g);
    ~GraphScope();
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

  private:
    Graph* prev_;
};

// Suppresses recording (and requires_grad propagation) while alive.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

namespace autograd {
bool recording_enabled();
// True when the op should be recorded: a graph is bound, recording is not
// suppressed, and at least one input requires grad.
bool should_record(std::initializer_list<const Tensor*> inputs);
}  // namespace autograd

// Seeds d(loss)/d(loss)=1 and runs the tape backward. Leaf gradients
// accumulate across calls; intermediate grads are reset per call.
void backward(const Tensor& loss, Graph& g);

// Central-difference gradient verification. `builder` must map the input to a
// scalar loss deterministically (verified by a re-run); input must be f64.
// Returns max over coordinates of |analytic-numeric|/max(1e-8,|analytic|+|numeric|).
double grad_check(const std::function<Tensor(const Tensor&)>& builder, const Tensor& input,
                  double step = 1e-5);

}  // namespace dfa
