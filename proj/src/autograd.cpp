#include "dfa/autograd.hpp"

#include <cmath>
#include <cstring>

namespace dfa {

namespace {
thread_local Graph* g_current = nullptr;
thread_local int g_no_grad_depth = 0;
}  // namespace

Graph* Graph::current() { return g_current; }

GraphScope::GraphScope(Graph& g) : prev_(g_current) { g_current = &g; }
GraphScope::~GraphScope() { g_current = prev_; }

NoGradGuard::NoGradGuard() : prev_(g_no_grad_depth > 0) { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

namespace autograd {

bool recording_enabled() { return g_current != nullptr && g_no_grad_depth == 0; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!recording_enabled()) return false;
    for (const Tensor* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

}  // namespace autograd

void backward(const Tensor& loss, Graph& g) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward expects a scalar loss, got " +
                            (loss.defined() ? loss.shape().str() : std::string("undefined")));

    // Intermediate grads are recomputed per call; leaves keep accumulating.
    for (const auto& rec : g.records()) {
        if (rec.output->grad_allocated) {
            std::fill(rec.output->grad_f32.begin(), rec.output->grad_f32.end(), 0.0f);
            std::fill(rec.output->grad_f64.begin(), rec.output->grad_f64.end(), 0.0);
        }
    }

    Tensor seed = loss;
    seed.ensure_grad();
    if (loss.dtype() == DType::F32)
        seed.grad<float>()[0] += 1.0f;
    else
        seed.grad<double>()[0] += 1.0;

    const auto& records = g.records();
    for (auto it = records.rbegin(); it != records.rend(); ++it) {
        if (!it->output->grad_allocated) continue;  // no gradient flowed here
        it->backward();
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& builder, const Tensor& input,
                  double step) {
    if (input.dtype() != DType::F64)
        throw ContractError("grad_check requires a double-precision input");
    if (step <= 0) throw ContractError("grad_check step must be positive");

    Tensor x = input.clone();
    x.set_requires_grad(true);

    const auto eval_loss = [&](const Tensor& probe) {
        NoGradGuard ng;
        Tensor l = builder(probe);
        if (l.numel() != 1) throw ContractError("grad_check builder must produce a scalar loss");
        return l.item();
    };

    const double base = eval_loss(x);
    const double rerun = eval_loss(x);
    if (std::memcmp(&base, &rerun, sizeof(double)) != 0)
        throw ContractError("grad_check builder is non-deterministic: loss " +
                            std::to_string(base) + " vs " + std::to_string(rerun));

    Graph graph;
    {
        GraphScope scope(graph);
        Tensor loss = builder(x);
        backward(loss, graph);
    }
    Tensor analytic = x.grad_tensor();

    double max_rel = 0.0;
    Tensor probe = x.clone();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double v = probe.flat(i);
        probe.set_flat(i, v + step);
        const double plus = eval_loss(probe);
        probe.set_flat(i, v - step);
        const double minus = eval_loss(probe);
        probe.set_flat(i, v);
        const double numeric = (plus - minus) / (2.0 * step);
        const double a = analytic.flat(i);
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

}  // namespace dfa
