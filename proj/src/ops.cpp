#include "dfa/ops.hpp"

#include <algorithm>
#include <cmath>

namespace dfa::ops {

namespace {

template <class T>
std::vector<T>& datv(TensorData& d) {
    if constexpr (std::is_same_v<T, float>)
        return d.data_f32;
    else
        return d.data_f64;
}

template <class T>
std::vector<T>& grdv(TensorData& d) {
    if constexpr (std::is_same_v<T, float>)
        return d.grad_f32;
    else
        return d.grad_f64;
}

void ensure_grad_alloc(TensorData& d) {
    if (d.grad_allocated) return;
    const auto n = static_cast<size_t>(d.shape.numel());
    if (d.dtype == DType::F32)
        d.grad_f32.assign(n, 0.0f);
    else
        d.grad_f64.assign(n, 0.0);
    d.grad_allocated = true;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(op) + ": operand dtypes differ (" + dtype_name(a.dtype()) +
                            " vs " + dtype_name(b.dtype()) + ")");
}

enum class BinKind { Add, Sub, Mul };

const char* bin_name(BinKind k) {
    switch (k) {
        case BinKind::Add: return "add";
        case BinKind::Sub: return "sub";
        default: return "mul";
    }
}

// Shapes must match, or b must be (N,C,1,1) broadcasting over a's H,W.
bool broadcast_layout(const Shape4& a, const Shape4& b, const char* op) {
    if (a == b) return false;
    if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return true;
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

template <class T, class F>
void binary_kernel(const Tensor& a, const Tensor& b, Tensor& out, bool bcast, F&& f) {
    auto av = a.data<T>();
    auto bv = b.data<T>();
    auto ov = out.data<T>();
    const Shape4& s = a.shape();
    if (!bcast) {
        const int64_t n = s.numel();
        for (int64_t i = 0; i < n; ++i) ov[i] = f(av[i], bv[i]);
    } else {
        const int64_t plane = s.h * s.w;
        for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
            const T bval = bv[static_cast<size_t>(nc)];
            const T* ap = av.data() + nc * plane;
            T* op = ov.data() + nc * plane;
            for (int64_t i = 0; i < plane; ++i) op[i] = f(ap[i], bval);
        }
    }
}

Tensor binary_op(BinKind kind, const Tensor& a, const Tensor& b) {
    const char* name = bin_name(kind);
    check_same_dtype(a, b, name);
    const bool bcast = broadcast_layout(a.shape(), b.shape(), name);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());

    auto run = [&](auto tag) {
        using T = decltype(tag);
        switch (kind) {
            case BinKind::Add: binary_kernel<T>(a, b, out, bcast, [](T x, T y) { return x + y; }); break;
            case BinKind::Sub: binary_kernel<T>(a, b, out, bcast, [](T x, T y) { return x - y; }); break;
            case BinKind::Mul: binary_kernel<T>(a, b, out, bcast, [](T x, T y) { return x * y; }); break;
        }
    };
    if (a.dtype() == DType::F32)
        run(float{});
    else
        run(double{});
    check_finite_or_throw(out, name);

    if (autograd::should_record({&a, &b})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = result.impl();
        Graph::current()->push({name, {ai, bi}, oi, [kind, bcast, ai, bi, oi] {
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const auto& go = grdv<T>(*oi);
                const Shape4& s = ai->shape;
                const int64_t plane = s.h * s.w;
                const int64_t n = s.numel();
                if (ai->requires_grad) {
                    ensure_grad_alloc(*ai);
                    auto& ga = grdv<T>(*ai);
                    if (kind == BinKind::Mul) {
                        const auto& bv = datv<T>(*bi);
                        if (!bcast)
                            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * bv[i];
                        else
                            for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                                const T bval = bv[static_cast<size_t>(nc)];
                                for (int64_t i = 0; i < plane; ++i)
                                    ga[nc * plane + i] += go[nc * plane + i] * bval;
                            }
                    } else {
                        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
                    }
                }
                if (bi->requires_grad) {
                    ensure_grad_alloc(*bi);
                    auto& gb = grdv<T>(*bi);
                    const T sign = kind == BinKind::Sub ? T(-1) : T(1);
                    if (kind == BinKind::Mul) {
                        const auto& av = datv<T>(*ai);
                        if (!bcast)
                            for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * av[i];
                        else
                            for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                                T acc = 0;
                                for (int64_t i = 0; i < plane; ++i)
                                    acc += go[nc * plane + i] * av[nc * plane + i];
                                gb[static_cast<size_t>(nc)] += acc;
                            }
                    } else if (!bcast) {
                        for (int64_t i = 0; i < n; ++i) gb[i] += sign * go[i];
                    } else {
                        for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                            T acc = 0;
                            for (int64_t i = 0; i < plane; ++i) acc += go[nc * plane + i];
                            gb[static_cast<size_t>(nc)] += sign * acc;
                        }
                    }
                }
            };
            if (oi->dtype == DType::F32)
                bwd(float{});
            else
                bwd(double{});
        }});
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinKind::Mul, a, b); }

Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    const int64_t n = a.numel();
    if (a.dtype() == DType::F32) {
        auto av = a.data<float>();
        auto ov = out.data<float>();
        const float f = static_cast<float>(s);
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * f;
    } else {
        auto av = a.data<double>();
        auto ov = out.data<double>();
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * s;
    }
    check_finite_or_throw(out, "scale");

    if (autograd::should_record({&a})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = result.impl();
        Graph::current()->push({"scale", {ai}, oi, [s, ai, oi] {
            if (!ai->requires_grad) return;
            ensure_grad_alloc(*ai);
            const int64_t n = ai->shape.numel();
            if (oi->dtype == DType::F32) {
                const float f = static_cast<float>(s);
                for (int64_t i = 0; i < n; ++i) ai->grad_f32[i] += oi->grad_f32[i] * f;
            } else {
                for (int64_t i = 0; i < n; ++i) ai->grad_f64[i] += oi->grad_f64[i] * s;
            }
        }});
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    const int64_t n = a.numel();
    if (a.dtype() == DType::F32) {
        auto av = a.data<float>();
        auto ov = out.data<float>();
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] > 0.0f ? av[i] : 0.0f;
    } else {
        auto av = a.data<double>();
        auto ov = out.data<double>();
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    }
    check_finite_or_throw(out, "relu");

    if (autograd::should_record({&a})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = result.impl();
        Graph::current()->push({"relu", {ai}, oi, [ai, oi] {
            if (!ai->requires_grad) return;
            ensure_grad_alloc(*ai);
            const int64_t n = ai->shape.numel();
            if (oi->dtype == DType::F32) {
                for (int64_t i = 0; i < n; ++i)
                    if (ai->data_f32[i] > 0.0f) ai->grad_f32[i] += oi->grad_f32[i];
            } else {
                for (int64_t i = 0; i < n; ++i)
                    if (ai->data_f64[i] > 0.0) ai->grad_f64[i] += oi->grad_f64[i];
            }
        }});
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& inputs) {
    if (inputs.empty()) throw ContractError("concat_channels requires at least one input");
    const Shape4& s0 = inputs[0].shape();
    int64_t total_c = 0;
    for (const auto& t : inputs) {
        const Shape4& s = t.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw ShapeError("concat_channels: spatial/batch mismatch, " + s0.str() + " vs " + s.str());
        if (t.dtype() != inputs[0].dtype())
            throw ContractError("concat_channels: mixed dtypes");
        total_c += s.c;
    }
    Tensor out = Tensor::zeros({s0.n, total_c, s0.h, s0.w}, inputs[0].dtype());

    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto ov = out.data<T>();
        const int64_t plane = s0.h * s0.w;
        for (int64_t n = 0; n < s0.n; ++n) {
            int64_t c_off = 0;
            for (const auto& t : inputs) {
                auto tv = t.data<T>();
                const int64_t tc = t.shape().c;
                std::copy_n(tv.data() + n * tc * plane, tc * plane,
                            ov.data() + (n * total_c + c_off) * plane);
                c_off += tc;
            }
        }
    };
    if (out.dtype() == DType::F32)
        run(float{});
    else
        run(double{});
    check_finite_or_throw(out, "concat_channels");

    bool record = false;
    {
        std::vector<const Tensor*> ptrs;
        for (const auto& t : inputs) ptrs.push_back(&t);
        if (autograd::recording_enabled())
            for (auto* p : ptrs)
                if (p->requires_grad()) record = true;
    }
    if (record) {
        Tensor result = out;
        result.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData>> impls;
        for (const auto& t : inputs) impls.push_back(t.impl());
        auto oi = result.impl();
        Graph::current()->push({"concat_channels", impls, oi, [impls, oi, total_c] {
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const auto& go = grdv<T>(*oi);
                const Shape4& os = oi->shape;
                const int64_t plane = os.h * os.w;
                for (int64_t n = 0; n < os.n; ++n) {
                    int64_t c_off = 0;
                    for (const auto& ii : impls) {
                        const int64_t tc = ii->shape.c;
                        if (ii->requires_grad) {
                            ensure_grad_alloc(*ii);
                            auto& gi = grdv<T>(*ii);
                            const T* src = go.data() + (n * total_c + c_off) * plane;
                            T* dst = gi.data() + n * tc * plane;
                            for (int64_t i = 0; i < tc * plane; ++i) dst[i] += src[i];
                        }
                        c_off += tc;
                    }
                }
            };
            if (oi->dtype == DType::F32)
                bwd(float{});
            else
                bwd(double{});
        }});
    }
    return out;
}

Tensor slice_channels(const Tensor& a, int64_t c0, int64_t c1) {
    const Shape4& s = a.shape();
    if (c0 < 0 || c1 > s.c || c0 >= c1)
        throw ContractError("slice_channels: bad range [" + std::to_string(c0) + "," +
                            std::to_string(c1) + ") for C=" + std::to_string(s.c));
    Tensor out = Tensor::zeros({s.n, c1 - c0, s.h, s.w}, a.dtype());
    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto av = a.data<T>();
        auto ov = out.data<T>();
        const int64_t plane = s.h * s.w;
        const int64_t oc = c1 - c0;
        for (int64_t n = 0; n < s.n; ++n)
            std::copy_n(av.data() + (n * s.c + c0) * plane, oc * plane, ov.data() + n * oc * plane);
    };
    if (a.dtype() == DType::F32)
        run(float{});
    else
        run(double{});

    if (autograd::should_record({&a})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = result.impl();
        Graph::current()->push({"slice_channels", {ai}, oi, [ai, oi, c0, c1] {
            if (!ai->requires_grad) return;
            ensure_grad_alloc(*ai);
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const auto& go = grdv<T>(*oi);
                auto& ga = grdv<T>(*ai);
                const Shape4& s = ai->shape;
                const int64_t plane = s.h * s.w;
                const int64_t oc = c1 - c0;
                for (int64_t n = 0; n < s.n; ++n) {
                    const T* src = go.data() + n * oc * plane;
                    T* dst = ga.data() + (n * s.c + c0) * plane;
                    for (int64_t i = 0; i < oc * plane; ++i) dst[i] += src[i];
                }
            };
            if (oi->dtype == DType::F32)
                bwd(float{});
            else
                bwd(double{});
        }});
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    Tensor out = Tensor::zeros({1, 1, 1, 1}, a.dtype());
    const int64_t n = a.numel();
    if (a.dtype() == DType::F32) {
        auto av = a.data<float>();
        float acc = 0.0f;
        for (int64_t i = 0; i < n; ++i) acc += av[i];
        out.data<float>()[0] = acc;
    } else {
        auto av = a.data<double>();
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += av[i];
        out.data<double>()[0] = acc;
    }
    check_finite_or_throw(out, "sum_all");

    if (autograd::should_record({&a})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = result.impl();
        Graph::current()->push({"sum_all", {ai}, oi, [ai, oi] {
            if (!ai->requires_grad) return;
            ensure_grad_alloc(*ai);
            const int64_t n = ai->shape.numel();
            if (oi->dtype == DType::F32) {
                const float g = oi->grad_f32[0];
                for (int64_t i = 0; i < n; ++i) ai->grad_f32[i] += g;
            } else {
                const double g = oi->grad_f64[0];
                for (int64_t i = 0; i < n; ++i) ai->grad_f64[i] += g;
            }
        }});
    }
    return out;
}

}  // namespace dfa::ops
