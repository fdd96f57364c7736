#include "dfa/nn_ops.hpp"

#include <algorithm>
#include <cmath>

namespace dfa {

void ConvParams::validate() const {
    if (in_channels <= 0 || out_channels <= 0)
        throw ConfigError("conv channels must be positive");
    if (kh < 1 || kw < 1 || stride < 1 || padding < 0)
        throw ConfigError("bad conv geometry (k=" + std::to_string(kh) + "x" + std::to_string(kw) +
                          ", s=" + std::to_string(stride) + ", p=" + std::to_string(padding) + ")");
    if (groups != 1 && groups != in_channels)
        throw ConfigError("groups must be 1 or in_channels");
    if (groups > 1 && out_channels != in_channels)
        throw ConfigError("depthwise conv requires out_channels == in_channels");
    if (in_channels % groups != 0 || out_channels % groups != 0)
        throw ConfigError("channels must divide groups");
}

Shape4 ConvParams::out_shape(const Shape4& in) const {
    if (in.c != in_channels)
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, expected " +
                         std::to_string(in_channels));
    const int64_t oh = (in.h + 2 * padding - kh) / stride + 1;
    const int64_t ow = (in.w + 2 * padding - kw) / stride + 1;
    if (in.h + 2 * padding - kh < 0 || in.w + 2 * padding - kw < 0 || oh < 1 || ow < 1)
        throw ShapeError("conv2d: output extent < 1 for input " + in.str());
    return {in.n, out_channels, oh, ow};
}

int64_t ConvParams::param_count() const {
    int64_t p = out_channels * (in_channels / groups) * kh * kw;
    if (has_bias) p += out_channels;
    return p;
}

int64_t ConvParams::macs(const Shape4& in) const {
    const Shape4 out = out_shape(in);
    return out.n * out.h * out.w * out_channels * (in_channels / groups) * kh * kw;
}

namespace ops {

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

// Per output element the reduction runs over (ic, kh, kw) in that order with
// a single accumulator, so results are bitwise equal to a naive 6-loop conv.
template <class T>
void conv2d_forward_kernel(const T* x, const T* w, const T* b, T* y, const Shape4& xs,
                           const Shape4& ys, const ConvParams& p) {
    const int64_t icpg = p.in_channels / p.groups;
    const int64_t ocpg = p.out_channels / p.groups;
    runtime::parallel_for(0, ys.n * ys.c, [&](int64_t lo, int64_t hi) {
        std::vector<T> acc(static_cast<size_t>(ys.w));
        for (int64_t noc = lo; noc < hi; ++noc) {
            const int64_t n = noc / ys.c;
            const int64_t oc = noc % ys.c;
            const int64_t g = oc / ocpg;
            for (int64_t oh = 0; oh < ys.h; ++oh) {
                std::fill(acc.begin(), acc.end(), T(0));
                for (int64_t icg = 0; icg < icpg; ++icg) {
                    const int64_t ic = g * icpg + icg;
                    const T* xc = x + (n * xs.c + ic) * xs.h * xs.w;
                    const T* wc = w + (oc * icpg + icg) * p.kh * p.kw;
                    for (int kh = 0; kh < p.kh; ++kh) {
                        const int64_t ih = oh * p.stride - p.padding + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        const T* xrow = xc + ih * xs.w;
                        const T* wrow = wc + kh * p.kw;
                        for (int kw = 0; kw < p.kw; ++kw) {
                            const T wv = wrow[kw];
                            const int64_t a = p.padding - kw;
                            const int64_t ow_lo = a <= 0 ? 0 : (a + p.stride - 1) / p.stride;
                            const int64_t top = xs.w - 1 + p.padding - kw;
                            if (top < 0) continue;
                            const int64_t ow_hi = std::min<int64_t>(ys.w - 1, top / p.stride);
                            if (p.stride == 1) {
                                const T* xp = xrow + ow_lo - p.padding + kw;
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                    acc[static_cast<size_t>(ow)] += xp[ow - ow_lo] * wv;
                            } else {
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                    acc[static_cast<size_t>(ow)] +=
                                        xrow[ow * p.stride - p.padding + kw] * wv;
                            }
                        }
                    }
                }
                T* yrow = y + ((n * ys.c + oc) * ys.h + oh) * ys.w;
                if (b != nullptr) {
                    const T bv = b[oc];
                    for (int64_t ow = 0; ow < ys.w; ++ow) yrow[ow] = acc[static_cast<size_t>(ow)] + bv;
                } else {
                    std::copy(acc.begin(), acc.end(), yrow);
                }
            }
        }
    });
}

template <class T>
void conv2d_backward_kernel(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb,
                            const Shape4& xs, const Shape4& ys, const ConvParams& p) {
    const int64_t icpg = p.in_channels / p.groups;
    const int64_t ocpg = p.out_channels / p.groups;
    for (int64_t n = 0; n < ys.n; ++n) {
        for (int64_t oc = 0; oc < ys.c; ++oc) {
            const int64_t g = oc / ocpg;
            for (int64_t oh = 0; oh < ys.h; ++oh) {
                const T* gyrow = gy + ((n * ys.c + oc) * ys.h + oh) * ys.w;
                for (int64_t ow = 0; ow < ys.w; ++ow) {
                    const T go = gyrow[ow];
                    if (gb != nullptr) gb[oc] += go;
                    if (go == T(0)) continue;
                    for (int64_t icg = 0; icg < icpg; ++icg) {
                        const int64_t ic = g * icpg + icg;
                        const T* xc = x + (n * xs.c + ic) * xs.h * xs.w;
                        T* gxc = gx ? gx + (n * xs.c + ic) * xs.h * xs.w : nullptr;
                        const int64_t wbase = (oc * icpg + icg) * p.kh * p.kw;
                        for (int kh = 0; kh < p.kh; ++kh) {
                            const int64_t ih = oh * p.stride - p.padding + kh;
                            if (ih < 0 || ih >= xs.h) continue;
                            for (int kw = 0; kw < p.kw; ++kw) {
                                const int64_t iw = ow * p.stride - p.padding + kw;
                                if (iw < 0 || iw >= xs.w) continue;
                                const int64_t xoff = ih * xs.w + iw;
                                if (gxc != nullptr) gxc[xoff] += go * w[wbase + kh * p.kw + kw];
                                if (gw != nullptr) gw[wbase + kh * p.kw + kw] += go * xc[xoff];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const ConvParams& p, const Tensor& weight, const Tensor& bias) {
    p.validate();
    const Shape4 want_w{p.out_channels, p.in_channels / p.groups, p.kh, p.kw};
    if (!(weight.shape() == want_w))
        throw ShapeError("conv2d: weight shape " + weight.shape().str() + ", expected " +
                         want_w.str());
    if (p.has_bias) {
        const Shape4 want_b{1, p.out_channels, 1, 1};
        if (!bias.defined() || !(bias.shape() == want_b))
            throw ShapeError("conv2d: bias shape must be " + want_b.str());
    }
    const Shape4 ys = p.out_shape(x.shape());
    Tensor out = Tensor::zeros(ys, x.dtype());

    if (x.dtype() == DType::F32)
        conv2d_forward_kernel<float>(x.data<float>().data(), weight.data<float>().data(),
                                     p.has_bias ? bias.data<float>().data() : nullptr,
                                     out.data<float>().data(), x.shape(), ys, p);
    else
        conv2d_forward_kernel<double>(x.data<double>().data(), weight.data<double>().data(),
                                      p.has_bias ? bias.data<double>().data() : nullptr,
                                      out.data<double>().data(), x.shape(), ys, p);
    check_finite_or_throw(out, "conv2d");

    const Tensor* brec = p.has_bias ? &bias : nullptr;
    if (autograd::should_record({&x, &weight, brec})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = weight.impl();
        auto bi = p.has_bias ? bias.impl() : nullptr;
        auto oi = result.impl();
        std::vector<std::shared_ptr<TensorData>> ins{xi, wi};
        if (bi) ins.push_back(bi);
        Graph::current()->push({"conv2d", std::move(ins), oi, [p, xi, wi, bi, oi] {
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const auto& gyv = grdv<T>(*oi);
                T* gx = nullptr;
                T* gw = nullptr;
                T* gb = nullptr;
                if (xi->requires_grad) {
                    ensure_grad_alloc(*xi);
                    gx = grdv<T>(*xi).data();
                }
                if (wi->requires_grad) {
                    ensure_grad_alloc(*wi);
                    gw = grdv<T>(*wi).data();
                }
                if (bi && bi->requires_grad) {
                    ensure_grad_alloc(*bi);
                    gb = grdv<T>(*bi).data();
                }
                if (!gx && !gw && !gb) return;
                conv2d_backward_kernel<T>(datv<T>(*xi).data(), datv<T>(*wi).data(), gyv.data(), gx,
                                          gw, gb, xi->shape, oi->shape, p);
            };
            if (oi->dtype == DType::F32)
                bwd(float{});
            else
                bwd(double{});
        }});
    }
    return out;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double eps, double momentum) {
    const Shape4& s = x.shape();
    const int64_t C = s.c;
    auto check_vec = [&](const Tensor& t, const char* what) {
        if (!(t.shape() == Shape4{1, C, 1, 1}))
            throw ShapeError(std::string("batchnorm: ") + what + " shape " + t.shape().str() +
                             ", expected (1," + std::to_string(C) + ",1,1)");
    };
    check_vec(gamma, "gamma");
    check_vec(beta, "beta");
    check_vec(running_mean, "running_mean");
    check_vec(running_var, "running_var");
    if (eps <= 0) throw ConfigError("batchnorm: epsilon must be positive");

    Tensor out = Tensor::zeros(s, x.dtype());
    const int64_t plane = s.h * s.w;
    const int64_t M = s.n * plane;
    std::vector<double> mean(static_cast<size_t>(C), 0.0), invstd(static_cast<size_t>(C), 0.0);

    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        auto gv = gamma.data<T>();
        auto bv = beta.data<T>();
        for (int64_t c = 0; c < C; ++c) {
            double m, v;
            if (training) {
                if (M == 0) throw ContractError("batchnorm: empty batch in train mode");
                double acc = 0.0;
                for (int64_t n = 0; n < s.n; ++n) {
                    const T* p = xv.data() + (n * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
                }
                m = acc / static_cast<double>(M);
                double vacc = 0.0;
                for (int64_t n = 0; n < s.n; ++n) {
                    const T* p = xv.data() + (n * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double d = static_cast<double>(p[i]) - m;
                        vacc += d * d;
                    }
                }
                v = vacc / static_cast<double>(M);
                auto rm = running_mean.data<T>();
                auto rv = running_var.data<T>();
                rm[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rm[c]) + momentum * m);
                rv[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rv[c]) + momentum * v);
            } else {
                m = static_cast<double>(running_mean.data<T>()[c]);
                v = static_cast<double>(running_var.data<T>()[c]);
            }
            const double is = 1.0 / std::sqrt(v + eps);
            mean[static_cast<size_t>(c)] = m;
            invstd[static_cast<size_t>(c)] = is;
            const T tg = gv[c];
            const T tb = bv[c];
            const T tm = static_cast<T>(m);
            const T tis = static_cast<T>(is);
            for (int64_t n = 0; n < s.n; ++n) {
                const T* p = xv.data() + (n * C + c) * plane;
                T* q = ov.data() + (n * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) q[i] = tg * ((p[i] - tm) * tis) + tb;
            }
        }
    };
    if (x.dtype() == DType::F32)
        run(float{});
    else
        run(double{});
    check_finite_or_throw(out, "batchnorm");

    if (autograd::should_record({&x, &gamma, &beta})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto oi = result.impl();
        Graph::current()->push({"batchnorm", {xi, gi, bi}, oi,
                                [xi, gi, bi, oi, mean, invstd, training] {
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const Shape4& s = xi->shape;
                const int64_t C = s.c;
                const int64_t plane = s.h * s.w;
                const int64_t M = s.n * plane;
                const auto& go = grdv<T>(*oi);
                const auto& xv = datv<T>(*xi);
                const auto& gv = datv<T>(*gi);
                T* gx = nullptr;
                T* gg = nullptr;
                T* gb = nullptr;
                if (xi->requires_grad) {
                    ensure_grad_alloc(*xi);
                    gx = grdv<T>(*xi).data();
                }
                if (gi->requires_grad) {
                    ensure_grad_alloc(*gi);
                    gg = grdv<T>(*gi).data();
                }
                if (bi->requires_grad) {
                    ensure_grad_alloc(*bi);
                    gb = grdv<T>(*bi).data();
                }
                for (int64_t c = 0; c < C; ++c) {
                    const double m = mean[static_cast<size_t>(c)];
                    const double is = invstd[static_cast<size_t>(c)];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int64_t n = 0; n < s.n; ++n) {
                        const T* gp = go.data() + (n * C + c) * plane;
                        const T* xp = xv.data() + (n * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const double g = static_cast<double>(gp[i]);
                            const double xh = (static_cast<double>(xp[i]) - m) * is;
                            sum_g += g;
                            sum_gx += g * xh;
                        }
                    }
                    if (gg != nullptr) gg[c] += static_cast<T>(sum_gx);
                    if (gb != nullptr) gb[c] += static_cast<T>(sum_g);
                    if (gx != nullptr) {
                        const double gamma_c = static_cast<double>(gv[c]);
                        if (training) {
                            const double k = gamma_c * is / static_cast<double>(M);
                            for (int64_t n = 0; n < s.n; ++n) {
                                const T* gp = go.data() + (n * C + c) * plane;
                                const T* xp = xv.data() + (n * C + c) * plane;
                                T* dp = gx + (n * C + c) * plane;
                                for (int64_t i = 0; i < plane; ++i) {
                                    const double g = static_cast<double>(gp[i]);
                                    const double xh = (static_cast<double>(xp[i]) - m) * is;
                                    dp[i] += static_cast<T>(
                                        k * (static_cast<double>(M) * g - sum_g - xh * sum_gx));
                                }
                            }
                        } else {
                            const double k = gamma_c * is;
                            for (int64_t n = 0; n < s.n; ++n) {
                                const T* gp = go.data() + (n * C + c) * plane;
                                T* dp = gx + (n * C + c) * plane;
                                for (int64_t i = 0; i < plane; ++i)
                                    dp[i] += static_cast<T>(k * static_cast<double>(gp[i]));
                            }
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

Tensor bilinear_upsample(const Tensor& x, int factor) {
    if (factor < 1) throw ContractError("bilinear_upsample: factor must be >= 1");
    const Shape4& s = x.shape();
    const Shape4 ys{s.n, s.c, s.h * factor, s.w * factor};
    Tensor out = Tensor::zeros(ys, x.dtype());

    // Half-pixel sampling grid, shared by both axes.
    auto build_axis = [factor](int64_t in, int64_t outn, std::vector<int64_t>& i0,
                               std::vector<int64_t>& i1, std::vector<double>& w1) {
        i0.resize(static_cast<size_t>(outn));
        i1.resize(static_cast<size_t>(outn));
        w1.resize(static_cast<size_t>(outn));
        for (int64_t o = 0; o < outn; ++o) {
            double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
            if (src < 0) src = 0;
            const double upper = static_cast<double>(in - 1);
            if (src > upper) src = upper;
            int64_t lo = static_cast<int64_t>(std::floor(src));
            if (lo > in - 1) lo = in - 1;
            const int64_t hi = std::min<int64_t>(lo + 1, in - 1);
            i0[static_cast<size_t>(o)] = lo;
            i1[static_cast<size_t>(o)] = hi;
            w1[static_cast<size_t>(o)] = src - static_cast<double>(lo);
        }
    };
    std::vector<int64_t> h0, h1, w0i, w1i;
    std::vector<double> hw, ww;
    build_axis(s.h, ys.h, h0, h1, hw);
    build_axis(s.w, ys.w, w0i, w1i, ww);

    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        runtime::parallel_for(0, s.n * s.c, [&](int64_t lo, int64_t hi) {
            for (int64_t nc = lo; nc < hi; ++nc) {
                const T* xp = xv.data() + nc * s.h * s.w;
                T* op = ov.data() + nc * ys.h * ys.w;
                for (int64_t oh = 0; oh < ys.h; ++oh) {
                    const T fy = static_cast<T>(hw[static_cast<size_t>(oh)]);
                    const T* r0 = xp + h0[static_cast<size_t>(oh)] * s.w;
                    const T* r1 = xp + h1[static_cast<size_t>(oh)] * s.w;
                    for (int64_t ow = 0; ow < ys.w; ++ow) {
                        const T fx = static_cast<T>(ww[static_cast<size_t>(ow)]);
                        const int64_t a = w0i[static_cast<size_t>(ow)];
                        const int64_t b = w1i[static_cast<size_t>(ow)];
                        const T top = r0[a] + fx * (r0[b] - r0[a]);
                        const T bot = r1[a] + fx * (r1[b] - r1[a]);
                        op[oh * ys.w + ow] = top + fy * (bot - top);
                    }
                }
            }
        });
    };
    if (x.dtype() == DType::F32)
        run(float{});
    else
        run(double{});
    check_finite_or_throw(out, "bilinear_upsample");

    if (autograd::should_record({&x})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = result.impl();
        Graph::current()->push({"bilinear_upsample", {xi}, oi,
                                [xi, oi, h0, h1, hw, w0i, w1i, ww] {
            if (!xi->requires_grad) return;
            ensure_grad_alloc(*xi);
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const Shape4& s = xi->shape;
                const Shape4& ys = oi->shape;
                const auto& go = grdv<T>(*oi);
                auto& gx = grdv<T>(*xi);
                runtime::parallel_for(0, s.n * s.c, [&](int64_t lo, int64_t hi) {
                    for (int64_t nc = lo; nc < hi; ++nc) {
                        const T* gp = go.data() + nc * ys.h * ys.w;
                        T* xp = gx.data() + nc * s.h * s.w;
                        for (int64_t oh = 0; oh < ys.h; ++oh) {
                            const T fy = static_cast<T>(hw[static_cast<size_t>(oh)]);
                            const int64_t r0 = h0[static_cast<size_t>(oh)];
                            const int64_t r1 = h1[static_cast<size_t>(oh)];
                            for (int64_t ow = 0; ow < ys.w; ++ow) {
                                const T g = gp[oh * ys.w + ow];
                                if (g == T(0)) continue;
                                const T fx = static_cast<T>(ww[static_cast<size_t>(ow)]);
                                const int64_t a = w0i[static_cast<size_t>(ow)];
                                const int64_t b = w1i[static_cast<size_t>(ow)];
                                xp[r0 * s.w + a] += g * (T(1) - fy) * (T(1) - fx);
                                xp[r0 * s.w + b] += g * (T(1) - fy) * fx;
                                xp[r1 * s.w + a] += g * fy * (T(1) - fx);
                                xp[r1 * s.w + b] += g * fy * fx;
                            }
                        }
                    }
                });
            };
            if (oi->dtype == DType::F32)
                bwd(float{});
            else
                bwd(double{});
        }});
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    const Shape4& s = x.shape();
    if (s.h * s.w < 1) throw ContractError("global_avg_pool: empty spatial extent");
    Tensor out = Tensor::zeros({s.n, s.c, 1, 1}, x.dtype());
    const int64_t plane = s.h * s.w;

    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
            double acc = 0.0;
            const T* p = xv.data() + nc * plane;
            for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
            ov[nc] = static_cast<T>(acc / static_cast<double>(plane));
        }
    };
    if (x.dtype() == DType::F32)
        run(float{});
    else
        run(double{});
    check_finite_or_throw(out, "global_avg_pool");

    if (autograd::should_record({&x})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = result.impl();
        Graph::current()->push({"global_avg_pool", {xi}, oi, [xi, oi] {
            if (!xi->requires_grad) return;
            ensure_grad_alloc(*xi);
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const Shape4& s = xi->shape;
                const int64_t plane = s.h * s.w;
                const auto& go = grdv<T>(*oi);
                auto& gx = grdv<T>(*xi);
                for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                    const T g = static_cast<T>(static_cast<double>(go[nc]) / static_cast<double>(plane));
                    T* p = gx.data() + nc * plane;
                    for (int64_t i = 0; i < plane; ++i) p[i] += g;
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

Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const Shape4& s = x.shape();
    if (s.h != 1 || s.w != 1)
        throw ContractError("fully_connected: input spatial extents must be 1x1, got " + s.str());
    const Shape4& ws = weight.shape();
    if (ws.h != 1 || ws.w != 1 || ws.c != s.c)
        throw ShapeError("fully_connected: weight shape " + ws.str() + " does not match input C=" +
                         std::to_string(s.c));
    const int64_t K = ws.n;
    if (!(bias.shape() == Shape4{1, K, 1, 1}))
        throw ShapeError("fully_connected: bias must be (1," + std::to_string(K) + ",1,1)");
    Tensor out = Tensor::zeros({s.n, K, 1, 1}, x.dtype());

    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto wv = weight.data<T>();
        auto bv = bias.data<T>();
        auto ov = out.data<T>();
        for (int64_t n = 0; n < s.n; ++n) {
            const T* xp = xv.data() + n * s.c;
            for (int64_t k = 0; k < K; ++k) {
                const T* wp = wv.data() + k * s.c;
                T acc = 0;
                for (int64_t c = 0; c < s.c; ++c) acc += wp[c] * xp[c];
                ov[n * K + k] = acc + bv[k];
            }
        }
    };
    if (x.dtype() == DType::F32)
        run(float{});
    else
        run(double{});
    check_finite_or_throw(out, "fully_connected");

    if (autograd::should_record({&x, &weight, &bias})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = weight.impl();
        auto bi = bias.impl();
        auto oi = result.impl();
        Graph::current()->push({"fully_connected", {xi, wi, bi}, oi, [xi, wi, bi, oi] {
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const int64_t N = xi->shape.n;
                const int64_t C = xi->shape.c;
                const int64_t K = wi->shape.n;
                const auto& go = grdv<T>(*oi);
                const auto& xv = datv<T>(*xi);
                const auto& wv = datv<T>(*wi);
                if (xi->requires_grad) {
                    ensure_grad_alloc(*xi);
                    auto& gx = grdv<T>(*xi);
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < K; ++k) {
                            const T g = go[n * K + k];
                            for (int64_t c = 0; c < C; ++c) gx[n * C + c] += g * wv[k * C + c];
                        }
                }
                if (wi->requires_grad) {
                    ensure_grad_alloc(*wi);
                    auto& gw = grdv<T>(*wi);
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < K; ++k) {
                            const T g = go[n * K + k];
                            for (int64_t c = 0; c < C; ++c) gw[k * C + c] += g * xv[n * C + c];
                        }
                }
                if (bi->requires_grad) {
                    ensure_grad_alloc(*bi);
                    auto& gb = grdv<T>(*bi);
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t k = 0; k < K; ++k) gb[k] += go[n * K + k];
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

Tensor softmax_cross_entropy(const Tensor& logits, const LabelMap& labels, int32_t ignore_label) {
    const Shape4& s = logits.shape();
    if (labels.n != s.n || labels.h != s.h || labels.w != s.w)
        throw ShapeError("softmax_cross_entropy: labels " + std::to_string(labels.n) + "x" +
                         std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                         " do not match logits " + s.str());
    const int64_t K = s.c;
    const int64_t plane = s.h * s.w;

    double loss_acc = 0.0;
    int64_t valid = 0;
    auto run = [&](auto tag) {
        using T = decltype(tag);
        auto lv = logits.data<T>();
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t hh = 0; hh < s.h; ++hh)
                for (int64_t wv2 = 0; wv2 < s.w; ++wv2) {
                    const int32_t lab = labels.at(n, hh, wv2);
                    if (lab == ignore_label) continue;
                    if (lab < 0 || lab >= K)
                        throw DataError("softmax_cross_entropy: label " + std::to_string(lab) +
                                        " out of range [0," + std::to_string(K) + ") at pixel (n=" +
                                        std::to_string(n) + ",h=" + std::to_string(hh) + ",w=" +
                                        std::to_string(wv2) + ")");
                    const int64_t base = n * K * plane + hh * s.w + wv2;
                    double m = -std::numeric_limits<double>::infinity();
                    for (int64_t k = 0; k < K; ++k)
                        m = std::max(m, static_cast<double>(lv[base + k * plane]));
                    double z = 0.0;
                    for (int64_t k = 0; k < K; ++k)
                        z += std::exp(static_cast<double>(lv[base + k * plane]) - m);
                    const double lse = m + std::log(z);
                    loss_acc += lse - static_cast<double>(lv[base + lab * plane]);
                    ++valid;
                }
    };
    if (logits.dtype() == DType::F32)
        run(float{});
    else
        run(double{});

    Tensor out = Tensor::zeros({1, 1, 1, 1}, logits.dtype());
    out.set_flat(0, valid > 0 ? loss_acc / static_cast<double>(valid) : 0.0);
    check_finite_or_throw(out, "softmax_cross_entropy");

    if (autograd::should_record({&logits})) {
        Tensor result = out;
        result.set_requires_grad(true);
        auto li = logits.impl();
        auto oi = result.impl();
        LabelMap labs = labels;
        Graph::current()->push({"softmax_cross_entropy", {li}, oi,
                                [li, oi, labs, ignore_label, valid] {
            if (!li->requires_grad || valid == 0) return;
            ensure_grad_alloc(*li);
            auto bwd = [&](auto tag) {
                using T = decltype(tag);
                const Shape4& s = li->shape;
                const int64_t K = s.c;
                const int64_t plane = s.h * s.w;
                const auto& lv = datv<T>(*li);
                auto& gl = grdv<T>(*li);
                const double go = static_cast<double>(grdv<T>(*oi)[0]);
                const double inv = go / static_cast<double>(valid);
                for (int64_t n = 0; n < s.n; ++n)
                    for (int64_t hh = 0; hh < s.h; ++hh)
                        for (int64_t wv2 = 0; wv2 < s.w; ++wv2) {
                            const int32_t lab = labs.at(n, hh, wv2);
                            if (lab == ignore_label) continue;
                            const int64_t base = n * K * plane + hh * s.w + wv2;
                            double m = -std::numeric_limits<double>::infinity();
                            for (int64_t k = 0; k < K; ++k)
                                m = std::max(m, static_cast<double>(lv[base + k * plane]));
                            double z = 0.0;
                            for (int64_t k = 0; k < K; ++k)
                                z += std::exp(static_cast<double>(lv[base + k * plane]) - m);
                            for (int64_t k = 0; k < K; ++k) {
                                const double p =
                                    std::exp(static_cast<double>(lv[base + k * plane]) - m) / z;
                                const double delta = k == lab ? 1.0 : 0.0;
                                gl[base + k * plane] += static_cast<T>(inv * (p - delta));
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

LabelMap argmax_channels(const Tensor& logits) {
    const Shape4& s = logits.shape();
    LabelMap out(s.n, s.h, s.w);
    const int64_t plane = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t h = 0; h < s.h; ++h)
            for (int64_t w = 0; w < s.w; ++w) {
                int32_t best = 0;
                double bestv = logits.at(n, 0, h, w);
                for (int64_t k = 1; k < s.c; ++k) {
                    const double v = logits.at(n, k, h, w);
                    if (v > bestv) {
                        bestv = v;
                        best = static_cast<int32_t>(k);
                    }
                }
                out.at(n, h, w) = best;
            }
    return out;
}

}  // namespace ops
}  // namespace dfa
