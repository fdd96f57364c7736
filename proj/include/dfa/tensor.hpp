#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dfa/common.hpp"

namespace dfa {

struct TensorData {
    Shape4 shape{0, 0, 0, 0};
    DType dtype = DType::F32;
    std::vector<float> data_f32;
    std::vector<double> data_f64;
    bool requires_grad = false;
    bool grad_allocated = false;
    std::vector<float> grad_f32;
    std::vector<double> grad_f64;
};

template <class T>
struct DTypeOf;
template <>
struct DTypeOf<float> {
    static constexpr DType value = DType::F32;
};
template <>
struct DTypeOf<double> {
    static constexpr DType value = DType::F64;
};

// Shared-ownership handle over a dense rank-4 buffer. Data is immutable once
// produced by an op; leaves (parameters, inputs) may be mutated between
// forward passes through data().
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

    static Tensor zeros(Shape4 shape, DType dtype = DType::F32);
    static Tensor full(Shape4 shape, double value, DType dtype = DType::F32);
    // `values` length must equal shape.numel(); throws ShapeError otherwise.
    static Tensor from_values(Shape4 shape, const std::vector<double>& values,
                              DType dtype = DType::F32);
    static Tensor randn(Shape4 shape, uint64_t seed, double mean = 0.0, double stddev = 1.0,
                        DType dtype = DType::F32);
    static Tensor uniform(Shape4 shape, uint64_t seed, double lo = 0.0, double hi = 1.0,
                          DType dtype = DType::F32);
    static Tensor randn(Shape4 shape, Rng& rng, double mean, double stddev, DType dtype);

    bool defined() const { return d_ != nullptr; }
    const Shape4& shape() const { return d_->shape; }
    DType dtype() const { return d_->dtype; }
    int64_t numel() const { return d_->shape.numel(); }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        d_->requires_grad = v;
        return *this;
    }

    template <class T>
    std::span<T> data() {
        check_dtype(DTypeOf<T>::value);
        if constexpr (std::is_same_v<T, float>)
            return {d_->data_f32.data(), d_->data_f32.size()};
        else
            return {d_->data_f64.data(), d_->data_f64.size()};
    }
    template <class T>
    std::span<const T> data() const {
        check_dtype(DTypeOf<T>::value);
        if constexpr (std::is_same_v<T, float>)
            return {d_->data_f32.data(), d_->data_f32.size()};
        else
            return {d_->data_f64.data(), d_->data_f64.size()};
    }

    bool has_grad() const { return d_ && d_->grad_allocated; }
    void ensure_grad();
    void zero_grad();
    template <class T>
    std::span<T> grad() {
        check_dtype(DTypeOf<T>::value);
        ensure_grad();
        if constexpr (std::is_same_v<T, float>)
            return {d_->grad_f32.data(), d_->grad_f32.size()};
        else
            return {d_->grad_f64.data(), d_->grad_f64.size()};
    }
    // Copy of the gradient buffer as a plain tensor (zeros if never touched).
    Tensor grad_tensor() const;

    // Scalar/elementwise access as double regardless of dtype; test and glue
    // code convenience, not a hot path.
    double item() const;
    double at(int64_t n, int64_t c, int64_t h, int64_t w) const;
    void set(int64_t n, int64_t c, int64_t h, int64_t w, double v);
    double flat(int64_t i) const;
    void set_flat(int64_t i, double v);

    Tensor clone() const;        // deep copy of data; grad not copied
    Tensor to(DType target) const;  // converting copy (no-op copy if same)

    void fill_(double v);

    const std::shared_ptr<TensorData>& impl() const { return d_; }

  private:
    void check_dtype(DType want) const;
    std::shared_ptr<TensorData> d_;
};

// Integer label plane (N,H,W); the companion of logits and segmentation masks.
struct LabelMap {
    int64_t n = 0, h = 0, w = 0;
    std::vector<int32_t> data;

    LabelMap() = default;
    LabelMap(int64_t n_, int64_t h_, int64_t w_, int32_t fill = 0)
        : n(n_), h(h_), w(w_), data(static_cast<size_t>(n_ * h_ * w_), fill) {}

    int64_t numel() const { return n * h * w; }
    int32_t at(int64_t ni, int64_t hi, int64_t wi) const {
        return data[static_cast<size_t>((ni * h + hi) * w + wi)];
    }
    int32_t& at(int64_t ni, int64_t hi, int64_t wi) {
        return data[static_cast<size_t>((ni * h + hi) * w + wi)];
    }
    bool operator==(const LabelMap&) const = default;
};

inline constexpr int32_t kIgnoreLabel = 255;

// Raw debugging dump, little-endian: magic "DFTN", u32 version=1, u8 dtype
// code (0=f32, 1=f64), u32 dims[4], row-major payload.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

// Scans for NaN/Inf and throws NumericError naming `op`. Called by every op
// when runtime::check_finite() is on.
void check_finite_or_throw(const Tensor& t, const char* op);

}  // namespace dfa
