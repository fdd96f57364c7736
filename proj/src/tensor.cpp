#include "dfa/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

namespace dfa {

namespace runtime {

namespace {
int g_num_threads = 1;
bool g_check_finite = true;
}  // namespace

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }
int num_threads() { return g_num_threads; }
void set_check_finite(bool on) { g_check_finite = on; }
bool check_finite() { return g_check_finite; }

void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& fn) {
    const int64_t range = end - begin;
    if (range <= 0) return;
    int threads = g_num_threads;
    if (threads <= 1 || range < 2) {
        fn(begin, end);
        return;
    }
    if (threads > range) threads = static_cast<int>(range);
    const int64_t chunk = (range + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads - 1));
    for (int t = 1; t < threads; ++t) {
        int64_t b = begin + t * chunk;
        int64_t e = std::min(end, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(begin, std::min(end, begin + chunk));
    for (auto& th : pool) th.join();
}

}  // namespace runtime

namespace {

void validate_shape(const Shape4& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
        throw ShapeError("tensor extents must be non-negative, got " + s.str());
}

std::shared_ptr<TensorData> alloc(Shape4 shape, DType dtype) {
    validate_shape(shape);
    auto d = std::make_shared<TensorData>();
    d->shape = shape;
    d->dtype = dtype;
    const auto n = static_cast<size_t>(shape.numel());
    if (dtype == DType::F32)
        d->data_f32.assign(n, 0.0f);
    else
        d->data_f64.assign(n, 0.0);
    return d;
}

}  // namespace

void Tensor::check_dtype(DType want) const {
    if (!d_) throw ContractError("undefined tensor");
    if (d_->dtype != want)
        throw ContractError(std::string("tensor dtype is ") + dtype_name(d_->dtype) +
                            ", accessed as " + dtype_name(want));
}

Tensor Tensor::zeros(Shape4 shape, DType dtype) { return Tensor(alloc(shape, dtype)); }

Tensor Tensor::full(Shape4 shape, double value, DType dtype) {
    Tensor t(alloc(shape, dtype));
    t.fill_(value);
    return t;
}

Tensor Tensor::from_values(Shape4 shape, const std::vector<double>& values, DType dtype) {
    validate_shape(shape);
    if (static_cast<int64_t>(values.size()) != shape.numel())
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape.str() + " (" +
                         std::to_string(shape.numel()) + " elements)");
    Tensor t(alloc(shape, dtype));
    for (size_t i = 0; i < values.size(); ++i) t.set_flat(static_cast<int64_t>(i), values[i]);
    return t;
}

Tensor Tensor::randn(Shape4 shape, Rng& rng, double mean, double stddev, DType dtype) {
    Tensor t(alloc(shape, dtype));
    std::normal_distribution<double> dist(mean, stddev);
    const int64_t n = shape.numel();
    for (int64_t i = 0; i < n; ++i) t.set_flat(i, dist(rng));
    return t;
}

Tensor Tensor::randn(Shape4 shape, uint64_t seed, double mean, double stddev, DType dtype) {
    Rng rng = make_rng(seed);
    return randn(shape, rng, mean, stddev, dtype);
}

Tensor Tensor::uniform(Shape4 shape, uint64_t seed, double lo, double hi, DType dtype) {
    Rng rng = make_rng(seed);
    Tensor t(alloc(shape, dtype));
    std::uniform_real_distribution<double> dist(lo, hi);
    const int64_t n = shape.numel();
    for (int64_t i = 0; i < n; ++i) t.set_flat(i, dist(rng));
    return t;
}

void Tensor::ensure_grad() {
    if (!d_) throw ContractError("undefined tensor");
    if (d_->grad_allocated) return;
    const auto n = static_cast<size_t>(numel());
    if (d_->dtype == DType::F32)
        d_->grad_f32.assign(n, 0.0f);
    else
        d_->grad_f64.assign(n, 0.0);
    d_->grad_allocated = true;
}

void Tensor::zero_grad() {
    if (!d_ || !d_->grad_allocated) return;
    std::fill(d_->grad_f32.begin(), d_->grad_f32.end(), 0.0f);
    std::fill(d_->grad_f64.begin(), d_->grad_f64.end(), 0.0);
}

Tensor Tensor::grad_tensor() const {
    Tensor g = Tensor::zeros(shape(), dtype());
    if (d_->grad_allocated) {
        if (dtype() == DType::F32)
            g.d_->data_f32 = d_->grad_f32;
        else
            g.d_->data_f64 = d_->grad_f64;
    }
    return g;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape().str());
    return flat(0);
}

double Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    const Shape4& s = d_->shape;
    return flat(((n * s.c + c) * s.h + h) * s.w + w);
}

void Tensor::set(int64_t n, int64_t c, int64_t h, int64_t w, double v) {
    const Shape4& s = d_->shape;
    set_flat(((n * s.c + c) * s.h + h) * s.w + w, v);
}

double Tensor::flat(int64_t i) const {
    return d_->dtype == DType::F32 ? static_cast<double>(d_->data_f32[static_cast<size_t>(i)])
                                   : d_->data_f64[static_cast<size_t>(i)];
}

void Tensor::set_flat(int64_t i, double v) {
    if (d_->dtype == DType::F32)
        d_->data_f32[static_cast<size_t>(i)] = static_cast<float>(v);
    else
        d_->data_f64[static_cast<size_t>(i)] = v;
}

Tensor Tensor::clone() const {
    Tensor t(alloc(shape(), dtype()));
    t.d_->data_f32 = d_->data_f32;
    t.d_->data_f64 = d_->data_f64;
    return t;
}

Tensor Tensor::to(DType target) const {
    if (target == dtype()) return clone();
    Tensor t(alloc(shape(), target));
    const int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) t.set_flat(i, flat(i));
    return t;
}

void Tensor::fill_(double v) {
    if (d_->dtype == DType::F32)
        std::fill(d_->data_f32.begin(), d_->data_f32.end(), static_cast<float>(v));
    else
        std::fill(d_->data_f64.begin(), d_->data_f64.end(), v);
}

void check_finite_or_throw(const Tensor& t, const char* op) {
    if (!runtime::check_finite()) return;
    const int64_t n = t.numel();
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        for (int64_t i = 0; i < n; ++i)
            if (!std::isfinite(d[static_cast<size_t>(i)]))
                throw NumericError(std::string("op '") + op + "' produced non-finite value at flat index " +
                                   std::to_string(i));
    } else {
        auto d = t.data<double>();
        for (int64_t i = 0; i < n; ++i)
            if (!std::isfinite(d[static_cast<size_t>(i)]))
                throw NumericError(std::string("op '") + op + "' produced non-finite value at flat index " +
                                   std::to_string(i));
    }
}

namespace {

constexpr char kTensorMagic[4] = {'D', 'F', 'T', 'N'};

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ParseError("unexpected end of stream reading u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(kTensorMagic, 4);
    write_u32(os, 1);
    const char dtype_code = static_cast<char>(t.dtype());
    os.write(&dtype_code, 1);
    const Shape4& s = t.shape();
    for (int i = 0; i < 4; ++i) write_u32(os, static_cast<uint32_t>(s[i]));
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 4));
    } else {
        auto d = t.data<double>();
        os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw ParseError("bad tensor magic in '" + path + "'");
    const uint32_t version = read_u32(is);
    if (version != 1) throw ParseError("unsupported tensor dump version " + std::to_string(version));
    char dtype_code;
    is.read(&dtype_code, 1);
    if (!is || (dtype_code != 0 && dtype_code != 1))
        throw ParseError("bad dtype code in '" + path + "'");
    Shape4 s;
    s.n = read_u32(is);
    s.c = read_u32(is);
    s.h = read_u32(is);
    s.w = read_u32(is);
    Tensor t = Tensor::zeros(s, static_cast<DType>(dtype_code));
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 4));
    } else {
        auto d = t.data<double>();
        is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
    }
    if (!is) throw ParseError("truncated tensor payload in '" + path + "'");
    return t;
}

}  // namespace dfa
