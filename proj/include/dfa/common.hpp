#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace dfa {

// Error taxonomy. Every failure the library can produce maps onto one of
// these; messages carry the offending op/layer/file context.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }
inline size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

// Rank-4 extents, NCHW order. Weight tensors reuse the same container with
// their own axis meaning (out, in/groups, kh, kw).
struct Shape4 {
    int64_t n = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return n * c * h * w; }
    int64_t operator[](int i) const { return i == 0 ? n : i == 1 ? c : i == 2 ? h : w; }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
               "," + std::to_string(w) + ")";
    }
};

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(seed); }

// Derives an independent stream for (seed, index) pairs; used for per-sample
// augmentation streams so workers can shard a dataset.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

namespace runtime {

// Worker count for element-parallel kernels. Every output element is computed
// by exactly one thread with a fixed reduction order, so results are bitwise
// identical for any thread count.
void set_num_threads(int n);
int num_threads();

// When on (default), each op scans its output and raises NumericError naming
// the op on the first NaN/Inf.
void set_check_finite(bool on);
bool check_finite();

// Splits [begin,end) into contiguous chunks across the worker threads.
void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace runtime

}  // namespace dfa
