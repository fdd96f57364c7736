#pragma once

#include <vector>

#include "dfa/autograd.hpp"
#include "dfa/tensor.hpp"

namespace dfa::ops {

// Binary ops accept equal shapes, or b of shape (N,C,1,1) broadcast over H,W.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);

// Concatenates along C; inputs must agree on N,H,W. Backward splits the
// gradient at the recorded channel boundaries.
Tensor concat_channels(const std::vector<Tensor>& inputs);

// View-copy of channels [c0,c1).
Tensor slice_channels(const Tensor& a, int64_t c0, int64_t c1);

// Full reduction to a (1,1,1,1) scalar.
Tensor sum_all(const Tensor& a);

}  // namespace dfa::ops
