#pragma once

#include <functional>
#include <vector>

#include "pmi/tensor.hpp"

namespace pmi {

// All kernels are deterministic: reductions run left-to-right in a fixed
// order, so equal inputs give bit-identical outputs regardless of threading.

// Batched matrix product. Trailing two dims are multiplied; leading dims
// broadcast numpy-style (equal or 1); a rank-2 operand is shared across all
// slices of the other.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swap the last two dims (copies).
Tensor transpose_last2(const Tensor& x);

// General permutation of dims (copies).
Tensor permute(const Tensor& x, const std::vector<int>& perm);

// Sum x down to `target` shape (inverse of broadcasting): trailing-aligned
// dims of size 1 in target are reduced, extra leading dims are reduced away.
Tensor reduce_to_shape(const Tensor& x, const Shape& target);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

Tensor relu(const Tensor& x);
Tensor tanh_t(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor unary_map(const Tensor& x, const std::function<double(double)>& f);

// Softmax along `axis` with max-subtraction. Rows sum to 1.
Tensor softmax(const Tensor& x, int axis);

// Binary mask marking the top-k entries along `axis`; ties broken toward the
// lowest index. k <= 0 is a configuration error; k >= axis length gives an
// all-ones mask.
Tensor top_k_mask(const Tensor& scores, int64_t k, int axis);

Tensor sum_axis(const Tensor& x, int axis);   // axis removed
Tensor mean_axis(const Tensor& x, int axis);  // axis removed; zero-length axis is an error

// out[..., c, n, d] = s[..., c] * m[..., n, d]
Tensor outer_broadcast(const Tensor& s, const Tensor& m);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_axis(const Tensor& x, int axis, int64_t start, int64_t len);

// LayerNorm over the last dim, biased variance, eps inside the sqrt.
// mean/rstd per row are written to the optional outputs for backward reuse.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  Tensor* save_mean = nullptr, Tensor* save_rstd = nullptr);

int normalize_axis(int axis, int rank);

}  // namespace pmi
