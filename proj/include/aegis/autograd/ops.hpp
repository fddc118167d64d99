#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "aegis/autograd/tensor.hpp"

// Differentiable primitives. Binary elementwise ops broadcast with numpy
// rules (shapes right-aligned, extent 1 stretches). Every op throws
// ShapeError naming itself and the offending shapes on a mismatch.
namespace aegis::ag {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
Tensor tanh(const Tensor& x);
// tanh approximation
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

// a: [..., M, K] with b: [K, N], or batched a: [T, M, K] with b: [T, K, N].
// With transpose_b the last two extents of b are swapped ([K,N] read as [N,K]).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// x: [..., in], weight: [out, in], bias: [out] or undefined. Returns x W^T + b.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::size_t dim0, std::size_t dim1);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);

// Rows of `table` ([V, d]) gathered by id; output shape ids_shape + [d].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape);

// Treats x as [N, d] (leading extents flattened) and gathers the given rows.
Tensor index_select_rows(const Tensor& x, std::span<const std::size_t> rows);

// Softmax over the last axis. Entries equal to -inf receive probability 0.
Tensor softmax(const Tensor& x);

// Normalizes over the last axis, then applies gain and bias of shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// logits: [N, V]; mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);

// mean((a - b)^2) over all elements.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

}  // namespace aegis::ag
