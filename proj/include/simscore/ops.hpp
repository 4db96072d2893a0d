#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "simscore/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward result
// eagerly; when a tape is recording and any input requires grad, the op
// appends a backward closure and marks its output requires_grad. With no
// tape active, outputs never require grad (inference mode).
//
// Binary elementwise ops broadcast with trailing-dimension alignment:
// dimensions are matched from the right, and a dimension of size 1 (or a
// missing leading dimension) stretches. Backward sum-reduces over the
// stretched axes.

namespace simscore {
namespace ops {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor scale(const Tensor& a, double c);   // a * c
Tensor shift(const Tensor& a, double c);   // a + c
Tensor clamp_min(const Tensor& a, double c);

// ---- reductions (population variance: divide by N) ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor variance(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdims = false);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdims = false);
Tensor variance(const Tensor& a, std::size_t axis, bool keepdims = false);

// ---- shape / structure ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& ts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
Tensor transpose_last2(const Tensor& a);

// ---- linear algebra ----
// Supported shapes: [m,k]x[k,n], [B,m,k]x[k,n], [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- softmax with max-subtraction, along `axis` ----
Tensor softmax(const Tensor& a, std::size_t axis);

// ---- neural-net specific ----
// Rows of `table` gathered by token id; ids shape [B,S] -> out [B,S,E].
Tensor embedding(const Tensor& table, const std::vector<std::vector<int>>& ids);

// Keeps `a` where mask==1, writes `fill` where mask==0. The mask
// broadcasts over `a` and never receives gradient.
Tensor masked_fill(const Tensor& a, const Tensor& mask, double fill);

// bias[i][j] = table[head][j - i + R] for an [H, 2R+1] table; out [S,S].
Tensor relative_bias(const Tensor& table, std::size_t head, std::size_t seq_len);

// Mean over mask==1 positions of the stable elementwise binary
// cross-entropy between logits and {0,1} labels. Labels/mask are constants.
Tensor bce_with_logits(const Tensor& logits, const Tensor& labels, const Tensor& mask);

}  // namespace ops

// Convenience operators.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }

}  // namespace simscore
