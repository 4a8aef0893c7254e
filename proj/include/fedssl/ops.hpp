#pragma once

#include <cstddef>
#include <vector>

#include "fedssl/tensor.hpp"

// Differentiable operators. Every op records a backward rule when any input
// requires grad and grad mode is enabled. Shape violations throw ShapeError
// naming both shapes.
namespace fedssl::ops {

inline constexpr double kNormEps = 1e-12;

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
// exact form: x * Phi(x)
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
// input must be strictly positive
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

// (m,k)x(k,n); (..., m,k)x(k,n) applies a shared right operand to every
// leading row; (b,m,k)x(b,k,n) is batched.
Tensor matmul(const Tensor& a, const Tensor& b);
// swap the last two axes
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// along the last axis
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kNormEps);
// x / max(||x||, eps) per row; rows below eps are scaled by 1/eps
Tensor l2_normalize(const Tensor& x, double eps = kNormEps);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// reduce a single axis; negative axis counts from the back
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);

Tensor concat(const std::vector<Tensor>& parts, int axis);
// rows of a (axis 0) selected by index; repeats allowed
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
// [start, start+len) of the last axis
Tensor slice_last(const Tensor& a, std::size_t start, std::size_t len);

// 1-D inner product
Tensor dot(const Tensor& a, const Tensor& b);
// mean((a-b)^2)
Tensor mse(const Tensor& a, const Tensor& b);
// mean over rows of -log softmax(logits)[label]
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// x (B,C,H,W), w (O,C,kh,kw), b (O) -> (B,O,OH,OW); lowered to a patch
// matrix product.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);

// x (..., in) times w (in, out) plus b (out)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace fedssl::ops
