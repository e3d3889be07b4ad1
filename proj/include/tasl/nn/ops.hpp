#pragma once

#include <array>
#include <vector>

#include "tasl/nn/tensor.hpp"

// Differentiable operations. Feature maps are channels-last throughout.
namespace tasl::nn {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form

/// x[..., in] * w[in, out] + b[out]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Batched matrix product of a[B, M, K] and b[B, K, N], either operand
/// optionally transposed in its last two dims.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor softmax_last(const Tensor& x);

/// Softmax over the last dim of x[P, N, N] after adding mask[g] (shape
/// [groups, N, N]) with g = (p / repeat) % groups.
Tensor masked_softmax_last(const Tensor& x, const std::vector<double>& mask, int groups, int repeat);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Normalizes every channel (last dim) over all other dims. In training the
/// batch statistics are used and the running estimates updated in place
/// (unbiased variance, like the usual framework convention).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::vector<double>& running_mean,
                  std::vector<double>& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);

/// Treats x as rows of its last dim and picks rows[i] for output row i;
/// index -1 yields a zero row. out_shape must hold rows.size() * C values
/// and end in C.
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows, const Shape& out_shape);

Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, int start, int length);

/// Mean over one axis, which is removed from the shape.
Tensor mean_axis(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// x[B, T, H, W, Cin], w[kt, kh, kw, Cin, Cout], b[Cout] (optional).
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::array<int, 3> stride, std::array<int, 3> pad);

/// x[B, T, Cin], w[k, Cin, Cout]: out[t] = sum_j w[j] * x[t - dilation * j]
/// with zeros before the sequence start.
Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation);

std::array<int, 3> conv3d_output_size(std::array<int, 3> in, std::array<int, 3> kernel, std::array<int, 3> stride,
                                      std::array<int, 3> pad);

}  // namespace tasl::nn
