#include "tasl/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "tasl/error.hpp"

namespace tasl::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapCM = Eigen::Map<const RowMat>;

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  auto out = make_result(a.shape(), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& x = in(self, k);
      if (!x.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
    }
  });
  if (meta_mode()) return out;
  auto& o = out.values();
  const auto& va = a.values();
  const auto& vb = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = va[i] + vb[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  auto out = make_result(a.shape(), {a, b}, [](Node& self) {
    auto& x = in(self, 0);
    auto& y = in(self, 1);
    if (x.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
    }
    if (y.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i] -= self.grad[i];
    }
  });
  if (meta_mode()) return out;
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] - b.values()[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  auto out = make_result(a.shape(), {a, b}, [](Node& self) {
    auto& x = in(self, 0);
    auto& y = in(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x.requires_grad) x.grad[i] += self.grad[i] * y.data[i];
      if (y.requires_grad) y.grad[i] += self.grad[i] * x.data[i];
    }
  });
  if (meta_mode()) return out;
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] * b.values()[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  auto out = make_result(a.shape(), {a}, [s](Node& self) {
    auto& x = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += s * self.grad[i];
  });
  if (meta_mode()) return out;
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * a.values()[i];
  return out;
}

Tensor relu(const Tensor& x) {
  auto out = make_result(x.shape(), {x}, [](Node& self) {
    auto& a = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (a.data[i] > 0.0) a.grad[i] += self.grad[i];
    }
  });
  if (meta_mode()) return out;
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(0.0, x.values()[i]);
  return out;
}

Tensor gelu(const Tensor& x) {
  auto out = make_result(x.shape(), {x}, [](Node& self) {
    auto& a = in(self, 0);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = a.data[i];
      const double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      a.grad[i] += self.grad[i] * d;
    }
  });
  if (meta_mode()) return out;
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = x.values()[i];
    o[i] = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  const int n_in = w.dim(0);
  const int n_out = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != n_out)) throw ShapeError("linear: bias " + shape_string(b.shape()));
  Shape shape = x.shape();
  shape.back() = n_out;
  const long rows = static_cast<long>(x.size() / static_cast<std::size_t>(n_in));
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  auto out = make_result(shape, inputs, [rows, n_in, n_out](Node& self) {
    auto& xn = in(self, 0);
    auto& wn = in(self, 1);
    MapCM dy(self.grad.data(), rows, n_out);
    if (xn.requires_grad) MapM(xn.grad.data(), rows, n_in).noalias() += dy * MapCM(wn.data.data(), n_in, n_out).transpose();
    if (wn.requires_grad) MapM(wn.grad.data(), n_in, n_out).noalias() += MapCM(xn.data.data(), rows, n_in).transpose() * dy;
    if (self.inputs.size() > 2 && in(self, 2).requires_grad) {
      auto& bn = in(self, 2);
      for (long r = 0; r < rows; ++r) {
        for (int c = 0; c < n_out; ++c) bn.grad[c] += self.grad[static_cast<std::size_t>(r) * n_out + c];
      }
    }
  });
  if (meta_mode()) return out;
  MapM y(out.values().data(), rows, n_out);
  y.noalias() = MapCM(x.values().data(), rows, n_in) * MapCM(w.values().data(), n_in, n_out);
  if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), n_out);
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const int batch = a.dim(0);
  const int m = trans_a ? a.dim(2) : a.dim(1);
  const int k = trans_a ? a.dim(1) : a.dim(2);
  const int k2 = trans_b ? b.dim(2) : b.dim(1);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  if (k != k2) throw ShapeError("bmm: inner dims " + std::to_string(k) + " and " + std::to_string(k2));
  const int ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  auto out = make_result({batch, m, n}, {a, b}, [=](Node& self) {
    auto& an = in(self, 0);
    auto& bn = in(self, 1);
    for (int i = 0; i < batch; ++i) {
      MapCM dc(self.grad.data() + static_cast<std::size_t>(i) * m * n, m, n);
      MapCM av(an.data.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
      MapCM bv(bn.data.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
      if (an.requires_grad) {
        MapM ga(an.grad.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
        if (!trans_a) {
          if (!trans_b) ga.noalias() += dc * bv.transpose();
          else ga.noalias() += dc * bv;
        } else {
          if (!trans_b) ga.noalias() += bv * dc.transpose();
          else ga.noalias() += bv.transpose() * dc.transpose();
        }
      }
      if (bn.requires_grad) {
        MapM gb(bn.grad.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
        if (!trans_b) {
          if (!trans_a) gb.noalias() += av.transpose() * dc;
          else gb.noalias() += av * dc;
        } else {
          if (!trans_a) gb.noalias() += dc.transpose() * av;
          else gb.noalias() += dc.transpose() * av.transpose();
        }
      }
    }
  });
  if (meta_mode()) return out;
  for (int i = 0; i < batch; ++i) {
    MapM c(out.values().data() + static_cast<std::size_t>(i) * m * n, m, n);
    MapCM av(a.values().data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
    MapCM bv(b.values().data() + static_cast<std::size_t>(i) * br * bc, br, bc);
    if (!trans_a && !trans_b) c.noalias() = av * bv;
    else if (!trans_a && trans_b) c.noalias() = av * bv.transpose();
    else if (trans_a && !trans_b) c.noalias() = av.transpose() * bv;
    else c.noalias() = av.transpose() * bv.transpose();
  }
  return out;
}

namespace {

void softmax_backward(Node& self, std::size_t cols) {
  auto& x = in(self, 0);
  const std::size_t rows = self.data.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* y = self.data.data() + r * cols;
    const double* dy = self.grad.data() + r * cols;
    double dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) dot += y[c] * dy[c];
    for (std::size_t c = 0; c < cols; ++c) x.grad[r * cols + c] += y[c] * (dy[c] - dot);
  }
}

void softmax_rows(const double* x, double* y, std::size_t cols, const double* add) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x[c] + (add ? add[c] : 0.0));
  double sum = 0.0;
  for (std::size_t c = 0; c < cols; ++c) {
    y[c] = std::exp(x[c] + (add ? add[c] : 0.0) - mx);
    sum += y[c];
  }
  for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
}

}  // namespace

Tensor softmax_last(const Tensor& x) {
  const auto cols = static_cast<std::size_t>(x.dim(-1));
  auto out = make_result(x.shape(), {x}, [cols](Node& self) { softmax_backward(self, cols); });
  if (meta_mode()) return out;
  const std::size_t rows = x.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) softmax_rows(x.values().data() + r * cols, out.values().data() + r * cols, cols, nullptr);
  return out;
}

Tensor masked_softmax_last(const Tensor& x, const std::vector<double>& mask, int groups, int repeat) {
  if (x.rank() != 3 || x.dim(1) != x.dim(2)) throw ShapeError("masked softmax expects [P, N, N]");
  const auto n = static_cast<std::size_t>(x.dim(1));
  if (groups < 1 || repeat < 1 || mask.size() != static_cast<std::size_t>(groups) * n * n) {
    throw ShapeError("mask does not match [groups, N, N]");
  }
  auto out = make_result(x.shape(), {x}, [n](Node& self) { softmax_backward(self, n); });
  if (meta_mode()) return out;
  for (int p = 0; p < x.dim(0); ++p) {
    const std::size_t g = static_cast<std::size_t>((p / repeat) % groups);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t off = (static_cast<std::size_t>(p) * n + r) * n;
      softmax_rows(x.values().data() + off, out.values().data() + off, n, mask.data() + (g * n + r) * n);
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int c = x.dim(-1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("layer_norm: affine size does not match " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  auto stats = std::make_shared<std::vector<double>>();  // (mean, inv_std) per row
  auto out = make_result(x.shape(), {x, gamma, beta}, [c, rows, stats](Node& self) {
    auto& xn = in(self, 0);
    auto& gn = in(self, 1);
    auto& bn = in(self, 2);
    std::vector<double> dxhat(static_cast<std::size_t>(c));
    for (std::size_t r = 0; r < rows; ++r) {
      const double mean = (*stats)[2 * r];
      const double inv = (*stats)[2 * r + 1];
      const double* xr = xn.data.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      double s1 = 0.0, s2 = 0.0;
      for (int k = 0; k < c; ++k) {
        const double xhat = (xr[k] - mean) * inv;
        if (gn.requires_grad) gn.grad[k] += dy[k] * xhat;
        if (bn.requires_grad) bn.grad[k] += dy[k];
        dxhat[k] = dy[k] * gn.data[k];
        s1 += dxhat[k];
        s2 += dxhat[k] * xhat;
      }
      if (!xn.requires_grad) continue;
      s1 /= c;
      s2 /= c;
      for (int k = 0; k < c; ++k) {
        const double xhat = (xr[k] - mean) * inv;
        xn.grad[r * c + k] += inv * (dxhat[k] - s1 - xhat * s2);
      }
    }
  });
  if (meta_mode()) return out;
  stats->resize(2 * rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * c;
    double mean = 0.0;
    for (int k = 0; k < c; ++k) mean += xr[k];
    mean /= c;
    double var = 0.0;
    for (int k = 0; k < c; ++k) var += (xr[k] - mean) * (xr[k] - mean);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = inv;
    double* yr = out.values().data() + r * c;
    for (int k = 0; k < c; ++k) yr[k] = (xr[k] - mean) * inv * gamma.values()[k] + beta.values()[k];
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::vector<double>& running_mean,
                  std::vector<double>& running_var, bool training, double momentum, double eps) {
  const int c = x.dim(-1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c) ||
      (!meta_mode() && (running_mean.size() != static_cast<std::size_t>(c) ||
                        running_var.size() != static_cast<std::size_t>(c)))) {
    throw ShapeError("batch_norm: parameter size does not match " + shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
  auto out = make_result(x.shape(), {x, gamma, beta}, [c, rows, mean, inv, training](Node& self) {
    auto& xn = in(self, 0);
    auto& gn = in(self, 1);
    auto& bn = in(self, 2);
    std::vector<double> sum_dy(static_cast<std::size_t>(c), 0.0), sum_dy_xhat(static_cast<std::size_t>(c), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (int k = 0; k < c; ++k) {
        const double dy = self.grad[r * c + k];
        const double xhat = (xn.data[r * c + k] - (*mean)[k]) * (*inv)[k];
        sum_dy[k] += dy;
        sum_dy_xhat[k] += dy * xhat;
      }
    }
    for (int k = 0; k < c; ++k) {
      if (gn.requires_grad) gn.grad[k] += sum_dy_xhat[k];
      if (bn.requires_grad) bn.grad[k] += sum_dy[k];
    }
    if (!xn.requires_grad) return;
    const double n = static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (int k = 0; k < c; ++k) {
        const double dy = self.grad[r * c + k];
        const double g = gn.data[k] * (*inv)[k];
        if (training) {
          const double xhat = (xn.data[r * c + k] - (*mean)[k]) * (*inv)[k];
          xn.grad[r * c + k] += g * (dy - sum_dy[k] / n - xhat * sum_dy_xhat[k] / n);
        } else {
          xn.grad[r * c + k] += g * dy;
        }
      }
    }
  });
  if (meta_mode()) return out;
  const auto& xv = x.values();
  if (training) {
    std::vector<double> var(static_cast<std::size_t>(c), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (int k = 0; k < c; ++k) (*mean)[k] += xv[r * c + k];
    }
    for (auto& m : *mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (int k = 0; k < c; ++k) {
        const double d = xv[r * c + k] - (*mean)[k];
        var[k] += d * d;
      }
    }
    for (int k = 0; k < c; ++k) {
      const double biased = var[k] / static_cast<double>(rows);
      const double unbiased = rows > 1 ? var[k] / static_cast<double>(rows - 1) : biased;
      (*inv)[k] = 1.0 / std::sqrt(biased + eps);
      running_mean[k] = (1.0 - momentum) * running_mean[k] + momentum * (*mean)[k];
      running_var[k] = (1.0 - momentum) * running_var[k] + momentum * unbiased;
    }
  } else {
    for (int k = 0; k < c; ++k) {
      (*mean)[k] = running_mean[k];
      (*inv)[k] = 1.0 / std::sqrt(running_var[k] + eps);
    }
  }
  auto& o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (int k = 0; k < c; ++k) {
      o[r * c + k] = (xv[r * c + k] - (*mean)[k]) * (*inv)[k] * gamma.values()[k] + beta.values()[k];
    }
  }
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  auto out = make_result(shape, {x}, [](Node& self) {
    auto& a = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i];
  });
  if (meta_mode()) return out;
  out.values() = x.values();
  return out;
}

namespace {

// For each output element, the linear index of its source element.
std::vector<std::size_t> permute_sources(const Shape& in_shape, const std::vector<int>& perm) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * static_cast<std::size_t>(in_shape[i]);
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
    stride[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  const std::size_t n = numel(in_shape);
  std::vector<std::size_t> src(n);
  std::vector<int> idx(r, 0);
  std::size_t pos = 0;
  for (std::size_t o = 0; o < n; ++o) {
    src[o] = pos;
    for (std::size_t d = r; d-- > 0;) {
      pos += stride[d];
      if (++idx[d] < out_shape[d]) break;
      pos -= stride[d] * static_cast<std::size_t>(out_shape[d]);
      idx[d] = 0;
    }
  }
  return src;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: wrong axis count");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  Shape shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    if (perm[i] < 0 || perm[i] >= r || used[perm[i]]) throw ShapeError("permute: not a permutation");
    used[perm[i]] = true;
    shape[i] = x.dim(perm[i]);
  }
  if (meta_mode()) return make_result(shape, {x}, nullptr);
  auto src = std::make_shared<std::vector<std::size_t>>(permute_sources(x.shape(), perm));
  auto out = make_result(shape, {x}, [src](Node& self) {
    auto& a = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[(*src)[i]] += self.grad[i];
  });
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.values()[(*src)[i]];
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows, const Shape& out_shape) {
  const int c = x.dim(-1);
  const int n_rows = static_cast<int>(x.size() / static_cast<std::size_t>(c));
  if (out_shape.empty() || out_shape.back() != c || numel(out_shape) != rows.size() * static_cast<std::size_t>(c)) {
    throw ShapeError("gather_rows: output shape " + shape_string(out_shape) + " does not hold " +
                     std::to_string(rows.size()) + " rows of " + std::to_string(c));
  }
  for (int r : rows) {
    if (r < -1 || r >= n_rows) throw ShapeError("gather_rows: row index out of range");
  }
  if (meta_mode()) return make_result(out_shape, {x}, nullptr);
  auto idx = std::make_shared<std::vector<int>>(rows);
  auto out = make_result(out_shape, {x}, [idx, c](Node& self) {
    auto& a = in(self, 0);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const int r = (*idx)[i];
      if (r < 0) continue;
      double* g = a.grad.data() + static_cast<std::size_t>(r) * c;
      const double* d = self.grad.data() + i * c;
      for (int k = 0; k < c; ++k) g[k] += d[k];
    }
  });
  auto& o = out.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0) continue;
    std::copy_n(x.values().data() + static_cast<std::size_t>(rows[i]) * c, c, o.data() + i * c);
  }
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape shape = parts.front().shape();
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin(), s.end() - 1, shape.begin())) {
      throw ShapeError("concat: " + shape_string(s) + " vs " + shape_string(shape));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  shape.back() = total;
  const std::size_t rows = parts.front().size() / static_cast<std::size_t>(std::max(1, widths.front()));
  auto out = make_result(shape, parts, [widths, total, rows](Node& self) {
    int off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      auto& p = in(self, k);
      if (p.requires_grad) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (int j = 0; j < widths[k]; ++j) p.grad[r * widths[k] + j] += self.grad[r * total + off + j];
        }
      }
      off += widths[k];
    }
  });
  if (meta_mode()) return out;
  int off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[k].values().data() + r * widths[k], widths[k],
                  out.values().data() + r * total + off);
    }
    off += widths[k];
  }
  return out;
}

Tensor slice_last(const Tensor& x, int start, int length) {
  const int c = x.dim(-1);
  if (start < 0 || length < 0 || start + length > c) throw ShapeError("slice out of range");
  Shape shape = x.shape();
  shape.back() = length;
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  auto out = make_result(shape, {x}, [rows, c, start, length](Node& self) {
    auto& a = in(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (int j = 0; j < length; ++j) a.grad[r * c + start + j] += self.grad[r * length + j];
    }
  });
  if (meta_mode()) return out;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.values().data() + r * c + start, length, out.values().data() + r * length);
  }
  return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("mean_axis: axis out of range");
  Shape shape = x.shape();
  const int len = shape[axis];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[i]);
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(shape[i]);
  shape.erase(shape.begin() + axis);
  if (shape.empty()) shape = {1};
  auto out = make_result(shape, {x}, [outer, inner, len](Node& self) {
    auto& a = in(self, 0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (int l = 0; l < len; ++l) {
        for (std::size_t i = 0; i < inner; ++i) {
          a.grad[(o * len + l) * inner + i] += self.grad[o * inner + i] / len;
        }
      }
    }
  });
  if (meta_mode()) return out;
  for (std::size_t o = 0; o < outer; ++o) {
    for (int l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out.values()[o * inner + i] += x.values()[(o * len + l) * inner + i];
    }
    for (std::size_t i = 0; i < inner; ++i) out.values()[o * inner + i] /= len;
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  auto out = make_result({1}, {x}, [](Node& self) {
    auto& a = in(self, 0);
    for (auto& g : a.grad) g += self.grad[0];
  });
  if (meta_mode()) return out;
  out.values()[0] = std::accumulate(x.values().begin(), x.values().end(), 0.0);
  return out;
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

std::array<int, 3> conv3d_output_size(std::array<int, 3> in_size, std::array<int, 3> kernel, std::array<int, 3> stride,
                                      std::array<int, 3> pad) {
  std::array<int, 3> out{};
  for (int d = 0; d < 3; ++d) {
    if (stride[d] < 1 || kernel[d] < 1 || pad[d] < 0) throw ShapeError("conv3d: invalid kernel/stride/padding");
    const int span = in_size[d] + 2 * pad[d] - kernel[d];
    if (span < 0) throw ShapeError("conv3d: kernel larger than padded input");
    out[d] = span / stride[d] + 1;
  }
  return out;
}

namespace {

struct ConvGeom {
  int t, h, w, cin;
  int kt, kh, kw, cout;
  std::array<int, 3> stride, pad;
  int ot, oh, ow;
  std::size_t patch() const { return static_cast<std::size_t>(kt) * kh * kw * cin; }
  std::size_t positions() const { return static_cast<std::size_t>(ot) * oh * ow; }
};

// Visits (column offset, input offset or -1) for every entry of the
// im2col matrix of batch element b.
template <typename F>
void for_each_col(const ConvGeom& g, F&& f) {
  std::size_t row = 0;
  for (int ot = 0; ot < g.ot; ++ot) {
    for (int oh = 0; oh < g.oh; ++oh) {
      for (int ow = 0; ow < g.ow; ++ow, ++row) {
        std::size_t col = 0;
        for (int a = 0; a < g.kt; ++a) {
          const int it = ot * g.stride[0] - g.pad[0] + a;
          for (int b = 0; b < g.kh; ++b) {
            const int ih = oh * g.stride[1] - g.pad[1] + b;
            for (int c = 0; c < g.kw; ++c, col += static_cast<std::size_t>(g.cin)) {
              const int iw = ow * g.stride[2] - g.pad[2] + c;
              const bool inside = it >= 0 && it < g.t && ih >= 0 && ih < g.h && iw >= 0 && iw < g.w;
              const long src = inside ? ((static_cast<long>(it) * g.h + ih) * g.w + iw) * g.cin : -1;
              f(row * g.patch() + col, src);
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::array<int, 3> stride, std::array<int, 3> pad) {
  if (x.rank() != 5 || w.rank() != 5 || w.dim(3) != x.dim(4)) {
    throw ShapeError("conv3d: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), x.dim(4), w.dim(0), w.dim(1), w.dim(2), w.dim(4), stride, pad, 0, 0, 0};
  const auto o = conv3d_output_size({g.t, g.h, g.w}, {g.kt, g.kh, g.kw}, stride, pad);
  g.ot = o[0];
  g.oh = o[1];
  g.ow = o[2];
  const int batch = x.dim(0);
  if (g.kt == 1 && g.kh == 1 && g.kw == 1 && stride == std::array<int, 3>{1, 1, 1} && pad == std::array<int, 3>{0, 0, 0}) {
    return linear(x, reshape(w, {g.cin, g.cout}), b);
  }
  if (b.defined() && b.size() != static_cast<std::size_t>(g.cout)) throw ShapeError("conv3d: bias size");
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  const Shape shape{batch, g.ot, g.oh, g.ow, g.cout};
  const std::size_t in_stride = static_cast<std::size_t>(g.t) * g.h * g.w * g.cin;
  const std::size_t out_stride = g.positions() * g.cout;
  auto out = make_result(shape, inputs, [g, batch, in_stride, out_stride](Node& self) {
    auto& xn = in(self, 0);
    auto& wn = in(self, 1);
    const long p = static_cast<long>(g.positions());
    const long k = static_cast<long>(g.patch());
    RowMat col(p, k), dcol(p, k);
    MapCM wm(wn.data.data(), k, g.cout);
    for (int bi = 0; bi < batch; ++bi) {
      const double* xb = xn.data.data() + bi * in_stride;
      MapCM dy(self.grad.data() + bi * out_stride, p, g.cout);
      if (wn.requires_grad) {
        for_each_col(g, [&](std::size_t pos, long src) {
          double* dst = col.data() + pos;
          if (src < 0) std::fill_n(dst, g.cin, 0.0);
          else std::copy_n(xb + src, g.cin, dst);
        });
        MapM(wn.grad.data(), k, g.cout).noalias() += col.transpose() * dy;
      }
      if (xn.requires_grad) {
        dcol.noalias() = dy * wm.transpose();
        double* gx = xn.grad.data() + bi * in_stride;
        for_each_col(g, [&](std::size_t pos, long src) {
          if (src < 0) return;
          const double* s = dcol.data() + pos;
          for (int c = 0; c < g.cin; ++c) gx[src + c] += s[c];
        });
      }
      if (self.inputs.size() > 2 && in(self, 2).requires_grad) {
        auto& bn = in(self, 2);
        for (long r = 0; r < p; ++r) {
          for (int c = 0; c < g.cout; ++c) bn.grad[c] += dy(r, c);
        }
      }
    }
  });
  if (meta_mode()) return out;
  const long p = static_cast<long>(g.positions());
  const long k = static_cast<long>(g.patch());
  RowMat col(p, k);
  MapCM wm(w.values().data(), k, g.cout);
  for (int bi = 0; bi < batch; ++bi) {
    const double* xb = x.values().data() + bi * in_stride;
    for_each_col(g, [&](std::size_t pos, long src) {
      double* dst = col.data() + pos;
      if (src < 0) std::fill_n(dst, g.cin, 0.0);
      else std::copy_n(xb + src, g.cin, dst);
    });
    MapM y(out.values().data() + bi * out_stride, p, g.cout);
    y.noalias() = col * wm;
    if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), g.cout);
  }
  return out;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation) {
  if (dilation < 1) throw ParameterError("dilation must be >= 1");
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2)) {
    throw ShapeError("causal_conv1d: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  const int batch = x.dim(0), t = x.dim(1), cin = x.dim(2), k = w.dim(0), cout = w.dim(2);
  if (b.defined() && b.size() != static_cast<std::size_t>(cout)) throw ShapeError("causal_conv1d: bias size");
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  const long kk = static_cast<long>(k) * cin;
  auto fill = [=](const double* xb, RowMat& col) {
    for (int ti = 0; ti < t; ++ti) {
      for (int j = 0; j < k; ++j) {
        const int src = ti - dilation * j;
        double* dst = col.data() + static_cast<std::size_t>(ti) * kk + static_cast<std::size_t>(j) * cin;
        if (src < 0) std::fill_n(dst, cin, 0.0);
        else std::copy_n(xb + static_cast<std::size_t>(src) * cin, cin, dst);
      }
    }
  };
  auto out = make_result({batch, t, cout}, inputs, [=](Node& self) {
    auto& xn = in(self, 0);
    auto& wn = in(self, 1);
    RowMat col(t, kk), dcol(t, kk);
    MapCM wm(wn.data.data(), kk, cout);
    for (int bi = 0; bi < batch; ++bi) {
      MapCM dy(self.grad.data() + static_cast<std::size_t>(bi) * t * cout, t, cout);
      if (wn.requires_grad) {
        fill(xn.data.data() + static_cast<std::size_t>(bi) * t * cin, col);
        MapM(wn.grad.data(), kk, cout).noalias() += col.transpose() * dy;
      }
      if (xn.requires_grad) {
        dcol.noalias() = dy * wm.transpose();
        double* gx = xn.grad.data() + static_cast<std::size_t>(bi) * t * cin;
        for (int ti = 0; ti < t; ++ti) {
          for (int j = 0; j < k; ++j) {
            const int src = ti - dilation * j;
            if (src < 0) continue;
            for (int c = 0; c < cin; ++c) gx[static_cast<std::size_t>(src) * cin + c] += dcol(ti, j * cin + c);
          }
        }
      }
      if (self.inputs.size() > 2 && in(self, 2).requires_grad) {
        auto& bn = in(self, 2);
        for (int ti = 0; ti < t; ++ti) {
          for (int c = 0; c < cout; ++c) bn.grad[c] += dy(ti, c);
        }
      }
    }
  });
  if (meta_mode()) return out;
  RowMat col(t, kk);
  MapCM wm(w.values().data(), kk, cout);
  for (int bi = 0; bi < batch; ++bi) {
    fill(x.values().data() + static_cast<std::size_t>(bi) * t * cin, col);
    MapM y(out.values().data() + static_cast<std::size_t>(bi) * t * cout, t, cout);
    y.noalias() = col * wm;
    if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), cout);
  }
  return out;
}

}  // namespace tasl::nn
