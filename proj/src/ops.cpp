// SPDX-License-Identifier: Apache-2.0
#include "ca3d/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "ca3d/error.hpp"

namespace ca3d::ops {

namespace {

using detail::Node;
using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  fail(ErrorCode::kShape, std::string(op) + ": " + detail);
}

[[noreturn]] void shape_error2(const char* op, const Shape& a, const Shape& b) {
  shape_error(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(const char* op, const Tensor& t, int rank, const char* what) {
  if (!t.defined()) shape_error(op, std::string(what) + " is undefined");
  if (t.rank() != rank) {
    shape_error(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
  }
}

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;
};

Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ia = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - a.size());
    const std::int64_t ib = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - b.size());
    const std::int64_t da = ia >= 0 ? a[ia] : 1;
    const std::int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) shape_error2(op, a, b);
    bc.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) bc.stride_a[i] = sa[ia];
    if (ib >= 0 && db != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) over the broadcast output in row-major order.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::int64_t total = shape_numel(bc.out);
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t inner = bc.out[r - 1];
  const std::int64_t sa_in = bc.stride_a[r - 1];
  const std::int64_t sb_in = bc.stride_b[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t k = 0; k < inner; ++k) f(o + k, oa + k * sa_in, ob + k * sb_in);
    for (int d = static_cast<int>(r) - 2; d >= 0; --d) {
      ++idx[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * idx[d];
      ob -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

// Number of tiles when b (ignoring leading 1s) equals a trailing block of a;
// 0 otherwise.
std::size_t suffix_repeat(const Shape& a, const Shape& b) {
  std::size_t lead = 0;
  while (lead < b.size() && b[lead] == 1) ++lead;
  const std::size_t rb = b.size() - lead;
  if (rb == 0 || rb > a.size()) return 0;
  for (std::size_t i = 0; i < rb; ++i) {
    if (a[a.size() - rb + i] != b[lead + i]) return 0;
  }
  if (b.size() > a.size()) return 0;
  const auto m = shape_numel(b);
  return m > 0 ? static_cast<std::size_t>(shape_numel(a) / m) : 0;
}

Tensor binary(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) shape_error(name, "undefined operand");
  const auto& ad = a.data();
  const auto& bd = b.data();
  if (a.shape() == b.shape()) {
    const std::size_t n = ad.size();
    std::vector<float> out(n);
    switch (kind) {
      case BinOp::kAdd: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i]; break;
      case BinOp::kSub: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i]; break;
      case BinOp::kMul: for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i]; break;
    }
    return detail::make_result(name, a.shape(), std::move(out), {a, b}, [kind](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const auto& g = self.grad;
      const std::size_t n = g.size();
      if (na.requires_grad) {
        auto& ga = na.grad_buffer();
        if (kind == BinOp::kMul) {
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * nb.data[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
      }
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer();
        switch (kind) {
          case BinOp::kAdd: for (std::size_t i = 0; i < n; ++i) gb[i] += g[i]; break;
          case BinOp::kSub: for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i]; break;
          case BinOp::kMul: for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * na.data[i]; break;
        }
      }
    });
  }

  if (const auto rep = suffix_repeat(a.shape(), b.shape()); rep > 0) {
    // b tiles a along leading axes.
    const std::size_t n = ad.size(), m = bd.size();
    std::vector<float> out(n);
    for (std::size_t base = 0; base < n; base += m) {
      float* o = out.data() + base;
      const float* x = ad.data() + base;
      switch (kind) {
        case BinOp::kAdd: for (std::size_t i = 0; i < m; ++i) o[i] = x[i] + bd[i]; break;
        case BinOp::kSub: for (std::size_t i = 0; i < m; ++i) o[i] = x[i] - bd[i]; break;
        case BinOp::kMul: for (std::size_t i = 0; i < m; ++i) o[i] = x[i] * bd[i]; break;
      }
    }
    return detail::make_result(name, a.shape(), std::move(out), {a, b}, [kind, n, m](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const float* g = self.grad.data();
      float* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
      float* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
      for (std::size_t base = 0; base < n; base += m) {
        const float* gr = g + base;
        if (ga) {
          float* gar = ga + base;
          if (kind == BinOp::kMul) {
            for (std::size_t i = 0; i < m; ++i) gar[i] += gr[i] * nb.data[i];
          } else {
            for (std::size_t i = 0; i < m; ++i) gar[i] += gr[i];
          }
        }
        if (gb) {
          const float* xa = na.data.data() + base;
          switch (kind) {
            case BinOp::kAdd: for (std::size_t i = 0; i < m; ++i) gb[i] += gr[i]; break;
            case BinOp::kSub: for (std::size_t i = 0; i < m; ++i) gb[i] -= gr[i]; break;
            case BinOp::kMul: for (std::size_t i = 0; i < m; ++i) gb[i] += gr[i] * xa[i]; break;
          }
        }
      }
    });
  }

  Broadcast bc = broadcast_shapes(name, a.shape(), b.shape());
  std::vector<float> out(static_cast<std::size_t>(shape_numel(bc.out)));
  for_each_broadcast(bc, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    switch (kind) {
      case BinOp::kAdd: out[o] = ad[ia] + bd[ib]; break;
      case BinOp::kSub: out[o] = ad[ia] - bd[ib]; break;
      case BinOp::kMul: out[o] = ad[ia] * bd[ib]; break;
    }
  });
  Shape out_shape = bc.out;
  return detail::make_result(name, std::move(out_shape), std::move(out), {a, b},
                             [kind, bc = std::move(bc)](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    float* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
    float* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
    for_each_broadcast(bc, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      switch (kind) {
        case BinOp::kAdd:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] += g[o];
          break;
        case BinOp::kSub:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] -= g[o];
          break;
        case BinOp::kMul:
          if (ga) ga[ia] += g[o] * nb.data[ib];
          if (gb) gb[ib] += g[o] * na.data[ia];
          break;
      }
    });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::kMul, a, b); }

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return detail::make_result("add_scalar", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

Tensor square(const Tensor& a) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= v;
  return detail::make_result("square", a.shape(), std::move(out), {a}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += 2.0f * in.data[i] * self.grad[i];
  });
}

// Plain loops rather than Eigen arrays: vectorised exp with alignment
// peeling would make results depend on buffer addresses.
Tensor silu(const Tensor& a) {
  const auto& x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0f + std::exp(-x[i]));
  return detail::make_result("silu", a.shape(), std::move(out), {a}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) {
      const float xv = in.data[i];
      const float sig = 1.0f / (1.0f + std::exp(-xv));
      gi[i] += self.grad[i] * sig * (1.0f + xv * (1.0f - sig));
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_error2("matmul", a.shape(), b.shape());
  std::vector<float> out(static_cast<std::size_t>(m * n));
  MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    CMapR g(self.grad.data(), m, n);
    if (na.requires_grad) MapR(na.grad_buffer().data(), m, k).noalias() += g * CMapR(nb.data.data(), k, n).transpose();
    if (nb.requires_grad) MapR(nb.grad_buffer().data(), k, n).noalias() += CMapR(na.data.data(), m, k).transpose() * g;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3, "lhs");
  require_rank("bmm", b, 3, "rhs");
  const auto bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) shape_error2("bmm", a.shape(), b.shape());
  std::vector<float> out(static_cast<std::size_t>(bs * m * n));
  for (std::int64_t i = 0; i < bs; ++i) {
    MapR(out.data() + i * m * n, m, n).noalias() =
        CMapR(a.data().data() + i * m * k, m, k) * CMapR(b.data().data() + i * k * n, k, n);
  }
  return detail::make_result("bmm", {bs, m, n}, std::move(out), {a, b}, [bs, m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (std::int64_t i = 0; i < bs; ++i) {
      CMapR g(self.grad.data() + i * m * n, m, n);
      if (na.requires_grad) {
        MapR(na.grad_buffer().data() + i * m * k, m, k).noalias() +=
            g * CMapR(nb.data.data() + i * k * n, k, n).transpose();
      }
      if (nb.requires_grad) {
        MapR(nb.grad_buffer().data() + i * k * n, k, n).noalias() +=
            CMapR(na.data.data() + i * m * k, m, k).transpose() * g;
      }
    }
  });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_rank("bmm_nt", a, 3, "lhs");
  require_rank("bmm_nt", b, 3, "rhs");
  const auto bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != bs || b.dim(2) != k) shape_error2("bmm_nt", a.shape(), b.shape());
  std::vector<float> out(static_cast<std::size_t>(bs * m * n));
  for (std::int64_t i = 0; i < bs; ++i) {
    MapR(out.data() + i * m * n, m, n).noalias() =
        CMapR(a.data().data() + i * m * k, m, k) * CMapR(b.data().data() + i * n * k, n, k).transpose();
  }
  return detail::make_result("bmm_nt", {bs, m, n}, std::move(out), {a, b}, [bs, m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (std::int64_t i = 0; i < bs; ++i) {
      CMapR g(self.grad.data() + i * m * n, m, n);
      if (na.requires_grad) {
        MapR(na.grad_buffer().data() + i * m * k, m, k).noalias() += g * CMapR(nb.data.data() + i * n * k, n, k);
      }
      if (nb.requires_grad) {
        MapR(nb.grad_buffer().data() + i * n * k, n, k).noalias() +=
            g.transpose() * CMapR(na.data.data() + i * m * k, m, k);
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank("linear", w, 2, "weight");
  if (!x.defined() || x.rank() < 1) shape_error("linear", "input must have rank >= 1");
  const auto in = w.dim(0), outc = w.dim(1);
  if (x.dim(-1) != in) shape_error2("linear", x.shape(), w.shape());
  Shape out_shape = x.shape();
  out_shape.back() = outc;
  Tensor y = matmul(reshape(x, {x.numel() / in, in}), w);
  if (bias.defined()) {
    if (bias.rank() != 1 || bias.dim(0) != outc) shape_error2("linear", w.shape(), bias.shape());
    y = add(y, bias);
  }
  return reshape(y, std::move(out_shape));
}

namespace {

// Strided 2D convolution geometry, shared by forward and backward.
struct Conv2dGeom {
  std::int64_t b, c, h, w, o, k, ho, wo;
  int stride, pad;
  std::int64_t cols_rows() const { return c * k * k; }
  std::int64_t spatial() const { return ho * wo; }
};

void im2col_2d(const Conv2dGeom& g, const float* x, float* cols) {
  const std::int64_t p = g.spatial();
  const std::int64_t width = g.b * p;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        float* row = cols + ((c * g.k + ki) * g.k + kj) * width;
        for (std::int64_t b = 0; b < g.b; ++b) {
          const float* xp = x + (b * g.c + c) * g.h * g.w;
          float* rp = row + b * p;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ki;
            float* dst = rp + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(dst, dst + g.wo, 0.0f);
              continue;
            }
            const float* src = xp + iy * g.w;
            if (g.stride == 1) {
              // Valid outputs form one contiguous run.
              const std::int64_t off = kj - g.pad;
              const std::int64_t lo = std::clamp<std::int64_t>(-off, 0, g.wo);
              const std::int64_t hi = std::clamp<std::int64_t>(g.w - off, lo, g.wo);
              std::fill(dst, dst + lo, 0.0f);
              std::copy(src + lo + off, src + hi + off, dst + lo);
              std::fill(dst + hi, dst + g.wo, 0.0f);
              continue;
            }
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_2d(const Conv2dGeom& g, const float* cols, float* dx) {
  const std::int64_t p = g.spatial();
  const std::int64_t width = g.b * p;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const float* row = cols + ((c * g.k + ki) * g.k + kj) * width;
        for (std::int64_t b = 0; b < g.b; ++b) {
          float* xp = dx + (b * g.c + c) * g.h * g.w;
          const float* rp = row + b * p;
          for (std::int64_t oy = 0; oy < g.ho; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            const float* src = rp + oy * g.wo;
            float* dst = xp + iy * g.w;
            if (g.stride == 1) {
              const std::int64_t off = kj - g.pad;
              const std::int64_t lo = std::clamp<std::int64_t>(-off, 0, g.wo);
              const std::int64_t hi = std::clamp<std::int64_t>(g.w - off, lo, g.wo);
              for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox + off] += src[ox];
              continue;
            }
            for (std::int64_t ox = 0; ox < g.wo; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// Converts a [O, B*P] GEMM result to [B, O, P] and adds the bias.
void scatter_output(std::int64_t batch, std::int64_t o, std::int64_t p, const float* mat, const float* bias,
                    float* out) {
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t oc = 0; oc < o; ++oc) {
      const float* src = mat + oc * batch * p + b * p;
      float* dst = out + (b * o + oc) * p;
      const float bv = bias ? bias[oc] : 0.0f;
      for (std::int64_t i = 0; i < p; ++i) dst[i] = src[i] + bv;
    }
  }
}

// [B, O, P] gradient to [O, B*P].
std::vector<float> gather_grad(std::int64_t batch, std::int64_t o, std::int64_t p, const float* g) {
  std::vector<float> mat(static_cast<std::size_t>(o * batch * p));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t oc = 0; oc < o; ++oc) {
      std::copy_n(g + (b * o + oc) * p, p, mat.data() + oc * batch * p + b * p);
    }
  }
  return mat;
}

void check_bias(const char* op, const Tensor& bias, std::int64_t o) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) {
    shape_error(op, "bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(o) +
                        " output channels");
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", w, 4, "weight");
  if (stride < 1 || padding < 0) shape_error("conv2d", "invalid stride or padding");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) shape_error2("conv2d", x.shape(), w.shape());
  Conv2dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), 0, 0, stride, padding};
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) shape_error2("conv2d", x.shape(), w.shape());
  check_bias("conv2d", bias, g.o);

  const std::int64_t kk = g.cols_rows(), p = g.spatial();
  // Kept alive for the weight gradient.
  auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(kk * g.b * p));
  im2col_2d(g, x.data().data(), cols->data());
  std::vector<float> mat(static_cast<std::size_t>(g.o * g.b * p));
  MapR(mat.data(), g.o, g.b * p).noalias() = CMapR(w.data().data(), g.o, kk) * CMapR(cols->data(), kk, g.b * p);
  if (!grad_enabled() || !w.requires_grad()) cols.reset();
  std::vector<float> out(static_cast<std::size_t>(g.b * g.o * p));
  scatter_output(g.b, g.o, p, mat.data(), bias.defined() ? bias.data().data() : nullptr, out.data());

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result("conv2d", {g.b, g.o, g.ho, g.wo}, std::move(out), std::move(inputs), [g, saved = std::move(cols)](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    const std::int64_t kk = g.cols_rows(), p = g.spatial();
    const auto gmat = gather_grad(g.b, g.o, p, self.grad.data());
    CMapR gm(gmat.data(), g.o, g.b * p);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (std::int64_t oc = 0; oc < g.o; ++oc) {
        double s = 0.0;
        const float* row = gmat.data() + oc * g.b * p;
        for (std::int64_t i = 0; i < g.b * p; ++i) s += row[i];
        gb[oc] += static_cast<float>(s);
      }
    }
    if (!nw.requires_grad && !nx.requires_grad) return;
    if (nw.requires_grad) {
      MapR(nw.grad_buffer().data(), g.o, kk).noalias() += gm * CMapR(saved->data(), kk, g.b * p).transpose();
    }
    if (nx.requires_grad) {
      std::vector<float> cols(static_cast<std::size_t>(kk * g.b * p));
      MapR(cols.data(), kk, g.b * p).noalias() = CMapR(nw.data.data(), g.o, kk).transpose() * gm;
      col2im_2d(g, cols.data(), nx.grad_buffer().data());
    }
  });
}

namespace {

struct Conv3dGeom {
  std::int64_t b, c, d, h, w, o, k, od, oh, ow;
  int pad;
  std::int64_t cols_rows() const { return c * k * k * k; }
  std::int64_t spatial() const { return od * oh * ow; }
};

template <bool kScatter>
void im2col_3d(const Conv3dGeom& g, const float* src, float* cols) {
  const std::int64_t p = g.spatial();
  const std::int64_t width = g.b * p;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t kz = 0; kz < g.k; ++kz) {
      for (std::int64_t ky = 0; ky < g.k; ++ky) {
        for (std::int64_t kx = 0; kx < g.k; ++kx) {
          const std::int64_t r = ((c * g.k + kz) * g.k + ky) * g.k + kx;
          for (std::int64_t b = 0; b < g.b; ++b) {
            const std::int64_t vol = (b * g.c + c) * g.d * g.h * g.w;
            std::int64_t col = r * width + b * p;
            for (std::int64_t oz = 0; oz < g.od; ++oz) {
              const std::int64_t iz = oz - g.pad + kz;
              for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                const std::int64_t iy = oy - g.pad + ky;
                const bool row_in = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
                for (std::int64_t ox = 0; ox < g.ow; ++ox, ++col) {
                  const std::int64_t ix = ox - g.pad + kx;
                  const bool in = row_in && ix >= 0 && ix < g.w;
                  if constexpr (kScatter) {
                    // `src` holds columns, `cols` is the image gradient.
                    if (in) cols[vol + (iz * g.h + iy) * g.w + ix] += src[col];
                  } else {
                    cols[col] = in ? src[vol + (iz * g.h + iy) * g.w + ix] : 0.0f;
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding) {
  require_rank("conv3d", x, 5, "input");
  require_rank("conv3d", w, 5, "weight");
  if (padding < 0) shape_error("conv3d", "negative padding");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4)) {
    shape_error2("conv3d", x.shape(), w.shape());
  }
  Conv3dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4), w.dim(0), w.dim(2), 0, 0, 0, padding};
  g.od = g.d + 2 * padding - g.k + 1;
  g.oh = g.h + 2 * padding - g.k + 1;
  g.ow = g.w + 2 * padding - g.k + 1;
  if (g.od < 1 || g.oh < 1 || g.ow < 1) shape_error2("conv3d", x.shape(), w.shape());
  check_bias("conv3d", bias, g.o);

  const std::int64_t kk = g.cols_rows(), p = g.spatial();
  std::vector<float> cols(static_cast<std::size_t>(kk * g.b * p));
  im2col_3d<false>(g, x.data().data(), cols.data());
  std::vector<float> mat(static_cast<std::size_t>(g.o * g.b * p));
  MapR(mat.data(), g.o, g.b * p).noalias() = CMapR(w.data().data(), g.o, kk) * CMapR(cols.data(), kk, g.b * p);
  std::vector<float> out(static_cast<std::size_t>(g.b * g.o * p));
  scatter_output(g.b, g.o, p, mat.data(), bias.defined() ? bias.data().data() : nullptr, out.data());

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result("conv3d", {g.b, g.o, g.od, g.oh, g.ow}, std::move(out), std::move(inputs),
                             [g](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    const std::int64_t kk = g.cols_rows(), p = g.spatial();
    const auto gmat = gather_grad(g.b, g.o, p, self.grad.data());
    CMapR gm(gmat.data(), g.o, g.b * p);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (std::int64_t oc = 0; oc < g.o; ++oc) {
        double s = 0.0;
        const float* row = gmat.data() + oc * g.b * p;
        for (std::int64_t i = 0; i < g.b * p; ++i) s += row[i];
        gb[oc] += static_cast<float>(s);
      }
    }
    if (!nw.requires_grad && !nx.requires_grad) return;
    std::vector<float> cols(static_cast<std::size_t>(kk * g.b * p));
    if (nw.requires_grad) {
      im2col_3d<false>(g, nx.data.data(), cols.data());
      MapR(nw.grad_buffer().data(), g.o, kk).noalias() += gm * CMapR(cols.data(), kk, g.b * p).transpose();
    }
    if (nx.requires_grad) {
      MapR(cols.data(), kk, g.b * p).noalias() = CMapR(nw.data.data(), g.o, kk).transpose() * gm;
      im2col_3d<true>(g, cols.data(), nx.grad_buffer().data());
    }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (!x.defined() || x.rank() < 2) shape_error("upsample_nearest2x", "input must have rank >= 2");
  const auto h = x.dim(-2), w = x.dim(-1);
  const auto planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = 2 * h;
  out_shape.back() = 2 * w;
  const auto& xd = x.data();
  std::vector<float> out(static_cast<std::size_t>(planes * 4 * h * w));
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
        out[(pl * 2 * h + y) * 2 * w + xx] = xd[(pl * h + y / 2) * w + xx / 2];
      }
    }
  }
  return detail::make_result("upsample_nearest2x", std::move(out_shape), std::move(out), {x},
                             [planes, h, w](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      for (std::int64_t y = 0; y < 2 * h; ++y) {
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
          gi[(pl * h + y / 2) * w + xx / 2] += self.grad[(pl * 2 * h + y) * 2 * w + xx];
        }
      }
    }
  });
}

Tensor avg_pool2d(const Tensor& x, int factor) {
  if (!x.defined() || x.rank() < 2) shape_error("avg_pool2d", "input must have rank >= 2");
  const auto h = x.dim(-2), w = x.dim(-1);
  if (factor < 1 || h % factor || w % factor) {
    shape_error("avg_pool2d", "factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
  }
  const auto oh = h / factor, ow = w / factor;
  const auto planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape.back() = ow;
  const float inv = 1.0f / static_cast<float>(factor * factor);
  const auto& xd = x.data();
  std::vector<float> out(static_cast<std::size_t>(planes * oh * ow), 0.0f);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < w; ++xx) {
        out[(pl * oh + y / factor) * ow + xx / factor] += xd[(pl * h + y) * w + xx];
      }
    }
  }
  for (auto& v : out) v *= inv;
  return detail::make_result("avg_pool2d", std::move(out_shape), std::move(out), {x},
                             [planes, h, w, oh, ow, factor, inv](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          gi[(pl * h + y) * w + xx] += inv * self.grad[(pl * oh + y / factor) * ow + xx / factor];
        }
      }
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (!x.defined() || x.rank() < 1) shape_error("softmax", "input must have rank >= 1");
  const auto n = x.dim(-1);
  const auto rows = x.numel() / n;
  const auto& xd = x.data();
  std::vector<float> out(xd.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* in = xd.data() + r * n;
    float* o = out.data() + r * n;
    const float mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - mx);
      total += o[i];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::int64_t i = 0; i < n; ++i) o[i] *= inv;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x}, [rows, n](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * n;
      const float* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::int64_t i = 0; i < n; ++i) dot += static_cast<double>(g[i]) * y[i];
      const float d = static_cast<float>(dot);
      float* gx = gi.data() + r * n;
      for (std::int64_t i = 0; i < n; ++i) gx[i] += y[i] * (g[i] - d);
    }
  });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
  if (!x.defined() || x.rank() < 2) shape_error("group_norm", "input must have rank >= 2");
  const auto b = x.dim(0), c = x.dim(1);
  if (groups < 1 || c % groups) {
    shape_error("group_norm", std::to_string(groups) + " groups do not divide channels of " + shape_str(x.shape()));
  }
  require_rank("group_norm", gamma, 1, "gamma");
  require_rank("group_norm", beta, 1, "beta");
  if (gamma.dim(0) != c || beta.dim(0) != c) shape_error2("group_norm", x.shape(), gamma.shape());
  const auto spatial = x.numel() / (b * c);
  const auto cpg = c / groups;
  const auto gsize = cpg * spatial;
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();

  std::vector<float> xhat(xd.size());
  std::vector<float> rstd(static_cast<std::size_t>(b * groups));
  std::vector<float> out(xd.size());
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t g = 0; g < groups; ++g) {
      const std::int64_t base = (n * c + g * cpg) * spatial;
      double s = 0.0;
      for (std::int64_t i = 0; i < gsize; ++i) s += xd[base + i];
      const double mu = s / static_cast<double>(gsize);
      double v = 0.0;
      for (std::int64_t i = 0; i < gsize; ++i) {
        const double d = xd[base + i] - mu;
        v += d * d;
      }
      const double r = 1.0 / std::sqrt(v / static_cast<double>(gsize) + eps);
      rstd[n * groups + g] = static_cast<float>(r);
      for (std::int64_t cc = 0; cc < cpg; ++cc) {
        const std::int64_t ch = g * cpg + cc;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const std::int64_t idx = base + cc * spatial + i;
          const float xh = static_cast<float>((xd[idx] - mu) * r);
          xhat[idx] = xh;
          out[idx] = xh * gd[ch] + bd[ch];
        }
      }
    }
  }
  return detail::make_result("group_norm", x.shape(), std::move(out), {x, gamma, beta},
                             [b, c, groups, cpg, spatial, gsize, xhat = std::move(xhat),
                              rstd = std::move(rstd)](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& nb = *self.inputs[2];
    const auto& g = self.grad;
    if (ng.requires_grad || nb.requires_grad) {
      std::vector<double> dg(static_cast<std::size_t>(c), 0.0), db(static_cast<std::size_t>(c), 0.0);
      for (std::int64_t n = 0; n < b; ++n) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const std::int64_t base = (n * c + ch) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            dg[ch] += static_cast<double>(g[base + i]) * xhat[base + i];
            db[ch] += g[base + i];
          }
        }
      }
      if (ng.requires_grad) {
        auto& gg = ng.grad_buffer();
        for (std::int64_t ch = 0; ch < c; ++ch) gg[ch] += static_cast<float>(dg[ch]);
      }
      if (nb.requires_grad) {
        auto& gb = nb.grad_buffer();
        for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<float>(db[ch]);
      }
    }
    if (!nx.requires_grad) return;
    auto& gx = nx.grad_buffer();
    const auto& gam = ng.data;
    for (std::int64_t n = 0; n < b; ++n) {
      for (std::int64_t grp = 0; grp < groups; ++grp) {
        const std::int64_t base = (n * c + grp * cpg) * spatial;
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::int64_t cc = 0; cc < cpg; ++cc) {
          const float gm = gam[grp * cpg + cc];
          for (std::int64_t i = 0; i < spatial; ++i) {
            const std::int64_t idx = base + cc * spatial + i;
            const double d = static_cast<double>(g[idx]) * gm;
            sum_d += d;
            sum_dx += d * xhat[idx];
          }
        }
        const double mean_d = sum_d / static_cast<double>(gsize);
        const double mean_dx = sum_dx / static_cast<double>(gsize);
        const double r = rstd[n * groups + grp];
        for (std::int64_t cc = 0; cc < cpg; ++cc) {
          const float gm = gam[grp * cpg + cc];
          for (std::int64_t i = 0; i < spatial; ++i) {
            const std::int64_t idx = base + cc * spatial + i;
            const double d = static_cast<double>(g[idx]) * gm;
            gx[idx] += static_cast<float>(r * (d - mean_d - xhat[idx] * mean_dx));
          }
        }
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (!x.defined()) shape_error("reshape", "undefined input");
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  if (!x.defined()) shape_error("permute", "undefined input");
  const int r = x.rank();
  std::vector<int> check(perm);
  std::sort(check.begin(), check.end());
  bool valid = static_cast<int>(perm.size()) == r;
  for (int i = 0; valid && i < r; ++i) valid = check[i] == i;
  if (!valid) shape_error("permute", "invalid permutation for " + shape_str(x.shape()));

  const auto in_strides = contiguous_strides(x.shape());
  Shape out_shape(r);
  std::vector<std::int64_t> src_stride(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // Maps each output offset to its source offset; reused for backward.
  const auto n = x.numel();
  std::vector<std::int64_t> src(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    src[o] = off;
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto& xd = x.data();
  std::vector<float> out(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) out[o] = xd[src[o]];
  return detail::make_result("permute", std::move(out_shape), std::move(out), {x},
                             [src = std::move(src)](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < src.size(); ++o) gi[src[o]] += self.grad[o];
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) shape_error("concat", "no inputs");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_error("concat", "axis out of range for " + shape_str(xs[0].shape()));
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) shape_error2("concat", xs[0].shape(), t.shape());
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.shape()[i] != xs[0].shape()[i]) shape_error2("concat", xs[0].shape(), t.shape());
    }
    out_shape[axis] += t.shape()[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
  const std::int64_t out_row = out_shape[axis] * inner;

  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> widths;
  std::int64_t offset = 0;
  for (const auto& t : xs) {
    const std::int64_t wdt = t.shape()[axis] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().data() + o * wdt, wdt, out.data() + o * out_row + offset);
    }
    widths.push_back(wdt);
    offset += wdt;
  }
  return detail::make_result("concat", std::move(out_shape), std::move(out), xs,
                             [outer, out_row, widths = std::move(widths)](Node& self) {
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      const std::int64_t wdt = widths[k];
      if (in.requires_grad) {
        auto& gi = in.grad_buffer();
        for (std::int64_t o = 0; o < outer; ++o) {
          const float* src = self.grad.data() + o * out_row + offset;
          float* dst = gi.data() + o * wdt;
          for (std::int64_t i = 0; i < wdt; ++i) dst[i] += src[i];
        }
      }
      offset += wdt;
    }
  });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  if (!x.defined()) shape_error("slice", "undefined input");
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || length < 1 || start + length > x.shape()[axis]) {
    shape_error("slice", "range [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                             std::to_string(axis) + " out of bounds for " + shape_str(x.shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  const std::int64_t in_row = x.shape()[axis] * inner;
  const std::int64_t wdt = length * inner;
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<float> out(static_cast<std::size_t>(outer * wdt));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + start * inner, wdt, out.data() + o * wdt);
  }
  return detail::make_result("slice", std::move(out_shape), std::move(out), {x},
                             [outer, in_row, wdt, off = start * inner](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < wdt; ++i) gi[o * in_row + off + i] += self.grad[o * wdt + i];
    }
  });
}

Tensor mean_axis(const Tensor& x, int axis) {
  if (!x.defined()) shape_error("mean_axis", "undefined input");
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || r < 2) shape_error("mean_axis", "axis out of range for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  const std::int64_t n = x.shape()[axis];
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  const auto& xd = x.data();
  std::vector<float> out(static_cast<std::size_t>(outer * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double s = 0.0;
      for (std::int64_t k = 0; k < n; ++k) s += xd[(o * n + k) * inner + i];
      out[o * inner + i] = static_cast<float>(s / static_cast<double>(n));
    }
  }
  return detail::make_result("mean_axis", std::move(out_shape), std::move(out), {x}, [outer, inner, n](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    const float inv = 1.0f / static_cast<float>(n);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t k = 0; k < n; ++k) {
        for (std::int64_t i = 0; i < inner; ++i) gi[(o * n + k) * inner + i] += inv * self.grad[o * inner + i];
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  return detail::make_result("sum", {1}, {static_cast<float>(s)}, {x}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    const float g = self.grad[0];
    for (auto& v : gi) v += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    shape_error2("mse", a.defined() ? a.shape() : Shape{}, b.defined() ? b.shape() : Shape{});
  }
  const auto& ad = a.data();
  const auto& bd = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = static_cast<double>(ad[i]) - bd[i];
    s += d * d;
  }
  const double n = static_cast<double>(ad.size());
  return detail::make_result("mse", {1}, {static_cast<float>(s / n)}, {a, b}, [n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const float k = static_cast<float>(2.0 / n) * self.grad[0];
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (na.data[i] - nb.data[i]);
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= k * (na.data[i] - nb.data[i]);
    }
  });
}

}  // namespace ca3d::ops
