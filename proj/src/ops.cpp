#include "hiseg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace hiseg {

using detail::finish_op;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                               " vs " + shape_str(b.shape));
}

// Collapses a tensor to (rows, last-axis channels).
std::pair<std::int64_t, int> rows_channels(const Tensor& x) {
  require(x.rank() >= 1, "expected rank >= 1");
  const int c = x.shape.back();
  return {x.numel() / c, c};
}

}  // namespace

IndexArray make_indices(std::vector<int> v) {
  return std::make_shared<const std::vector<int>>(std::move(v));
}

// ---- elementwise -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return finish_op(std::move(out), {&a, &b}, [](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    for (int k = 0; k < 2; ++k) {
      Tensor& d = c.grad(k);
      for (std::size_t i = 0; i < g.data.size(); ++i) d.data[i] += g.data[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return finish_op(std::move(out), {&a, &b}, [](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    Tensor& da = c.grad(0);
    Tensor& db = c.grad(1);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      da.data[i] += g.data[i];
      db.data[i] -= g.data[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return finish_op(std::move(out), {&a, &b}, [](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    const Tensor& av = c.in(0);
    const Tensor& bv = c.in(1);
    Tensor& da = c.grad(0);
    Tensor& db = c.grad(1);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      da.data[i] += g.data[i] * bv.data[i];
      db.data[i] += g.data[i] * av.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * s;
  return finish_op(std::move(out), {&x}, [s](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    Tensor& dx = c.grad(0);
    for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require(b.rank() == 1, "add_bias: bias must be rank 1");
  auto [rows, c] = rows_channels(x);
  require(b.shape[0] == c, "add_bias: channels " + std::to_string(c) + " vs bias " +
                               shape_str(b.shape));
  Tensor out(x.shape);
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) out.data[r * c + j] = x.data[r * c + j] + b.data[j];
  return finish_op(std::move(out), {&x, &b}, [rows = rows, c = c](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dx = ctx.grad(0);
    Tensor& db = ctx.grad(1);
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < c; ++j) {
        dx.data[r * c + j] += g.data[r * c + j];
        db.data[j] += g.data[r * c + j];
      }
  });
}

Tensor scale_channels(const Tensor& x, const Tensor& gma) {
  require(gma.rank() == 1, "scale_channels: gamma must be rank 1");
  auto [rows, c] = rows_channels(x);
  require(gma.shape[0] == c, "scale_channels: channels " + std::to_string(c) + " vs gamma " +
                                 shape_str(gma.shape));
  Tensor out(x.shape);
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) out.data[r * c + j] = x.data[r * c + j] * gma.data[j];
  return finish_op(std::move(out), {&x, &gma}, [rows = rows, c = c](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xv = ctx.in(0);
    const Tensor& gv = ctx.in(1);
    Tensor& dx = ctx.grad(0);
    Tensor& dg = ctx.grad(1);
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < c; ++j) {
        dx.data[r * c + j] += g.data[r * c + j] * gv.data[j];
        dg.data[j] += g.data[r * c + j] * xv.data[r * c + j];
      }
  });
}

// ---- linear algebra --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: expected rank-2 tensors, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
  require(a.shape[1] == b.shape[0],
          "matmul: inner extents disagree, " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n});
  CMapMat A(a.data.data(), m, k), B(b.data.data(), k, n);
  MapMat(out.data.data(), m, n).noalias() = A * B;
  return finish_op(std::move(out), {&a, &b}, [m, k, n](BackwardCtx& c) {
    CMapMat G(c.out_grad().data.data(), m, n);
    CMapMat A(c.in(0).data.data(), m, k);
    CMapMat B(c.in(1).data.data(), k, n);
    MapMat(c.grad(0).data.data(), m, k).noalias() += G * B.transpose();
    MapMat(c.grad(1).data.data(), k, n).noalias() += A.transpose() * G;
  });
}

Tensor transpose2d(const Tensor& x) {
  require(x.rank() == 2, "transpose2d: expected rank 2, got " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out(j, i) = x(i, j);
  return finish_op(std::move(out), {&x}, [m, n](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    Tensor& dx = c.grad(0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dx.data[static_cast<std::size_t>(i) * n + j] += g(j, i);
  });
}

Tensor reshape(const Tensor& x, std::vector<int> s) {
  require(shape_numel(s) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
  Tensor out(std::move(s), x.data);
  return finish_op(std::move(out), {&x}, [](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    Tensor& dx = c.grad(0);
    for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
  });
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_cols: empty input list");
  const int rows = xs[0].shape[0];
  int total = 0;
  std::vector<int> widths;
  for (const Tensor& t : xs) {
    require(t.rank() == 2 && t.shape[0] == rows, "concat_cols: inputs must be rank 2 with equal rows");
    widths.push_back(t.shape[1]);
    total += t.shape[1];
  }
  Tensor out({rows, total});
  int col = 0;
  for (const Tensor& t : xs) {
    const int w = t.shape[1];
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < w; ++j) out(r, col + j) = t(r, j);
    col += w;
  }
  // finish_op takes an initializer_list; variable arity goes through the
  // graph directly.
  Graph* g = nullptr;
  for (const Tensor& t : xs) {
    if (!t.attached()) continue;
    require(!g || g == t.graph, "concat_cols: inputs on different graphs");
    g = t.graph;
  }
  if (!g) return out;
  std::vector<int> nodes;
  for (const Tensor& t : xs) nodes.push_back(detail::node_on(*g, t));
  return g->record(std::move(out), std::move(nodes),
                   [rows, widths, total](BackwardCtx& c) {
                     const Tensor& go = c.out_grad();
                     int col = 0;
                     for (std::size_t k = 0; k < widths.size(); ++k) {
                       Tensor& d = c.grad(static_cast<int>(k));
                       const int w = widths[k];
                       for (int r = 0; r < rows; ++r)
                         for (int j = 0; j < w; ++j)
                           d.data[static_cast<std::size_t>(r) * w + j] +=
                               go.data[static_cast<std::size_t>(r) * total + col + j];
                       col += w;
                     }
                   });
}

Tensor stack0(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "stack0: empty input list");
  for (const Tensor& t : xs)
    require(t.same_shape(xs[0]), "stack0: all inputs must share one shape");
  std::vector<int> s;
  s.push_back(static_cast<int>(xs.size()));
  s.insert(s.end(), xs[0].shape.begin(), xs[0].shape.end());
  const std::int64_t slice = xs[0].numel();
  Tensor out(std::move(s));
  for (std::size_t k = 0; k < xs.size(); ++k)
    std::copy(xs[k].data.begin(), xs[k].data.end(), out.data.begin() + k * slice);
  Graph* g = nullptr;
  for (const Tensor& t : xs) {
    if (!t.attached()) continue;
    require(!g || g == t.graph, "stack0: inputs on different graphs");
    g = t.graph;
  }
  if (!g) return out;
  std::vector<int> nodes;
  for (const Tensor& t : xs) nodes.push_back(detail::node_on(*g, t));
  return g->record(std::move(out), std::move(nodes), [slice](BackwardCtx& c) {
    const Tensor& go = c.out_grad();
    for (int k = 0; k < c.num_inputs(); ++k) {
      Tensor& d = c.grad(k);
      for (std::int64_t i = 0; i < slice; ++i) d.data[i] += go.data[k * slice + i];
    }
  });
}

Tensor mean_axis0(const Tensor& x) {
  require(x.rank() >= 2, "mean_axis0: expected rank >= 2, got " + shape_str(x.shape));
  const int k = x.shape[0];
  std::vector<int> s(x.shape.begin() + 1, x.shape.end());
  const std::int64_t slice = shape_numel(s);
  Tensor out(std::move(s));
  for (int j = 0; j < k; ++j)
    for (std::int64_t i = 0; i < slice; ++i) out.data[i] += x.data[j * slice + i];
  for (std::int64_t i = 0; i < slice; ++i) out.data[i] /= k;
  return finish_op(std::move(out), {&x}, [k, slice](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    Tensor& dx = c.grad(0);
    for (int j = 0; j < k; ++j)
      for (std::int64_t i = 0; i < slice; ++i) dx.data[j * slice + i] += g.data[i] / k;
  });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(std::accumulate(x.data.begin(), x.data.end(), 0.0));
  return finish_op(std::move(out), {&x}, [](BackwardCtx& c) {
    const double g = c.out_grad().data[0];
    Tensor& dx = c.grad(0);
    for (double& v : dx.data) v += g;
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(std::accumulate(x.data.begin(), x.data.end(), 0.0) / n);
  return finish_op(std::move(out), {&x}, [n](BackwardCtx& c) {
    const double g = c.out_grad().data[0] / n;
    Tensor& dx = c.grad(0);
    for (double& v : dx.data) v += g;
  });
}

// ---- nonlinearities / normalization -----------------------------------

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(),
          "softmax: axis out of range for shape " + shape_str(x.shape));
  const int n = x.shape[axis];
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];

  Tensor out(x.shape);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < inner; ++j) {
      const std::int64_t base = o * n * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) mx = std::max(mx, x.data[base + i * inner]);
      double z = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(x.data[base + i * inner] - mx);
        out.data[base + i * inner] = e;
        z += e;
      }
      for (int i = 0; i < n; ++i) out.data[base + i * inner] /= z;
    }
  return finish_op(std::move(out), {&x}, [n, outer, inner](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    const Tensor& y = c.out_value();
    Tensor& dx = c.grad(0);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j < inner; ++j) {
        const std::int64_t base = o * n * inner + j;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += g.data[base + i * inner] * y.data[base + i * inner];
        for (int i = 0; i < n; ++i)
          dx.data[base + i * inner] += y.data[base + i * inner] * (g.data[base + i * inner] - dot);
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto [rows, c] = rows_channels(x);
  require(gamma.rank() == 1 && gamma.shape[0] == c && beta.same_shape(gamma),
          "layer_norm: gamma/beta must be rank 1 of extent " + std::to_string(c));
  Tensor out(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = &x.data[r * c];
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j)
      out.data[r * c + j] = gamma.data[j] * (xr[j] - mu) * inv + beta.data[j];
  }
  return finish_op(std::move(out), {&x, &gamma, &beta},
                   [rows = rows, c = c, eps](BackwardCtx& ctx) {
                     const Tensor& g = ctx.out_grad();
                     const Tensor& xv = ctx.in(0);
                     const Tensor& gam = ctx.in(1);
                     Tensor& dx = ctx.grad(0);
                     Tensor& dgam = ctx.grad(1);
                     Tensor& dbet = ctx.grad(2);
                     for (std::int64_t r = 0; r < rows; ++r) {
                       const double* xr = &xv.data[r * c];
                       const double* gr = &g.data[r * c];
                       double mu = 0.0;
                       for (int j = 0; j < c; ++j) mu += xr[j];
                       mu /= c;
                       double var = 0.0;
                       for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                       var /= c;
                       const double inv = 1.0 / std::sqrt(var + eps);
                       double m1 = 0.0, m2 = 0.0;  // means of gamma*g and gamma*g*xhat
                       for (int j = 0; j < c; ++j) {
                         const double xh = (xr[j] - mu) * inv;
                         const double gg = gam.data[j] * gr[j];
                         m1 += gg;
                         m2 += gg * xh;
                         dgam.data[j] += gr[j] * xh;
                         dbet.data[j] += gr[j];
                       }
                       m1 /= c;
                       m2 /= c;
                       for (int j = 0; j < c; ++j) {
                         const double xh = (xr[j] - mu) * inv;
                         dx.data[r * c + j] += (gam.data[j] * gr[j] - m1 - xh * m2) * inv;
                       }
                     }
                   });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    out.data[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
  }
  return finish_op(std::move(out), {&x}, [](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    const Tensor& xv = c.in(0);
    Tensor& dx = c.grad(0);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double v = xv.data[i];
      const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      dx.data[i] += g.data[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

// ---- spatial ----------------------------------------------------------

Tensor avg_pool2d(const Tensor& x, int k, int stride) {
  require(x.rank() == 3, "avg_pool2d: expected [h x w x c], got " + shape_str(x.shape));
  const int h = x.shape[0], w = x.shape[1], c = x.shape[2];
  require(k > 0 && stride > 0 && h >= k && w >= k && (h - k) % stride == 0 && (w - k) % stride == 0,
          "avg_pool2d: geometry " + shape_str(x.shape) + " does not divide evenly for k=" +
              std::to_string(k) + " stride=" + std::to_string(stride));
  const int oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out({oh, ow, c});
  const double norm = 1.0 / (k * k);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          for (int ch = 0; ch < c; ++ch)
            out(oy, ox, ch) += x(oy * stride + dy, ox * stride + dx, ch) * norm;
  return finish_op(std::move(out), {&x}, [h, w, c, k, stride, oh, ow, norm](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dx = ctx.grad(0);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int dy = 0; dy < k; ++dy)
          for (int dxx = 0; dxx < k; ++dxx)
            for (int ch = 0; ch < c; ++ch)
              dx.data[(static_cast<std::size_t>(oy * stride + dy) * w + (ox * stride + dxx)) * c + ch] +=
                  g.data[(static_cast<std::size_t>(oy) * ow + ox) * c + ch] * norm;
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
  require(x.rank() == 3, "conv2d: expected input [h x w x cin], got " + shape_str(x.shape));
  require(kernel.rank() == 4, "conv2d: expected kernel [kh x kw x cin x cout], got " + shape_str(kernel.shape));
  const int h = x.shape[0], w = x.shape[1], cin = x.shape[2];
  const int kh = kernel.shape[0], kw = kernel.shape[1], cout = kernel.shape[3];
  require(kernel.shape[2] == cin, "conv2d: kernel cin " + std::to_string(kernel.shape[2]) +
                                      " vs input cin " + std::to_string(cin));
  require(bias.rank() == 1 && bias.shape[0] == cout, "conv2d: bias must be [cout]");
  require(h + 2 * pad >= kh && w + 2 * pad >= kw && (h + 2 * pad - kh) % stride == 0 &&
              (w + 2 * pad - kw) % stride == 0,
          "conv2d: geometry " + shape_str(x.shape) + " does not divide evenly for kernel " +
              shape_str(kernel.shape) + " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad));
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      for (int co = 0; co < cout; ++co) out(oy, ox, co) = bias.data[co];
      for (int dy = 0; dy < kh; ++dy) {
        const int y = oy * stride + dy - pad;
        if (y < 0 || y >= h) continue;
        for (int dx = 0; dx < kw; ++dx) {
          const int xx = ox * stride + dx - pad;
          if (xx < 0 || xx >= w) continue;
          for (int ci = 0; ci < cin; ++ci) {
            const double v = x(y, xx, ci);
            for (int co = 0; co < cout; ++co) out(oy, ox, co) += v * kernel(dy, dx, ci, co);
          }
        }
      }
    }
  return finish_op(std::move(out), {&x, &kernel, &bias},
                   [h, w, cin, kh, kw, cout, stride, pad, oh, ow](BackwardCtx& ctx) {
                     const Tensor& g = ctx.out_grad();
                     const Tensor& xv = ctx.in(0);
                     const Tensor& kv = ctx.in(1);
                     Tensor& dx = ctx.grad(0);
                     Tensor& dk = ctx.grad(1);
                     Tensor& db = ctx.grad(2);
                     for (int oy = 0; oy < oh; ++oy)
                       for (int ox = 0; ox < ow; ++ox) {
                         const double* go = &g.data[(static_cast<std::size_t>(oy) * ow + ox) * cout];
                         for (int co = 0; co < cout; ++co) db.data[co] += go[co];
                         for (int dy = 0; dy < kh; ++dy) {
                           const int y = oy * stride + dy - pad;
                           if (y < 0 || y >= h) continue;
                           for (int dxx = 0; dxx < kw; ++dxx) {
                             const int xx = ox * stride + dxx - pad;
                             if (xx < 0 || xx >= w) continue;
                             for (int ci = 0; ci < cin; ++ci) {
                               const std::size_t xi = (static_cast<std::size_t>(y) * w + xx) * cin + ci;
                               const std::size_t ki = ((static_cast<std::size_t>(dy) * kw + dxx) * cin + ci) * cout;
                               double acc = 0.0;
                               for (int co = 0; co < cout; ++co) {
                                 acc += go[co] * kv.data[ki + co];
                                 dk.data[ki + co] += go[co] * xv.data[xi];
                               }
                               dx.data[xi] += acc;
                             }
                           }
                         }
                       }
                   });
}

namespace {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1-w1
};

LerpAxis lerp_axis(int in, int out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    a.i0[o] = lo;
    a.i1[o] = std::min(lo + 1, in - 1);
    a.w1[o] = src - lo;
  }
  return a;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  require(x.rank() == 3, "bilinear_resize: expected [h x w x c], got " + shape_str(x.shape));
  require(out_h > 0 && out_w > 0, "bilinear_resize: target dims must be positive");
  const int h = x.shape[0], w = x.shape[1], c = x.shape[2];
  const LerpAxis ay = lerp_axis(h, out_h), ax = lerp_axis(w, out_w);
  Tensor out({out_h, out_w, c});
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox) {
      const double wy = ay.w1[oy], wx = ax.w1[ox];
      for (int ch = 0; ch < c; ++ch)
        out(oy, ox, ch) = (1 - wy) * (1 - wx) * x(ay.i0[oy], ax.i0[ox], ch) +
                          (1 - wy) * wx * x(ay.i0[oy], ax.i1[ox], ch) +
                          wy * (1 - wx) * x(ay.i1[oy], ax.i0[ox], ch) +
                          wy * wx * x(ay.i1[oy], ax.i1[ox], ch);
    }
  return finish_op(std::move(out), {&x}, [w, c, out_h, out_w, ay, ax](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dx = ctx.grad(0);
    auto at = [&](int y, int xx, int ch) -> double& {
      return dx.data[(static_cast<std::size_t>(y) * w + xx) * c + ch];
    };
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const double wy = ay.w1[oy], wx = ax.w1[ox];
        for (int ch = 0; ch < c; ++ch) {
          const double gv = g.data[(static_cast<std::size_t>(oy) * out_w + ox) * c + ch];
          at(ay.i0[oy], ax.i0[ox], ch) += (1 - wy) * (1 - wx) * gv;
          at(ay.i0[oy], ax.i1[ox], ch) += (1 - wy) * wx * gv;
          at(ay.i1[oy], ax.i0[ox], ch) += wy * (1 - wx) * gv;
          at(ay.i1[oy], ax.i1[ox], ch) += wy * wx * gv;
        }
      }
  });
}

// ---- segment / gather machinery ---------------------------------------

Tensor pair_dot(const Tensor& a, const Tensor& b, IndexArray ai, IndexArray bi, double s) {
  require(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[1],
          "pair_dot: expected [na x d], [nb x d], got " + shape_str(a.shape) + " and " +
              shape_str(b.shape));
  require(ai && bi && ai->size() == bi->size(), "pair_dot: index arrays must match in length");
  const int d = a.shape[1];
  const int m = static_cast<int>(ai->size());
  Tensor out({m});
  for (int j = 0; j < m; ++j) {
    const double* ar = &a.data[static_cast<std::size_t>((*ai)[j]) * d];
    const double* br = &b.data[static_cast<std::size_t>((*bi)[j]) * d];
    double acc = 0.0;
    for (int t = 0; t < d; ++t) acc += ar[t] * br[t];
    out.data[j] = acc * s;
  }
  return finish_op(std::move(out), {&a, &b}, [ai, bi, d, m, s](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    const Tensor& av = c.in(0);
    const Tensor& bv = c.in(1);
    Tensor& da = c.grad(0);
    Tensor& db = c.grad(1);
    for (int j = 0; j < m; ++j) {
      const double gj = g.data[j] * s;
      const std::size_t ao = static_cast<std::size_t>((*ai)[j]) * d;
      const std::size_t bo = static_cast<std::size_t>((*bi)[j]) * d;
      for (int t = 0; t < d; ++t) {
        da.data[ao + t] += gj * bv.data[bo + t];
        db.data[bo + t] += gj * av.data[ao + t];
      }
    }
  });
}

Tensor indexed_softmax(const Tensor& logits, IndexArray seg, int n_seg) {
  require(logits.rank() == 1, "indexed_softmax: expected rank-1 logits");
  require(seg && seg->size() == logits.data.size(), "indexed_softmax: segment ids must cover logits");
  const int m = static_cast<int>(logits.data.size());
  std::vector<double> mx(n_seg, -std::numeric_limits<double>::infinity());
  for (int j = 0; j < m; ++j) mx[(*seg)[j]] = std::max(mx[(*seg)[j]], logits.data[j]);
  Tensor out({m});
  std::vector<double> z(n_seg, 0.0);
  for (int j = 0; j < m; ++j) {
    out.data[j] = std::exp(logits.data[j] - mx[(*seg)[j]]);
    z[(*seg)[j]] += out.data[j];
  }
  for (int j = 0; j < m; ++j) out.data[j] /= z[(*seg)[j]];
  return finish_op(std::move(out), {&logits}, [seg, n_seg, m](BackwardCtx& c) {
    const Tensor& g = c.out_grad();
    const Tensor& y = c.out_value();
    Tensor& dx = c.grad(0);
    std::vector<double> dot(n_seg, 0.0);
    for (int j = 0; j < m; ++j) dot[(*seg)[j]] += g.data[j] * y.data[j];
    for (int j = 0; j < m; ++j) dx.data[j] += y.data[j] * (g.data[j] - dot[(*seg)[j]]);
  });
}

Tensor segment_weighted_rows(const Tensor& w, const Tensor& rows, IndexArray row_idx,
                             IndexArray seg, int n_seg) {
  require(w.rank() == 1 && rows.rank() == 2, "segment_weighted_rows: expected w[m], rows[n x c]");
  require(row_idx && seg && row_idx->size() == w.data.size() && seg->size() == w.data.size(),
          "segment_weighted_rows: index arrays must cover weights");
  const int m = static_cast<int>(w.data.size());
  const int c = rows.shape[1];
  Tensor out({n_seg, c});
  for (int j = 0; j < m; ++j) {
    const double wj = w.data[j];
    const double* src = &rows.data[static_cast<std::size_t>((*row_idx)[j]) * c];
    double* dst = &out.data[static_cast<std::size_t>((*seg)[j]) * c];
    for (int t = 0; t < c; ++t) dst[t] += wj * src[t];
  }
  return finish_op(std::move(out), {&w, &rows}, [row_idx, seg, m, c](BackwardCtx& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& wv = ctx.in(0);
    const Tensor& rv = ctx.in(1);
    Tensor& dw = ctx.grad(0);
    Tensor& dr = ctx.grad(1);
    for (int j = 0; j < m; ++j) {
      const double* go = &g.data[static_cast<std::size_t>((*seg)[j]) * c];
      const double* src = &rv.data[static_cast<std::size_t>((*row_idx)[j]) * c];
      double* drr = &dr.data[static_cast<std::size_t>((*row_idx)[j]) * c];
      double acc = 0.0;
      const double wj = wv.data[j];
      for (int t = 0; t < c; ++t) {
        acc += go[t] * src[t];
        drr[t] += wj * go[t];
      }
      dw.data[j] += acc;
    }
  });
}

// ---- losses ------------------------------------------------------------

Tensor softmax_cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2, "cross_entropy: expected [n x C] logits, got " + shape_str(logits.shape));
  const int n = logits.shape[0], cc = logits.shape[1];
  require(static_cast<int>(labels.size()) == n, "cross_entropy: label count mismatch");
  for (int l : labels)
    require(l >= 0 && l < cc,
            "cross_entropy: label id " + std::to_string(l) + " >= class count " + std::to_string(cc));
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* xr = &logits.data[static_cast<std::size_t>(r) * cc];
    double mx = xr[0];
    for (int j = 1; j < cc; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (int j = 0; j < cc; ++j) z += std::exp(xr[j] - mx);
    total += mx + std::log(z) - xr[labels[r]];
  }
  Tensor out = Tensor::scalar(total / n);
  auto lab = std::make_shared<const std::vector<int>>(labels);
  return finish_op(std::move(out), {&logits}, [lab, n, cc](BackwardCtx& c) {
    const double g = c.out_grad().data[0] / n;
    const Tensor& xv = c.in(0);
    Tensor& dx = c.grad(0);
    for (int r = 0; r < n; ++r) {
      const double* xr = &xv.data[static_cast<std::size_t>(r) * cc];
      double mx = xr[0];
      for (int j = 1; j < cc; ++j) mx = std::max(mx, xr[j]);
      double z = 0.0;
      for (int j = 0; j < cc; ++j) z += std::exp(xr[j] - mx);
      for (int j = 0; j < cc; ++j) {
        const double p = std::exp(xr[j] - mx) / z;
        dx.data[static_cast<std::size_t>(r) * cc + j] += g * (p - (j == (*lab)[r] ? 1.0 : 0.0));
      }
    }
  });
}

// ---- gradient checking ---------------------------------------------------

namespace {

double check_err(double analytic, double numeric) {
  return std::fabs(analytic - numeric) /
         std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
}

}  // namespace

double finite_diff_gradcheck(const std::function<Tensor(Graph&, const Tensor&)>& f,
                             const Tensor& x, double h) {
  Graph g;
  Tensor xa = g.leaf(x);
  Tensor y = f(g, xa);
  if (y.numel() != 1) throw std::invalid_argument("gradcheck: f must be scalar-valued");
  g.backward(y);
  const Tensor ga = g.grad_of(xa);

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    Tensor xp = x.detached();
    xp.data[i] += h;
    Graph gp;
    const double fp = f(gp, gp.leaf(xp)).data[0];
    xp.data[i] -= 2 * h;
    Graph gm;
    const double fm = f(gm, gm.leaf(xp)).data[0];
    max_err = std::max(max_err, check_err(ga.data[i], (fp - fm) / (2 * h)));
  }
  return max_err;
}

double param_gradcheck(const std::function<Tensor(Graph&)>& forward,
                       const std::vector<Parameter*>& params, double h,
                       int coords_per_param, std::uint64_t seed) {
  for (Parameter* p : params) p->zero_grad();
  Graph g;
  Tensor loss = forward(g);
  if (loss.numel() != 1) throw std::invalid_argument("param_gradcheck: loss must be scalar");
  g.backward(loss);
  g.write_param_grads();

  Rng rng(seed);
  double max_err = 0.0;
  for (Parameter* p : params) {
    const std::int64_t n = p->value.numel();
    std::vector<std::int64_t> coords;
    if (coords_per_param < 0 || n <= coords_per_param) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (int k = 0; k < coords_per_param; ++k) coords.push_back(rng.range(0, n - 1));
    }
    for (std::int64_t i : coords) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + h;
      Graph gp;
      const double fp = forward(gp).data[0];
      p->value.data[i] = orig - h;
      Graph gm;
      const double fm = forward(gm).data[0];
      p->value.data[i] = orig;
      max_err = std::max(max_err, check_err(p->grad.data[i], (fp - fm) / (2 * h)));
    }
  }
  return max_err;
}

// ---- init -----------------------------------------------------------------

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (double& v : t.data) v = rng.uniform(lo, hi);
}

void fill_trunc_normal(Tensor& t, Rng& rng, double std_dev) {
  for (double& v : t.data) v = rng.truncated_normal(std_dev);
}

}  // namespace hiseg
