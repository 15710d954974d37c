#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hiseg/rng.hpp"
#include "hiseg/tensor.hpp"

namespace hiseg {

// Shared immutable index list, so segment/gather ops can be recorded on a
// graph without copying index arrays into every closure.
using IndexArray = std::shared_ptr<const std::vector<int>>;
IndexArray make_indices(std::vector<int> v);

// ---- elementwise -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

// x[... x c] + b[c], broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& b);

// x[... x c] * g[c] per channel (LayerScale-style residual gating).
Tensor scale_channels(const Tensor& x, const Tensor& g);

// ---- linear algebra --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> s);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor stack0(const std::vector<Tensor>& xs);
Tensor mean_axis0(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- nonlinearities / normalization -----------------------------------

// Numerically stabilized by max subtraction; axis may be negative.
Tensor softmax(const Tensor& x, int axis = -1);

// Normalizes the last axis to mean 0 / variance 1, then applies the
// per-channel affine gamma, beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor gelu(const Tensor& x);

// ---- spatial ----------------------------------------------------------

// x[h x w x c], mean over k x k windows; (h - k) and (w - k) must divide
// evenly by the stride.
Tensor avg_pool2d(const Tensor& x, int k, int stride);

// Cross-correlation of x[h x w x cin] with kernel[kh x kw x cin x cout]
// plus bias[cout]; zero padding. Geometry must divide evenly.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad);

// align_corners = false interpolation of x[h x w x c].
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// ---- segment / gather machinery ---------------------------------------
//
// These three ops carry all sparse attention in the hierarchy: logits over
// (superpixel, pixel) pairs, softmax within arbitrary segments, and
// weighted gathers of rows back into segment slots.

// out[j] = scale * dot(a[ai[j]], b[bi[j]]) over the last axis of the rank-2
// inputs a[na x d], b[nb x d].
Tensor pair_dot(const Tensor& a, const Tensor& b, IndexArray ai, IndexArray bi, double scale);

// Softmax of logits[m] within segments given by seg[m] (values < n_seg;
// segments need not be contiguous).
Tensor indexed_softmax(const Tensor& logits, IndexArray seg, int n_seg);

// out[n_seg x c] with out[seg[j]] += w[j] * rows[row_idx[j]].
Tensor segment_weighted_rows(const Tensor& w, const Tensor& rows, IndexArray row_idx,
                             IndexArray seg, int n_seg);

// ---- losses ------------------------------------------------------------

// Mean over rows of -log softmax(logits)[label]; labels in [0, C).
Tensor softmax_cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

// ---- gradient checking ---------------------------------------------------

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h against the tape
// gradient; returns the max error |a-n| / max(1, |a|, |n|).
double finite_diff_gradcheck(const std::function<Tensor(Graph&, const Tensor&)>& f,
                             const Tensor& x, double h = 1e-5);

// Same check applied to model parameters. coords_per_param < 0 checks every
// coordinate; otherwise that many per tensor, sampled by seed.
double param_gradcheck(const std::function<Tensor(Graph&)>& forward,
                       const std::vector<Parameter*>& params, double h = 1e-5,
                       int coords_per_param = -1, std::uint64_t seed = 1);

// ---- init -----------------------------------------------------------------

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi);
void fill_trunc_normal(Tensor& t, Rng& rng, double std_dev);

}  // namespace hiseg
