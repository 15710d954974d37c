#pragma once

#include "hiseg/hierarchy.hpp"
#include "hiseg/ops.hpp"
#include "hiseg/tensor.hpp"

namespace hiseg {

// Row-stochastic pixel -> superpixel association, stored sparsely on the
// candidate pair list: weights[j] belongs to pair (pair_sp[j], pair_px[j])
// and each pixel's weights sum to 1.
struct AssocPixSp {
  const CandidateMap* cmap = nullptr;
  Tensor weights;  // [n_pairs]
};

// Dense row-stochastic superpixel -> group association.
struct AssocSpGroup {
  Tensor weights;  // [s_n x g_n]
  int s_h = 0, s_w = 0;
};

// Head-averaged sparse attention logits, softmaxed per pixel over its
// candidates.
AssocPixSp pix_sp_assoc(const Tensor& sca_logits, const CandidateMap& cm);

// Arithmetic mean over heads of already row-stochastic weight slices.
AssocSpGroup sp_group_assoc(const Tensor& g2s_weights, int s_h, int s_w);

// O_S = A * O_G reshaped to the superpixel grid.
Tensor upsample_group_to_sp(const Tensor& group_vals, const AssocSpGroup& a);

// O_I = sparse row-stochastic product, reshaped to the pixel grid.
Tensor upsample_sp_to_pix(const Tensor& sp_grid_vals, const AssocPixSp& a);

// Geometric one-hot associations (each pixel to its owning cell, each
// superpixel to its pooling parent); used by forward test hooks.
AssocPixSp onehot_parent_pix_sp(const CandidateMap& cm);
AssocSpGroup onehot_parent_sp_group(int s_h, int s_w, int per_axis = 4);

}  // namespace hiseg
