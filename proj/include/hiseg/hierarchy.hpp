#pragma once

#include <string>
#include <vector>

#include "hiseg/blocks.hpp"
#include "hiseg/ops.hpp"
#include "hiseg/tensor.hpp"

namespace hiseg {

// Per-pixel candidate superpixels: the 3x3 cell window around the pixel's
// owning cell (stride 4), clipped at borders — or wrapped when torus is
// set, which test geometry uses for translation checks. The pair list is
// sorted by (superpixel, pixel) and is shared by the sparse attention in
// sca_block (segments over superpixels) and the pixel association softmax
// (segments over pixels).
struct CandidateMap {
  int i_h = 0, i_w = 0;  // pixel grid
  int s_h = 0, s_w = 0;  // superpixel grid (stride 4)
  bool torus = false;

  IndexArray pair_sp;  // superpixel index per pair
  IndexArray pair_px;  // pixel index per pair

  std::vector<int> px_offset;  // CSR over pixels into px_pair, size i_n + 1
  std::vector<int> px_pair;    // pair indices grouped by pixel, ascending

  int n_pairs() const { return static_cast<int>(pair_sp->size()); }
  int n_pixels() const { return i_h * i_w; }
  int n_superpixels() const { return s_h * s_w; }

  // Candidate superpixel ids of pixel (y, x), ascending.
  std::vector<int> candidates_of(int y, int x) const;
};

CandidateMap build_candidate_map(int i_h, int i_w, bool torus = false);

// Convolution stem: log2(stride) stages of pad-free stride-2 2x2 conv ->
// LN -> GELU (a single 1x1 stage when stride == 1). Pad-free patches keep
// constant inputs spatially constant.
struct ConvStemParams {
  struct Stage {
    Parameter kernel, bias;
    LayerNormParams ln;
  };
  std::vector<Stage> stages;
  int stride = 2;
  static ConvStemParams init(const std::string& name, int in_c, int out_c, int stride, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

// image [m_h x m_w x 3] -> pixel features [m_h/stride x m_w/stride x i_c].
Tensor conv_stem(const Tensor& image, ConvStemParams& p);

// 4x4 stride-4 average pooling of pixel features followed by a linear
// projection to the superpixel width.
Tensor superpixel_init(const Tensor& pix_grid, LinearParams& proj);

// Local aggregation: each superpixel attends over the pixels of its 3x3
// cell neighborhood and adds the head-concatenated result as a residual.
// No FFN and no output projection on this path.
struct ScaParams {
  LayerNormParams ln_s, ln_i;
  std::vector<HeadProj> heads;  // q: s_c -> d, k/v: i_c -> d, h*d == s_c
  int head_dim = 0;
  static ScaParams init(const std::string& name, int s_c, int i_c, int n_heads, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct ScaResult {
  Tensor s_out;   // [s_h x s_w x s_c]
  Tensor logits;  // [h x n_pairs], scaled pre-softmax scores
};

ScaResult sca_block(const Tensor& s_grid, const Tensor& pix_grid, const CandidateMap& cm,
                    ScaParams& p);

// Group token initialization from the superpixel grid.
struct GroupInitParams {
  bool learnable = false;
  LinearParams proj;        // applied after pooling when !learnable
  Parameter tokens;         // free tokens when learnable
  static GroupInitParams init(const std::string& name, int s_c, int g_n, bool learnable, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

// [s_h x s_w x s_c] -> [s_n/per_axis^2 x s_c] via per_axis pooling (+ proj);
// per_axis defaults to 4, i.e. one group per 16 superpixels.
Tensor group_init(const Tensor& s_grid, GroupInitParams& p, int per_axis = 4);

// One residual cross-attention update: q_in + ls * FFN(LN(CA(LN(q), LN(kv)))).
struct CrossUpdateParams {
  LayerNormParams ln_q, ln_kv, ln_ffn;
  MhsaParams attn;
  FfnParams ffn;
  LayerScaleParams ls;
  static CrossUpdateParams init(const std::string& name, int c, int n_heads, int ffn_ratio,
                                Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct GcaParams {
  CrossUpdateParams s2g;       // group queries over all superpixels
  ViTBlockParams group_block;  // self-attention among groups
  CrossUpdateParams g2s;       // superpixel queries over all groups
  static GcaParams init(const std::string& name, int c, int n_heads, int ffn_ratio, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct GcaResult {
  Tensor g_out;        // [g_n x g_c]
  Tensor s_out;        // [s_h x s_w x s_c]
  Tensor g2s_weights;  // [h x s_n x g_n]
};

GcaResult gca_stage(const Tensor& groups, const Tensor& s_grid, GcaParams& p);

}  // namespace hiseg
