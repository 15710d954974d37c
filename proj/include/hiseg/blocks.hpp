#pragma once

#include <string>
#include <vector>

#include "hiseg/ops.hpp"
#include "hiseg/tensor.hpp"

namespace hiseg {

// Attaches p to the graph the reference tensor lives on; detached value in
// pure-eval forwards.
Tensor attach(const Tensor& like, Parameter& p);

struct LinearParams {
  Parameter W;  // [in x out]
  Parameter b;  // [out]
  static LinearParams init(const std::string& name, int in, int out, Rng& rng,
                           double std_dev = 0.02);
  void collect(std::vector<Parameter*>& out);
};

struct LayerNormParams {
  Parameter gamma, beta;
  static LayerNormParams init(const std::string& name, int c);
  void collect(std::vector<Parameter*>& out);
};

struct LayerScaleParams {
  Parameter gamma;  // per-channel residual gate, initialized to 1e-4
  static LayerScaleParams init(const std::string& name, int c);
  void collect(std::vector<Parameter*>& out);
};

// One attention head's projections; query side may differ in width from the
// key/value side (pixels vs superpixels).
struct HeadProj {
  LinearParams q, k, v;
  static HeadProj init(const std::string& name, int c_q, int c_kv, int d, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct MhsaParams {
  std::vector<HeadProj> heads;
  LinearParams out_proj;  // (h*d) -> c_q
  int head_dim = 0;
  static MhsaParams init(const std::string& name, int c_q, int c_kv, int n_heads, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct FfnParams {
  LinearParams fc1, fc2;
  static FfnParams init(const std::string& name, int c, int ratio, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

// Pre-LN residual block: x + ls1*MHSA(LN(x)), then + ls2*MLP(LN(.)).
struct ViTBlockParams {
  LayerNormParams ln1, ln2;
  MhsaParams attn;
  FfnParams ffn;
  LayerScaleParams ls1, ls2;
  static ViTBlockParams init(const std::string& name, int c, int n_heads, int ffn_ratio, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct AttentionResult {
  Tensor out;      // [n_q x c_q]
  Tensor weights;  // [h x n_q x n_kv], each (head, query) row sums to 1
};

Tensor apply_ln(const Tensor& x, LayerNormParams& p, double eps = 1e-6);

Tensor linear(const Tensor& x, LinearParams& p);

// Scaled dot-product cross-attention over all kv tokens. The per-head
// softmax weights are returned so callers can capture association matrices.
AttentionResult cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens, MhsaParams& p);

// Self-attention; cross_attention(x, x) with the weights discarded.
Tensor mhsa(const Tensor& x, MhsaParams& p);

Tensor ffn(const Tensor& x, FfnParams& p);

Tensor vit_block(const Tensor& x, ViTBlockParams& p);

}  // namespace hiseg
