#include "hiseg/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace hiseg {

Tensor attach(const Tensor& like, Parameter& p) {
  return like.graph ? like.graph->param(p) : p.value.detached();
}

LinearParams LinearParams::init(const std::string& name, int in, int out, Rng& rng,
                                double std_dev) {
  LinearParams p;
  Tensor w({in, out});
  fill_trunc_normal(w, rng, std_dev);
  p.W = Parameter(name + ".W", std::move(w));
  p.b = Parameter(name + ".b", Tensor::zeros({out}));
  return p;
}

void LinearParams::collect(std::vector<Parameter*>& out) {
  out.push_back(&W);
  out.push_back(&b);
}

LayerNormParams LayerNormParams::init(const std::string& name, int c) {
  LayerNormParams p;
  p.gamma = Parameter(name + ".gamma", Tensor::ones({c}));
  p.beta = Parameter(name + ".beta", Tensor::zeros({c}));
  return p;
}

void LayerNormParams::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

LayerScaleParams LayerScaleParams::init(const std::string& name, int c) {
  LayerScaleParams p;
  p.gamma = Parameter(name + ".gamma", Tensor::full({c}, 1e-4));
  return p;
}

void LayerScaleParams::collect(std::vector<Parameter*>& out) { out.push_back(&gamma); }

HeadProj HeadProj::init(const std::string& name, int c_q, int c_kv, int d, Rng& rng) {
  HeadProj p;
  p.q = LinearParams::init(name + ".q", c_q, d, rng);
  p.k = LinearParams::init(name + ".k", c_kv, d, rng);
  p.v = LinearParams::init(name + ".v", c_kv, d, rng);
  return p;
}

void HeadProj::collect(std::vector<Parameter*>& out) {
  q.collect(out);
  k.collect(out);
  v.collect(out);
}

MhsaParams MhsaParams::init(const std::string& name, int c_q, int c_kv, int n_heads, Rng& rng) {
  if (c_q % n_heads != 0)
    throw std::invalid_argument(name + ": channel dim " + std::to_string(c_q) +
                                " not divisible by " + std::to_string(n_heads) + " heads");
  MhsaParams p;
  p.head_dim = c_q / n_heads;
  for (int h = 0; h < n_heads; ++h)
    p.heads.push_back(HeadProj::init(name + ".h" + std::to_string(h), c_q, c_kv, p.head_dim, rng));
  p.out_proj = LinearParams::init(name + ".out", c_q, c_q, rng);
  return p;
}

void MhsaParams::collect(std::vector<Parameter*>& out) {
  for (auto& h : heads) h.collect(out);
  out_proj.collect(out);
}

FfnParams FfnParams::init(const std::string& name, int c, int ratio, Rng& rng) {
  FfnParams p;
  p.fc1 = LinearParams::init(name + ".fc1", c, c * ratio, rng);
  p.fc2 = LinearParams::init(name + ".fc2", c * ratio, c, rng);
  return p;
}

void FfnParams::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

ViTBlockParams ViTBlockParams::init(const std::string& name, int c, int n_heads, int ffn_ratio,
                                    Rng& rng) {
  ViTBlockParams p;
  p.ln1 = LayerNormParams::init(name + ".ln1", c);
  p.ln2 = LayerNormParams::init(name + ".ln2", c);
  p.attn = MhsaParams::init(name + ".attn", c, c, n_heads, rng);
  p.ffn = FfnParams::init(name + ".ffn", c, ffn_ratio, rng);
  p.ls1 = LayerScaleParams::init(name + ".ls1", c);
  p.ls2 = LayerScaleParams::init(name + ".ls2", c);
  return p;
}

void ViTBlockParams::collect(std::vector<Parameter*>& out) {
  ln1.collect(out);
  ln2.collect(out);
  attn.collect(out);
  ffn.collect(out);
  ls1.collect(out);
  ls2.collect(out);
}

Tensor apply_ln(const Tensor& x, LayerNormParams& p, double eps) {
  return layer_norm(x, attach(x, p.gamma), attach(x, p.beta), eps);
}

Tensor linear(const Tensor& x, LinearParams& p) {
  if (x.rank() != 2 || x.shape[1] != p.W.value.shape[0])
    throw std::invalid_argument("linear: input " + shape_str(x.shape) + " vs weight " +
                                shape_str(p.W.value.shape));
  return add_bias(matmul(x, attach(x, p.W)), attach(x, p.b));
}

AttentionResult cross_attention(const Tensor& q_tokens, const Tensor& kv_tokens, MhsaParams& p) {
  if (q_tokens.rank() != 2 || kv_tokens.rank() != 2)
    throw std::invalid_argument("cross_attention: expected rank-2 token matrices");
  if (q_tokens.shape[1] != p.heads[0].q.W.value.shape[0] ||
      kv_tokens.shape[1] != p.heads[0].k.W.value.shape[0])
    throw std::invalid_argument("cross_attention: channel dims " + shape_str(q_tokens.shape) +
                                ", " + shape_str(kv_tokens.shape) + " do not match projections");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.head_dim));
  std::vector<Tensor> head_outs, head_weights;
  for (auto& head : p.heads) {
    Tensor q = linear(q_tokens, head.q);
    Tensor k = linear(kv_tokens, head.k);
    Tensor v = linear(kv_tokens, head.v);
    Tensor w = softmax(scale(matmul(q, transpose2d(k)), inv_sqrt_d), -1);
    head_weights.push_back(w);
    head_outs.push_back(matmul(w, v));
  }
  AttentionResult r;
  r.out = linear(concat_cols(head_outs), p.out_proj);
  r.weights = stack0(head_weights);
  return r;
}

Tensor mhsa(const Tensor& x, MhsaParams& p) { return cross_attention(x, x, p).out; }

Tensor ffn(const Tensor& x, FfnParams& p) { return linear(gelu(linear(x, p.fc1)), p.fc2); }

Tensor vit_block(const Tensor& x, ViTBlockParams& p) {
  Tensor x1 = add(x, scale_channels(mhsa(apply_ln(x, p.ln1), p.attn), attach(x, p.ls1.gamma)));
  return add(x1, scale_channels(ffn(apply_ln(x1, p.ln2), p.ffn), attach(x1, p.ls2.gamma)));
}

}  // namespace hiseg
