#include "hiseg/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hiseg {

std::vector<int> CandidateMap::candidates_of(int y, int x) const {
  std::vector<int> out;
  const int px = y * i_w + x;
  for (int j = px_offset[px]; j < px_offset[px + 1]; ++j)
    out.push_back((*pair_sp)[px_pair[j]]);
  return out;
}

CandidateMap build_candidate_map(int i_h, int i_w, bool torus) {
  if (i_h % 4 != 0 || i_w % 4 != 0)
    throw std::invalid_argument("build_candidate_map: pixel dims " + std::to_string(i_h) + "x" +
                                std::to_string(i_w) + " must divide by 4");
  CandidateMap cm;
  cm.i_h = i_h;
  cm.i_w = i_w;
  cm.s_h = i_h / 4;
  cm.s_w = i_w / 4;
  cm.torus = torus;

  std::vector<int> sp_ids, px_ids;
  for (int cy = 0; cy < cm.s_h; ++cy)
    for (int cx = 0; cx < cm.s_w; ++cx) {
      const int sp = cy * cm.s_w + cx;
      std::vector<int> pixels;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int ny = cy + dy, nx = cx + dx;
          if (torus) {
            ny = (ny + cm.s_h) % cm.s_h;
            nx = (nx + cm.s_w) % cm.s_w;
          } else if (ny < 0 || ny >= cm.s_h || nx < 0 || nx >= cm.s_w) {
            continue;
          }
          for (int py = ny * 4; py < ny * 4 + 4; ++py)
            for (int px = nx * 4; px < nx * 4 + 4; ++px) pixels.push_back(py * i_w + px);
        }
      std::sort(pixels.begin(), pixels.end());
      pixels.erase(std::unique(pixels.begin(), pixels.end()), pixels.end());
      for (int px : pixels) {
        sp_ids.push_back(sp);
        px_ids.push_back(px);
      }
    }

  const int n_px = i_h * i_w;
  const int n_pairs = static_cast<int>(sp_ids.size());
  cm.px_offset.assign(n_px + 1, 0);
  for (int px : px_ids) cm.px_offset[px + 1]++;
  for (int i = 0; i < n_px; ++i) cm.px_offset[i + 1] += cm.px_offset[i];
  cm.px_pair.resize(n_pairs);
  std::vector<int> cursor(cm.px_offset.begin(), cm.px_offset.end() - 1);
  for (int j = 0; j < n_pairs; ++j) cm.px_pair[cursor[px_ids[j]]++] = j;

  cm.pair_sp = make_indices(std::move(sp_ids));
  cm.pair_px = make_indices(std::move(px_ids));
  return cm;
}

ConvStemParams ConvStemParams::init(const std::string& name, int in_c, int out_c, int stride,
                                    Rng& rng) {
  if (stride < 1 || (stride & (stride - 1)) != 0)
    throw std::invalid_argument("conv_stem: stride must be a power of two, got " +
                                std::to_string(stride));
  ConvStemParams p;
  p.stride = stride;
  int n_stages = 0;
  for (int s = stride; s > 1; s /= 2) ++n_stages;
  if (n_stages == 0) n_stages = 1;  // single stride-1 stage
  int c_in = in_c;
  for (int i = 0; i < n_stages; ++i) {
    Stage st;
    const int kh = stride == 1 ? 1 : 2;
    Tensor k({kh, kh, c_in, out_c});
    fill_trunc_normal(k, rng, 0.02);
    const std::string sname = name + ".s" + std::to_string(i);
    st.kernel = Parameter(sname + ".kernel", std::move(k));
    st.bias = Parameter(sname + ".bias", Tensor::zeros({out_c}));
    st.ln = LayerNormParams::init(sname + ".ln", out_c);
    p.stages.push_back(std::move(st));
    c_in = out_c;
  }
  return p;
}

void ConvStemParams::collect(std::vector<Parameter*>& out) {
  for (auto& st : stages) {
    out.push_back(&st.kernel);
    out.push_back(&st.bias);
    st.ln.collect(out);
  }
}

Tensor conv_stem(const Tensor& image, ConvStemParams& p) {
  if (image.rank() != 3)
    throw std::invalid_argument("conv_stem: expected [h x w x c] image, got " +
                                shape_str(image.shape));
  if (image.shape[0] % p.stride != 0 || image.shape[1] % p.stride != 0)
    throw std::invalid_argument("conv_stem: image " + shape_str(image.shape) +
                                " not divisible by stride " + std::to_string(p.stride));
  Tensor x = image;
  for (auto& st : p.stages) {
    const int s = p.stride == 1 ? 1 : 2;
    x = conv2d(x, attach(x, st.kernel), attach(x, st.bias), s, 0);
    const int h = x.shape[0], w = x.shape[1], c = x.shape[2];
    x = reshape(apply_ln(reshape(x, {h * w, c}), st.ln), {h, w, c});
    x = gelu(x);
  }
  return x;
}

Tensor superpixel_init(const Tensor& pix_grid, LinearParams& proj) {
  if (pix_grid.rank() != 3 || pix_grid.shape[0] % 4 != 0 || pix_grid.shape[1] % 4 != 0)
    throw std::invalid_argument("superpixel_init: pixel grid " + shape_str(pix_grid.shape) +
                                " must divide by 4");
  Tensor pooled = avg_pool2d(pix_grid, 4, 4);
  const int sh = pooled.shape[0], sw = pooled.shape[1], c = pooled.shape[2];
  Tensor flat = linear(reshape(pooled, {sh * sw, c}), proj);
  return reshape(flat, {sh, sw, flat.shape[1]});
}

ScaParams ScaParams::init(const std::string& name, int s_c, int i_c, int n_heads, Rng& rng) {
  if (s_c % n_heads != 0)
    throw std::invalid_argument(name + ": superpixel width " + std::to_string(s_c) +
                                " not divisible by " + std::to_string(n_heads) + " heads");
  ScaParams p;
  p.head_dim = s_c / n_heads;
  p.ln_s = LayerNormParams::init(name + ".ln_s", s_c);
  p.ln_i = LayerNormParams::init(name + ".ln_i", i_c);
  for (int h = 0; h < n_heads; ++h)
    p.heads.push_back(HeadProj::init(name + ".h" + std::to_string(h), s_c, i_c, p.head_dim, rng));
  return p;
}

void ScaParams::collect(std::vector<Parameter*>& out) {
  ln_s.collect(out);
  ln_i.collect(out);
  for (auto& h : heads) h.collect(out);
}

ScaResult sca_block(const Tensor& s_grid, const Tensor& pix_grid, const CandidateMap& cm,
                    ScaParams& p) {
  if (s_grid.rank() != 3 || pix_grid.rank() != 3 || s_grid.shape[0] != cm.s_h ||
      s_grid.shape[1] != cm.s_w || pix_grid.shape[0] != cm.i_h || pix_grid.shape[1] != cm.i_w)
    throw std::invalid_argument("sca_block: geometry mismatch, superpixels " +
                                shape_str(s_grid.shape) + ", pixels " + shape_str(pix_grid.shape) +
                                ", map " + std::to_string(cm.s_h) + "x" + std::to_string(cm.s_w) +
                                "/" + std::to_string(cm.i_h) + "x" + std::to_string(cm.i_w));
  const int s_n = cm.n_superpixels(), i_n = cm.n_pixels();
  const int s_c = s_grid.shape[2];
  Tensor s_flat = reshape(s_grid, {s_n, s_c});
  Tensor i_flat = reshape(pix_grid, {i_n, pix_grid.shape[2]});
  Tensor s_ln = apply_ln(s_flat, p.ln_s);
  Tensor i_ln = apply_ln(i_flat, p.ln_i);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.head_dim));
  std::vector<Tensor> head_outs, head_logits;
  for (auto& head : p.heads) {
    Tensor q = linear(s_ln, head.q);
    Tensor k = linear(i_ln, head.k);
    Tensor v = linear(i_ln, head.v);
    Tensor logits = pair_dot(q, k, cm.pair_sp, cm.pair_px, inv_sqrt_d);
    Tensor w = indexed_softmax(logits, cm.pair_sp, s_n);
    head_outs.push_back(segment_weighted_rows(w, v, cm.pair_px, cm.pair_sp, s_n));
    head_logits.push_back(logits);
  }
  ScaResult r;
  r.s_out = reshape(add(s_flat, concat_cols(head_outs)), s_grid.shape);
  r.logits = stack0(head_logits);
  return r;
}

GroupInitParams GroupInitParams::init(const std::string& name, int s_c, int g_n, bool learnable,
                                      Rng& rng) {
  GroupInitParams p;
  p.learnable = learnable;
  if (learnable) {
    Tensor t({g_n, s_c});
    fill_trunc_normal(t, rng, 0.02);
    p.tokens = Parameter(name + ".tokens", std::move(t));
  } else {
    p.proj = LinearParams::init(name + ".proj", s_c, s_c, rng);
  }
  return p;
}

void GroupInitParams::collect(std::vector<Parameter*>& out) {
  if (learnable)
    out.push_back(&tokens);
  else
    proj.collect(out);
}

Tensor group_init(const Tensor& s_grid, GroupInitParams& p, int per_axis) {
  if (s_grid.rank() != 3 || s_grid.shape[0] % per_axis != 0 || s_grid.shape[1] % per_axis != 0)
    throw std::invalid_argument("group_init: superpixel grid " + shape_str(s_grid.shape) +
                                " must divide by " + std::to_string(per_axis));
  if (p.learnable) return attach(s_grid, p.tokens);
  Tensor pooled = avg_pool2d(s_grid, per_axis, per_axis);
  const int gn = pooled.shape[0] * pooled.shape[1];
  return linear(reshape(pooled, {gn, pooled.shape[2]}), p.proj);
}

CrossUpdateParams CrossUpdateParams::init(const std::string& name, int c, int n_heads,
                                          int ffn_ratio, Rng& rng) {
  CrossUpdateParams p;
  p.ln_q = LayerNormParams::init(name + ".ln_q", c);
  p.ln_kv = LayerNormParams::init(name + ".ln_kv", c);
  p.ln_ffn = LayerNormParams::init(name + ".ln_ffn", c);
  p.attn = MhsaParams::init(name + ".attn", c, c, n_heads, rng);
  p.ffn = FfnParams::init(name + ".ffn", c, ffn_ratio, rng);
  p.ls = LayerScaleParams::init(name + ".ls", c);
  return p;
}

void CrossUpdateParams::collect(std::vector<Parameter*>& out) {
  ln_q.collect(out);
  ln_kv.collect(out);
  ln_ffn.collect(out);
  attn.collect(out);
  ffn.collect(out);
  ls.collect(out);
}

GcaParams GcaParams::init(const std::string& name, int c, int n_heads, int ffn_ratio, Rng& rng) {
  GcaParams p;
  p.s2g = CrossUpdateParams::init(name + ".s2g", c, n_heads, ffn_ratio, rng);
  p.group_block = ViTBlockParams::init(name + ".gblock", c, n_heads, ffn_ratio, rng);
  p.g2s = CrossUpdateParams::init(name + ".g2s", c, n_heads, ffn_ratio, rng);
  return p;
}

void GcaParams::collect(std::vector<Parameter*>& out) {
  s2g.collect(out);
  group_block.collect(out);
  g2s.collect(out);
}

namespace {

// q_in + ls * FFN(LN(CA(LN(q_in), LN(kv)))); returns the attention weights.
std::pair<Tensor, Tensor> cross_update(const Tensor& q_in, const Tensor& kv, CrossUpdateParams& p) {
  AttentionResult a = cross_attention(apply_ln(q_in, p.ln_q), apply_ln(kv, p.ln_kv), p.attn);
  Tensor branch = ffn(apply_ln(a.out, p.ln_ffn), p.ffn);
  Tensor out = add(q_in, scale_channels(branch, attach(q_in, p.ls.gamma)));
  return {out, a.weights};
}

}  // namespace

GcaResult gca_stage(const Tensor& groups, const Tensor& s_grid, GcaParams& p) {
  if (groups.rank() != 2 || s_grid.rank() != 3 || groups.shape[1] != s_grid.shape[2])
    throw std::invalid_argument("gca_stage: groups " + shape_str(groups.shape) +
                                " vs superpixels " + shape_str(s_grid.shape));
  const int s_n = s_grid.shape[0] * s_grid.shape[1];
  Tensor s_flat = reshape(s_grid, {s_n, s_grid.shape[2]});

  auto [g1, s2g_w] = cross_update(groups, s_flat, p.s2g);
  Tensor g2 = vit_block(g1, p.group_block);
  auto [s1, g2s_w] = cross_update(s_flat, g2, p.g2s);

  GcaResult r;
  r.g_out = g2;
  r.s_out = reshape(s1, s_grid.shape);
  r.g2s_weights = g2s_w;
  return r;
}

}  // namespace hiseg
