#include "hiseg/assoc.hpp"

#include <stdexcept>

namespace hiseg {

AssocPixSp pix_sp_assoc(const Tensor& sca_logits, const CandidateMap& cm) {
  if (sca_logits.rank() != 2 || sca_logits.shape[1] != cm.n_pairs())
    throw std::invalid_argument("pix_sp_assoc: logits " + shape_str(sca_logits.shape) +
                                " do not cover " + std::to_string(cm.n_pairs()) + " pairs");
  AssocPixSp a;
  a.cmap = &cm;
  a.weights = indexed_softmax(mean_axis0(sca_logits), cm.pair_px, cm.n_pixels());
  return a;
}

AssocSpGroup sp_group_assoc(const Tensor& g2s_weights, int s_h, int s_w) {
  if (g2s_weights.rank() != 3 || g2s_weights.shape[1] != s_h * s_w)
    throw std::invalid_argument("sp_group_assoc: weights " + shape_str(g2s_weights.shape) +
                                " do not match grid " + std::to_string(s_h) + "x" +
                                std::to_string(s_w));
  AssocSpGroup a;
  a.weights = mean_axis0(g2s_weights);
  a.s_h = s_h;
  a.s_w = s_w;
  return a;
}

Tensor upsample_group_to_sp(const Tensor& group_vals, const AssocSpGroup& a) {
  if (group_vals.rank() != 2 || group_vals.shape[0] != a.weights.shape[1])
    throw std::invalid_argument("upsample_group_to_sp: values " + shape_str(group_vals.shape) +
                                " vs association " + shape_str(a.weights.shape));
  Tensor flat = matmul(a.weights, group_vals);
  return reshape(flat, {a.s_h, a.s_w, flat.shape[1]});
}

Tensor upsample_sp_to_pix(const Tensor& sp_grid_vals, const AssocPixSp& a) {
  const CandidateMap& cm = *a.cmap;
  if (sp_grid_vals.rank() != 3 || sp_grid_vals.shape[0] != cm.s_h ||
      sp_grid_vals.shape[1] != cm.s_w)
    throw std::invalid_argument("upsample_sp_to_pix: values " + shape_str(sp_grid_vals.shape) +
                                " vs superpixel grid " + std::to_string(cm.s_h) + "x" +
                                std::to_string(cm.s_w));
  const int c = sp_grid_vals.shape[2];
  Tensor flat = reshape(sp_grid_vals, {cm.n_superpixels(), c});
  Tensor out = segment_weighted_rows(a.weights, flat, cm.pair_sp, cm.pair_px, cm.n_pixels());
  return reshape(out, {cm.i_h, cm.i_w, c});
}

AssocPixSp onehot_parent_pix_sp(const CandidateMap& cm) {
  AssocPixSp a;
  a.cmap = &cm;
  a.weights = Tensor::zeros({cm.n_pairs()});
  for (int j = 0; j < cm.n_pairs(); ++j) {
    const int px = (*cm.pair_px)[j];
    const int cy = (px / cm.i_w) / 4, cx = (px % cm.i_w) / 4;
    if ((*cm.pair_sp)[j] == cy * cm.s_w + cx) a.weights.data[j] = 1.0;
  }
  return a;
}

AssocSpGroup onehot_parent_sp_group(int s_h, int s_w, int per_axis) {
  AssocSpGroup a;
  a.s_h = s_h;
  a.s_w = s_w;
  const int g_w = s_w / per_axis;
  a.weights = Tensor::zeros({s_h * s_w, (s_h / per_axis) * g_w});
  for (int sy = 0; sy < s_h; ++sy)
    for (int sx = 0; sx < s_w; ++sx)
      a.weights(sy * s_w + sx, (sy / per_axis) * g_w + sx / per_axis) = 1.0;
  return a;
}

}  // namespace hiseg
