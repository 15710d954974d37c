#include "hiseg/evalkit.hpp"

#include <cmath>
#include <stdexcept>

namespace hiseg {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts) t += v;
  return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes)
    throw std::invalid_argument("confusion merge: class counts differ");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

void confusion_update(ConfusionMatrix& cm, const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("confusion_update: map sizes differ");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] >= cm.num_classes || pred[i] >= cm.num_classes)
      throw std::invalid_argument("confusion_update: label " +
                                  std::to_string(std::max(gt[i], pred[i])) + " >= class count " +
                                  std::to_string(cm.num_classes));
    cm.at(gt[i], pred[i])++;
  }
}

ClassMetrics miou_macc(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("miou_macc: empty confusion matrix");
  const int c = cm.num_classes;
  ClassMetrics m;
  m.iou.assign(c, std::nan(""));
  m.acc.assign(c, std::nan(""));
  m.iou_valid.assign(c, false);
  m.acc_valid.assign(c, false);
  double iou_sum = 0.0, acc_sum = 0.0;
  int iou_n = 0, acc_n = 0;
  for (int k = 0; k < c; ++k) {
    std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += cm.at(j, k);
      fn += cm.at(k, j);
    }
    if (tp + fp + fn > 0) {
      m.iou[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      m.iou_valid[k] = true;
      iou_sum += m.iou[k];
      ++iou_n;
    }
    if (tp + fn > 0) {
      m.acc[k] = static_cast<double>(tp) / static_cast<double>(tp + fn);
      m.acc_valid[k] = true;
      acc_sum += m.acc[k];
      ++acc_n;
    }
  }
  m.miou = iou_n ? iou_sum / iou_n : 0.0;
  m.macc = acc_n ? acc_sum / acc_n : 0.0;
  return m;
}

namespace {

std::vector<char> boundary_pixels(const std::vector<std::uint8_t>& map, int h, int w) {
  std::vector<char> b(map.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t v = map[static_cast<std::size_t>(y) * w + x];
      const bool edge =
          (x + 1 < w && map[static_cast<std::size_t>(y) * w + x + 1] != v) ||
          (x > 0 && map[static_cast<std::size_t>(y) * w + x - 1] != v) ||
          (y + 1 < h && map[(static_cast<std::size_t>(y) + 1) * w + x] != v) ||
          (y > 0 && map[(static_cast<std::size_t>(y) - 1) * w + x] != v);
      if (edge) b[static_cast<std::size_t>(y) * w + x] = 1;
    }
  return b;
}

std::vector<char> dilate(const std::vector<char>& b, int h, int w, int r) {
  if (r == 0) return b;
  std::vector<char> out(b.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!b[static_cast<std::size_t>(y) * w + x]) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < h && nx >= 0 && nx < w)
            out[static_cast<std::size_t>(ny) * w + nx] = 1;
        }
    }
  return out;
}

}  // namespace

double boundary_fscore(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                       int h, int w, int radius) {
  if (pred.size() != gt.size() || pred.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("boundary_fscore: map sizes differ");
  const auto bp = boundary_pixels(pred, h, w);
  const auto bg = boundary_pixels(gt, h, w);
  std::uint64_t np = 0, ng = 0;
  for (char v : bp) np += v;
  for (char v : bg) ng += v;
  if (np == 0 && ng == 0) return 1.0;  // nothing to match
  if (np == 0 || ng == 0) return 0.0;
  const auto bp_d = dilate(bp, h, w, radius);
  const auto bg_d = dilate(bg, h, w, radius);
  std::uint64_t p_hit = 0, g_hit = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i] && bg_d[i]) ++p_hit;
    if (bg[i] && bp_d[i]) ++g_hit;
  }
  const double precision = static_cast<double>(p_hit) / np;
  const double recall = static_cast<double>(g_hit) / ng;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<int> argmax_assignment(const AssocPixSp& a) {
  const CandidateMap& cm = *a.cmap;
  std::vector<int> out(cm.n_pixels(), -1);
  for (int px = 0; px < cm.n_pixels(); ++px) {
    double best = -1.0;
    int best_sp = -1;
    // pair indices ascend with superpixel id, so strict > keeps the
    // lowest id on ties
    for (int j = cm.px_offset[px]; j < cm.px_offset[px + 1]; ++j) {
      const int pair = cm.px_pair[j];
      if (a.weights.data[pair] > best) {
        best = a.weights.data[pair];
        best_sp = (*cm.pair_sp)[pair];
      }
    }
    if (best_sp < 0) throw std::logic_error("argmax_assignment: pixel without candidates");
    out[px] = best_sp;
  }
  return out;
}

std::vector<int> argmax_assignment(const AssocSpGroup& a) {
  const int s_n = a.weights.shape[0], g_n = a.weights.shape[1];
  std::vector<int> out(s_n, 0);
  for (int s = 0; s < s_n; ++s) {
    double best = a.weights(s, 0);
    int bi = 0;
    for (int g = 1; g < g_n; ++g)
      if (a.weights(s, g) > best) {
        best = a.weights(s, g);
        bi = g;
      }
    out[s] = bi;
  }
  return out;
}

std::optional<double> oracle_topk_iou(const std::vector<std::vector<std::uint8_t>>& unit_masks,
                                      const std::vector<std::uint8_t>& gt, std::uint8_t cls,
                                      int k) {
  if (k < 1) throw std::invalid_argument("oracle_topk_iou: k must be >= 1");
  std::uint64_t gt_count = 0;
  for (std::uint8_t v : gt) gt_count += v == cls;
  if (gt_count == 0) return std::nullopt;

  std::vector<char> sel(gt.size(), 0);
  std::vector<char> used(unit_masks.size(), 0);
  double cur_iou = 0.0;
  for (int round = 0; round < k; ++round) {
    int best_mask = -1;
    double best_iou = cur_iou;  // accept only non-decreasing IoU
    for (std::size_t mi = 0; mi < unit_masks.size(); ++mi) {
      if (used[mi]) continue;
      const auto& mask = unit_masks[mi];
      if (mask.size() != gt.size())
        throw std::invalid_argument("oracle_topk_iou: mask size mismatch");
      std::uint64_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool in_union = sel[i] || mask[i];
        inter += in_union && gt[i] == cls;
        uni += in_union || gt[i] == cls;
      }
      const double iou = uni ? static_cast<double>(inter) / uni : 0.0;
      if (iou > best_iou) {
        best_iou = iou;
        best_mask = static_cast<int>(mi);
      }
    }
    if (best_mask < 0) break;
    used[best_mask] = 1;
    for (std::size_t i = 0; i < gt.size(); ++i)
      if (unit_masks[best_mask][i]) sel[i] = 1;
    cur_iou = best_iou;
  }
  return cur_iou;
}

std::vector<std::uint8_t> argmax_map(const Tensor& logits) {
  if (logits.rank() != 3)
    throw std::invalid_argument("argmax_map: expected [h x w x C], got " + shape_str(logits.shape));
  const int h = logits.shape[0], w = logits.shape[1], c = logits.shape[2];
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double best = logits(y, x, 0);
      int bi = 0;
      for (int k = 1; k < c; ++k)
        if (logits(y, x, k) > best) {
          best = logits(y, x, k);
          bi = k;
        }
      out[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(bi);
    }
  return out;
}

}  // namespace hiseg
