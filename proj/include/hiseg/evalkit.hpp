#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hiseg/assoc.hpp"
#include "hiseg/tensor.hpp"

namespace hiseg {

// Pixel confusion counts, row = ground truth, col = prediction.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(int c) : num_classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}

  std::uint64_t& at(int gt, int pred) {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::uint64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);
};

void confusion_update(ConfusionMatrix& cm, const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& gt);

struct ClassMetrics {
  std::vector<double> iou, acc;        // per class, NaN when undefined
  std::vector<bool> iou_valid, acc_valid;
  double miou = 0.0, macc = 0.0;
};

// IoU_c = TP/(TP+FP+FN), mean over classes present in gt or pred;
// Acc_c = TP/(TP+FN), mean over classes present in gt.
ClassMetrics miou_macc(const ConfusionMatrix& cm);

// F1 between class-agnostic boundary pixel sets, matched within Chebyshev
// radius r. Two boundary-free maps score 1; one empty side scores 0.
double boundary_fscore(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                       int h, int w, int radius = 1);

// Per pixel, index of its maximal candidate superpixel (ties: lowest id).
std::vector<int> argmax_assignment(const AssocPixSp& a);
// Per superpixel, index of its maximal group.
std::vector<int> argmax_assignment(const AssocSpGroup& a);

// Greedy oracle: repeatedly add the unit mask that maximizes IoU of the
// running union against {gt == cls}, k rounds, accepting only gains.
// Empty gt class yields nullopt, excluded from means.
std::optional<double> oracle_topk_iou(const std::vector<std::vector<std::uint8_t>>& unit_masks,
                                      const std::vector<std::uint8_t>& gt, std::uint8_t cls,
                                      int k);

// Argmax over the channel axis of [h x w x C] logits, ties to lowest class.
std::vector<std::uint8_t> argmax_map(const Tensor& logits);

}  // namespace hiseg
