#pragma once

#include "nhvt/image.hpp"
#include "nhvt/tensor.hpp"

namespace nhvt {

struct LossWeights {
  double ce = 1.0;
  double dice = 3.0;
  // Throws std::invalid_argument unless both are >= 0 with a positive sum.
  void validate() const;
};

inline constexpr double kDiceSmoothing = 1.0;
inline constexpr double kProbabilityFloor = 1e-12;

// Mean over pixels of -log(max(softmax(logits)[target], 1e-12)).
// logits (N, K, H, W); target (N, H, W) with values in [0, K).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelBatch& target);

// 1 - (2 sum(p y) + eps) / (sum p + sum y + eps) per class over the whole
// batch, averaged over all K classes (background included).
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& probs, const LabelBatch& target, double eps = kDiceSmoothing);

// w.ce * cross_entropy + w.dice * soft_dice_loss(softmax(logits)).
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const LabelBatch& target, const LossWeights& w = {});

// Per-pixel argmax over classes, (N, K, H, W) -> (N, H, W). Ties pick the
// lowest class.
template <typename T>
LabelBatch argmax_labels(const Tensor<T>& logits);

}  // namespace nhvt
