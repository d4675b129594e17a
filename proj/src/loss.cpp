#include "nhvt/loss.hpp"

#include <algorithm>
#include <cmath>

#include "nhvt/ops.hpp"
#include "ops_common.hpp"

namespace nhvt {

void LossWeights::validate() const {
  if (!(ce >= 0) || !(dice >= 0) || !(ce + dice > 0)) {
    throw std::invalid_argument("loss weights must be >= 0 with a positive sum, got (" + std::to_string(ce) + ", " +
                                std::to_string(dice) + ")");
  }
}

namespace {

template <typename T>
void check_target(const Tensor<T>& t, const LabelBatch& target, const char* op) {
  if (t.ndim() != 4 || t.dim(0) != target.n || t.dim(2) != target.height || t.dim(3) != target.width) {
    throw ShapeError(std::string(op) + ": prediction " + to_string(t.shape()) + " does not match target (" +
                     std::to_string(target.n) + ", " + std::to_string(target.height) + ", " +
                     std::to_string(target.width) + ")");
  }
  const std::int64_t k = t.dim(1);
  for (std::size_t i = 0; i < target.labels.size(); ++i) {
    if (target.labels[i] >= k) {
      throw std::invalid_argument(std::string(op) + ": target class " + std::to_string(target.labels[i]) +
                                  " at pixel " + std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelBatch& target) {
  check_target(logits, target, "cross_entropy");
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const std::int64_t pixels = n * hw;
  if (pixels == 0) throw ShapeError("cross_entropy: empty batch");
  const T* z = logits.data().data();
  const double floor_nll = -std::log(kProbabilityFloor);
  detail::Accum<T> total = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t p = 0; p < hw; ++p) {
      const T* zp = z + b * k * hw + p;
      double mx = zp[0];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(zp[c * hw]));
      double s = 0.0;
      for (std::int64_t c = 0; c < k; ++c) s += std::exp(zp[c * hw] - mx);
      const double nll = mx + std::log(s) - zp[target.labels[static_cast<std::size_t>(b * hw + p)] * hw];
      if (nll >= floor_nll) BranchTrace::note(static_cast<std::uint64_t>(b * hw + p));
      total += std::min(nll, floor_nll);
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<detail::Accum<T>>(pixels)));
  if (detail::recording<T>({&logits})) {
    detail::record<T>(out, [logits, target, n, k, hw, pixels, floor_nll](std::span<const T> g) {
      T* gx = logits.mutable_grad().data();
      const T* z = logits.data().data();
      const double scale = static_cast<double>(g[0]) / static_cast<double>(pixels);
      std::vector<double> prob(static_cast<std::size_t>(k));
      for (std::int64_t b = 0; b < n; ++b) {
        for (std::int64_t p = 0; p < hw; ++p) {
          const std::int64_t base = b * k * hw + p;
          double mx = z[base];
          for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(z[base + c * hw]));
          double s = 0.0;
          for (std::int64_t c = 0; c < k; ++c) s += (prob[c] = std::exp(z[base + c * hw] - mx));
          const int t = target.labels[static_cast<std::size_t>(b * hw + p)];
          // Clamped pixels contribute a constant.
          if (mx + std::log(s) - z[base + t * hw] >= floor_nll) continue;
          for (std::int64_t c = 0; c < k; ++c) {
            gx[base + c * hw] += static_cast<T>(scale * (prob[c] / s - (c == t ? 1.0 : 0.0)));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& probs, const LabelBatch& target, double eps) {
  check_target(probs, target, "soft_dice_loss");
  const std::int64_t n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const T* pr = probs.data().data();
  std::vector<detail::Accum<T>> inter(k, 0), psum(k, 0), ysum(k, 0);
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t c = 0; c < k; ++c) {
      const T* row = pr + (b * k + c) * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        psum[c] += row[p];
        if (target.labels[static_cast<std::size_t>(b * hw + p)] == c) {
          inter[c] += row[p];
          ysum[c] += 1.0;
        }
      }
    }
  }
  detail::Accum<T> loss = 0;
  for (std::int64_t c = 0; c < k; ++c) loss += 1 - (2 * inter[c] + eps) / (psum[c] + ysum[c] + eps);
  loss /= static_cast<detail::Accum<T>>(k);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
  if (detail::recording<T>({&probs})) {
    detail::record<T>(out, [probs, target, n, k, hw, inter, psum, ysum, eps](std::span<const T> g) {
      T* gx = probs.mutable_grad().data();
      for (std::int64_t c = 0; c < k; ++c) {
        const double den = psum[c] + ysum[c] + eps;
        const double num = 2.0 * inter[c] + eps;
        const double on = -static_cast<double>(g[0]) / static_cast<double>(k) * (2.0 * den - num) / (den * den);
        const double off = static_cast<double>(g[0]) / static_cast<double>(k) * num / (den * den);
        for (std::int64_t b = 0; b < n; ++b) {
          T* row = gx + (b * k + c) * hw;
          for (std::int64_t p = 0; p < hw; ++p) {
            row[p] += static_cast<T>(target.labels[static_cast<std::size_t>(b * hw + p)] == c ? on : off);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const LabelBatch& target, const LossWeights& w) {
  w.validate();
  Tensor<T> total;
  if (w.ce != 0) total = scale(cross_entropy(logits, target), static_cast<T>(w.ce));
  if (w.dice != 0) {
    Tensor<T> d = scale(soft_dice_loss(softmax(logits, 1), target), static_cast<T>(w.dice));
    total = total.defined() ? add(total, d) : d;
  }
  return total;
}

template <typename T>
LabelBatch argmax_labels(const Tensor<T>& logits) {
  if (logits.ndim() != 4) throw ShapeError("argmax_labels: expected (N, K, H, W), got " + to_string(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (k > 256) throw ShapeError("argmax_labels: at most 256 classes");
  LabelBatch out(n, logits.dim(2), logits.dim(3));
  const T* z = logits.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t p = 0; p < hw; ++p) {
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < k; ++c) {
        if (z[(b * k + c) * hw + p] > z[(b * k + best) * hw + p]) best = c;
      }
      out.labels[static_cast<std::size_t>(b * hw + p)] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

#define NHVT_LOSSES(T)                                                                        \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const LabelBatch&);                   \
  template Tensor<T> soft_dice_loss<T>(const Tensor<T>&, const LabelBatch&, double);          \
  template Tensor<T> combined_loss<T>(const Tensor<T>&, const LabelBatch&, const LossWeights&); \
  template LabelBatch argmax_labels<T>(const Tensor<T>&);
NHVT_INSTANTIATE(NHVT_LOSSES)

}  // namespace nhvt
