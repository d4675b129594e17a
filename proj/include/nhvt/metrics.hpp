#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nhvt/image.hpp"

namespace nhvt {

// Hard-mask IoU and Dice of class k. Both are 1.0 when k occurs in neither
// mask. Throws std::invalid_argument on shape mismatch.
double iou(const LabelBatch& pred, const LabelBatch& truth, int k);
double dice(const LabelBatch& pred, const LabelBatch& truth, int k);

struct MetricsReport {
  int num_classes = 0;
  std::vector<std::int64_t> confusion;  // row = truth class, column = predicted class
  std::vector<double> iou, dice;
  std::vector<bool> present;  // class occurs in truth or prediction
  // Means over present classes; the "_fg" variants skip class 0.
  double miou = 1.0, mdice = 1.0, miou_fg = 1.0, mdice_fg = 1.0;

  std::int64_t count(int truth, int pred) const { return confusion[static_cast<std::size_t>(truth * num_classes + pred)]; }
  std::int64_t truth_pixels(int k) const;
  std::int64_t pred_pixels(int k) const;

  static MetricsReport from_confusion(int num_classes, std::vector<std::int64_t> confusion);
};

// Accumulates pixel counts over an evaluation set.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);
  void add(const LabelBatch& pred, const LabelBatch& truth);
  MetricsReport report() const { return MetricsReport::from_confusion(k_, counts_); }

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

MetricsReport classwise_report(const LabelBatch& pred, const LabelBatch& truth, int num_classes);

// Aligned plain-text table, one row per class plus the means.
std::string format_table(const MetricsReport& report, const std::vector<std::string>& class_names = {});
// "iou.0=0.8125" style lines with 4 decimals; means under "iou.mean",
// "iou.mean_fg", "dice.mean", "dice.mean_fg".
std::string format_kv(const MetricsReport& report);

using Rgb = std::array<std::uint8_t, 3>;
using Palette = std::vector<Rgb>;

// Class colours for error maps: 0 black, 1 red, 2 yellow, 3 green, 4 blue,
// 5 magenta, 6 cyan, 7 orange; classes beyond wrap around.
const Palette& default_palette();

// RGB image: white where pred == truth, otherwise the palette colour of the
// predicted class. Masks are one-channel.
Image render_error_map(const Image& pred, const Image& truth, const Palette& palette = default_palette());

}  // namespace nhvt
