#include "nhvt/metrics.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace nhvt {

namespace {

void check_pair(const LabelBatch& pred, const LabelBatch& truth) {
  if (pred.n != truth.n || pred.height != truth.height || pred.width != truth.width ||
      pred.labels.size() != truth.labels.size()) {
    throw std::invalid_argument("prediction and truth masks differ in shape");
  }
}

struct ClassCounts {
  std::int64_t inter = 0, pred = 0, truth = 0;
};

ClassCounts counts_for(const LabelBatch& pred, const LabelBatch& truth, int k) {
  check_pair(pred, truth);
  ClassCounts c;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == k, t = truth.labels[i] == k;
    c.inter += p && t;
    c.pred += p;
    c.truth += t;
  }
  return c;
}

double iou_from(std::int64_t inter, std::int64_t pred, std::int64_t truth) {
  if (pred + truth == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(pred + truth - inter);
}

double dice_from(std::int64_t inter, std::int64_t pred, std::int64_t truth) {
  if (pred + truth == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(pred + truth);
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

double iou(const LabelBatch& pred, const LabelBatch& truth, int k) {
  const auto c = counts_for(pred, truth, k);
  return iou_from(c.inter, c.pred, c.truth);
}

double dice(const LabelBatch& pred, const LabelBatch& truth, int k) {
  const auto c = counts_for(pred, truth, k);
  return dice_from(c.inter, c.pred, c.truth);
}

std::int64_t MetricsReport::truth_pixels(int k) const {
  std::int64_t s = 0;
  for (int p = 0; p < num_classes; ++p) s += count(k, p);
  return s;
}

std::int64_t MetricsReport::pred_pixels(int k) const {
  std::int64_t s = 0;
  for (int t = 0; t < num_classes; ++t) s += count(t, k);
  return s;
}

MetricsReport MetricsReport::from_confusion(int num_classes, std::vector<std::int64_t> confusion) {
  if (num_classes < 1 || confusion.size() != static_cast<std::size_t>(num_classes * num_classes)) {
    throw std::invalid_argument("confusion matrix must be K x K");
  }
  MetricsReport r;
  r.num_classes = num_classes;
  r.confusion = std::move(confusion);
  double si = 0, sd = 0, si_fg = 0, sd_fg = 0;
  int present = 0, present_fg = 0;
  for (int k = 0; k < num_classes; ++k) {
    const std::int64_t inter = r.count(k, k), p = r.pred_pixels(k), t = r.truth_pixels(k);
    r.iou.push_back(iou_from(inter, p, t));
    r.dice.push_back(dice_from(inter, p, t));
    r.present.push_back(p + t > 0);
    if (p + t == 0) continue;
    si += r.iou.back();
    sd += r.dice.back();
    ++present;
    if (k > 0) {
      si_fg += r.iou.back();
      sd_fg += r.dice.back();
      ++present_fg;
    }
  }
  if (present > 0) {
    r.miou = si / present;
    r.mdice = sd / present;
  }
  if (present_fg > 0) {
    r.miou_fg = si_fg / present_fg;
    r.mdice_fg = sd_fg / present_fg;
  }
  return r;
}

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1 || num_classes > 256) throw std::invalid_argument("num_classes must be in [1, 256]");
  counts_.assign(static_cast<std::size_t>(k_ * k_), 0);
}

void ConfusionMatrix::add(const LabelBatch& pred, const LabelBatch& truth) {
  check_pair(pred, truth);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const int t = truth.labels[i], p = pred.labels[i];
    if (t >= k_ || p >= k_) {
      throw std::invalid_argument("class " + std::to_string(std::max(t, p)) + " at pixel " + std::to_string(i) +
                                  " outside [0, " + std::to_string(k_) + ")");
    }
    ++counts_[static_cast<std::size_t>(t * k_ + p)];
  }
}

MetricsReport classwise_report(const LabelBatch& pred, const LabelBatch& truth, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, truth);
  return cm.report();
}

std::string format_table(const MetricsReport& r, const std::vector<std::string>& names) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %8s %8s %12s %12s\n", "class", "iou", "dice", "truth_px", "pred_px");
  out << line;
  for (int k = 0; k < r.num_classes; ++k) {
    const std::string name = k < static_cast<int>(names.size()) ? names[k] : std::to_string(k);
    std::snprintf(line, sizeof line, "%-14s %8.4f %8.4f %12lld %12lld%s\n", name.c_str(), r.iou[k], r.dice[k],
                  static_cast<long long>(r.truth_pixels(k)), static_cast<long long>(r.pred_pixels(k)),
                  r.present[k] ? "" : "  (absent)");
    out << line;
  }
  std::snprintf(line, sizeof line, "%-14s %8.4f %8.4f\n", "mean", r.miou, r.mdice);
  out << line;
  std::snprintf(line, sizeof line, "%-14s %8.4f %8.4f\n", "mean_fg", r.miou_fg, r.mdice_fg);
  out << line;
  return out.str();
}

std::string format_kv(const MetricsReport& r) {
  std::ostringstream out;
  for (int k = 0; k < r.num_classes; ++k) out << "iou." << k << '=' << fixed4(r.iou[k]) << '\n';
  for (int k = 0; k < r.num_classes; ++k) out << "dice." << k << '=' << fixed4(r.dice[k]) << '\n';
  out << "iou.mean=" << fixed4(r.miou) << '\n';
  out << "iou.mean_fg=" << fixed4(r.miou_fg) << '\n';
  out << "dice.mean=" << fixed4(r.mdice) << '\n';
  out << "dice.mean_fg=" << fixed4(r.mdice_fg) << '\n';
  return out.str();
}

const Palette& default_palette() {
  static const Palette p{{0, 0, 0},   {255, 0, 0},   {255, 255, 0}, {0, 255, 0},
                         {0, 0, 255}, {255, 0, 255}, {0, 255, 255}, {255, 128, 0}};
  return p;
}

Image render_error_map(const Image& pred, const Image& truth, const Palette& palette) {
  if (pred.channels != 1 || truth.channels != 1 || pred.height != truth.height || pred.width != truth.width) {
    throw std::invalid_argument("error map needs two one-channel masks of equal size");
  }
  if (palette.empty()) throw std::invalid_argument("empty palette");
  Image out(pred.height, pred.width, 3, 255);
  for (std::int64_t i = 0; i < pred.height * pred.width; ++i) {
    const std::uint8_t p = pred.pixels[static_cast<std::size_t>(i)];
    if (p == truth.pixels[static_cast<std::size_t>(i)]) continue;
    const Rgb& c = palette[p % palette.size()];
    for (int ch = 0; ch < 3; ++ch) out.pixels[static_cast<std::size_t>(i * 3 + ch)] = c[static_cast<std::size_t>(ch)];
  }
  return out;
}

}  // namespace nhvt
