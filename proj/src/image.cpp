#include "nhvt/image.hpp"

namespace nhvt {

LabelBatch LabelBatch::from_mask(const Image& mask) { return stack({mask}); }

LabelBatch LabelBatch::stack(const std::vector<Image>& masks) {
  if (masks.empty()) return {};
  LabelBatch out(static_cast<std::int64_t>(masks.size()), masks[0].height, masks[0].width);
  std::size_t offset = 0;
  for (const Image& m : masks) {
    if (m.channels != 1 || m.height != out.height || m.width != out.width) {
      throw std::invalid_argument("label masks must be one-channel and equally sized");
    }
    std::copy(m.pixels.begin(), m.pixels.end(), out.labels.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += m.pixels.size();
  }
  return out;
}

Image LabelBatch::mask(std::int64_t i) const {
  if (i < 0 || i >= n) throw std::out_of_range("label batch index " + std::to_string(i));
  Image m(height, width, 1);
  const auto begin = labels.begin() + static_cast<std::ptrdiff_t>(i * height * width);
  std::copy(begin, begin + static_cast<std::ptrdiff_t>(height * width), m.pixels.begin());
  return m;
}

}  // namespace nhvt
