#include "nhvt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nhvt/rng.hpp"

namespace nhvt {

GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensord>& inputs, const GradCheckOptions& options) {
  std::vector<Tensord> xs = inputs;
  std::vector<bool> had_flag;
  for (auto& x : xs) {
    had_flag.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensord y = fn(xs);
    if (y.numel() != 1) throw ShapeError("grad_check: function must return a scalar, got " + to_string(y.shape()));
    tape.backward(y);
  }
  for (auto& x : xs) {
    if (x.has_grad()) {
      analytic.emplace_back(x.grad().begin(), x.grad().end());
    } else {
      analytic.emplace_back(static_cast<std::size_t>(x.numel()), 0.0);
    }
    x.zero_grad();
  }

  auto eval = [&](std::uint64_t* branch) {
    TapeScope<double> off(nullptr);
    BranchTrace trace;
    const double v = fn(xs).item();
    *branch = trace.value();
    return v;
  };
  std::uint64_t base_branch = 0;
  eval(&base_branch);

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto data = xs[t].data();
    std::vector<std::int64_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const bool sampled =
        options.max_elements_per_input > 0 && static_cast<std::int64_t>(order.size()) > options.max_elements_per_input;
    if (sampled) rng.shuffle(order);
    std::int64_t checked = 0;
    for (std::int64_t i : order) {
      if (sampled && checked == options.max_elements_per_input) break;
      const double saved = data[static_cast<std::size_t>(i)];
      std::uint64_t bp = 0, bm = 0;
      data[static_cast<std::size_t>(i)] = saved + options.eps;
      const double fp = eval(&bp);
      data[static_cast<std::size_t>(i)] = saved - options.eps;
      const double fm = eval(&bm);
      data[static_cast<std::size_t>(i)] = saved;
      if (options.skip_kinks && (bp != base_branch || bm != base_branch)) {
        ++result.elements_skipped;
        continue;
      }
      ++checked;
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double a = analytic[t][static_cast<std::size_t>(i)];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.elements_checked;
      if (options.on_element) options.on_element(t, i, a, numeric, rel);
      if (rel > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_input = t;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (std::size_t t = 0; t < xs.size(); ++t) xs[t].set_requires_grad(had_flag[t]);
  return result;
}

Tensord random_tensor(const Shape& shape, std::uint64_t seed, double scale) {
  Tensord t(shape);
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

}  // namespace nhvt
