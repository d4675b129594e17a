#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nhvt/tensor.hpp"

namespace nhvt {

struct GradCheckOptions {
  double eps = 1e-5;
  // Elements checked per input; <= 0 checks every element. When limited, the
  // checked elements are drawn with `seed`.
  std::int64_t max_elements_per_input = 0;
  std::uint64_t seed = 0;
  // Skip elements whose +-eps evaluations take a different branch of a
  // piecewise op (see BranchTrace) than the unperturbed point; a sampled
  // element is then replaced by the next candidate.
  bool skip_kinks = true;
  // Called for every checked element (input, index, analytic, numeric, rel).
  std::function<void(std::size_t, std::int64_t, double, double, double)> on_element;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t elements_checked = 0;
  std::int64_t elements_skipped = 0;  // straddled a kink
};

using ScalarFn = std::function<Tensord(const std::vector<Tensord>&)>;

// Compares reverse-mode gradients of `fn` against central differences.
// Relative error per element: |a - n| / max(1e-8, |a| + |n|).
//
// `inputs` are perturbed in place and restored; `fn` must read them on every
// call and must produce a scalar. Inputs flagged requires_grad on entry keep
// the flag; every input is differentiated.
GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensord>& inputs,
                           const GradCheckOptions& options = {});

// Random tensor with N(0, 1) entries, for building gradcheck fixtures.
Tensord random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0);

}  // namespace nhvt
