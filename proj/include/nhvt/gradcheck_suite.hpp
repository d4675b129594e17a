#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace nhvt {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckRow {
  std::string group;  // ops, loss, blocks, model
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::int64_t skipped = 0;
  double seconds = 0.0;
  std::string worst;  // "input i index j a=.. n=.."

  bool pass() const { return max_rel_error <= kGradCheckTolerance && checked > 0; }
};

// Scopes: "ops", "loss", "blocks", "model" or "all". Every differentiable op
// is checked on three shapes (one row per op, worst case). Composite units
// are checked at a random parameter point rather than at initialisation.
// Throws std::invalid_argument for an unknown scope.
std::vector<GradCheckRow> run_gradcheck_suite(const std::string& scope,
                                              const std::function<void(const GradCheckRow&)>& on_row = {});

std::string format_gradcheck_table(const std::vector<GradCheckRow>& rows);

}  // namespace nhvt
