#pragma once

#include <cstdint>
#include <functional>

#include "nhvt/runtime.hpp"

namespace nhvt::kernels {

// Row-major GEMM: C(MxN) (+)= op(A) * op(B).
// op(A) is MxK, stored KxM when trans_a. op(B) is KxN, stored NxK when trans_b.
// Each output element is reduced in ascending k, so results do not depend on
// how rows are split across workers.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate);

// Splits [0, n) into contiguous chunks, one per worker.
void parallel_for(std::int64_t n, std::int64_t min_chunk,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace nhvt::kernels
