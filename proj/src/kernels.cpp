#include "kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

#include "nhvt/tensor.hpp"

namespace nhvt::kernels {

namespace {

int g_workers = -1;

int workers_from_env() {
  int n = 1;
  if (const char* env = std::getenv("NHVT_THREADS")) {
    n = std::max(1, std::atoi(env));
  }
  const int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return std::min(n, hw);
}

constexpr std::int64_t kColTile = 512;

template <typename T>
void gemm_rows(std::int64_t row_begin, std::int64_t row_end, std::int64_t n, std::int64_t k,
               const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c + row_begin * n, c + row_end * n, T(0));
  std::int64_t i = row_begin;
  for (; i + 4 <= row_end; i += 4) {
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    for (std::int64_t j0 = 0; j0 < n; j0 += kColTile) {
      const std::int64_t j1 = std::min(n, j0 + kColTile);
      for (std::int64_t p = 0; p < k; ++p) {
        const T* brow = b + p * n;
        const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        for (std::int64_t j = j0; j < j1; ++j) {
          const T bv = brow[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    }
  }
  for (; i < row_end; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::int64_t j0 = 0; j0 < n; j0 += kColTile) {
      const std::int64_t j1 = std::min(n, j0 + kColTile);
      for (std::int64_t p = 0; p < k; ++p) {
        const T* brow = b + p * n;
        const T v = ai[p];
        for (std::int64_t j = j0; j < j1; ++j) ci[j] += v * brow[j];
      }
    }
  }
}

template <typename T>
void transpose_into(const T* src, std::int64_t rows, std::int64_t cols, std::vector<T>& dst) {
  dst.resize(static_cast<std::size_t>(rows * cols));
  constexpr std::int64_t kBlock = 32;
  for (std::int64_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::int64_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::int64_t r1 = std::min(rows, r0 + kBlock);
      const std::int64_t c1 = std::min(cols, c0 + kBlock);
      for (std::int64_t r = r0; r < r1; ++r) {
        for (std::int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  FlopCounter::add(2 * m * n * k);
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    return;
  }
  std::vector<T> a_packed, b_packed;
  if (trans_a) {
    transpose_into(a, k, m, a_packed);
    a = a_packed.data();
  }
  if (trans_b) {
    transpose_into(b, n, k, b_packed);
    b = b_packed.data();
  }
  const std::int64_t work = m * n * k;
  if (worker_count() <= 1 || work < (1 << 18) || m < 8) {
    gemm_rows(0, m, n, k, a, b, c, accumulate);
    return;
  }
  parallel_for((m + 3) / 4, 1, [&](std::int64_t q0, std::int64_t q1) {
    gemm_rows(q0 * 4, std::min(m, q1 * 4), n, k, a, b, c, accumulate);
  });
}

int worker_count() {
  if (g_workers < 0) g_workers = workers_from_env();
  return g_workers;
}

void set_worker_count(int workers) { g_workers = std::max(1, workers); }

void parallel_for(std::int64_t n, std::int64_t min_chunk,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  const std::int64_t workers =
      std::min<std::int64_t>(worker_count(), std::max<std::int64_t>(1, n / std::max<std::int64_t>(1, min_chunk)));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (std::int64_t w = 1; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back(body, lo, hi);
  }
  body(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const double*,
                           const double*, double*, bool);

}  // namespace nhvt::kernels
