#pragma once

namespace nhvt::kernels {

// Worker count for kernel-internal parallelism: NHVT_THREADS, capped to the
// hardware, default 1. set_worker_count overrides (1 forces serial).
int worker_count();
void set_worker_count(int workers);

}  // namespace nhvt::kernels
