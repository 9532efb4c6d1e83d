#pragma once

#include <cstddef>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace cstrata {

/// Kernels with an OpenMP path keep a serial reference; both must produce
/// identical results.
enum class Execution { Serial, Parallel };

inline int max_threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

/// Restores the previous OpenMP thread count on scope exit.
class ThreadCountScope {
public:
    explicit ThreadCountScope(int n) : prev_(max_threads()) {
#if defined(_OPENMP)
        if (n > 0) omp_set_num_threads(n);
#else
        (void)n;
#endif
    }
    ~ThreadCountScope() {
#if defined(_OPENMP)
        omp_set_num_threads(prev_);
#endif
    }
    ThreadCountScope(const ThreadCountScope&) = delete;
    ThreadCountScope& operator=(const ThreadCountScope&) = delete;

private:
    int prev_;
};

}  // namespace cstrata
