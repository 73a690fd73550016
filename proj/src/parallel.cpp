#include "patchlab/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace patchlab {
namespace detail {

void parallel_for_impl(std::size_t n, void* ctx, void (*body)(void*, std::size_t)) {
#ifdef _OPENMP
    const long long count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1)
    for (long long i = 0; i < count; ++i) body(ctx, static_cast<std::size_t>(i));
#else
    for (std::size_t i = 0; i < n; ++i) body(ctx, i);
#endif
}

}  // namespace detail

int hardware_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace patchlab
