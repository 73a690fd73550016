#pragma once

#include <cstddef>
#include <type_traits>

namespace patchlab {

// Execution policy for the batch kernels (per-sample gradient evaluation,
// batched rollouts). Work items must be independent; any cross-item
// reduction happens afterwards in index order, so results are bit-identical
// between the two policies and across thread counts.
enum class Exec { Serial, Parallel };

namespace detail {
void parallel_for_impl(std::size_t n, void* ctx, void (*body)(void*, std::size_t));
}

// Serial reference path. Kept separate (not just Parallel with one thread)
// so tests can compare the OpenMP path against it.
template <typename Fn>
void serial_for(std::size_t n, Fn&& fn) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    using Body = std::remove_reference_t<Fn>;
    detail::parallel_for_impl(
        n, &fn, [](void* ctx, std::size_t i) { (*static_cast<Body*>(ctx))(i); });
}

template <typename Fn>
void for_each_index(Exec exec, std::size_t n, Fn&& fn) {
    if (exec == Exec::Parallel) {
        parallel_for(n, fn);
    } else {
        serial_for(n, fn);
    }
}

int hardware_threads();

}  // namespace patchlab
