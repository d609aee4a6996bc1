#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace lanetape {

// Runs fn(begin, end) over a contiguous partition of [0, n) with `workers`
// threads. Callers that need run-to-run determinism must write results into
// slots indexed by item, never accumulate across a worker's range; the
// partition itself carries no ordering guarantee between workers.
//
// The first exception thrown by any worker is rethrown here after all
// threads joined.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (workers < 1) throw std::invalid_argument("parallel_for: workers must be >= 1");
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers), n ? n : 1);
    if (w <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + w - 1) / w;
    std::vector<std::thread> threads;
    threads.reserve(w);
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (std::size_t t = 0; t < w; ++t) {
        const std::size_t begin = t * chunk;
        const std::size_t end = std::min(begin + chunk, n);
        if (begin >= end) break;
        threads.emplace_back([&, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : threads) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace lanetape
