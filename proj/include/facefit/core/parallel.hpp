/*
 * facefit - Differentiable face rendering and morphable-model fitting.
 *
 * File: include/facefit/core/parallel.hpp
 *
 * Copyright 2026 The facefit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef FACEFIT_CORE_PARALLEL_HPP
#define FACEFIT_CORE_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace facefit {

/// Rows per tile. Fixed so that tile boundaries (and therefore every
/// per-tile partial sum) never depend on the thread count.
inline constexpr int kTileRows = 8;

inline int num_row_tiles(int height) { return (height + kTileRows - 1) / kTileRows; }

/**
 * Runs fn(tile) for tile in [0, num_tiles). Tiles are handed out dynamically,
 * so callers must write only to tile-private state; any reduction over tiles
 * has to happen afterwards, in tile order.
 */
template <typename Fn>
void parallel_for_tiles(int num_tiles, int threads, Fn&& fn)
{
    threads = std::clamp(threads, 1, std::max(1, num_tiles));
    if (threads == 1)
    {
        for (int t = 0; t < num_tiles; ++t)
        {
            fn(t);
        }
        return;
    }

    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (int t = next++; t < num_tiles; t = next++)
        {
            try
            {
                fn(t);
            } catch (...)
            {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                {
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    for (int i = 1; i < threads; ++i)
    {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& th : pool)
    {
        th.join();
    }
    if (failure)
    {
        std::rethrow_exception(failure);
    }
}

} // namespace facefit

#endif /* FACEFIT_CORE_PARALLEL_HPP */
