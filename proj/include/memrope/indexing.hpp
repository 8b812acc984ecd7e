// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "memrope/memcache.hpp"

namespace memrope {

/// Block-relative temporal indices for one attention call.
///
/// The cache is treated as a single block numbered from zero: sink frames,
/// then the 2M memory tokens (all M long-term tokens before the M short-term
/// ones), then local frames, then the frames of the chunk being generated.
struct IndexMap {
    std::vector<std::int64_t> sink;
    std::vector<std::int64_t> memory;
    std::vector<std::int64_t> local;
    std::vector<std::int64_t> query;

    std::int64_t max_index() const {
        std::int64_t mx = -1;
        for (const auto* v : {&sink, &memory, &local, &query})
            for (auto i : *v) mx = std::max(mx, i);
        return mx;
    }
};

/// Contiguous index map for a cache that currently holds `n_sink` sink frames
/// and `n_local` local frames. Unfilled slots are compacted away, so the query
/// always directly follows the last occupied slot.
inline IndexMap assign_indices(const CacheLayout& layout, std::size_t n_sink, std::size_t n_local,
                               std::size_t query_frames) {
    MEMROPE_REQUIRE(n_sink <= layout.sink_frames, "assign_indices: more sink frames than the layout allows");
    MEMROPE_REQUIRE(n_local <= layout.local_frames, "assign_indices: more local frames than the layout allows");
    MEMROPE_REQUIRE(query_frames <= layout.frames_per_chunk, "assign_indices: query exceeds chunk size");
    IndexMap m;
    std::int64_t next = 0;
    for (std::size_t i = 0; i < n_sink; ++i) m.sink.push_back(next++);
    for (std::size_t i = 0; i < 2 * layout.mem_tokens; ++i) m.memory.push_back(next++);
    for (std::size_t i = 0; i < n_local; ++i) m.local.push_back(next++);
    for (std::size_t i = 0; i < query_frames; ++i) m.query.push_back(next++);
    return m;
}

/// Index map for a cache whose sink is already full.
inline IndexMap assign_indices(const CacheLayout& layout, std::size_t n_local, std::size_t query_frames) {
    return assign_indices(layout, layout.sink_frames, n_local, query_frames);
}

}  // namespace memrope
