#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microvla/bench.hpp"

namespace microvla {

// Expert demonstration set. File format "FVB1": magic, version u32, bench
// parameters, episode count, then per episode the scene descriptor, step
// count, and 32-bit little-endian step payloads (state, raw features, expert
// chunk) plus the success flag.
struct Dataset {
    BenchConfig bench;
    int chunk_len = 4;
    std::vector<Episode> episodes;

    std::int64_t total_steps() const;
};

// Per-episode rng streams are derived from (seed, index), so generation order
// and worker count cannot change the bytes.
Dataset generate_dataset(const BenchConfig& cfg, int chunk_len, int n_episodes, std::uint64_t seed);

void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

}  // namespace microvla
