#pragma once

#include <string>
#include <vector>

#include "microvla/harness.hpp"

namespace microvla {

// 8-bit binary PGM (P5). Values are min-max scaled to [0, 255]; a constant
// map renders as mid-gray.
void write_pgm(const std::string& path, const std::vector<double>& values, int width, int height);

std::string heatmap_csv(const std::vector<double>& values, int grid_p);
std::vector<double> parse_heatmap_csv(const std::string& text);

// Rolls one seeded scene with attention recording and writes, per policy
// invocation and layer, stepS_layerL.pgm + .csv; focus layers additionally
// get a stepS_layerL_kept.csv grid of 0/1 retained-token flags. Returns the
// number of heatmaps written.
int dump_attention(const PolicyBundle& bundle, const RunConfig& rc, std::uint64_t scene_seed,
                   const std::string& out_dir);

}  // namespace microvla
