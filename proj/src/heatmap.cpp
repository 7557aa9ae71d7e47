#include "microvla/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace microvla {

void write_pgm(const std::string& path, const std::vector<double>& values, int width, int height) {
    if (static_cast<std::int64_t>(values.size()) != static_cast<std::int64_t>(width) * height) {
        throw std::invalid_argument("write_pgm: value count does not match " + std::to_string(width) + "x" +
                                    std::to_string(height));
    }
    double lo = values[0], hi = values[0];
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pgm: cannot open '" + path + "'");
    os << "P5\n" << width << " " << height << "\n255\n";
    const double span = hi - lo;
    for (double v : values) {
        const int px = span < 1e-12 ? 128 : static_cast<int>(std::lround(255.0 * (v - lo) / span));
        os.put(static_cast<char>(std::clamp(px, 0, 255)));
    }
    if (!os) throw std::runtime_error("write_pgm: write failed for '" + path + "'");
}

std::string heatmap_csv(const std::vector<double>& values, int grid_p) {
    if (static_cast<int>(values.size()) != grid_p * grid_p) {
        throw std::invalid_argument("heatmap_csv: expected " + std::to_string(grid_p * grid_p) + " values");
    }
    std::ostringstream os;
    for (int r = 0; r < grid_p; ++r) {
        for (int c = 0; c < grid_p; ++c) {
            os << (c ? "," : "") << format_double(values[r * grid_p + c]);
        }
        os << "\n";
    }
    return os.str();
}

std::vector<double> parse_heatmap_csv(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string field;
        while (std::getline(row, field, ',')) out.push_back(std::stod(field));
    }
    return out;
}

int dump_attention(const PolicyBundle& bundle, const RunConfig& rc, std::uint64_t scene_seed,
                   const std::string& out_dir) {
    if (!bundle.policy->config().use_visual) {
        throw std::invalid_argument("attnmap: variant '" + rc.variant + "' has no visual attention stream");
    }
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    Rng rng(mix_seed(scene_seed, 0xa77ull));
    auto [scene, instruction] = sample_scene(rng, rc.bench);
    RolloutResult ro = rollout(bundle, scene, instruction, rc.bench, rc.chunk_execute, /*record=*/true);

    const int grid = bundle.policy->config().effective_grid(rc.bench.grid_p);
    int written = 0;
    for (size_t s = 0; s < ro.plans.size(); ++s) {
        for (size_t l = 0; l < ro.plans[s].size(); ++l) {
            const LayerRecord& rec = ro.plans[s][l];
            const std::vector<double> map = extract_attention_map(rec, grid);
            const std::string stem = out_dir + "/step" + std::to_string(s) + "_layer" + std::to_string(l);
            write_pgm(stem + ".pgm", map, grid, grid);
            {
                std::ofstream os(stem + ".csv");
                os << heatmap_csv(map, grid);
            }
            if (!rec.kept.empty()) {
                std::vector<int> kept_mask(static_cast<size_t>(grid) * grid, 0);
                for (int t : rec.kept[0]) kept_mask[t] = 1;
                std::ofstream os(stem + "_kept.csv");
                for (int r = 0; r < grid; ++r) {
                    for (int c = 0; c < grid; ++c) os << (c ? "," : "") << kept_mask[r * grid + c];
                    os << "\n";
                }
            }
            ++written;
        }
    }
    return written;
}

}  // namespace microvla
