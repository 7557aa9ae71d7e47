#include "microvla/dataset.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace microvla {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'B', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host expected");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) {
        throw std::runtime_error(std::string("dataset: truncated file while reading ") + what);
    }
    return v;
}

float get_f32(std::istream& is, const char* what) {
    float v = 0.0f;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) {
        throw std::runtime_error(std::string("dataset: truncated file while reading ") + what);
    }
    return v;
}

double get_f64(std::istream& is, const char* what) {
    double v = 0.0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) {
        throw std::runtime_error(std::string("dataset: truncated file while reading ") + what);
    }
    return v;
}

}  // namespace

std::int64_t Dataset::total_steps() const {
    std::int64_t n = 0;
    for (const Episode& ep : episodes) n += static_cast<std::int64_t>(ep.steps.size());
    return n;
}

Dataset generate_dataset(const BenchConfig& cfg, int chunk_len, int n_episodes, std::uint64_t seed) {
    cfg.validate();
    if (n_episodes < 1) throw std::invalid_argument("generate_dataset: need at least one episode");
    Dataset ds;
    ds.bench = cfg;
    ds.chunk_len = chunk_len;
    ds.episodes.reserve(n_episodes);
    for (int i = 0; i < n_episodes; ++i) {
        ds.episodes.push_back(generate_episode(mix_seed(seed, static_cast<std::uint64_t>(i)), cfg, chunk_len));
    }
    return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(ds.bench.grid_p));
    put_u32(os, static_cast<std::uint32_t>(ds.bench.colors));
    put_u32(os, static_cast<std::uint32_t>(ds.bench.shapes));
    put_u32(os, static_cast<std::uint32_t>(ds.bench.distractors));
    put_u32(os, static_cast<std::uint32_t>(ds.bench.horizon));
    put_u32(os, static_cast<std::uint32_t>(ds.bench.noise_patches));
    put_u32(os, static_cast<std::uint32_t>(ds.bench.noise_channels));
    put_f64(os, ds.bench.step_max);
    put_f64(os, ds.bench.eps_grasp);
    put_f64(os, ds.bench.p_noise);
    put_f64(os, ds.bench.noise_amp);
    put_u32(os, static_cast<std::uint32_t>(ds.chunk_len));
    put_u32(os, static_cast<std::uint32_t>(ds.episodes.size()));

    const size_t feat_len = static_cast<size_t>(ds.bench.tokens()) * ds.bench.d_raw();
    const size_t chunk_vals = static_cast<size_t>(ds.chunk_len) * 3;
    for (const Episode& ep : ds.episodes) {
        put_u32(os, static_cast<std::uint32_t>(ep.scene.objects.size()));
        for (const SceneObject& o : ep.scene.objects) {
            put_u32(os, static_cast<std::uint32_t>(o.cell));
            put_u32(os, static_cast<std::uint32_t>(o.color));
            put_u32(os, static_cast<std::uint32_t>(o.shape));
        }
        put_u32(os, static_cast<std::uint32_t>(ep.scene.target_index));
        put_f32(os, ep.scene.agent_x);
        put_f32(os, ep.scene.agent_y);
        put_u32(os, static_cast<std::uint32_t>(ep.scene.noise_cells.size()));
        for (size_t i = 0; i < ep.scene.noise_cells.size(); ++i) {
            put_u32(os, static_cast<std::uint32_t>(ep.scene.noise_cells[i]));
            for (int ch = 0; ch < ds.bench.noise_channels; ++ch) {
                put_f32(os, ep.scene.noise_values[i * ds.bench.noise_channels + ch]);
            }
        }
        put_u32(os, static_cast<std::uint32_t>(ep.instruction.color));
        put_u32(os, static_cast<std::uint32_t>(ep.instruction.shape));
        put_u32(os, static_cast<std::uint32_t>(ep.steps.size()));
        for (const EpisodeStep& step : ep.steps) {
            for (float v : step.state) put_f32(os, v);
            if (step.features.size() != feat_len || step.chunk.size() != chunk_vals) {
                throw std::logic_error("dataset: step payload does not match the bench config");
            }
            os.write(reinterpret_cast<const char*>(step.features.data()),
                     static_cast<std::streamsize>(feat_len * 4));
            os.write(reinterpret_cast<const char*>(step.chunk.data()),
                     static_cast<std::streamsize>(chunk_vals * 4));
        }
        os.put(ep.success ? 1 : 0);
    }
    if (!os) throw std::runtime_error("dataset: write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open '" + path + "'");
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("dataset: bad magic in '" + path + "': expected \"FVB1\", found \"" +
                                 std::string(magic, magic + 4) + "\"");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
        throw std::runtime_error("dataset: version mismatch: expected " + std::to_string(kVersion) + ", found " +
                                 std::to_string(version));
    }

    Dataset ds;
    ds.bench.grid_p = static_cast<int>(get_u32(is, "grid_p"));
    ds.bench.colors = static_cast<int>(get_u32(is, "colors"));
    ds.bench.shapes = static_cast<int>(get_u32(is, "shapes"));
    ds.bench.distractors = static_cast<int>(get_u32(is, "distractors"));
    ds.bench.horizon = static_cast<int>(get_u32(is, "horizon"));
    ds.bench.noise_patches = static_cast<int>(get_u32(is, "noise_patches"));
    ds.bench.noise_channels = static_cast<int>(get_u32(is, "noise_channels"));
    ds.bench.step_max = get_f64(is, "step_max");
    ds.bench.eps_grasp = get_f64(is, "eps_grasp");
    ds.bench.p_noise = get_f64(is, "p_noise");
    ds.bench.noise_amp = get_f64(is, "noise_amp");
    ds.chunk_len = static_cast<int>(get_u32(is, "chunk_len"));
    const std::uint32_t n_episodes = get_u32(is, "episode count");

    const size_t feat_len = static_cast<size_t>(ds.bench.tokens()) * ds.bench.d_raw();
    const size_t chunk_vals = static_cast<size_t>(ds.chunk_len) * 3;
    ds.episodes.resize(n_episodes);
    for (Episode& ep : ds.episodes) {
        ep.scene.grid_p = ds.bench.grid_p;
        const std::uint32_t n_objects = get_u32(is, "object count");
        ep.scene.objects.resize(n_objects);
        for (SceneObject& o : ep.scene.objects) {
            o.cell = static_cast<int>(get_u32(is, "object cell"));
            o.color = static_cast<int>(get_u32(is, "object color"));
            o.shape = static_cast<int>(get_u32(is, "object shape"));
        }
        ep.scene.target_index = static_cast<int>(get_u32(is, "target index"));
        ep.scene.agent_x = get_f32(is, "agent x");
        ep.scene.agent_y = get_f32(is, "agent y");
        const std::uint32_t n_noise = get_u32(is, "noise cell count");
        ep.scene.noise_cells.resize(n_noise);
        ep.scene.noise_values.resize(static_cast<size_t>(n_noise) * ds.bench.noise_channels);
        for (std::uint32_t i = 0; i < n_noise; ++i) {
            ep.scene.noise_cells[i] = static_cast<int>(get_u32(is, "noise cell"));
            for (int ch = 0; ch < ds.bench.noise_channels; ++ch) {
                ep.scene.noise_values[i * ds.bench.noise_channels + ch] = get_f32(is, "noise value");
            }
        }
        ep.instruction.color = static_cast<int>(get_u32(is, "instruction color"));
        ep.instruction.shape = static_cast<int>(get_u32(is, "instruction shape"));
        const std::uint32_t n_steps = get_u32(is, "step count");
        ep.steps.resize(n_steps);
        for (EpisodeStep& step : ep.steps) {
            for (float& v : step.state) v = get_f32(is, "state");
            step.features.resize(feat_len);
            step.chunk.resize(chunk_vals);
            if (!is.read(reinterpret_cast<char*>(step.features.data()), static_cast<std::streamsize>(feat_len * 4)) ||
                !is.read(reinterpret_cast<char*>(step.chunk.data()), static_cast<std::streamsize>(chunk_vals * 4))) {
                throw std::runtime_error("dataset: truncated file while reading step payload");
            }
        }
        int flag = is.get();
        if (flag == EOF) throw std::runtime_error("dataset: truncated file while reading success flag");
        ep.success = flag != 0;
    }
    return ds;
}

}  // namespace microvla
