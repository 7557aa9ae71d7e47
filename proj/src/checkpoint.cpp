#include "microvla/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace microvla {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host expected");

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) {
        throw std::runtime_error(std::string("checkpoint: truncated file while reading ") + what);
    }
    return v;
}

double read_f64(std::istream& is, const char* what) {
    double v = 0.0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) {
        throw std::runtime_error(std::string("checkpoint: truncated file while reading ") + what);
    }
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const Parameter* p : params) {
        write_u32(os, static_cast<std::uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        const Shape& shape = p->value.shape();
        write_u32(os, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : p->value.data()) write_f64(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic in '" + path + "': expected \"FVCK\", found \"" +
                                 std::string(magic, magic + 4) + "\"");
    }
    const std::uint32_t version = read_u32(is, "version");
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: version mismatch: expected " + std::to_string(kVersion) +
                                 ", found " + std::to_string(version));
    }
    const std::uint32_t count = read_u32(is, "parameter count");

    std::map<std::string, Parameter*> by_name;
    for (Parameter* p : params) {
        if (!by_name.emplace(p->name, p).second) {
            throw std::runtime_error("checkpoint: duplicate parameter name '" + p->name + "'");
        }
    }

    std::map<std::string, bool> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated file while reading name");
        const std::uint32_t rank = read_u32(is, "rank");
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_u32(is, "dims"));

        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
        Parameter* p = it->second;
        if (p->value.shape() != shape) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': expected " +
                                     shape_str(p->value.shape()) + ", found " + shape_str(shape));
        }
        std::vector<double> values(shape_numel(shape));
        for (double& v : values) v = read_f64(is, "values");
        p->value.data() = std::move(values);
        loaded[name] = true;
    }
    for (Parameter* p : params) {
        if (!loaded.count(p->name)) {
            throw std::runtime_error("checkpoint: parameter '" + p->name + "' missing from '" + path + "'");
        }
    }
}

}  // namespace microvla
