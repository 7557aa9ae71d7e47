#include "microvla/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace microvla {

std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + value + "'");
    }
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace

void RunConfig::validate() const {
    bench.validate();
    if (n_layers < 1 || d_model < 1 || n_heads < 1) throw std::invalid_argument("config: bad model dimensions");
    if (d_model % n_heads != 0) throw std::invalid_argument("config: d_model must be divisible by n_heads");
    if (pyramid_layers < n_layers) {
        throw std::invalid_argument("config: pyramid_layers must be >= n_layers");
    }
    if (chunk_len < 1 || action_dim < 1 || n_action_queries < 1) {
        throw std::invalid_argument("config: bad policy dimensions");
    }
    if (k_frac <= 0.0 || k_frac > 1.0) throw std::invalid_argument("config: k_frac must lie in (0, 1]");
    if (train_steps < 0 || batch_size < 1) throw std::invalid_argument("config: bad training budget");
    if (lr <= 0.0) throw std::invalid_argument("config: lr must be positive");
    if (warmup_steps < 0) throw std::invalid_argument("config: warmup_steps must be >= 0");
    if (lr_final_frac <= 0.0 || lr_final_frac > 1.0) {
        throw std::invalid_argument("config: lr_final_frac must lie in (0, 1]");
    }
    if (eval_every < 1 || eval_episodes < 1 || train_episodes < 1) {
        throw std::invalid_argument("config: bad evaluation settings");
    }
    if (chunk_execute < 0 || chunk_execute > chunk_len) {
        throw std::invalid_argument("config: chunk_execute must lie in [0, chunk_len]");
    }
    if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
    parse_variant(variant);
    for (const std::string& v : variants) parse_variant(v);
}

std::vector<std::string> known_variants() {
    return {"vanilla",       "pooling",       "scalar_gate",          "cascaded",
            "cascaded_focus", "cascaded_focus_head", "cascaded_focus_element", "no_visual"};
}

VariantSpec parse_variant(const std::string& token) {
    std::string base = token;
    double k_frac_override = -1.0;
    if (const size_t at = token.find('@'); at != std::string::npos) {
        base = token.substr(0, at);
        const std::string pct = token.substr(at + 1);
        const int percent = parse_int("variant", pct);
        if (percent < 1 || percent > 100) {
            throw std::invalid_argument("config: variant '" + token + "' needs a percentage in [1, 100]");
        }
        k_frac_override = percent / 100.0;
    }

    VariantSpec spec;
    spec.name = token;
    spec.k_frac_override = k_frac_override;
    if (base == "vanilla") {
        spec.layer = LayerVariant::Mixed;
    } else if (base == "pooling") {
        spec.layer = LayerVariant::Mixed;
        spec.pool = true;
    } else if (base == "scalar_gate") {
        spec.layer = LayerVariant::Mixed;
        spec.gate = GateKind::Scalar;
    } else if (base == "cascaded") {
        spec.layer = LayerVariant::Cascaded;
    } else if (base == "cascaded_focus") {
        spec.layer = LayerVariant::Cascaded;
        spec.focus = true;
    } else if (base == "cascaded_focus_head") {
        spec.layer = LayerVariant::Cascaded;
        spec.focus = true;
        spec.gate = GateKind::HeadWise;
    } else if (base == "cascaded_focus_element") {
        spec.layer = LayerVariant::Cascaded;
        spec.focus = true;
        spec.gate = GateKind::ElementWise;
    } else if (base == "no_visual") {
        spec.layer = LayerVariant::Cascaded;
        spec.use_visual = false;
    } else {
        throw std::invalid_argument("config: unknown variant '" + token + "'");
    }
    if (k_frac_override > 0.0 && !spec.focus) {
        throw std::invalid_argument("config: variant '" + token + "' does not take a token percentage");
    }
    return spec;
}

PolicyConfig make_policy_config(const RunConfig& rc, const VariantSpec& spec) {
    PolicyConfig pc;
    pc.n_layers = rc.n_layers;
    pc.attn = AttnConfig{rc.d_model, rc.n_heads};
    pc.variant = spec.layer;
    pc.gate = spec.gate;
    if (spec.focus) {
        const double frac = spec.k_frac_override > 0.0 ? spec.k_frac_override : rc.k_frac;
        const int tv = rc.bench.tokens();
        const int k = std::min(tv, std::max(1, static_cast<int>(std::lround(frac * tv))));
        pc.focus = FocusConfig{k, true};
    }
    pc.chunk_len = rc.chunk_len;
    pc.action_dim = rc.action_dim;
    pc.n_action_queries = rc.n_action_queries;
    pc.state_dim = 3;
    pc.use_visual = spec.use_visual;
    pc.use_layer_norm = rc.use_layer_norm;
    pc.pool_visual = spec.pool;
    pc.validate();
    return pc;
}

void apply_config_entry(RunConfig& rc, const std::string& key, const std::string& value) {
    if (key == "variant") rc.variant = value;
    else if (key == "seed") rc.seed = parse_int(key, value);
    else if (key == "grid_p") rc.bench.grid_p = parse_int(key, value);
    else if (key == "colors") rc.bench.colors = parse_int(key, value);
    else if (key == "shapes") rc.bench.shapes = parse_int(key, value);
    else if (key == "distractors") rc.bench.distractors = parse_int(key, value);
    else if (key == "step_max") rc.bench.step_max = parse_real(key, value);
    else if (key == "eps_grasp") rc.bench.eps_grasp = parse_real(key, value);
    else if (key == "horizon") rc.bench.horizon = parse_int(key, value);
    else if (key == "p_noise") rc.bench.p_noise = parse_real(key, value);
    else if (key == "noise_patches") rc.bench.noise_patches = parse_int(key, value);
    else if (key == "noise_amp") rc.bench.noise_amp = parse_real(key, value);
    else if (key == "noise_channels") rc.bench.noise_channels = parse_int(key, value);
    else if (key == "n_layers") rc.n_layers = parse_int(key, value);
    else if (key == "d_model") rc.d_model = parse_int(key, value);
    else if (key == "n_heads") rc.n_heads = parse_int(key, value);
    else if (key == "n_action_queries") rc.n_action_queries = parse_int(key, value);
    else if (key == "chunk_len") rc.chunk_len = parse_int(key, value);
    else if (key == "action_dim") rc.action_dim = parse_int(key, value);
    else if (key == "pyramid_layers") rc.pyramid_layers = parse_int(key, value);
    else if (key == "pyramid_seed") rc.pyramid_seed = parse_u64(key, value);
    else if (key == "instr_embed_dim") rc.instr_embed_dim = parse_int(key, value);
    else if (key == "k_frac") rc.k_frac = parse_real(key, value);
    else if (key == "use_layer_norm") rc.use_layer_norm = parse_bool(key, value);
    else if (key == "train_steps") rc.train_steps = parse_int(key, value);
    else if (key == "batch_size") rc.batch_size = parse_int(key, value);
    else if (key == "lr") rc.lr = parse_real(key, value);
    else if (key == "warmup_steps") rc.warmup_steps = parse_int(key, value);
    else if (key == "lr_final_frac") rc.lr_final_frac = parse_real(key, value);
    else if (key == "weight_decay") rc.weight_decay = parse_real(key, value);
    else if (key == "beta1") rc.beta1 = parse_real(key, value);
    else if (key == "beta2") rc.beta2 = parse_real(key, value);
    else if (key == "adam_eps") rc.adam_eps = parse_real(key, value);
    else if (key == "eval_every") rc.eval_every = parse_int(key, value);
    else if (key == "eval_episodes") rc.eval_episodes = parse_int(key, value);
    else if (key == "train_episodes") rc.train_episodes = parse_int(key, value);
    else if (key == "eval_seed") rc.eval_seed = parse_u64(key, value);
    else if (key == "chunk_execute") rc.chunk_execute = parse_int(key, value);
    else if (key == "success_threshold") rc.success_threshold = parse_real(key, value);
    else if (key == "workers") rc.workers = parse_int(key, value);
    else if (key == "variants") rc.variants = split_list(value);
    else if (key == "seeds") {
        rc.seeds.clear();
        for (const std::string& s : split_list(value)) rc.seeds.push_back(parse_int(key, s));
    } else {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
}

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig rc;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        if (const size_t hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: line " + std::to_string(line_no) + " is not 'key = value'");
        }
        apply_config_entry(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    rc.validate();
    return rc;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << is.rdbuf();
    return parse_run_config_text(buffer.str());
}

std::string run_config_to_text(const RunConfig& rc) {
    std::ostringstream os;
    os << "variant = " << rc.variant << "\n";
    os << "seed = " << rc.seed << "\n";
    os << "grid_p = " << rc.bench.grid_p << "\n";
    os << "colors = " << rc.bench.colors << "\n";
    os << "shapes = " << rc.bench.shapes << "\n";
    os << "distractors = " << rc.bench.distractors << "\n";
    os << "step_max = " << format_double(rc.bench.step_max) << "\n";
    os << "eps_grasp = " << format_double(rc.bench.eps_grasp) << "\n";
    os << "horizon = " << rc.bench.horizon << "\n";
    os << "p_noise = " << format_double(rc.bench.p_noise) << "\n";
    os << "noise_patches = " << rc.bench.noise_patches << "\n";
    os << "noise_amp = " << format_double(rc.bench.noise_amp) << "\n";
    os << "noise_channels = " << rc.bench.noise_channels << "\n";
    os << "n_layers = " << rc.n_layers << "\n";
    os << "d_model = " << rc.d_model << "\n";
    os << "n_heads = " << rc.n_heads << "\n";
    os << "n_action_queries = " << rc.n_action_queries << "\n";
    os << "chunk_len = " << rc.chunk_len << "\n";
    os << "action_dim = " << rc.action_dim << "\n";
    os << "pyramid_layers = " << rc.pyramid_layers << "\n";
    os << "pyramid_seed = " << rc.pyramid_seed << "\n";
    os << "instr_embed_dim = " << rc.instr_embed_dim << "\n";
    os << "k_frac = " << format_double(rc.k_frac) << "\n";
    os << "use_layer_norm = " << (rc.use_layer_norm ? "true" : "false") << "\n";
    os << "train_steps = " << rc.train_steps << "\n";
    os << "batch_size = " << rc.batch_size << "\n";
    os << "lr = " << format_double(rc.lr) << "\n";
    os << "warmup_steps = " << rc.warmup_steps << "\n";
    os << "lr_final_frac = " << format_double(rc.lr_final_frac) << "\n";
    os << "weight_decay = " << format_double(rc.weight_decay) << "\n";
    os << "beta1 = " << format_double(rc.beta1) << "\n";
    os << "beta2 = " << format_double(rc.beta2) << "\n";
    os << "adam_eps = " << format_double(rc.adam_eps) << "\n";
    os << "eval_every = " << rc.eval_every << "\n";
    os << "eval_episodes = " << rc.eval_episodes << "\n";
    os << "train_episodes = " << rc.train_episodes << "\n";
    os << "eval_seed = " << rc.eval_seed << "\n";
    os << "chunk_execute = " << rc.chunk_execute << "\n";
    os << "success_threshold = " << format_double(rc.success_threshold) << "\n";
    os << "workers = " << rc.workers << "\n";
    if (!rc.variants.empty()) {
        os << "variants = ";
        for (size_t i = 0; i < rc.variants.size(); ++i) os << (i ? "," : "") << rc.variants[i];
        os << "\n";
    }
    os << "seeds = ";
    for (size_t i = 0; i < rc.seeds.size(); ++i) os << (i ? "," : "") << rc.seeds[i];
    os << "\n";
    return os.str();
}

}  // namespace microvla
