#include "microvla/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "microvla/checkpoint.hpp"
#include "microvla/optim.hpp"

namespace microvla {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kPolicySalt = 0x70011cull;
constexpr std::uint64_t kEncoderSalt = 0xe4c0deull;
constexpr std::uint64_t kTrainSalt = 0x7124137ull;
constexpr std::uint64_t kDataSalt = 0xda7a5e7ull;

std::int64_t elapsed_ms(Clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count();
}

std::vector<std::vector<double>> snapshot_params(const std::vector<Parameter*>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const Parameter* p : params) out.push_back(p->value.data());
    return out;
}

void restore_params(const std::vector<Parameter*>& params, const std::vector<std::vector<double>>& snap) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value.data() = snap[i];
}

}  // namespace

std::uint64_t dataset_seed_for(int cell_seed) {
    return mix_seed(static_cast<std::uint64_t>(cell_seed), kDataSalt);
}

std::string metrics_csv_header() { return "variant,seed,step,train_loss,eval_success,wall_ms"; }

std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    os << metrics_csv_header() << "\n";
    for (const MetricsRow& r : rows) {
        os << r.variant << "," << r.seed << "," << r.step << "," << format_double(r.train_loss) << ","
           << format_double(r.eval_success) << "," << r.wall_ms << "\n";
    }
    return os.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("metrics: cannot open '" + path + "' for writing");
    os << metrics_to_csv(rows);
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("metrics: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line != metrics_csv_header()) {
        throw std::runtime_error("metrics: bad header in '" + path + "'");
    }
    std::vector<MetricsRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        MetricsRow row;
        std::string field;
        std::getline(ss, row.variant, ',');
        std::getline(ss, field, ',');
        row.seed = std::stoi(field);
        std::getline(ss, field, ',');
        row.step = std::stoi(field);
        std::getline(ss, field, ',');
        row.train_loss = std::stod(field);
        std::getline(ss, field, ',');
        row.eval_success = std::stod(field);
        std::getline(ss, field, ',');
        row.wall_ms = std::stoll(field);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string strip_wall_column(const std::string& csv_text) {
    std::stringstream ss(csv_text);
    std::ostringstream os;
    std::string line;
    while (std::getline(ss, line)) {
        const size_t comma = line.rfind(',');
        os << (comma == std::string::npos ? line : line.substr(0, comma)) << "\n";
    }
    return os.str();
}

std::vector<Parameter*> PolicyBundle::trainable() const {
    std::vector<Parameter*> params = policy->parameters();
    for (Parameter* p : encoder->parameters()) params.push_back(p);
    check_unique_names(params);
    return params;
}

PolicyBundle build_bundle(const RunConfig& rc) {
    rc.validate();
    PolicyBundle bundle;
    bundle.spec = parse_variant(rc.variant);
    bundle.policy = std::make_unique<Policy>(make_policy_config(rc, bundle.spec),
                                             mix_seed(static_cast<std::uint64_t>(rc.seed), kPolicySalt));
    bundle.encoder = std::make_unique<InstructionEncoder>(rc.bench.colors, rc.bench.shapes, rc.instr_embed_dim,
                                                          rc.pyramid_layers, rc.n_action_queries, rc.d_model,
                                                          mix_seed(static_cast<std::uint64_t>(rc.seed), kEncoderSalt));
    bundle.pyramid = std::make_unique<FeaturePyramid>(rc.bench.d_raw(), rc.d_model, rc.pyramid_layers,
                                                      rc.pyramid_seed);
    return bundle;
}

ConditionPyramid encode_conditions(const FeaturePyramid& pyramid, const InstructionEncoder& encoder,
                                   const Tensor& raw_features, const std::vector<Instruction>& instructions,
                                   int grid_p) {
    ConditionPyramid cp;
    std::vector<Tensor> levels = pyramid.encode(raw_features);
    cp.visual_raw = levels.front();
    cp.visual.assign(levels.begin() + 1, levels.end());
    cp.action_queries = encoder.encode(instructions);
    cp.grid_p = grid_p;
    return cp;
}

RolloutResult rollout(const PolicyBundle& bundle, const GridScene& scene, const Instruction& instruction,
                      const BenchConfig& bench, int chunk_execute, bool record) {
    const PolicyConfig& pc = bundle.policy->config();
    if (pc.action_dim != 3) {
        throw std::invalid_argument("rollout: the environment expects (dx, dy, grasp) actions");
    }
    const int exec = chunk_execute <= 0 ? pc.chunk_len : std::min(chunk_execute, pc.chunk_len);

    NoGradGuard inference;
    Environment env(scene, bench);
    RolloutResult result;
    while (!env.done()) {
        const std::vector<float> feats = env.features(bench);
        std::vector<double> raw(feats.begin(), feats.end());
        Tensor raw_t = Tensor::from_data({1, bench.tokens(), bench.d_raw()}, std::move(raw));
        const auto rs = env.robot_state();
        Tensor state_t = Tensor::from_data({1, 3}, {rs[0], rs[1], rs[2]});
        ConditionPyramid cp = encode_conditions(*bundle.pyramid, *bundle.encoder, raw_t, {instruction}, bench.grid_p);
        PolicyForward fwd = bundle.policy->forward(cp, state_t, record);
        if (record) result.plans.push_back(std::move(fwd.records));

        const std::vector<double>& chunk = fwd.chunk.data();
        for (int k = 0; k < exec && !env.done(); ++k) {
            Action action{chunk[k * 3 + 0], chunk[k * 3 + 1], chunk[k * 3 + 2]};
            env.step(action);
        }
    }
    result.success = env.success();
    result.env_steps = env.t();
    return result;
}

EvalResult evaluate_policy(const PolicyBundle& bundle, const RunConfig& rc, int n_episodes, double p_noise,
                           std::uint64_t scene_seed) {
    if (n_episodes < 1) throw std::invalid_argument("evaluate: n_episodes must be >= 1");
    BenchConfig bench = rc.bench;
    bench.p_noise = p_noise;
    EvalResult result;
    result.episodes = n_episodes;
    for (int i = 0; i < n_episodes; ++i) {
        Rng rng(mix_seed(scene_seed, static_cast<std::uint64_t>(i)));
        auto [scene, instruction] = sample_scene(rng, bench);
        if (rollout(bundle, scene, instruction, bench, rc.chunk_execute).success) ++result.successes;
    }
    result.rate = static_cast<double>(result.successes) / n_episodes;
    result.stderr_ = std::sqrt(result.rate * (1.0 - result.rate) / n_episodes);
    return result;
}

CellResult train_cell(const RunConfig& rc, const Dataset& dataset, const std::string& out_dir) {
    rc.validate();
    if (dataset.episodes.empty()) throw std::invalid_argument("train: dataset is empty");
    if (dataset.bench.grid_p != rc.bench.grid_p || dataset.bench.d_raw() != rc.bench.d_raw() ||
        dataset.chunk_len != rc.chunk_len) {
        throw std::invalid_argument("train: dataset was generated with a different bench config");
    }
    const Clock::time_point start = Clock::now();

    CellResult cell;
    cell.variant = rc.variant;
    cell.seed = rc.seed;

    PolicyBundle bundle = build_bundle(rc);
    std::vector<Parameter*> params = bundle.trainable();
    AdamW optimizer(params, AdamWConfig{rc.lr, rc.beta1, rc.beta2, rc.adam_eps, rc.weight_decay});

    const std::vector<const Tensor*> frozen = bundle.pyramid->frozen_weights();
    const std::vector<std::vector<double>> frozen_before = [&] {
        std::vector<std::vector<double>> snap;
        for (const Tensor* t : frozen) snap.push_back(t->data());
        return snap;
    }();

    // flat index over (episode, step) pairs
    std::vector<std::int64_t> prefix(dataset.episodes.size() + 1, 0);
    for (size_t e = 0; e < dataset.episodes.size(); ++e) {
        prefix[e + 1] = prefix[e] + static_cast<std::int64_t>(dataset.episodes[e].steps.size());
    }
    const std::int64_t total = prefix.back();
    const int tv = rc.bench.tokens();
    const int d_raw = rc.bench.d_raw();
    const int chunk_vals = rc.chunk_len * rc.action_dim;

    Rng rng(mix_seed(static_cast<std::uint64_t>(rc.seed), kTrainSalt));

    std::vector<std::vector<double>> best_snapshot;
    double loss_accum = 0.0;
    int loss_count = 0;

    if (!out_dir.empty()) fs::create_directories(out_dir);
    auto run_eval = [&](int step) {
        EvalResult ev = evaluate_policy(bundle, rc, rc.eval_episodes, rc.bench.p_noise, rc.eval_seed);
        MetricsRow row;
        row.variant = rc.variant;
        row.seed = rc.seed;
        row.step = step;
        row.train_loss = loss_count ? loss_accum / loss_count : 0.0;
        row.eval_success = ev.rate;
        row.wall_ms = elapsed_ms(start);
        cell.metrics.push_back(row);
        loss_accum = 0.0;
        loss_count = 0;
        if (cell.metrics.size() == 1 || ev.rate > cell.best_success) {
            cell.best_success = ev.rate;
            cell.best_step = step;
            best_snapshot = snapshot_params(params);
        }
        if (cell.steps_to_threshold < 0 && ev.rate >= rc.success_threshold) cell.steps_to_threshold = step;
        cell.final_success = ev.rate;
        if (!out_dir.empty()) write_metrics_csv(out_dir + "/metrics.csv", cell.metrics);
    };

    if (rc.train_steps == 0) {
        run_eval(0);
    }
    // linear warmup into cosine decay toward lr * lr_final_frac
    auto lr_at = [&](int step) {
        if (rc.warmup_steps > 0 && step <= rc.warmup_steps) {
            return rc.lr * step / rc.warmup_steps;
        }
        const int span = std::max(1, rc.train_steps - rc.warmup_steps);
        const double progress = std::min(1.0, static_cast<double>(step - rc.warmup_steps) / span);
        const double floor = rc.lr * rc.lr_final_frac;
        return floor + (rc.lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    };

    for (int step = 1; step <= rc.train_steps; ++step) {
        optimizer.set_lr(lr_at(step));
        const int B = rc.batch_size;
        std::vector<double> raw(static_cast<size_t>(B) * tv * d_raw);
        std::vector<double> states(static_cast<size_t>(B) * 3);
        std::vector<double> targets(static_cast<size_t>(B) * chunk_vals);
        std::vector<Instruction> instructions(B);
        for (int b = 0; b < B; ++b) {
            const std::int64_t flat = static_cast<std::int64_t>(rng.uniform_u64(static_cast<std::uint64_t>(total)));
            const auto it = std::upper_bound(prefix.begin(), prefix.end(), flat);
            const size_t e = static_cast<size_t>(it - prefix.begin() - 1);
            const Episode& ep = dataset.episodes[e];
            const EpisodeStep& es = ep.steps[static_cast<size_t>(flat - prefix[e])];
            instructions[b] = ep.instruction;
            for (int i = 0; i < tv * d_raw; ++i) raw[static_cast<size_t>(b) * tv * d_raw + i] = es.features[i];
            for (int i = 0; i < 3; ++i) states[b * 3 + i] = es.state[i];
            for (int i = 0; i < chunk_vals; ++i) targets[static_cast<size_t>(b) * chunk_vals + i] = es.chunk[i];
        }
        Tensor raw_t = Tensor::from_data({B, tv, d_raw}, std::move(raw));
        Tensor state_t = Tensor::from_data({B, 3}, std::move(states));
        Tensor target_t = Tensor::from_data({B, rc.chunk_len, rc.action_dim}, std::move(targets));

        ConditionPyramid cp = encode_conditions(*bundle.pyramid, *bundle.encoder, raw_t, instructions,
                                                rc.bench.grid_p);
        PolicyForward fwd = bundle.policy->forward(cp, state_t);
        Tensor loss = mean(abs(sub(fwd.chunk, target_t)));
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
        }
        loss_accum += loss_value;
        ++loss_count;

        backward(loss);
        optimizer.step();
        optimizer.zero_grad();

        if (step % rc.eval_every == 0 || step == rc.train_steps) run_eval(step);
    }

    for (size_t i = 0; i < frozen.size(); ++i) {
        if (frozen[i]->data() != frozen_before[i]) {
            throw std::logic_error("train: frozen pyramid weights changed during training");
        }
    }

    cell.wall_ms = elapsed_ms(start);
    if (!out_dir.empty()) {
        {
            std::ofstream os(out_dir + "/config.txt");
            os << run_config_to_text(rc);
        }
        write_metrics_csv(out_dir + "/metrics.csv", cell.metrics);
        save_checkpoint(out_dir + "/checkpoint_final.fvck", params);
        if (!best_snapshot.empty()) {
            const std::vector<std::vector<double>> final_snapshot = snapshot_params(params);
            restore_params(params, best_snapshot);
            save_checkpoint(out_dir + "/checkpoint_best.fvck", params);
            restore_params(params, final_snapshot);
        }
    }
    return cell;
}

std::vector<CellResult> run_ablation(const RunConfig& base, const std::string& out_dir) {
    base.validate();
    if (base.variants.empty()) throw std::invalid_argument("ablate: no variants configured");
    for (const std::string& v : base.variants) parse_variant(v);

    if (!out_dir.empty()) fs::create_directories(out_dir);
    std::vector<CellResult> cells;
    cells.reserve(base.variants.size() * base.seeds.size());

    for (int seed : base.seeds) {
        const Dataset dataset =
            generate_dataset(base.bench, base.chunk_len, base.train_episodes, dataset_seed_for(seed));
        std::vector<CellResult> seed_cells(base.variants.size());

        auto run_one = [&](size_t vi) {
            RunConfig rc = base;
            rc.variant = base.variants[vi];
            rc.seed = seed;
            // every cell of the grid shares one eval scene family
            if (rc.eval_seed != base.eval_seed) throw std::logic_error("ablate: eval seed family diverged");
            const std::string cell_dir =
                out_dir.empty() ? "" : out_dir + "/cells/" + rc.variant + "_s" + std::to_string(seed);
            try {
                seed_cells[vi] = train_cell(rc, dataset, cell_dir);
            } catch (const std::exception& e) {
                seed_cells[vi].variant = rc.variant;
                seed_cells[vi].seed = seed;
                seed_cells[vi].failed = true;
                seed_cells[vi].error = e.what();
            }
        };

        const int workers = std::min<int>(base.workers, static_cast<int>(base.variants.size()));
        if (workers <= 1) {
            for (size_t vi = 0; vi < base.variants.size(); ++vi) run_one(vi);
        } else {
            std::vector<std::thread> pool;
            std::atomic<size_t> next{0};
            for (int w = 0; w < workers; ++w) {
                pool.emplace_back([&] {
                    for (size_t vi = next.fetch_add(1); vi < base.variants.size(); vi = next.fetch_add(1)) {
                        run_one(vi);
                    }
                });
            }
            for (std::thread& t : pool) t.join();
        }
        for (CellResult& c : seed_cells) cells.push_back(std::move(c));
    }

    // fixed (variant, seed) order for deterministic summaries
    std::vector<CellResult> ordered;
    ordered.reserve(cells.size());
    for (const std::string& v : base.variants) {
        for (int s : base.seeds) {
            for (CellResult& c : cells) {
                if (c.variant == v && c.seed == s) ordered.push_back(std::move(c));
            }
        }
    }

    if (!out_dir.empty()) {
        std::ofstream cellsf(out_dir + "/cells.csv");
        cellsf << cells_csv(ordered);
        std::ofstream summaryf(out_dir + "/summary.csv");
        summaryf << summary_csv(ordered);
    }
    return ordered;
}

std::string cells_csv(const std::vector<CellResult>& cells) {
    std::ostringstream os;
    os << "variant,seed,status,final_success,best_success,best_step,steps_to_threshold,wall_ms\n";
    for (const CellResult& c : cells) {
        os << c.variant << "," << c.seed << "," << (c.failed ? "failed" : "ok") << ","
           << format_double(c.final_success) << "," << format_double(c.best_success) << "," << c.best_step << ","
           << c.steps_to_threshold << "," << c.wall_ms << "\n";
    }
    return os.str();
}

std::string summary_csv(const std::vector<CellResult>& cells) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const CellResult*>> by_variant;
    for (const CellResult& c : cells) {
        if (!by_variant.count(c.variant)) order.push_back(c.variant);
        by_variant[c.variant].push_back(&c);
    }

    auto mean_stderr = [](const std::vector<double>& xs) {
        double m = 0.0;
        for (double x : xs) m += x;
        m /= xs.size();
        double var = 0.0;
        for (double x : xs) var += (x - m) * (x - m);
        var = xs.size() > 1 ? var / (xs.size() - 1) : 0.0;
        return std::pair<double, double>{m, std::sqrt(var / xs.size())};
    };

    std::ostringstream os;
    os << "variant,cells,failed,final_mean,final_stderr,best_mean,best_stderr,reached_threshold,"
          "steps_to_threshold_mean\n";
    for (const std::string& v : order) {
        const auto& group = by_variant[v];
        std::vector<double> finals, bests;
        std::vector<double> steps;
        int failed = 0;
        for (const CellResult* c : group) {
            if (c->failed) {
                ++failed;
                continue;
            }
            finals.push_back(c->final_success);
            bests.push_back(c->best_success);
            if (c->steps_to_threshold >= 0) steps.push_back(c->steps_to_threshold);
        }
        os << v << "," << group.size() << "," << failed << ",";
        if (finals.empty()) {
            os << "nan,nan,nan,nan,0,nan\n";
            continue;
        }
        const auto [fm, fs] = mean_stderr(finals);
        const auto [bm, bs] = mean_stderr(bests);
        os << format_double(fm) << "," << format_double(fs) << "," << format_double(bm) << "," << format_double(bs)
           << "," << steps.size() << ",";
        if (steps.empty()) {
            os << "nan\n";
        } else {
            double sm = 0.0;
            for (double s : steps) sm += s;
            os << format_double(sm / steps.size()) << "\n";
        }
    }
    return os.str();
}

}  // namespace microvla
