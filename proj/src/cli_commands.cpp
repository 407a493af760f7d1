#include "sdlora/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "sdlora/analysis.hpp"
#include "sdlora/errors.hpp"
#include "sdlora/factorization.hpp"
#include "sdlora/linalg.hpp"
#include "sdlora/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sdlora::cli {

namespace {

void check_keys(const json& j, const std::string& path, std::set<std::string> allowed) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) {
            throw ConfigError("unknown key '" + key + "' at " + path);
        }
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return j;
}

AdamConfig adam_from_json(const json& j, const std::string& path) {
    check_keys(j, path, {"beta1", "beta2", "eps"});
    AdamConfig a;
    a.beta1 = get_or(j, "beta1", a.beta1);
    a.beta2 = get_or(j, "beta2", a.beta2);
    a.eps = get_or(j, "eps", a.eps);
    return a;
}

RankSchedule schedule_from_json(const json& j, const std::string& path) {
    check_keys(j, path, {"mu", "nu", "r1", "r_mu", "r_nu"});
    RankSchedule s;
    s.mu = get_or(j, "mu", s.mu);
    s.nu = get_or(j, "nu", s.nu);
    s.r1 = get_or(j, "r1", s.r1);
    s.r_mu = get_or(j, "r_mu", s.r_mu);
    s.r_nu = get_or(j, "r_nu", s.r_nu);
    s.validate();
    return s;
}

KDConfig kd_from_json(const json& j, const std::string& path) {
    check_keys(j, path, {"tau", "ridge"});
    KDConfig k;
    k.tau = get_or(j, "tau", k.tau);
    k.ridge = get_or(j, "ridge", k.ridge);
    return k;
}

ModelConfig model_from_json(const json& j, const std::string& path) {
    check_keys(j, path, {"hidden", "zero_base", "base_scale", "init_std", "norm_epsilon"});
    ModelConfig m;
    m.hidden = get_or(j, "hidden", m.hidden);
    m.zero_base = get_or(j, "zero_base", m.zero_base);
    m.base_scale = get_or(j, "base_scale", m.base_scale);
    m.init_std = get_or(j, "init_std", m.init_std);
    m.norm_epsilon = get_or(j, "norm_epsilon", m.norm_epsilon);
    return m;
}

TrainerConfig trainer_from_json(const json& j, const std::string& path) {
    check_keys(j, path,
               {"variant", "learning_rate", "epochs", "batch_size", "adam", "lora_rank",
                "rank_schedule", "kd", "loss", "model"});
    TrainerConfig c;
    c.variant = variant_from_name(get_or<std::string>(j, "variant", "sdlora"));
    c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
    c.epochs = get_or(j, "epochs", c.epochs);
    c.batch_size = get_or(j, "batch_size", c.batch_size);
    if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"), path + "/adam");
    c.lora_rank = get_or(j, "lora_rank", c.lora_rank);
    if (j.contains("rank_schedule")) {
        c.schedule = schedule_from_json(j.at("rank_schedule"), path + "/rank_schedule");
    }
    if (j.contains("kd")) c.kd = kd_from_json(j.at("kd"), path + "/kd");
    const std::string loss = get_or<std::string>(j, "loss", "cross_entropy");
    if (loss == "cross_entropy") {
        c.loss = LossKind::CrossEntropy;
    } else if (loss == "squared_error") {
        c.loss = LossKind::SquaredError;
    } else {
        throw ConfigError("unknown loss '" + loss + "' at " + path + "/loss");
    }
    if (j.contains("model")) c.model = model_from_json(j.at("model"), path + "/model");
    return c;
}

AnalysisConfig analysis_from_json(const json& j, const std::string& path) {
    check_keys(j, path, {"snapshots", "interpolate", "points"});
    AnalysisConfig a;
    a.snapshots = get_or(j, "snapshots", a.snapshots);
    a.points = get_or(j, "points", a.points);
    if (j.contains("interpolate")) {
        for (const auto& pair : j.at("interpolate")) {
            if (!pair.is_array() || pair.size() != 2) {
                throw ConfigError("entries of " + path + "/interpolate must be [from, to]");
            }
            a.interpolate.emplace_back(pair[0].get<int>(), pair[1].get<int>());
        }
    }
    return a;
}

struct SeedResult {
    RunRecord record;
    MetricReport metrics;
};

void write_seed_outputs(const fs::path& dir, const SeedResult& result,
                        const AnalysisConfig& analysis, const TaskSequence& seq,
                        const TrainerConfig& trainer) {
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "record.json", std::ios::trunc);
        out << record_to_json(result.record).dump(2) << "\n";
    }
    {
        json m = metric_report_to_json(result.metrics);
        m["variant"] = result.record.variant;
        m["seed"] = result.record.seed;
        std::ofstream out(dir / "metrics.json", std::ios::trunc);
        out << m.dump(2) << "\n";
    }
    write_residual_csv(result.record, (dir / "residuals.csv").string());
    write_magnitude_csv(result.record, (dir / "magnitudes.csv").string());

    for (const auto& [from, to] : analysis.interpolate) {
        const int n = static_cast<int>(result.record.snapshots.size());
        if (from < 1 || to < 1 || from > n || to > n) {
            throw ConfigError("interpolation pair (" + std::to_string(from) + ", " +
                              std::to_string(to) + ") outside the recorded snapshots");
        }
        StateSnapshot a = result.record.snapshots[from - 1];
        StateSnapshot b = result.record.snapshots[to - 1];
        pad_heads_to_match(a, b);
        std::vector<TaskData> eval_tasks(seq.tasks.begin(), seq.tasks.begin() + to);
        InterpolationPath path = interpolate_states(a, b, analysis.points, eval_tasks);
        write_interpolation_csv(path, (dir / ("interp_" + std::to_string(from) + "_" +
                                              std::to_string(to) + ".csv"))
                                          .string());
    }
    (void)trainer;
}

int threads_from(const CmdOptions& opts) {
    if (opts.threads) return std::max(1, *opts.threads);
    if (const char* env = std::getenv("SDLORA_THREADS")) {
        return std::max(1, std::atoi(env));
    }
    return 1;
}

std::string out_dir_from(const CmdOptions& opts, const std::string& config_value) {
    if (opts.out_dir) return *opts.out_dir;
    if (const char* env = std::getenv("SDLORA_OUT")) return env;
    return config_value;
}

} // namespace

GenParams generator_from_json(const json& j, const std::string& path) {
    check_keys(j, path,
               {"seed", "n_tasks", "classes_per_task", "dim", "train_per_class",
                "test_per_class", "separation", "noise", "mode", "shared_rank",
                "neighborhood_radius", "teacher_scale", "teacher_base_scale"});
    GenParams p;
    p.seed = get_or<std::uint64_t>(j, "seed", p.seed);
    p.n_tasks = get_or(j, "n_tasks", p.n_tasks);
    p.classes_per_task = get_or(j, "classes_per_task", p.classes_per_task);
    p.dim = get_or(j, "dim", p.dim);
    p.train_per_class = get_or(j, "train_per_class", p.train_per_class);
    p.test_per_class = get_or(j, "test_per_class", p.test_per_class);
    p.separation = get_or(j, "separation", p.separation);
    p.noise = get_or(j, "noise", p.noise);
    const std::string mode = get_or<std::string>(j, "mode", "gaussian_blobs");
    if (mode == "gaussian_blobs") {
        p.mode = GenMode::GaussianBlobs;
    } else if (mode == "planted_teacher") {
        p.mode = GenMode::PlantedTeacher;
    } else {
        throw ConfigError("unknown mode '" + mode + "' at " + path + "/mode");
    }
    p.shared_rank = get_or(j, "shared_rank", p.shared_rank);
    p.neighborhood_radius = get_or(j, "neighborhood_radius", p.neighborhood_radius);
    p.teacher_scale = get_or(j, "teacher_scale", p.teacher_scale);
    p.teacher_base_scale = get_or(j, "teacher_base_scale", p.teacher_base_scale);
    return p;
}

ExperimentConfig parse_experiment_config(const json& j, const std::string& source) {
    check_keys(j, source,
               {"schema_version", "benchmark", "trainer", "analysis", "output_dir", "seeds",
                "per_seed_datasets"});
    ExperimentConfig c;
    if (j.contains("benchmark")) {
        const json& b = j.at("benchmark");
        check_keys(b, source + "/benchmark", {"generator", "dataset"});
        if (b.contains("generator") == b.contains("dataset")) {
            throw ConfigError(source + "/benchmark needs exactly one of generator|dataset");
        }
        if (b.contains("generator")) {
            c.generator = generator_from_json(b.at("generator"), source + "/benchmark/generator");
        } else {
            c.dataset_path = b.at("dataset").get<std::string>();
        }
    } else {
        c.generator = GenParams{};
    }
    if (j.contains("trainer")) c.trainer = trainer_from_json(j.at("trainer"), source + "/trainer");
    if (j.contains("analysis")) {
        c.analysis = analysis_from_json(j.at("analysis"), source + "/analysis");
    }
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir);
    c.seeds = get_or(j, "seeds", c.seeds);
    c.per_seed_datasets = get_or(j, "per_seed_datasets", c.per_seed_datasets);
    if (c.seeds.empty()) throw ConfigError(source + "/seeds must not be empty");
    c.trainer.record_snapshots = c.analysis.snapshots || !c.analysis.interpolate.empty();
    c.trainer.validate();
    return c;
}

void pad_heads_to_match(StateSnapshot& a, StateSnapshot& b) {
    if (a.head.empty() || b.head.empty()) throw Error("pad_heads_to_match: empty head");
    if (a.head.cols() != b.head.cols()) {
        throw DimensionError("pad_heads_to_match: feature widths differ");
    }
    if (a.head.rows() < b.head.rows()) {
        a.head.append_zero_rows(b.head.rows() - a.head.rows());
    } else if (b.head.rows() < a.head.rows()) {
        b.head.append_zero_rows(a.head.rows() - b.head.rows());
    }
}

int cmd_run(const CmdOptions& opts, std::ostream& err) {
    ExperimentConfig config;
    try {
        config = parse_experiment_config(load_json_file(opts.config_path), opts.config_path);
        if (opts.seeds) config.seeds = *opts.seeds;
        if (config.seeds.empty()) throw ConfigError("empty seed list");
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    const std::string out_root = out_dir_from(opts, config.output_dir);

    std::optional<TaskSequence> shared_seq;
    try {
        if (config.dataset_path) shared_seq = load_sequence(*config.dataset_path);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    const int n_seeds = static_cast<int>(config.seeds.size());
    std::vector<std::exception_ptr> failures(n_seeds);
    std::vector<int> codes(n_seeds, kExitOk);

    auto run_one = [&](int idx) {
        try {
            TrainerConfig trainer = config.trainer;
            trainer.seed = config.seeds[idx];
            TaskSequence seq;
            if (shared_seq) {
                seq = *shared_seq;
            } else {
                GenParams gp = *config.generator;
                if (config.per_seed_datasets) {
                    gp.seed = derive_seed(gp.seed, config.seeds[idx]);
                }
                seq = generate_sequence(gp);
            }
            SeedResult result;
            result.record = run_sequence(seq, trainer);
            result.metrics = compute_metrics(result.record);
            write_seed_outputs(fs::path(out_root) / ("seed_" + std::to_string(config.seeds[idx])),
                               result, config.analysis, seq, trainer);
        } catch (const DivergenceError&) {
            codes[idx] = kExitDivergence;
            failures[idx] = std::current_exception();
        } catch (...) {
            codes[idx] = kExitUsage;
            failures[idx] = std::current_exception();
        }
    };

    const int n_threads = std::min(threads_from(opts), n_seeds);
    if (n_threads <= 1) {
        for (int i = 0; i < n_seeds; ++i) run_one(i);
    } else {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back([&] {
            // static striping keeps the work deterministic per seed
            (void)next;
        });
        for (auto& th : pool) th.join();
        pool.clear();
        for (int t = 0; t < n_threads; ++t) {
            pool.emplace_back([&, t] {
                for (int i = t; i < n_seeds; i += n_threads) run_one(i);
            });
        }
        for (auto& th : pool) th.join();
    }

    for (int i = 0; i < n_seeds; ++i) {
        if (failures[i]) {
            try {
                std::rethrow_exception(failures[i]);
            } catch (const std::exception& e) {
                err << "seed " << config.seeds[i] << ": " << e.what() << "\n";
            }
        }
    }
    for (int code : codes) {
        if (code == kExitDivergence) return kExitDivergence;
    }
    for (int code : codes) {
        if (code != kExitOk) return code;
    }
    return kExitOk;
}

int cmd_theory(const CmdOptions& opts, std::ostream& err) {
    json config;
    std::string out_root;
    std::vector<FactorizationProblem> problems;
    std::vector<std::string> names;
    std::vector<int> kmaxes;
    std::vector<bool> want_csv;
    try {
        config = load_json_file(opts.config_path);
        check_keys(config, opts.config_path, {"schema_version", "problems", "output_dir"});
        out_root = out_dir_from(opts, get_or<std::string>(config, "output_dir", "theory_out"));
        for (const auto& pj : config.value("problems", json::array())) {
            check_keys(pj, opts.config_path + "/problems[]",
                       {"name", "target", "factor_rank", "eta", "rho", "seed", "max_iters",
                        "tol", "k_max", "record_blocks", "csv"});
            FactorizationProblem p;
            const json& tj = pj.at("target");
            check_keys(tj, opts.config_path + "/problems[]/target",
                       {"kind", "values", "rows", "cols", "sigma", "seed"});
            const std::string kind = tj.at("kind").get<std::string>();
            if (kind == "diag") {
                const auto vals = tj.at("values").get<std::vector<double>>();
                Matrix m(static_cast<int>(vals.size()), static_cast<int>(vals.size()));
                for (std::size_t i = 0; i < vals.size(); ++i)
                    m(static_cast<int>(i), static_cast<int>(i)) = vals[i];
                p.target = std::move(m);
            } else if (kind == "random") {
                const int rows = tj.at("rows").get<int>();
                const int cols = tj.at("cols").get<int>();
                const auto sigma = tj.at("sigma").get<std::vector<double>>();
                RngStream rng(get_or<std::uint64_t>(tj, "seed", 0));
                FullSvd qa = svd_complete(gaussian_matrix(rows, rows, 1.0, rng));
                FullSvd qb = svd_complete(gaussian_matrix(cols, cols, 1.0, rng));
                Matrix us(rows, static_cast<int>(sigma.size()));
                for (int j2 = 0; j2 < us.cols(); ++j2)
                    for (int i = 0; i < rows; ++i) us(i, j2) = qa.u(i, j2) * sigma[j2];
                Matrix vt(static_cast<int>(sigma.size()), cols);
                for (int j2 = 0; j2 < vt.rows(); ++j2)
                    for (int i = 0; i < cols; ++i) vt(j2, i) = qb.u(i, j2);
                p.target = matmul(us, vt);
            } else {
                throw ConfigError("unknown target kind '" + kind + "'");
            }
            p.factor_rank = pj.at("factor_rank").get<int>();
            p.eta = get_or(pj, "eta", p.eta);
            p.rho = get_or(pj, "rho", p.rho);
            p.seed = get_or<std::uint64_t>(pj, "seed", p.seed);
            p.max_iters = get_or(pj, "max_iters", p.max_iters);
            p.tol = get_or(pj, "tol", p.tol);
            p.record_blocks = get_or(pj, "record_blocks", p.record_blocks);
            p.validate();
            problems.push_back(std::move(p));
            names.push_back(get_or<std::string>(pj, "name",
                                                "problem_" + std::to_string(names.size())));
            kmaxes.push_back(pj.at("k_max").get<int>());
            want_csv.push_back(get_or(pj, "csv", false));
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    fs::create_directories(out_root);
    json summary = json::array();
    for (std::size_t i = 0; i < problems.size(); ++i) {
        TrajectoryRecord rec = run_trajectory(problems[i], kmaxes[i]);
        json entry = trajectory_summary_json(rec, problems[i].tol);
        entry["name"] = names[i];
        summary.push_back(entry);
        if (want_csv[i]) {
            write_trajectory_csv(rec, (fs::path(out_root) / (names[i] + ".csv")).string());
        }
    }
    std::ofstream out(fs::path(out_root) / "milestones.json", std::ios::trunc);
    out << summary.dump(2) << "\n";
    return kExitOk;
}

int cmd_report(const std::string& run_dir, std::ostream& out, std::ostream& err) {
    std::vector<json> metrics;
    if (!fs::is_directory(run_dir)) {
        err << "error: '" << run_dir << "' is not a directory\n";
        return kExitUsage;
    }
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(run_dir)) {
        if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) {
            entries.push_back(e.path() / "metrics.json");
        }
    }
    std::sort(entries.begin(), entries.end());
    for (const auto& p : entries) {
        std::ifstream in(p);
        if (!in) continue;
        json j;
        in >> j;
        metrics.push_back(std::move(j));
    }
    if (metrics.empty()) {
        err << "error: no seed_*/metrics.json under '" << run_dir << "'\n";
        return kExitUsage;
    }

    auto aggregate = [&](const char* key) {
        std::vector<double> xs;
        for (const json& m : metrics) xs.push_back(m.at(key).get<double>());
        const double n = static_cast<double>(xs.size());
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= n;
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        const double stderr_ = xs.size() > 1 ? std::sqrt(var / (n - 1)) / std::sqrt(n) : 0.0;
        return std::make_pair(mean, stderr_);
    };

    const auto [acc_mean, acc_se] = aggregate("acc");
    const auto [aaa_mean, aaa_se] = aggregate("aaa");
    json report;
    report["schema_version"] = 1;
    report["n_seeds"] = metrics.size();
    report["acc"] = {{"mean", acc_mean}, {"stderr", acc_se}};
    report["aaa"] = {{"mean", aaa_mean}, {"stderr", aaa_se}};
    std::ofstream rf(fs::path(run_dir) / "report.json", std::ios::trunc);
    rf << report.dump(2) << "\n";
    out << "seeds: " << metrics.size() << "\n";
    out << "acc: " << acc_mean << " +/- " << acc_se << "\n";
    out << "aaa: " << aaa_mean << " +/- " << aaa_se << "\n";
    return kExitOk;
}

int cmd_gen(const GenOptions& opts, std::ostream& err) {
    try {
        TaskSequence seq = generate_sequence(opts.params);
        save_sequence(seq, opts.out_path);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}

int cmd_interp(const InterpOptions& opts, std::ostream& err) {
    try {
        json rj = load_json_file(opts.record_path);
        RunRecord record = record_from_json(rj);
        if (record.snapshots.empty()) {
            throw ConfigError("record '" + opts.record_path + "' carries no snapshots");
        }
        const int n = static_cast<int>(record.snapshots.size());
        if (opts.from_task < 1 || opts.to_task < 1 || opts.from_task > n || opts.to_task > n) {
            throw ConfigError("snapshot indices outside [1, " + std::to_string(n) + "]");
        }
        TaskSequence seq = load_sequence(opts.dataset_path);
        std::vector<TaskData> eval_tasks;
        if (opts.eval_tasks.empty()) {
            const int hi = std::max(opts.from_task, opts.to_task);
            eval_tasks.assign(seq.tasks.begin(), seq.tasks.begin() + hi);
        } else {
            for (int t : opts.eval_tasks) {
                if (t < 1 || t > static_cast<int>(seq.tasks.size())) {
                    throw ConfigError("eval task " + std::to_string(t) + " out of range");
                }
                eval_tasks.push_back(seq.tasks[t - 1]);
            }
        }
        StateSnapshot a = record.snapshots[opts.from_task - 1];
        StateSnapshot b = record.snapshots[opts.to_task - 1];
        pad_heads_to_match(a, b);
        InterpolationPath path = interpolate_states(a, b, opts.points, eval_tasks);
        write_interpolation_csv(path, opts.out_csv);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}

} // namespace sdlora::cli
