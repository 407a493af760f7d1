#include "sdlora/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdlora/errors.hpp"
#include "sdlora/linalg.hpp"
#include "sdlora/rng.hpp"

namespace sdlora {

namespace {

bool is_sd_family(Variant v) {
    return v == Variant::SDLoRA || v == Variant::SDLoRA_RR || v == Variant::SDLoRA_KD;
}

int pair_rank_for_task(const TrainerConfig& c, int task_index) {
    if (c.variant == Variant::SDLoRA_RR) {
        if (!c.schedule) throw ConfigError("SDLoRA_RR requires a rank schedule");
        return apply_rank_schedule(task_index, *c.schedule);
    }
    return c.lora_rank;
}

// One Adam moment buffer per learnable block.
struct AdamSlot {
    double* params = nullptr;
    std::size_t n = 0;
    std::vector<double> m, v;

    AdamSlot(double* p, std::size_t count) : params(p), n(count), m(count, 0.0), v(count, 0.0) {}

    void apply(const double* grad, const AdamConfig& cfg, double lr, int step) {
        const double c1 = 1.0 - std::pow(cfg.beta1, step);
        const double c2 = 1.0 - std::pow(cfg.beta2, step);
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            params[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
        }
    }
};

// What a variant trains. Alphas are indices into state.alphas; head rows are
// the current task's class block.
struct LearnableSet {
    std::vector<int> alpha_indices;
    bool pairs = false;
    bool dense = false;
};

LearnableSet learnable_set(const AdapterState& state, Variant v, int task_index) {
    LearnableSet ls;
    switch (v) {
        case Variant::FullFineTune:
            ls.dense = true;
            break;
        case Variant::VanillaLoRA:
            ls.pairs = true;
            break;
        case Variant::SDLoRA:
        case Variant::SDLoRA_RR:
        case Variant::SDLoRA_KD:
            ls.pairs = true;
            for (std::size_t k = 0; k < state.alphas.size(); ++k) {
                ls.alpha_indices.push_back(static_cast<int>(k));
            }
            break;
        case Variant::FixedFirstDirection:
            if (task_index == 1) ls.pairs = true;
            if (!state.alphas.empty()) ls.alpha_indices.push_back(0);
            break;
        case Variant::SingleDecoupled:
            ls.pairs = true;
            ls.alpha_indices.push_back(0);
            break;
        case Variant::NoRescale:
            ls.pairs = true;
            ls.alpha_indices.push_back(static_cast<int>(state.alphas.size()) - 1);
            break;
    }
    return ls;
}

Matrix gather_rows(const Matrix& src, const std::vector<int>& order, int begin, int end) {
    Matrix out(end - begin, src.cols());
    for (int i = begin; i < end; ++i) {
        const int r = order[i];
        for (int j = 0; j < src.cols(); ++j) out(i - begin, j) = src(r, j);
    }
    return out;
}

double range_accuracy(const AdapterState& state, const Matrix& xs, const std::vector<int>& ys,
                      ClassRange range) {
    Matrix logits = forward(state, xs);
    int correct = 0;
    for (int i = 0; i < logits.rows(); ++i) {
        int best = range.lo;
        for (int c = range.lo + 1; c < range.hi; ++c) {
            if (logits(i, c) > logits(i, best)) best = c;
        }
        if (best == ys[i]) ++correct;
    }
    return static_cast<double>(correct) / logits.rows();
}

Matrix flatten_stack(const AdapterState& state, int direction_index) {
    std::size_t total = 0;
    for (const auto& l : state.layers) total += l.directions.at(direction_index).size();
    Matrix out(1, static_cast<int>(total));
    std::size_t at = 0;
    for (const auto& l : state.layers) {
        const Matrix& d = l.directions.at(direction_index);
        std::copy(d.data(), d.data() + d.size(), out.data() + at);
        at += d.size();
    }
    return out;
}

nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    j["data"] = m.values();
    return j;
}

Matrix matrix_from_json(const nlohmann::json& j) {
    const int rows = j.at("rows").get<int>();
    const int cols = j.at("cols").get<int>();
    if (rows == 0 && cols == 0) return Matrix();
    return Matrix(rows, cols, j.at("data").get<std::vector<double>>());
}

} // namespace

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::FullFineTune: return "full_finetune";
        case Variant::VanillaLoRA: return "vanilla_lora";
        case Variant::SDLoRA: return "sdlora";
        case Variant::SDLoRA_RR: return "sdlora_rr";
        case Variant::SDLoRA_KD: return "sdlora_kd";
        case Variant::FixedFirstDirection: return "fixed_first_direction";
        case Variant::SingleDecoupled: return "single_decoupled";
        case Variant::NoRescale: return "no_rescale";
    }
    return "unknown";
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : {Variant::FullFineTune, Variant::VanillaLoRA, Variant::SDLoRA,
                      Variant::SDLoRA_RR, Variant::SDLoRA_KD, Variant::FixedFirstDirection,
                      Variant::SingleDecoupled, Variant::NoRescale}) {
        if (name == variant_name(v)) return v;
    }
    throw ConfigError("unknown variant '" + name + "'");
}

void RankSchedule::validate() const {
    if (!(r1 >= r_mu && r_mu >= r_nu && r_nu >= 1)) {
        throw ConfigError("rank schedule must satisfy r1 >= r_mu >= r_nu >= 1");
    }
    if (!(1 <= mu && mu <= nu)) {
        throw ConfigError("rank schedule must satisfy 1 <= mu <= nu");
    }
}

int apply_rank_schedule(int task_index, const RankSchedule& s) {
    s.validate();
    if (task_index < 1) throw ConfigError("apply_rank_schedule: task index must be >= 1");
    if (task_index < s.mu) return s.r1;
    if (task_index < s.nu) return s.r_mu;
    return s.r_nu;
}

void ModelConfig::validate() const {
    if (hidden.empty()) throw ConfigError("model needs at least one adapted layer");
    for (int w : hidden) {
        if (w < 1) throw ConfigError("layer widths must be positive");
    }
    if (init_std < 0) throw ConfigError("init_std must be nonnegative");
    if (norm_epsilon <= 0) throw ConfigError("norm_epsilon must be positive");
}

void TrainerConfig::validate() const {
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
    if (schedule) schedule->validate();
    if (variant == Variant::SDLoRA_RR && !schedule) {
        throw ConfigError("SDLoRA_RR requires a rank schedule");
    }
    if (variant == Variant::SDLoRA_KD && !kd) {
        throw ConfigError("SDLoRA_KD requires a kd block");
    }
    if (kd && kd->tau <= 0) throw ConfigError("kd tau must be positive");
    if (kd && kd->ridge < 0) throw ConfigError("kd ridge must be nonnegative");
    model.validate();
}

AdapterState build_initial_state(const ModelConfig& model, int input_dim,
                                 std::uint64_t seed, bool raw_pair) {
    model.validate();
    if (input_dim < 1) throw ConfigError("input_dim must be positive");
    AdapterState s;
    s.norm_epsilon = model.norm_epsilon;
    s.raw_pair = raw_pair;
    RngStream rng(derive_seed(seed, 0xB05Eu));
    int prev = input_dim;
    for (int width : model.hidden) {
        AdapterLayer l;
        if (model.zero_base) {
            l.base = Matrix(width, prev);
        } else {
            l.base = gaussian_matrix(width, prev, model.base_scale / std::sqrt(prev), rng);
        }
        s.layers.push_back(std::move(l));
        prev = width;
    }
    return s;
}

std::vector<EpochLog> train_task(AdapterState& state, const TaskData& task,
                                 const TrainerConfig& config, int task_index) {
    if (task.train_x.empty()) throw Error("train_task: task has no training data");
    if (state.classes() < task.class_hi()) {
        throw Error("train_task: head does not cover the task's classes; expand it first");
    }
    const ClassRange range{task.class_lo(), task.class_hi()};
    const LearnableSet ls = learnable_set(state, config.variant, task_index);

    // Adam buffers over the learnable blocks.
    std::vector<AdamSlot> slots;
    std::vector<int> slot_alpha;        // parallel: which alpha index (or -1)
    std::vector<std::pair<int, char>> slot_tag;  // (layer, 'a'|'b'|'d'|'h'|'m')
    for (int idx : ls.alpha_indices) {
        slots.emplace_back(&state.alphas[idx], 1);
        slot_alpha.push_back(idx);
        slot_tag.emplace_back(-1, 'm');
    }
    for (std::size_t li = 0; li < state.layers.size(); ++li) {
        AdapterLayer& l = state.layers[li];
        if (ls.pairs && l.pair) {
            slots.emplace_back(l.pair->a.data(), l.pair->a.size());
            slot_alpha.push_back(-1);
            slot_tag.emplace_back(static_cast<int>(li), 'a');
            slots.emplace_back(l.pair->b.data(), l.pair->b.size());
            slot_alpha.push_back(-1);
            slot_tag.emplace_back(static_cast<int>(li), 'b');
        }
        if (ls.dense) {
            if (!l.dense_delta) l.dense_delta = Matrix(l.out_dim(), l.in_dim());
            slots.emplace_back(l.dense_delta->data(), l.dense_delta->size());
            slot_alpha.push_back(-1);
            slot_tag.emplace_back(static_cast<int>(li), 'd');
        }
    }
    // Head block for the current classes (rows are contiguous).
    double* head_block = state.head.data() +
                         static_cast<std::size_t>(range.lo) * state.head.cols();
    const std::size_t head_n = static_cast<std::size_t>(range.width()) * state.head.cols();
    slots.emplace_back(head_block, head_n);
    slot_alpha.push_back(-1);
    slot_tag.emplace_back(-1, 'h');

    const int n_samples = task.train_x.rows();
    std::vector<int> order(n_samples);
    std::iota(order.begin(), order.end(), 0);

    std::vector<EpochLog> log;
    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        RngStream shuffle_rng(derive_seed(config.seed,
                                          0x5u + 1000003ULL * task_index + 7919ULL * epoch));
        shuffle_indices(order, shuffle_rng);

        double loss_sum = 0.0;
        for (int begin = 0; begin < n_samples; begin += config.batch_size) {
            const int end = std::min(n_samples, begin + config.batch_size);
            Batch batch;
            batch.inputs = gather_rows(task.train_x, order, begin, end);
            batch.labels.reserve(end - begin);
            for (int i = begin; i < end; ++i) batch.labels.push_back(task.train_y[order[i]]);

            Gradients g = backward(state, batch, range, config.loss);
            if (!std::isfinite(g.loss)) {
                throw DivergenceError("training loss became non-finite at task " +
                                      std::to_string(task_index) + ", epoch " +
                                      std::to_string(epoch));
            }
            loss_sum += g.loss * (end - begin);

            ++step;
            for (std::size_t si = 0; si < slots.size(); ++si) {
                const double* grad = nullptr;
                double alpha_grad = 0.0;
                const auto [layer, kind] = slot_tag[si];
                switch (kind) {
                    case 'm':
                        alpha_grad = g.d_alpha[slot_alpha[si]];
                        grad = &alpha_grad;
                        break;
                    case 'a': grad = g.layer[layer].d_a.data(); break;
                    case 'b': grad = g.layer[layer].d_b.data(); break;
                    case 'd': grad = g.layer[layer].d_dense.data(); break;
                    case 'h':
                        grad = g.d_head.data() +
                               static_cast<std::size_t>(range.lo) * state.head.cols();
                        break;
                }
                slots[si].apply(grad, config.adam, config.learning_rate, step);
            }
        }
        EpochLog el;
        el.loss = loss_sum / n_samples;
        el.train_accuracy = range_accuracy(state, task.train_x, task.train_y, range);
        log.push_back(el);
    }
    return log;
}

KDOutcome kd_merge(AdapterState& state, const KDConfig& kd) {
    KDOutcome out;
    if (state.layers.empty()) return out;
    const int n_dirs = state.layers.front().directions.count();
    if (n_dirs < 2) return out;
    if (!state.layers.front().pair.has_value() &&
        state.alphas.size() != static_cast<std::size_t>(n_dirs)) {
        throw Error("kd_merge: expected a fully frozen state");
    }
    out.attempted = true;

    std::vector<Matrix> basis;
    basis.reserve(n_dirs - 1);
    for (int k = 0; k < n_dirs - 1; ++k) basis.push_back(flatten_stack(state, k));
    Matrix target = flatten_stack(state, n_dirs - 1);
    LstSqSolution sol = lstsq_over_basis(basis, target, kd.ridge);
    out.coefficients = sol.coefficients;

    bool all = true;
    for (const auto& l : state.layers) {
        Matrix misfit = l.directions.at(n_dirs - 1);
        for (int k = 0; k < n_dirs - 1; ++k) {
            misfit.add_scaled(l.directions.at(k), -sol.coefficients[k]);
        }
        const double r = frobenius_norm(misfit);
        out.residuals.push_back(r);
        const bool m = r <= kd.tau;
        out.merged.push_back(m);
        all = all && m;
    }
    if (all) {
        const double alpha_t = state.alphas.back();
        for (int k = 0; k < n_dirs - 1; ++k) {
            state.alphas[k] += alpha_t * sol.coefficients[k];
        }
        state.alphas.pop_back();
        for (auto& l : state.layers) l.directions.pop_newest();
        out.folded = true;
    }
    return out;
}

long long count_trainable_parameters(const AdapterState& state, const TrainerConfig& config,
                                     int task_index, int current_task_classes) {
    const long long head_block =
        static_cast<long long>(current_task_classes) * state.feature_dim();
    long long pair_params = 0;
    long long dense_params = 0;
    for (const auto& l : state.layers) {
        const int r = l.pair ? l.pair->rank() : pair_rank_for_task(config, task_index);
        pair_params += static_cast<long long>(r) * (l.out_dim() + l.in_dim());
        dense_params += static_cast<long long>(l.out_dim()) * l.in_dim();
    }
    switch (config.variant) {
        case Variant::FullFineTune:
            return dense_params + head_block;
        case Variant::VanillaLoRA:
            return pair_params + head_block;
        case Variant::SDLoRA:
        case Variant::SDLoRA_RR:
        case Variant::SDLoRA_KD:
            return pair_params + static_cast<long long>(state.alphas.size()) + head_block;
        case Variant::FixedFirstDirection:
            return (task_index == 1 ? pair_params : 0) + 1 + head_block;
        case Variant::SingleDecoupled:
        case Variant::NoRescale:
            return pair_params + 1 + head_block;
    }
    return 0;
}

double evaluate_accuracy(const AdapterState& state, const TaskData& task) {
    Matrix logits = forward(state, task.test_x);
    std::vector<int> pred = predict(logits);
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == task.test_y[i]) ++correct;
    }
    return static_cast<double>(correct) / pred.size();
}

StateSnapshot capture_snapshot(const AdapterState& state) {
    StateSnapshot snap;
    for (std::size_t i = 0; i < state.layers.size(); ++i) {
        snap.weights.push_back(effective_weight(state, static_cast<int>(i)));
    }
    snap.head = state.head;
    return snap;
}

RunRecord run_sequence(const TaskSequence& seq, const TrainerConfig& config) {
    config.validate();
    if (seq.tasks.empty()) throw Error("run_sequence: empty task sequence");
    const int dim = seq.tasks.front().train_x.cols();

    AdapterState state = build_initial_state(config.model, dim, config.seed,
                                             config.variant == Variant::VanillaLoRA);
    RunRecord record;
    record.variant = variant_name(config.variant);
    record.seed = config.seed;

    const int n_tasks = static_cast<int>(seq.tasks.size());
    for (int t = 1; t <= n_tasks; ++t) {
        const TaskData& task = seq.tasks[t - 1];
        if (state.classes() != task.class_lo()) {
            throw Error("run_sequence: task class ranges are not consecutive");
        }
        expand_head(state, task.n_classes);

        // Per-variant initialization of the trainable update.
        RngStream init_rng(derive_seed(config.seed, 0xA000u + static_cast<std::uint64_t>(t)));
        const bool fresh_pair =
            is_sd_family(config.variant) || config.variant == Variant::VanillaLoRA ||
            config.variant == Variant::NoRescale ||
            (t == 1 && (config.variant == Variant::FixedFirstDirection ||
                        config.variant == Variant::SingleDecoupled));
        if (fresh_pair) {
            const int r = pair_rank_for_task(config, t);
            for (auto& l : state.layers) {
                LoRAFactorPair p;
                p.a = gaussian_matrix(l.out_dim(), r, config.model.init_std, init_rng);
                p.b = gaussian_matrix(r, l.in_dim(), config.model.init_std, init_rng);
                l.pair = std::move(p);
            }
            if (config.variant != Variant::VanillaLoRA) state.alphas.push_back(1.0);
        } else if (config.variant == Variant::FullFineTune && t == 1) {
            for (auto& l : state.layers) l.dense_delta = Matrix(l.out_dim(), l.in_dim());
        }

        record.epoch_logs.push_back(train_task(state, task, config, t));

        // Consolidation.
        if (is_sd_family(config.variant) || config.variant == Variant::NoRescale ||
            (t == 1 && config.variant == Variant::FixedFirstDirection)) {
            freeze_current(state);
        } else if (config.variant == Variant::VanillaLoRA) {
            for (auto& l : state.layers) {
                if (!l.dense_delta) l.dense_delta = Matrix(l.out_dim(), l.in_dim());
                matmul_add(l.pair->a, l.pair->b, *l.dense_delta);
                l.pair.reset();
            }
        }

        // Residuals of the newest direction against the previous ones,
        // solved independently per layer (the fitting-residual instrument).
        const int n_dirs = state.layers.front().directions.count();
        if (n_dirs >= 2) {
            std::vector<double> row;
            for (const auto& l : state.layers) {
                std::vector<Matrix> basis(l.directions.all().begin(),
                                          l.directions.all().end() - 1);
                row.push_back(lstsq_over_basis(basis, l.directions.at(n_dirs - 1)).residual_norm);
            }
            record.residual_history.push_back(std::move(row));
        }

        if (config.variant == Variant::SDLoRA_KD) {
            KDOutcome out = kd_merge(state, *config.kd);
            if (out.attempted) {
                KDEvent ev;
                ev.task = t;
                ev.residuals = out.residuals;
                ev.merged = out.merged;
                ev.folded = out.folded;
                record.kd_events.push_back(std::move(ev));
            }
        }

        std::vector<double> acc_row;
        for (int k = 0; k < t; ++k) acc_row.push_back(evaluate_accuracy(state, seq.tasks[k]));
        record.accuracy.push_back(std::move(acc_row));
        record.alpha_history.push_back(state.alphas);
        record.direction_counts.push_back(state.layers.front().directions.count());
        record.parameter_counts.push_back(
            count_trainable_parameters(state, config, t, task.n_classes));
        if (config.record_snapshots) record.snapshots.push_back(capture_snapshot(state));
    }
    if (config.record_snapshots) {
        for (const auto& l : state.layers) record.final_directions.push_back(l.directions.all());
    }
    return record;
}

nlohmann::json snapshot_to_json(const StateSnapshot& snap) {
    nlohmann::json j;
    j["weights"] = nlohmann::json::array();
    for (const Matrix& w : snap.weights) j["weights"].push_back(matrix_to_json(w));
    j["head"] = matrix_to_json(snap.head);
    return j;
}

StateSnapshot snapshot_from_json(const nlohmann::json& j) {
    StateSnapshot snap;
    for (const auto& w : j.at("weights")) snap.weights.push_back(matrix_from_json(w));
    snap.head = matrix_from_json(j.at("head"));
    return snap;
}

nlohmann::json record_to_json(const RunRecord& r) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["variant"] = r.variant;
    j["seed"] = r.seed;
    j["accuracy"] = r.accuracy;
    j["alpha_history"] = r.alpha_history;
    j["residual_history"] = r.residual_history;
    j["direction_counts"] = r.direction_counts;
    j["parameter_counts"] = r.parameter_counts;
    j["kd_events"] = nlohmann::json::array();
    for (const KDEvent& ev : r.kd_events) {
        nlohmann::json e;
        e["task"] = ev.task;
        e["residuals"] = ev.residuals;
        e["merged"] = ev.merged;
        e["folded"] = ev.folded;
        j["kd_events"].push_back(e);
    }
    j["epoch_logs"] = nlohmann::json::array();
    for (const auto& task_log : r.epoch_logs) {
        nlohmann::json tl = nlohmann::json::array();
        for (const EpochLog& el : task_log) {
            tl.push_back({{"loss", el.loss}, {"train_accuracy", el.train_accuracy}});
        }
        j["epoch_logs"].push_back(tl);
    }
    if (!r.snapshots.empty()) {
        j["snapshots"] = nlohmann::json::array();
        for (const StateSnapshot& s : r.snapshots) j["snapshots"].push_back(snapshot_to_json(s));
    }
    if (!r.final_directions.empty()) {
        j["final_directions"] = nlohmann::json::array();
        for (const auto& layer : r.final_directions) {
            nlohmann::json jl = nlohmann::json::array();
            for (const Matrix& d : layer) jl.push_back(matrix_to_json(d));
            j["final_directions"].push_back(jl);
        }
    }
    return j;
}

RunRecord record_from_json(const nlohmann::json& j) {
    RunRecord r;
    r.variant = j.at("variant").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.accuracy = j.at("accuracy").get<std::vector<std::vector<double>>>();
    r.alpha_history = j.at("alpha_history").get<std::vector<std::vector<double>>>();
    r.residual_history = j.at("residual_history").get<std::vector<std::vector<double>>>();
    r.direction_counts = j.at("direction_counts").get<std::vector<int>>();
    r.parameter_counts = j.at("parameter_counts").get<std::vector<long long>>();
    for (const auto& e : j.at("kd_events")) {
        KDEvent ev;
        ev.task = e.at("task").get<int>();
        ev.residuals = e.at("residuals").get<std::vector<double>>();
        ev.merged = e.at("merged").get<std::vector<bool>>();
        ev.folded = e.at("folded").get<bool>();
        r.kd_events.push_back(std::move(ev));
    }
    for (const auto& tl : j.at("epoch_logs")) {
        std::vector<EpochLog> task_log;
        for (const auto& el : tl) {
            task_log.push_back({el.at("loss").get<double>(),
                                el.at("train_accuracy").get<double>()});
        }
        r.epoch_logs.push_back(std::move(task_log));
    }
    if (j.contains("snapshots")) {
        for (const auto& s : j.at("snapshots")) r.snapshots.push_back(snapshot_from_json(s));
    }
    if (j.contains("final_directions")) {
        for (const auto& jl : j.at("final_directions")) {
            std::vector<Matrix> layer;
            for (const auto& d : jl) layer.push_back(matrix_from_json(d));
            r.final_directions.push_back(std::move(layer));
        }
    }
    return r;
}

} // namespace sdlora
