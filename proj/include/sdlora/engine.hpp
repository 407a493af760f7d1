#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlora/adapter.hpp"
#include "sdlora/taskgen.hpp"

namespace sdlora {

enum class Variant {
    FullFineTune,
    VanillaLoRA,
    SDLoRA,
    SDLoRA_RR,
    SDLoRA_KD,
    FixedFirstDirection,
    SingleDecoupled,
    NoRescale,
};

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

/// Stepwise nonincreasing rank assignment: r1 for t < mu, r_mu for
/// mu <= t < nu, r_nu from nu on.
struct RankSchedule {
    int mu = 4;
    int nu = 8;
    int r1 = 10;
    int r_mu = 8;
    int r_nu = 6;
    void validate() const;
};

int apply_rank_schedule(int task_index, const RankSchedule& s);

struct KDConfig {
    double tau = 9e-4;
    double ridge = 1e-10;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct ModelConfig {
    std::vector<int> hidden = {64, 32};  // adapted layer widths
    bool zero_base = false;              // zero W0 instead of scaled gaussian
    double base_scale = 1.0;             // gaussian base: base_scale / sqrt(fan_in)
    double init_std = 0.02;              // factor-pair initialization stddev
    double norm_epsilon = 1e-12;
    void validate() const;
};

struct TrainerConfig {
    Variant variant = Variant::SDLoRA;
    double learning_rate = 0.008;
    int epochs = 20;
    int batch_size = 128;
    AdamConfig adam;
    std::uint64_t seed = 0;
    int lora_rank = 8;
    std::optional<RankSchedule> schedule;
    std::optional<KDConfig> kd;
    LossKind loss = LossKind::CrossEntropy;
    ModelConfig model;
    bool record_snapshots = false;
    void validate() const;
};

struct EpochLog {
    double loss = 0.0;
    double train_accuracy = 0.0;  // argmax within the task's class range
};

/// Materialized effective weights plus the head, as captured after a task.
struct StateSnapshot {
    std::vector<Matrix> weights;
    Matrix head;
};

struct KDEvent {
    int task = 0;                  // 1-based
    std::vector<double> residuals; // per layer, under the shared coefficients
    std::vector<bool> merged;      // per layer: residual <= tau
    bool folded = false;           // unanimous merge applied
};

struct RunRecord {
    std::string variant;
    std::uint64_t seed = 0;
    std::vector<std::vector<double>> accuracy;        // lower triangle, a[t][k]
    std::vector<std::vector<double>> alpha_history;   // after each task
    std::vector<std::vector<double>> residual_history;// per task >= 2, per layer
    std::vector<KDEvent> kd_events;
    std::vector<int> direction_counts;                // per task
    std::vector<long long> parameter_counts;          // per task
    std::vector<std::vector<EpochLog>> epoch_logs;
    std::vector<StateSnapshot> snapshots;             // when recorded
    std::vector<std::vector<Matrix>> final_directions;// when recorded: [layer][k]
};

/// Fresh network for a sequence: frozen bases, empty head, no adapters.
AdapterState build_initial_state(const ModelConfig& model, int input_dim,
                                 std::uint64_t seed, bool raw_pair);

/// Minibatch training of one task with the variant's learnable set; every
/// parameter outside that set stays bitwise untouched. task_index is 1-based.
std::vector<EpochLog> train_task(AdapterState& state, const TaskData& task,
                                 const TrainerConfig& config, int task_index);

struct KDOutcome {
    std::vector<double> residuals;
    std::vector<bool> merged;
    std::vector<double> coefficients;
    bool attempted = false;
    bool folded = false;
};

/// Least-squares assimilation of the newest frozen direction. One coefficient
/// vector is solved over the layer-concatenated directions (the shared
/// magnitudes leave no room for per-layer coefficients); the threshold is
/// then applied to every layer's own residual under those coefficients and
/// folding requires unanimity. On fold, alpha_k += alpha_t * c_k, the newest
/// direction and the last magnitude are removed.
KDOutcome kd_merge(AdapterState& state, const KDConfig& kd);

/// Exact scalar count of the variant's learnable set while training
/// task_index (1-based); current_task_classes sizes the trained head block.
long long count_trainable_parameters(const AdapterState& state, const TrainerConfig& config,
                                     int task_index, int current_task_classes);

/// Accuracy on the task's test split under global argmax over all classes
/// the state has seen.
double evaluate_accuracy(const AdapterState& state, const TaskData& task);

StateSnapshot capture_snapshot(const AdapterState& state);

/// Full driver: head expansion, per-variant initialization, training,
/// freezing, KD, and evaluation over all earlier test splits.
RunRecord run_sequence(const TaskSequence& seq, const TrainerConfig& config);

nlohmann::json record_to_json(const RunRecord& record);
RunRecord record_from_json(const nlohmann::json& j);

nlohmann::json snapshot_to_json(const StateSnapshot& snap);
StateSnapshot snapshot_from_json(const nlohmann::json& j);

} // namespace sdlora
