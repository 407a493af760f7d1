#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sdlora/matrix.hpp"

namespace sdlora {

enum class GenMode { GaussianBlobs, PlantedTeacher };

/// One class-incremental task with materialized train/test splits.
/// Labels are global class ids; task t owns [first_class, first_class + n_classes).
struct TaskData {
    int first_class = 0;
    int n_classes = 0;
    Matrix train_x;               // samples x dim
    std::vector<int> train_y;
    Matrix test_x;
    std::vector<int> test_y;

    int class_lo() const { return first_class; }
    int class_hi() const { return first_class + n_classes; }
};

/// Teacher structure of the planted mode, kept for analysis oracles:
/// per-task score updates delta_t = sum_j coeffs[t][j] * basis[j] (+ radius-
/// bounded perturbation), labels = argmax((teacher_base + delta_t) x).
struct PlantedInfo {
    Matrix teacher_base;              // classes_per_task x dim
    std::vector<Matrix> basis;        // shared, Frobenius-orthonormal
    std::vector<Matrix> deltas;       // one per task
    std::vector<std::vector<double>> coeffs;
    int shared_rank = 0;
    double radius = 0.0;
};

struct GenParams {
    std::uint64_t seed = 7;
    int n_tasks = 5;
    int classes_per_task = 4;
    int dim = 32;
    int train_per_class = 200;
    int test_per_class = 100;
    double separation = 3.0;          // blob mode: class-mean sphere radius
    double noise = 1.0;               // blob mode: sample stddev
    GenMode mode = GenMode::GaussianBlobs;
    int shared_rank = 2;              // planted mode
    double neighborhood_radius = 0.0; // planted mode
    double teacher_scale = 1.0;       // planted mode: coefficient stddev
    double teacher_base_scale = 0.0;  // planted mode: base-weight stddev
};

struct TaskSequence {
    GenParams params;
    std::vector<TaskData> tasks;
    std::optional<PlantedInfo> planted;

    int total_classes() const {
        return tasks.empty() ? 0 : tasks.back().class_hi();
    }
};

/// Deterministic sequence generation. Gaussian-blob mode draws class means
/// uniformly on a sphere of radius `separation` with isotropic noise; the
/// planted mode labels Gaussian inputs by teacher argmax, filling per-class
/// quotas by rejection (throws if a class never shows up).
TaskSequence generate_sequence(const GenParams& params);

/// Versioned binary container plus a JSON sidecar at path + ".meta.json".
void save_sequence(const TaskSequence& seq, const std::string& path);
TaskSequence load_sequence(const std::string& path);

bool operator==(const TaskData& a, const TaskData& b);
bool operator==(const TaskSequence& a, const TaskSequence& b);

} // namespace sdlora
