#pragma once

#include <string>
#include <vector>

#include "sdlora/engine.hpp"

namespace sdlora {

struct MetricReport {
    double acc = 0.0;                    // mean of the final accuracy row
    double aaa = 0.0;                    // mean over t of the running row means
    std::vector<double> final_per_task;
};

/// Acc and AAA from a complete lower-triangular accuracy matrix.
MetricReport compute_metrics(const RunRecord& record);

/// Pairwise distances between snapshots, normalized by the symmetric mean of
/// their distances to the base network: entry (i, j) =
/// d(W_i, W_j) / (0.5 (d(W_i, W_0) + d(W_j, W_0))), where d sums per-layer
/// Frobenius distances over the adapted layers (head excluded). Zero
/// diagonal; throws when both denominators vanish.
Matrix relative_distance_matrix(const std::vector<StateSnapshot>& snapshots,
                                const StateSnapshot& base);

/// Least-squares residual of each frozen direction against its predecessors,
/// recomputed per layer from the record's stored direction sets. Requires a
/// record produced with snapshots enabled.
std::vector<std::vector<double>> fitting_residual_curve(const RunRecord& record);

/// The magnitude table: one row per task, alphas as recorded after that task.
std::vector<std::vector<double>> magnitude_history(const RunRecord& record);

struct InterpolationPath {
    std::vector<double> lambdas;
    std::vector<std::vector<double>> accuracies;  // [lambda][task]
};

/// Accuracy along the straight line between two materialized states:
/// every layer weight and the head are (1 - lambda) a + lambda b on a uniform
/// lambda grid. Shapes must match exactly.
InterpolationPath interpolate_states(const StateSnapshot& a, const StateSnapshot& b,
                                     int n_points, const std::vector<TaskData>& tasks);

nlohmann::json metric_report_to_json(const MetricReport& report);

void write_residual_csv(const RunRecord& record, const std::string& path);
void write_magnitude_csv(const RunRecord& record, const std::string& path);
void write_interpolation_csv(const InterpolationPath& path_data, const std::string& path);

} // namespace sdlora
