#include "sdlora/analysis.hpp"

#include <fstream>

#include "sdlora/errors.hpp"
#include "sdlora/linalg.hpp"

namespace sdlora {

namespace {

double stack_distance(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    if (a.size() != b.size()) throw DimensionError("snapshot layer counts differ");
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += frobenius_norm(a[i] - b[i]);
    }
    return d;
}

AdapterState state_from_snapshot(const StateSnapshot& snap) {
    AdapterState s;
    for (const Matrix& w : snap.weights) {
        AdapterLayer l;
        l.base = w;
        s.layers.push_back(std::move(l));
    }
    s.head = snap.head;
    return s;
}

} // namespace

MetricReport compute_metrics(const RunRecord& record) {
    const std::size_t n = record.accuracy.size();
    if (n == 0) throw Error("compute_metrics: empty accuracy matrix");
    for (std::size_t t = 0; t < n; ++t) {
        if (record.accuracy[t].size() != t + 1) {
            throw Error("compute_metrics: accuracy matrix incomplete at row " +
                        std::to_string(t + 1));
        }
    }
    MetricReport rep;
    rep.final_per_task = record.accuracy.back();
    double acc = 0.0;
    for (double a : rep.final_per_task) acc += a;
    rep.acc = acc / static_cast<double>(n);
    double aaa = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        double row = 0.0;
        for (double a : record.accuracy[t]) row += a;
        aaa += row / static_cast<double>(t + 1);
    }
    rep.aaa = aaa / static_cast<double>(n);
    return rep;
}

Matrix relative_distance_matrix(const std::vector<StateSnapshot>& snapshots,
                                const StateSnapshot& base) {
    if (snapshots.size() < 2) throw Error("relative_distance_matrix: need >= 2 snapshots");
    const int n = static_cast<int>(snapshots.size());
    std::vector<double> to_base(n);
    for (int i = 0; i < n; ++i) {
        to_base[i] = stack_distance(snapshots[i].weights, base.weights);
    }
    Matrix out(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double denom = 0.5 * (to_base[i] + to_base[j]);
            if (denom == 0.0) {
                throw Error("relative_distance_matrix: entry (" + std::to_string(i) + "," +
                            std::to_string(j) + ") undefined, both states sit at the base");
            }
            const double d = stack_distance(snapshots[i].weights, snapshots[j].weights) / denom;
            out(i, j) = d;
            out(j, i) = d;
        }
    }
    return out;
}

std::vector<std::vector<double>> fitting_residual_curve(const RunRecord& record) {
    if (record.final_directions.empty()) {
        throw Error("fitting_residual_curve: record carries no direction snapshots");
    }
    const int n_dirs = static_cast<int>(record.final_directions.front().size());
    std::vector<std::vector<double>> curve;
    for (int t = 2; t <= n_dirs; ++t) {
        std::vector<double> row;
        for (const auto& layer : record.final_directions) {
            std::vector<Matrix> basis(layer.begin(), layer.begin() + (t - 1));
            row.push_back(lstsq_over_basis(basis, layer[t - 1]).residual_norm);
        }
        curve.push_back(std::move(row));
    }
    return curve;
}

std::vector<std::vector<double>> magnitude_history(const RunRecord& record) {
    if (record.alpha_history.empty()) {
        throw Error("magnitude_history: record carries no magnitude snapshots");
    }
    return record.alpha_history;
}

InterpolationPath interpolate_states(const StateSnapshot& a, const StateSnapshot& b,
                                     int n_points, const std::vector<TaskData>& tasks) {
    if (n_points < 2) throw Error("interpolate_states: need at least two points");
    if (a.weights.size() != b.weights.size() || !a.head.same_shape(b.head)) {
        throw DimensionError("interpolate_states: snapshot architectures differ");
    }
    for (std::size_t i = 0; i < a.weights.size(); ++i) {
        if (!a.weights[i].same_shape(b.weights[i])) {
            throw DimensionError("interpolate_states: layer " + std::to_string(i) +
                                 " shapes differ");
        }
    }

    InterpolationPath path;
    for (int p = 0; p < n_points; ++p) {
        const double lambda = static_cast<double>(p) / (n_points - 1);
        StateSnapshot mix;
        for (std::size_t i = 0; i < a.weights.size(); ++i) {
            Matrix w = a.weights[i] * (1.0 - lambda);
            w.add_scaled(b.weights[i], lambda);
            mix.weights.push_back(std::move(w));
        }
        mix.head = a.head * (1.0 - lambda);
        mix.head.add_scaled(b.head, lambda);

        AdapterState s = state_from_snapshot(mix);
        std::vector<double> accs;
        for (const TaskData& task : tasks) accs.push_back(evaluate_accuracy(s, task));
        path.lambdas.push_back(lambda);
        path.accuracies.push_back(std::move(accs));
    }
    return path;
}

nlohmann::json metric_report_to_json(const MetricReport& report) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["acc"] = report.acc;
    j["aaa"] = report.aaa;
    j["final_per_task"] = report.final_per_task;
    return j;
}

void write_residual_csv(const RunRecord& record, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path);
    out << "task,layer,residual\n";
    for (std::size_t t = 0; t < record.residual_history.size(); ++t) {
        for (std::size_t l = 0; l < record.residual_history[t].size(); ++l) {
            out << (t + 2) << "," << l << "," << record.residual_history[t][l] << "\n";
        }
    }
}

void write_magnitude_csv(const RunRecord& record, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path);
    out << "after_task,k,alpha\n";
    for (std::size_t t = 0; t < record.alpha_history.size(); ++t) {
        for (std::size_t k = 0; k < record.alpha_history[t].size(); ++k) {
            out << (t + 1) << "," << (k + 1) << "," << record.alpha_history[t][k] << "\n";
        }
    }
}

void write_interpolation_csv(const InterpolationPath& path_data, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path);
    out << "lambda,task,accuracy\n";
    for (std::size_t p = 0; p < path_data.lambdas.size(); ++p) {
        for (std::size_t t = 0; t < path_data.accuracies[p].size(); ++t) {
            out << path_data.lambdas[p] << "," << (t + 1) << ","
                << path_data.accuracies[p][t] << "\n";
        }
    }
}

} // namespace sdlora
