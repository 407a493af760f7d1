#include "sdlora/taskgen.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sdlora/binio.hpp"
#include "sdlora/errors.hpp"
#include "sdlora/linalg.hpp"
#include "sdlora/rng.hpp"

namespace sdlora {

namespace {

constexpr char kSeqMagic[8] = {'S', 'D', 'L', 'T', 'A', 'S', 'K', 'S'};
constexpr std::uint32_t kSeqVersion = 1;

void validate(const GenParams& p) {
    if (p.n_tasks < 1) throw ConfigError("generate_sequence: n_tasks must be >= 1");
    if (p.dim < 2) throw ConfigError("generate_sequence: dim must be >= 2");
    if (p.classes_per_task < 2) throw ConfigError("generate_sequence: need >= 2 classes per task");
    if (p.train_per_class < 1 || p.test_per_class < 1) {
        throw ConfigError("generate_sequence: need >= 1 train and test sample per class");
    }
    if (p.mode == GenMode::GaussianBlobs) {
        if (p.separation <= 0) throw ConfigError("generate_sequence: separation must be positive");
        if (p.noise <= 0) throw ConfigError("generate_sequence: noise must be positive");
    } else {
        const int ambient = p.classes_per_task * p.dim;
        if (p.shared_rank < 1 || p.shared_rank > ambient) {
            throw ConfigError("generate_sequence: shared_rank outside [1, classes*dim]");
        }
        if (p.neighborhood_radius < 0) {
            throw ConfigError("generate_sequence: neighborhood radius must be nonnegative");
        }
        if (p.teacher_scale <= 0) {
            throw ConfigError("generate_sequence: teacher_scale must be positive");
        }
    }
}

std::vector<double> unit_sphere_point(int dim, RngStream& rng) {
    std::vector<double> v(dim);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            n2 += x * x;
        }
    } while (n2 == 0.0);
    const double inv = 1.0 / std::sqrt(n2);
    for (auto& x : v) x *= inv;
    return v;
}

void fill_blob_task(TaskData& task, const GenParams& p, RngStream& rng) {
    const int c = p.classes_per_task;
    std::vector<std::vector<double>> means;
    means.reserve(c);
    for (int i = 0; i < c; ++i) {
        auto m = unit_sphere_point(p.dim, rng);
        for (auto& x : m) x *= p.separation;
        means.push_back(std::move(m));
    }
    auto draw_split = [&](int per_class, Matrix& xs, std::vector<int>& ys) {
        xs = Matrix(c * per_class, p.dim);
        ys.resize(static_cast<std::size_t>(c) * per_class);
        int row = 0;
        for (int cls = 0; cls < c; ++cls) {
            for (int s = 0; s < per_class; ++s, ++row) {
                for (int d = 0; d < p.dim; ++d) {
                    xs(row, d) = means[cls][d] + rng.normal(0.0, p.noise);
                }
                ys[row] = task.first_class + cls;
            }
        }
    };
    draw_split(p.train_per_class, task.train_x, task.train_y);
    draw_split(p.test_per_class, task.test_x, task.test_y);
}

int teacher_argmax(const Matrix& w, const std::vector<double>& x) {
    int best = 0;
    double best_score = 0.0;
    for (int c = 0; c < w.rows(); ++c) {
        double s = 0.0;
        for (int d = 0; d < w.cols(); ++d) s += w(c, d) * x[d];
        if (c == 0 || s > best_score) {
            best = c;
            best_score = s;
        }
    }
    return best;
}

void fill_planted_task(TaskData& task, const Matrix& teacher, const GenParams& p,
                       RngStream& rng) {
    const int c = p.classes_per_task;
    auto draw_split = [&](int per_class, Matrix& xs, std::vector<int>& ys) {
        xs = Matrix(c * per_class, p.dim);
        ys.resize(static_cast<std::size_t>(c) * per_class);
        std::vector<int> filled(c, 0);
        int remaining = c * per_class;
        std::vector<double> x(p.dim);
        const long budget = 2000L * c * per_class;
        long draws = 0;
        while (remaining > 0) {
            if (++draws > budget) {
                throw Error("planted teacher starves class " +
                            std::to_string(task.first_class) +
                            "..; a class decision region is empty for this seed");
            }
            for (auto& v : x) v = rng.normal();
            const int cls = teacher_argmax(teacher, x);
            if (filled[cls] >= per_class) continue;
            const int row = cls * per_class + filled[cls];
            for (int d = 0; d < p.dim; ++d) xs(row, d) = x[d];
            ys[row] = task.first_class + cls;
            ++filled[cls];
            --remaining;
        }
    };
    draw_split(p.train_per_class, task.train_x, task.train_y);
    draw_split(p.test_per_class, task.test_x, task.test_y);
}

PlantedInfo build_planted_structure(const GenParams& p, RngStream& rng) {
    PlantedInfo info;
    info.shared_rank = p.shared_rank;
    info.radius = p.neighborhood_radius;
    if (p.teacher_base_scale > 0) {
        info.teacher_base = gaussian_matrix(p.classes_per_task, p.dim, p.teacher_base_scale, rng);
    } else {
        info.teacher_base = Matrix(p.classes_per_task, p.dim);
    }
    // Frobenius-orthonormal basis by Gram-Schmidt over flattened draws.
    while (static_cast<int>(info.basis.size()) < p.shared_rank) {
        Matrix cand = gaussian_matrix(p.classes_per_task, p.dim, 1.0, rng);
        for (const Matrix& b : info.basis) {
            cand.add_scaled(b, -frobenius_dot(cand, b));
        }
        const double n = frobenius_norm(cand);
        if (n < 1e-8) continue;
        cand *= 1.0 / n;
        info.basis.push_back(std::move(cand));
    }
    for (int t = 0; t < p.n_tasks; ++t) {
        std::vector<double> coeff(p.shared_rank);
        Matrix delta(p.classes_per_task, p.dim);
        for (int j = 0; j < p.shared_rank; ++j) {
            coeff[j] = rng.normal(0.0, p.teacher_scale);
            delta.add_scaled(info.basis[j], coeff[j]);
        }
        if (p.neighborhood_radius > 0) {
            Matrix pert = gaussian_matrix(p.classes_per_task, p.dim, 1.0, rng);
            const double n = frobenius_norm(pert);
            if (n > 0) {
                pert *= p.neighborhood_radius * rng.uniform01() / n;
                delta.add_scaled(pert, 1.0);
            }
        }
        info.coeffs.push_back(std::move(coeff));
        info.deltas.push_back(std::move(delta));
    }
    return info;
}

} // namespace

TaskSequence generate_sequence(const GenParams& params) {
    validate(params);
    TaskSequence seq;
    seq.params = params;

    if (params.mode == GenMode::PlantedTeacher) {
        RngStream structure_rng(derive_seed(params.seed, 0x7eac4e2));
        seq.planted = build_planted_structure(params, structure_rng);
    }

    for (int t = 0; t < params.n_tasks; ++t) {
        TaskData task;
        task.first_class = t * params.classes_per_task;
        task.n_classes = params.classes_per_task;
        RngStream task_rng(derive_seed(params.seed, 0x1000 + static_cast<std::uint64_t>(t)));
        if (params.mode == GenMode::GaussianBlobs) {
            fill_blob_task(task, params, task_rng);
        } else {
            Matrix teacher = seq.planted->teacher_base;
            teacher.add_scaled(seq.planted->deltas[t], 1.0);
            fill_planted_task(task, teacher, params, task_rng);
        }
        seq.tasks.push_back(std::move(task));
    }
    return seq;
}

void save_sequence(const TaskSequence& seq, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("save_sequence: cannot open " + path);
    const GenParams& p = seq.params;
    binio::write_bytes(out, kSeqMagic, sizeof(kSeqMagic));
    binio::write_u32(out, kSeqVersion);
    binio::write_u64(out, p.seed);
    binio::write_u8(out, p.mode == GenMode::PlantedTeacher ? 1 : 0);
    binio::write_i32(out, p.n_tasks);
    binio::write_i32(out, p.classes_per_task);
    binio::write_i32(out, p.dim);
    binio::write_i32(out, p.train_per_class);
    binio::write_i32(out, p.test_per_class);
    binio::write_f64(out, p.separation);
    binio::write_f64(out, p.noise);
    binio::write_i32(out, p.shared_rank);
    binio::write_f64(out, p.neighborhood_radius);
    binio::write_f64(out, p.teacher_scale);
    binio::write_f64(out, p.teacher_base_scale);
    for (const TaskData& t : seq.tasks) {
        binio::write_i32(out, t.first_class);
        binio::write_i32(out, t.n_classes);
        binio::write_matrix(out, t.train_x);
        binio::write_u32(out, static_cast<std::uint32_t>(t.train_y.size()));
        for (int y : t.train_y) binio::write_i32(out, y);
        binio::write_matrix(out, t.test_x);
        binio::write_u32(out, static_cast<std::uint32_t>(t.test_y.size()));
        for (int y : t.test_y) binio::write_i32(out, y);
    }
    binio::write_u8(out, seq.planted ? 1 : 0);
    if (seq.planted) {
        const PlantedInfo& pi = *seq.planted;
        binio::write_matrix(out, pi.teacher_base);
        binio::write_i32(out, pi.shared_rank);
        binio::write_f64(out, pi.radius);
        binio::write_u32(out, static_cast<std::uint32_t>(pi.basis.size()));
        for (const Matrix& b : pi.basis) binio::write_matrix(out, b);
        binio::write_u32(out, static_cast<std::uint32_t>(pi.deltas.size()));
        for (const Matrix& d : pi.deltas) binio::write_matrix(out, d);
        for (const auto& row : pi.coeffs) {
            binio::write_u32(out, static_cast<std::uint32_t>(row.size()));
            for (double c : row) binio::write_f64(out, c);
        }
    }
    if (!out) throw Error("save_sequence: write failed for " + path);
    out.close();

    nlohmann::json meta;
    meta["schema_version"] = kSeqVersion;
    meta["mode"] = p.mode == GenMode::PlantedTeacher ? "planted_teacher" : "gaussian_blobs";
    meta["seed"] = p.seed;
    meta["n_tasks"] = p.n_tasks;
    meta["classes_per_task"] = p.classes_per_task;
    meta["dim"] = p.dim;
    meta["train_per_class"] = p.train_per_class;
    meta["test_per_class"] = p.test_per_class;
    meta["separation"] = p.separation;
    meta["noise"] = p.noise;
    meta["shared_rank"] = p.shared_rank;
    meta["neighborhood_radius"] = p.neighborhood_radius;
    meta["teacher_scale"] = p.teacher_scale;
    meta["teacher_base_scale"] = p.teacher_base_scale;
    std::ofstream side(path + ".meta.json", std::ios::trunc);
    side << meta.dump(2) << "\n";
}

TaskSequence load_sequence(const std::string& path) {
    binio::Reader r(path);
    if (!r.in) throw Error("load_sequence: cannot open " + path);
    char magic[8];
    r.read(magic, 8, "magic");
    if (std::memcmp(magic, kSeqMagic, 8) != 0) {
        throw ParseError("bad magic; not a task sequence container", 0);
    }
    const std::uint32_t version = r.u32("version");
    if (version != kSeqVersion) {
        throw ParseError("unsupported container version " + std::to_string(version), 8);
    }
    TaskSequence seq;
    GenParams& p = seq.params;
    p.seed = r.u64("seed");
    p.mode = r.u8("mode") ? GenMode::PlantedTeacher : GenMode::GaussianBlobs;
    p.n_tasks = r.i32("n_tasks");
    p.classes_per_task = r.i32("classes_per_task");
    p.dim = r.i32("dim");
    p.train_per_class = r.i32("train_per_class");
    p.test_per_class = r.i32("test_per_class");
    p.separation = r.f64("separation");
    p.noise = r.f64("noise");
    p.shared_rank = r.i32("shared_rank");
    p.neighborhood_radius = r.f64("neighborhood_radius");
    p.teacher_scale = r.f64("teacher_scale");
    p.teacher_base_scale = r.f64("teacher_base_scale");
    if (p.n_tasks < 1 || p.n_tasks > (1 << 20)) {
        throw ParseError("implausible task count", r.offset);
    }
    for (int t = 0; t < p.n_tasks; ++t) {
        TaskData task;
        task.first_class = r.i32("first_class");
        task.n_classes = r.i32("n_classes");
        task.train_x = r.matrix("train_x");
        const std::uint32_t ntr = r.u32("train label count");
        if (ntr != static_cast<std::uint32_t>(task.train_x.rows())) {
            throw ParseError("train label count does not match sample rows", r.offset);
        }
        task.train_y.resize(ntr);
        for (auto& y : task.train_y) y = r.i32("train label");
        task.test_x = r.matrix("test_x");
        const std::uint32_t nte = r.u32("test label count");
        if (nte != static_cast<std::uint32_t>(task.test_x.rows())) {
            throw ParseError("test label count does not match sample rows", r.offset);
        }
        task.test_y.resize(nte);
        for (auto& y : task.test_y) y = r.i32("test label");
        seq.tasks.push_back(std::move(task));
    }
    if (r.u8("planted flag")) {
        PlantedInfo pi;
        pi.teacher_base = r.matrix("teacher_base");
        pi.shared_rank = r.i32("planted shared_rank");
        pi.radius = r.f64("planted radius");
        const std::uint32_t nb = r.u32("basis count");
        for (std::uint32_t i = 0; i < nb; ++i) pi.basis.push_back(r.matrix("basis"));
        const std::uint32_t ndl = r.u32("delta count");
        for (std::uint32_t i = 0; i < ndl; ++i) pi.deltas.push_back(r.matrix("delta"));
        for (std::uint32_t i = 0; i < ndl; ++i) {
            const std::uint32_t nc = r.u32("coeff count");
            std::vector<double> row(nc);
            for (auto& c : row) c = r.f64("coeff");
            pi.coeffs.push_back(std::move(row));
        }
        seq.planted = std::move(pi);
    }
    return seq;
}

bool operator==(const TaskData& a, const TaskData& b) {
    return a.first_class == b.first_class && a.n_classes == b.n_classes &&
           a.train_x == b.train_x && a.train_y == b.train_y && a.test_x == b.test_x &&
           a.test_y == b.test_y;
}

bool operator==(const TaskSequence& a, const TaskSequence& b) {
    if (a.tasks.size() != b.tasks.size()) return false;
    for (std::size_t i = 0; i < a.tasks.size(); ++i) {
        if (!(a.tasks[i] == b.tasks[i])) return false;
    }
    if (a.planted.has_value() != b.planted.has_value()) return false;
    if (a.planted) {
        if (!(a.planted->teacher_base == b.planted->teacher_base)) return false;
        if (a.planted->basis.size() != b.planted->basis.size()) return false;
        for (std::size_t i = 0; i < a.planted->basis.size(); ++i) {
            if (!(a.planted->basis[i] == b.planted->basis[i])) return false;
        }
        if (a.planted->deltas.size() != b.planted->deltas.size()) return false;
        for (std::size_t i = 0; i < a.planted->deltas.size(); ++i) {
            if (!(a.planted->deltas[i] == b.planted->deltas[i])) return false;
        }
        if (a.planted->coeffs != b.planted->coeffs) return false;
    }
    return a.params.seed == b.params.seed && a.params.mode == b.params.mode;
}

} // namespace sdlora
