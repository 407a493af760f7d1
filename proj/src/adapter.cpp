#include "sdlora/adapter.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "sdlora/binio.hpp"
#include "sdlora/errors.hpp"

namespace sdlora {

namespace {

constexpr char kStateMagic[8] = {'S', 'D', 'L', 'S', 'T', 'A', 'T', 'E'};
constexpr std::uint32_t kStateVersion = 1;

void check_composition(const AdapterState& s) {
    const int dirs = s.layers.empty() ? 0 : s.layers.front().directions.count();
    for (const auto& l : s.layers) {
        if (l.directions.count() != dirs) {
            throw Error("adapter state: direction counts differ across layers");
        }
    }
    if (s.raw_pair) {
        if (!s.alphas.empty()) {
            throw Error("adapter state: raw pair composition cannot carry magnitudes");
        }
        return;
    }
    const bool has_pair = !s.layers.empty() && s.layers.front().pair.has_value();
    const std::size_t expected = static_cast<std::size_t>(dirs) + (has_pair ? 1 : 0);
    if (s.alphas.size() != expected) {
        throw Error("adapter state: magnitude count " + std::to_string(s.alphas.size()) +
                    " does not match directions " + std::to_string(dirs) +
                    (has_pair ? " plus current pair" : ""));
    }
}

inline double relu(double x) { return x > 0 ? x : 0; }

struct LayerCache {
    Matrix eff;                    // effective weight
    Matrix pre;                    // pre-activation, batch x out
    Matrix post;                   // activation output
    Matrix direction;              // normalized current pair (decoupled only)
    double pair_norm = 0.0;        // ||AB||_F
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Matrix logits;
};

Matrix layer_effective_weight(const AdapterState& s, const AdapterLayer& l,
                              Matrix* direction_out, double* pair_norm_out) {
    Matrix w = l.base;
    if (l.dense_delta) w.add_scaled(*l.dense_delta, 1.0);
    for (int k = 0; k < l.directions.count(); ++k) {
        w.add_scaled(l.directions.at(k), s.alphas[k]);
    }
    if (l.pair) {
        if (s.raw_pair) {
            matmul_add(l.pair->a, l.pair->b, w);
        } else {
            Matrix p = matmul(l.pair->a, l.pair->b);
            const double n = frobenius_norm(p);
            if (n < s.norm_epsilon) {
                throw DegenerateDirectionError(
                    "current pair product norm " + std::to_string(n) +
                    " below epsilon; reinitialize the factors");
            }
            p *= 1.0 / n;
            w.add_scaled(p, s.alphas.back());
            if (direction_out) *direction_out = std::move(p);
            if (pair_norm_out) *pair_norm_out = n;
        }
    }
    return w;
}

ForwardCache forward_cached(const AdapterState& s, const Matrix& inputs) {
    if (s.layers.empty()) throw Error("adapter state has no layers");
    check_composition(s);
    if (inputs.cols() != s.input_dim()) {
        throw DimensionError("forward: input dim " + std::to_string(inputs.cols()) +
                             " does not match first layer " + std::to_string(s.input_dim()));
    }
    if (s.head.empty()) throw Error("forward: head is empty; expand it first");
    if (s.head.cols() != s.feature_dim()) {
        throw DimensionError("forward: head width does not match feature dim");
    }

    ForwardCache cache;
    cache.layers.resize(s.layers.size());
    const Matrix* x = &inputs;
    const int n_layers = static_cast<int>(s.layers.size());
    for (int i = 0; i < n_layers; ++i) {
        LayerCache& lc = cache.layers[i];
        lc.eff = layer_effective_weight(s, s.layers[i], &lc.direction, &lc.pair_norm);
        lc.pre = matmul(*x, lc.eff.transposed());
        lc.post = lc.pre;
        if (i + 1 < n_layers) {
            double* p = lc.post.data();
            for (std::size_t t = 0; t < lc.post.size(); ++t) p[t] = relu(p[t]);
        }
        x = &lc.post;
    }
    cache.logits = matmul(*x, s.head.transposed());
    return cache;
}

} // namespace

void DirectionSet::append(Matrix d) {
    const double n = frobenius_norm(d);
    if (std::abs(n - 1.0) > 1e-9) {
        throw Error("DirectionSet: direction norm " + std::to_string(n) +
                    " violates the unit-norm invariant");
    }
    dirs_.push_back(std::move(d));
}

void DirectionSet::pop_newest() {
    if (dirs_.empty()) throw Error("DirectionSet: pop on empty set");
    dirs_.pop_back();
}

Matrix normalize_direction(const LoRAFactorPair& pair, double eps) {
    if (eps <= 0) throw Error("normalize_direction: eps must be positive");
    if (pair.a.cols() != pair.b.rows()) {
        throw DimensionError("normalize_direction: factor inner dims disagree");
    }
    Matrix p = matmul(pair.a, pair.b);
    const double n = frobenius_norm(p);
    if (n < eps) {
        throw DegenerateDirectionError("factor product norm " + std::to_string(n) +
                                       " below epsilon " + std::to_string(eps));
    }
    p *= 1.0 / n;
    return p;
}

Matrix effective_weight(const AdapterState& state, int layer_index) {
    if (layer_index < 0 || layer_index >= static_cast<int>(state.layers.size())) {
        throw DimensionError("effective_weight: layer index out of range");
    }
    check_composition(state);
    return layer_effective_weight(state, state.layers[layer_index], nullptr, nullptr);
}

void expand_head(AdapterState& state, int n_new) {
    if (n_new <= 0) throw Error("expand_head: class count must be positive");
    if (state.head.empty()) {
        state.head = Matrix(n_new, state.feature_dim());
    } else {
        state.head.append_zero_rows(n_new);
    }
}

Matrix forward(const AdapterState& state, const Matrix& inputs) {
    return forward_cached(state, inputs).logits;
}

Gradients backward(const AdapterState& state, const Batch& batch, ClassRange range,
                   LossKind loss_kind) {
    if (range.lo < 0 || range.hi > (state.head.empty() ? 0 : state.head.rows()) ||
        range.width() <= 0) {
        throw Error("backward: class range outside the current head");
    }
    const int batch_n = batch.inputs.rows();
    if (static_cast<int>(batch.labels.size()) != batch_n) {
        throw DimensionError("backward: label count does not match batch rows");
    }
    for (int lbl : batch.labels) {
        if (lbl < range.lo || lbl >= range.hi) {
            throw Error("backward: label " + std::to_string(lbl) +
                        " outside class range [" + std::to_string(range.lo) + ", " +
                        std::to_string(range.hi) + ")");
        }
    }

    ForwardCache cache = forward_cached(state, batch.inputs);
    const Matrix& logits = cache.logits;

    // Loss and its gradient on the masked class block.
    Gradients g;
    Matrix dlogits(batch_n, logits.cols());
    const double inv_n = 1.0 / batch_n;
    double loss = 0.0;
    if (loss_kind == LossKind::CrossEntropy) {
        for (int i = 0; i < batch_n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = range.lo; c < range.hi; ++c) mx = std::max(mx, logits(i, c));
            double z = 0.0;
            for (int c = range.lo; c < range.hi; ++c) z += std::exp(logits(i, c) - mx);
            loss -= (logits(i, batch.labels[i]) - mx - std::log(z)) * inv_n;
            for (int c = range.lo; c < range.hi; ++c) {
                const double p = std::exp(logits(i, c) - mx) / z;
                dlogits(i, c) = (p - (c == batch.labels[i] ? 1.0 : 0.0)) * inv_n;
            }
        }
    } else {
        for (int i = 0; i < batch_n; ++i) {
            for (int c = range.lo; c < range.hi; ++c) {
                const double d = logits(i, c) - (c == batch.labels[i] ? 1.0 : 0.0);
                loss += 0.5 * d * d * inv_n;
                dlogits(i, c) = d * inv_n;
            }
        }
    }
    g.loss = loss;

    g.d_head = matmul(dlogits.transposed(), cache.layers.back().post);
    Matrix dx = matmul(dlogits, state.head);

    const int n_layers = static_cast<int>(state.layers.size());
    g.layer.resize(n_layers);
    g.d_alpha.assign(state.alphas.size(), 0.0);

    for (int i = n_layers - 1; i >= 0; --i) {
        const AdapterLayer& l = state.layers[i];
        const LayerCache& lc = cache.layers[i];
        Matrix dz = std::move(dx);
        if (i + 1 < n_layers) {
            // ReLU mask from the cached pre-activations.
            for (int r = 0; r < dz.rows(); ++r)
                for (int c = 0; c < dz.cols(); ++c)
                    if (lc.pre(r, c) <= 0) dz(r, c) = 0.0;
        }
        const Matrix& below = (i == 0) ? batch.inputs : cache.layers[i - 1].post;
        Matrix weight_grad = matmul(dz.transposed(), below);  // out x in
        if (i > 0) dx = matmul(dz, lc.eff);

        for (int k = 0; k < l.directions.count(); ++k) {
            g.d_alpha[k] += frobenius_dot(weight_grad, l.directions.at(k));
        }
        LayerGradients& lg = g.layer[i];
        if (l.pair) {
            if (state.raw_pair) {
                lg.d_a = matmul(weight_grad, l.pair->b.transposed());
                lg.d_b = matmul(l.pair->a.transposed(), weight_grad);
            } else {
                const double along = frobenius_dot(weight_grad, lc.direction);
                g.d_alpha.back() += along;
                Matrix gp = weight_grad;
                gp.add_scaled(lc.direction, -along);
                gp *= state.alphas.back() / lc.pair_norm;
                lg.d_a = matmul(gp, l.pair->b.transposed());
                lg.d_b = matmul(l.pair->a.transposed(), gp);
            }
        }
        lg.d_dense = std::move(weight_grad);
    }
    return g;
}

void freeze_current(AdapterState& state) {
    check_composition(state);
    if (state.raw_pair) throw Error("freeze_current: raw pair composition does not freeze");
    std::vector<Matrix> normalized;
    normalized.reserve(state.layers.size());
    for (const auto& l : state.layers) {
        if (!l.pair) throw Error("freeze_current: a layer has no current pair");
        normalized.push_back(normalize_direction(*l.pair, state.norm_epsilon));
    }
    for (std::size_t i = 0; i < state.layers.size(); ++i) {
        state.layers[i].directions.append(std::move(normalized[i]));
        state.layers[i].pair.reset();
    }
}

std::vector<int> predict(const Matrix& logits) {
    if (logits.empty()) throw Error("predict: empty logits");
    std::vector<int> out(logits.rows());
    for (int i = 0; i < logits.rows(); ++i) {
        int best = 0;
        for (int c = 1; c < logits.cols(); ++c) {
            if (logits(i, c) > logits(i, best)) best = c;
        }
        out[i] = best;
    }
    return out;
}

void save_state(const AdapterState& state, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("save_state: cannot open " + path);
    binio::write_bytes(out, kStateMagic, sizeof(kStateMagic));
    binio::write_u32(out, kStateVersion);
    binio::write_u8(out, state.raw_pair ? 1 : 0);
    binio::write_f64(out, state.norm_epsilon);
    binio::write_u32(out, static_cast<std::uint32_t>(state.layers.size()));
    for (const auto& l : state.layers) {
        binio::write_matrix(out, l.base);
        binio::write_u8(out, l.dense_delta ? 1 : 0);
        if (l.dense_delta) binio::write_matrix(out, *l.dense_delta);
        binio::write_u32(out, static_cast<std::uint32_t>(l.directions.count()));
        for (int k = 0; k < l.directions.count(); ++k) binio::write_matrix(out, l.directions.at(k));
        binio::write_u8(out, l.pair ? 1 : 0);
        if (l.pair) {
            binio::write_matrix(out, l.pair->a);
            binio::write_matrix(out, l.pair->b);
        }
    }
    binio::write_u32(out, static_cast<std::uint32_t>(state.alphas.size()));
    for (double a : state.alphas) binio::write_f64(out, a);
    binio::write_matrix(out, state.head);
    if (!out) throw Error("save_state: write failed for " + path);
}

AdapterState load_state(const std::string& path) {
    binio::Reader r(path);
    if (!r.in) throw Error("load_state: cannot open " + path);
    char magic[8];
    r.read(magic, 8, "magic");
    if (std::memcmp(magic, kStateMagic, 8) != 0) {
        throw ParseError("bad magic; not an adapter snapshot", 0);
    }
    const std::uint32_t version = r.u32("version");
    if (version != kStateVersion) {
        throw ParseError("unsupported snapshot version " + std::to_string(version), 8);
    }
    AdapterState s;
    s.raw_pair = r.u8("raw_pair") != 0;
    s.norm_epsilon = r.f64("norm_epsilon");
    const std::uint32_t n_layers = r.u32("layer count");
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        AdapterLayer l;
        l.base = r.matrix("base");
        if (r.u8("dense flag")) l.dense_delta = r.matrix("dense delta");
        const std::uint32_t nd = r.u32("direction count");
        for (std::uint32_t k = 0; k < nd; ++k) l.directions.append(r.matrix("direction"));
        if (r.u8("pair flag")) {
            LoRAFactorPair p;
            p.a = r.matrix("pair a");
            p.b = r.matrix("pair b");
            l.pair = std::move(p);
        }
        s.layers.push_back(std::move(l));
    }
    const std::uint32_t na = r.u32("alpha count");
    for (std::uint32_t i = 0; i < na; ++i) s.alphas.push_back(r.f64("alpha"));
    s.head = r.matrix("head");
    return s;
}

std::uint64_t matrix_digest(const Matrix& m, std::uint64_t h) {
    constexpr std::uint64_t prime = 1099511628211ULL;
    const auto mix_bytes = [&h, prime](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= prime;
        }
    };
    const int dims[2] = {m.rows(), m.cols()};
    mix_bytes(dims, sizeof(dims));
    if (!m.empty()) mix_bytes(m.data(), m.size() * sizeof(double));
    return h;
}

std::uint64_t state_digest(const AdapterState& state) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& l : state.layers) {
        h = matrix_digest(l.base, h);
        if (l.dense_delta) h = matrix_digest(*l.dense_delta, h);
        for (int k = 0; k < l.directions.count(); ++k) h = matrix_digest(l.directions.at(k), h);
        if (l.pair) {
            h = matrix_digest(l.pair->a, h);
            h = matrix_digest(l.pair->b, h);
        }
    }
    Matrix alphas = state.alphas.empty()
                        ? Matrix()
                        : Matrix(1, static_cast<int>(state.alphas.size()), state.alphas);
    h = matrix_digest(alphas, h);
    h = matrix_digest(state.head, h);
    return h;
}

} // namespace sdlora
