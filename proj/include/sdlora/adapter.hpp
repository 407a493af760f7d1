#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sdlora/linalg.hpp"
#include "sdlora/matrix.hpp"

namespace sdlora {

/// Low-rank factor pair; the update a layer is currently training.
/// a is (m x r), b is (r x n).
struct LoRAFactorPair {
    Matrix a;
    Matrix b;
    int rank() const { return a.cols(); }
};

/// Frozen unit-Frobenius directions, append-only.
class DirectionSet {
public:
    /// Appends a direction, validating unit Frobenius norm to 1e-9.
    void append(Matrix d);
    const Matrix& at(int k) const { return dirs_[k]; }
    int count() const { return static_cast<int>(dirs_.size()); }
    void pop_newest();
    const std::vector<Matrix>& all() const { return dirs_; }

private:
    std::vector<Matrix> dirs_;
};

struct AdapterLayer {
    Matrix base;                          // W0, never written after construction
    DirectionSet directions;
    std::optional<LoRAFactorPair> pair;   // current trainable factors
    std::optional<Matrix> dense_delta;    // dense update slot for baselines

    int out_dim() const { return base.rows(); }
    int in_dim() const { return base.cols(); }
};

/// Layers plus the shared magnitude vector and the growing class head.
///
/// In the decoupled composition (raw_pair = false) the effective weight of a
/// layer is W0 [+ dense] + sum_k alpha_k * dir_k, with the current pair
/// entering as alpha_last * (AB / ||AB||_F). With raw_pair = true the pair
/// enters as plain AB and alphas must stay empty.
struct AdapterState {
    std::vector<AdapterLayer> layers;
    std::vector<double> alphas;           // shared across layers
    Matrix head;                          // classes x feature_dim; empty before task 1
    double norm_epsilon = 1e-12;
    bool raw_pair = false;

    int input_dim() const { return layers.front().in_dim(); }
    int feature_dim() const { return layers.back().out_dim(); }
    int classes() const { return head.empty() ? 0 : head.rows(); }
};

/// (A*B) / ||A*B||_F. Throws DegenerateDirectionError when ||A*B||_F < eps.
Matrix normalize_direction(const LoRAFactorPair& pair, double eps);

Matrix effective_weight(const AdapterState& state, int layer_index);

/// Appends `n_new` zero rows to the head (creating it on first use).
void expand_head(AdapterState& state, int n_new);

/// Full forward pass. Inputs are (batch x input_dim), one sample per row;
/// hidden layers apply ReLU, the last adapted layer feeds the head linearly.
/// Returns logits (batch x classes).
Matrix forward(const AdapterState& state, const Matrix& inputs);

struct Batch {
    Matrix inputs;
    std::vector<int> labels;  // global class ids
};

struct ClassRange {
    int lo = 0;
    int hi = 0;  // exclusive
    int width() const { return hi - lo; }
};

enum class LossKind { CrossEntropy, SquaredError };

struct LayerGradients {
    Matrix d_a;      // set when the layer has a pair
    Matrix d_b;
    Matrix d_dense;  // plain weight gradient, for dense-update training
};

struct Gradients {
    double loss = 0.0;
    std::vector<double> d_alpha;
    std::vector<LayerGradients> layer;
    Matrix d_head;   // full head shape; rows outside the class range are zero
};

/// Analytic gradients of the mean per-sample loss over the batch. The loss
/// sees only logits inside `range` (class-incremental masking); labels must
/// fall inside the range. Gradients flow through the Frobenius normalization
/// of the current pair:
///   with P = AB, D = P/||P||, upstream weight gradient G:
///   G_P = alpha_t (G - <G,D> D) / ||P||,  dA = G_P B^T,  dB = A^T G_P.
Gradients backward(const AdapterState& state, const Batch& batch, ClassRange range,
                   LossKind loss_kind);

/// Normalizes every layer's current pair, appends it to the direction set and
/// clears the pair slot. Atomic: throws without modifying the state if any
/// layer is degenerate. The last magnitude stays in place.
void freeze_current(AdapterState& state);

/// Per-row argmax; ties break toward the lowest class index.
std::vector<int> predict(const Matrix& logits);

void save_state(const AdapterState& state, const std::string& path);
AdapterState load_state(const std::string& path);

/// FNV-1a digest over every stored scalar; used to assert bitwise
/// immutability of frozen parts across training.
std::uint64_t state_digest(const AdapterState& state);
std::uint64_t matrix_digest(const Matrix& m, std::uint64_t h = 1469598103934665603ULL);

} // namespace sdlora
