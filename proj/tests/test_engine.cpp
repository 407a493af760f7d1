#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sdlora/engine.hpp"
#include "sdlora/errors.hpp"
#include "sdlora/linalg.hpp"
#include "sdlora/rng.hpp"

using namespace sdlora;

namespace {

GenParams tiny_benchmark(int n_tasks = 2) {
    GenParams p;
    p.seed = 7;
    p.n_tasks = n_tasks;
    p.classes_per_task = 2;
    p.dim = 8;
    p.train_per_class = 30;
    p.test_per_class = 10;
    p.separation = 3.0;
    p.noise = 0.8;
    return p;
}

TrainerConfig tiny_config(Variant v) {
    TrainerConfig c;
    c.variant = v;
    c.learning_rate = 0.01;
    c.epochs = 4;
    c.batch_size = 16;
    c.seed = 3;
    c.lora_rank = 2;
    c.model.hidden = {10, 6};
    if (v == Variant::SDLoRA_RR) c.schedule = RankSchedule{1, 2, 2, 2, 1};
    if (v == Variant::SDLoRA_KD) c.kd = KDConfig{};
    return c;
}

Matrix unit_dir(Matrix m) {
    m *= 1.0 / frobenius_norm(m);
    return m;
}

} // namespace

TEST_CASE("rank schedule follows the stepwise reduction") {
    RankSchedule s{4, 8, 10, 8, 6};
    CHECK(apply_rank_schedule(1, s) == 10);
    CHECK(apply_rank_schedule(3, s) == 10);
    CHECK(apply_rank_schedule(4, s) == 8);
    CHECK(apply_rank_schedule(7, s) == 8);
    CHECK(apply_rank_schedule(8, s) == 6);
    CHECK(apply_rank_schedule(10, s) == 6);

    // mu == nu collapses the middle tier
    RankSchedule two{3, 3, 10, 8, 6};
    CHECK(apply_rank_schedule(2, two) == 10);
    CHECK(apply_rank_schedule(3, two) == 6);

    // constant schedule
    RankSchedule flat{2, 4, 5, 5, 5};
    for (int t = 1; t <= 6; ++t) CHECK(apply_rank_schedule(t, flat) == 5);

    RankSchedule bad{4, 2, 10, 8, 6};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    RankSchedule increasing{2, 4, 6, 8, 10};
    CHECK_THROWS_AS(increasing.validate(), ConfigError);

    // monotone over the whole horizon
    int prev = 1 << 30;
    for (int t = 1; t <= 12; ++t) {
        const int r = apply_rank_schedule(t, s);
        CHECK(r <= prev);
        prev = r;
    }
}

TEST_CASE("separable two-class task trains to high accuracy") {
    GenParams p = tiny_benchmark(1);
    p.separation = 4.0;
    p.train_per_class = 60;
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA);
    c.epochs = 30;
    RunRecord r = run_sequence(seq, c);
    REQUIRE(r.epoch_logs.size() == 1);
    CHECK(r.epoch_logs[0].back().train_accuracy >= 0.99);
}

TEST_CASE("zero epochs leave the state untouched") {
    GenParams p = tiny_benchmark(1);
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA);
    c.epochs = 0;

    AdapterState state = build_initial_state(c.model, p.dim, c.seed, false);
    expand_head(state, seq.tasks[0].n_classes);
    RngStream rng(1);
    for (auto& l : state.layers) {
        LoRAFactorPair pr;
        pr.a = gaussian_matrix(l.out_dim(), 2, 0.02, rng);
        pr.b = gaussian_matrix(2, l.in_dim(), 0.02, rng);
        l.pair = std::move(pr);
    }
    state.alphas.push_back(1.0);

    const std::uint64_t before = state_digest(state);
    auto log = train_task(state, seq.tasks[0], c, 1);
    CHECK(log.empty());
    CHECK(state_digest(state) == before);
}

TEST_CASE("learnable-set discipline per variant") {
    GenParams p = tiny_benchmark(2);
    TaskSequence seq = generate_sequence(p);

    for (Variant v : {Variant::FullFineTune, Variant::VanillaLoRA, Variant::SDLoRA,
                      Variant::SDLoRA_RR, Variant::SDLoRA_KD, Variant::FixedFirstDirection,
                      Variant::SingleDecoupled, Variant::NoRescale}) {
        CAPTURE(variant_name(v));
        TrainerConfig c = tiny_config(v);
        TaskSequence two = seq;

        // Replicate the driver's steps so frozen parts can be digested
        // between the two tasks.
        AdapterState state = build_initial_state(c.model, p.dim, c.seed,
                                                 v == Variant::VanillaLoRA);
        const std::vector<std::uint64_t> base_digests = {
            matrix_digest(state.layers[0].base), matrix_digest(state.layers[1].base)};

        auto init_task = [&](int t) {
            expand_head(state, two.tasks[t - 1].n_classes);
            RngStream rng(derive_seed(c.seed, 900 + t));
            const bool fresh = v != Variant::FullFineTune &&
                               !(t == 2 && (v == Variant::FixedFirstDirection ||
                                            v == Variant::SingleDecoupled));
            if (fresh) {
                for (auto& l : state.layers) {
                    LoRAFactorPair pr;
                    pr.a = gaussian_matrix(l.out_dim(), 2, 0.02, rng);
                    pr.b = gaussian_matrix(2, l.in_dim(), 0.02, rng);
                    l.pair = std::move(pr);
                }
                if (v != Variant::VanillaLoRA) state.alphas.push_back(1.0);
            }
            if (v == Variant::FullFineTune && t == 1) {
                for (auto& l : state.layers) l.dense_delta = Matrix(l.out_dim(), l.in_dim());
            }
        };

        init_task(1);
        train_task(state, two.tasks[0], c, 1);
        const bool freezes = v == Variant::SDLoRA || v == Variant::SDLoRA_RR ||
                             v == Variant::SDLoRA_KD || v == Variant::NoRescale ||
                             v == Variant::FixedFirstDirection;
        if (freezes) {
            freeze_current(state);
        } else if (v == Variant::VanillaLoRA) {
            for (auto& l : state.layers) {
                l.dense_delta = Matrix(l.out_dim(), l.in_dim());
                matmul_add(l.pair->a, l.pair->b, *l.dense_delta);
                l.pair.reset();
            }
        }

        std::vector<std::uint64_t> dir_digests;
        for (const auto& l : state.layers) {
            for (int k = 0; k < l.directions.count(); ++k) {
                dir_digests.push_back(matrix_digest(l.directions.at(k)));
            }
        }
        const std::uint64_t head_row0 = matrix_digest(state.head);  // task-1 head rows only
        std::vector<double> alphas_after_t1 = state.alphas;

        init_task(2);
        train_task(state, two.tasks[1], c, 2);

        // Bases never move.
        CHECK(matrix_digest(state.layers[0].base) == base_digests[0]);
        CHECK(matrix_digest(state.layers[1].base) == base_digests[1]);

        // Frozen directions never move.
        std::size_t di = 0;
        for (const auto& l : state.layers) {
            for (int k = 0; k < l.directions.count() && di < dir_digests.size(); ++k) {
                CHECK(matrix_digest(l.directions.at(k)) == dir_digests[di++]);
            }
        }

        // Task-1 head rows are outside task 2's learnable set.
        Matrix head_t1(two.tasks[0].n_classes, state.head.cols());
        for (int i = 0; i < head_t1.rows(); ++i)
            for (int j = 0; j < head_t1.cols(); ++j) head_t1(i, j) = state.head(i, j);
        Matrix head_t1_before(two.tasks[0].n_classes, state.head.cols());
        (void)head_t1_before;
        // digest comparison: recompute digest over the first rows only
        std::uint64_t h1 = matrix_digest(head_t1);
        (void)head_row0;
        // reference digest of the same rows right after task 1
        // (the full-head digest changed because rows were appended)
        // so recompute from the stored alphas instead:
        (void)h1;

        if (v == Variant::NoRescale) {
            // all magnitudes but the newest stay pinned
            for (std::size_t k = 0; k + 1 < state.alphas.size(); ++k) {
                CHECK(state.alphas[k] == alphas_after_t1[k]);
            }
        }
        if (v == Variant::VanillaLoRA || v == Variant::FullFineTune) {
            CHECK(state.alphas.empty());
        }
    }
}

TEST_CASE("old head rows stay bitwise fixed while training a later task") {
    GenParams p = tiny_benchmark(2);
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA);

    AdapterState state = build_initial_state(c.model, p.dim, c.seed, false);
    expand_head(state, 2);
    RngStream rng(11);
    for (auto& l : state.layers) {
        LoRAFactorPair pr;
        pr.a = gaussian_matrix(l.out_dim(), 2, 0.02, rng);
        pr.b = gaussian_matrix(2, l.in_dim(), 0.02, rng);
        l.pair = std::move(pr);
    }
    state.alphas.push_back(1.0);
    train_task(state, seq.tasks[0], c, 1);
    freeze_current(state);

    std::vector<double> head_rows(state.head.data(),
                                  state.head.data() + state.head.size());

    expand_head(state, 2);
    for (auto& l : state.layers) {
        LoRAFactorPair pr;
        pr.a = gaussian_matrix(l.out_dim(), 2, 0.02, rng);
        pr.b = gaussian_matrix(2, l.in_dim(), 0.02, rng);
        l.pair = std::move(pr);
    }
    state.alphas.push_back(1.0);
    train_task(state, seq.tasks[1], c, 2);

    for (std::size_t i = 0; i < head_rows.size(); ++i) {
        CHECK(state.head.data()[i] == head_rows[i]);
    }
}

TEST_CASE("kd_merge folds an in-span direction and preserves the weights") {
    AdapterState s;
    AdapterLayer l;
    RngStream rng(5);
    l.base = gaussian_matrix(3, 4, 1.0, rng);
    Matrix d1 = Matrix(3, 4);
    d1(0, 0) = 1.0;
    Matrix d2 = Matrix(3, 4);
    d2(1, 1) = 1.0;
    Matrix d3 = d1 * 0.6 + d2 * 0.8;
    l.directions.append(d1);
    l.directions.append(d2);
    l.directions.append(d3);
    s.layers.push_back(std::move(l));
    s.alphas = {1.5, -0.7, 2.0};
    expand_head(s, 2);

    Matrix before = effective_weight(s, 0);
    KDConfig kd;
    KDOutcome out = kd_merge(s, kd);
    CHECK(out.attempted);
    REQUIRE(out.residuals.size() == 1);
    CHECK(out.residuals[0] <= 1e-8);
    CHECK(out.folded);
    CHECK(s.layers[0].directions.count() == 2);
    CHECK(s.alphas.size() == 2);
    CHECK(s.alphas[0] == doctest::Approx(1.5 + 2.0 * 0.6));
    CHECK(s.alphas[1] == doctest::Approx(-0.7 + 2.0 * 0.8));
    Matrix after = effective_weight(s, 0);
    CHECK(frobenius_norm(before - after) <= kd.tau * 2.0 + 1e-8);
}

TEST_CASE("kd_merge keeps an out-of-span direction") {
    AdapterState s;
    AdapterLayer l;
    l.base = Matrix(2, 3);
    Matrix d1 = Matrix(2, 3);
    d1(0, 0) = 1.0;
    Matrix d2 = Matrix(2, 3);
    d2(1, 2) = 1.0;
    l.directions.append(d1);
    l.directions.append(d2);
    s.layers.push_back(std::move(l));
    s.alphas = {1.0, 1.0};
    expand_head(s, 2);

    KDOutcome out = kd_merge(s, KDConfig{});
    CHECK(out.attempted);
    CHECK(!out.folded);
    CHECK(out.residuals[0] == doctest::Approx(1.0));
    CHECK(s.layers[0].directions.count() == 2);
    CHECK(s.alphas.size() == 2);
}

TEST_CASE("kd_merge skips with fewer than two directions") {
    AdapterState s;
    AdapterLayer l;
    l.base = Matrix(2, 2);
    Matrix d1 = Matrix(2, 2);
    d1(0, 0) = 1.0;
    l.directions.append(d1);
    s.layers.push_back(std::move(l));
    s.alphas = {1.0};
    KDOutcome out = kd_merge(s, KDConfig{});
    CHECK(!out.attempted);
    CHECK(!out.folded);
}

TEST_CASE("kd_merge unanimity across layers") {
    // Layer 1's newest direction fits; layer 2's does not: nothing folds.
    AdapterState s;
    for (int li = 0; li < 2; ++li) {
        AdapterLayer l;
        l.base = Matrix(2, 2);
        Matrix d1(2, 2), d2(2, 2), d3(2, 2);
        d1(0, 0) = 1.0;
        d2(0, 1) = 1.0;
        if (li == 0) {
            d3 = d1 * 0.6 + d2 * 0.8;
        } else {
            d3(1, 1) = 1.0;  // orthogonal to the span
        }
        l.directions.append(d1);
        l.directions.append(d2);
        l.directions.append(d3);
        s.layers.push_back(std::move(l));
    }
    s.alphas = {1.0, 1.0, 1.0};
    expand_head(s, 2);
    KDOutcome out = kd_merge(s, KDConfig{});
    CHECK(out.attempted);
    CHECK(!out.folded);
    CHECK(s.layers[0].directions.count() == 3);
    CHECK(s.alphas.size() == 3);

    // With agreeing layers the fold preserves each layer's effective weight.
    AdapterState s2;
    for (int li = 0; li < 2; ++li) {
        AdapterLayer l;
        l.base = Matrix(2, 2);
        Matrix d1(2, 2), d2(2, 2);
        d1(li, 0) = 1.0;
        d2(li, 1) = 1.0;
        Matrix d3 = d1 * 0.6 + d2 * 0.8;
        l.directions.append(d1);
        l.directions.append(d2);
        l.directions.append(d3);
        s2.layers.push_back(std::move(l));
    }
    s2.alphas = {0.5, 1.5, -1.2};
    expand_head(s2, 2);
    Matrix b0 = effective_weight(s2, 0);
    Matrix b1 = effective_weight(s2, 1);
    KDOutcome out2 = kd_merge(s2, KDConfig{});
    CHECK(out2.folded);
    CHECK(frobenius_norm(b0 - effective_weight(s2, 0)) <= KDConfig{}.tau * 1.2 + 1e-8);
    CHECK(frobenius_norm(b1 - effective_weight(s2, 1)) <= KDConfig{}.tau * 1.2 + 1e-8);
}

TEST_CASE("trainable parameter counts") {
    TrainerConfig c = tiny_config(Variant::SDLoRA);
    c.model.hidden = {6};
    AdapterState s = build_initial_state(c.model, 4, 1, false);
    expand_head(s, 3);
    // task 1: pair rank 2 on a 6x4 layer, one alpha, 3 head rows of width 6
    LoRAFactorPair pr;
    pr.a = Matrix(6, 2);
    pr.a(0, 0) = 1;
    pr.b = Matrix(2, 4);
    pr.b(0, 0) = 1;
    s.layers[0].pair = std::move(pr);
    s.alphas = {1.0};
    CHECK(count_trainable_parameters(s, c, 1, 3) == 2 * (6 + 4) + 1 + 3 * 6);

    c.variant = Variant::FullFineTune;
    CHECK(count_trainable_parameters(s, c, 1, 3) == 6 * 4 + 3 * 6);

    c.variant = Variant::VanillaLoRA;
    CHECK(count_trainable_parameters(s, c, 1, 3) == 2 * (6 + 4) + 3 * 6);

    c.variant = Variant::FixedFirstDirection;
    CHECK(count_trainable_parameters(s, c, 2, 3) == 1 + 3 * 6);

    c.variant = Variant::NoRescale;
    CHECK(count_trainable_parameters(s, c, 2, 3) == 2 * (6 + 4) + 1 + 3 * 6);
}

TEST_CASE("rank reduction lowers the count against plain sdlora") {
    TrainerConfig sd = tiny_config(Variant::SDLoRA);
    sd.lora_rank = 10;
    TrainerConfig rr = tiny_config(Variant::SDLoRA_RR);
    rr.schedule = RankSchedule{4, 8, 10, 8, 6};

    AdapterState s = build_initial_state(sd.model, 8, 1, false);
    expand_head(s, 2);
    for (int t = 4; t <= 10; ++t) {
        s.alphas.assign(t, 1.0);
        const long long sd_count = count_trainable_parameters(s, sd, t, 2);
        const long long rr_count = count_trainable_parameters(s, rr, t, 2);
        CHECK(rr_count < sd_count);
    }
}

TEST_CASE("run_sequence produces the lower triangle and direction counts") {
    GenParams p = tiny_benchmark(3);
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA);
    RunRecord r = run_sequence(seq, c);

    REQUIRE(r.accuracy.size() == 3);
    for (int t = 0; t < 3; ++t) {
        CHECK(static_cast<int>(r.accuracy[t].size()) == t + 1);
        for (double a : r.accuracy[t]) {
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
        }
    }
    CHECK(r.direction_counts == std::vector<int>{1, 2, 3});
    CHECK(r.alpha_history.back().size() == 3);
    // every alpha starts from one and is recorded after training
    CHECK(r.alpha_history[0].size() == 1);
    CHECK(r.residual_history.size() == 2);  // tasks 2 and 3
}

TEST_CASE("identical seed and config reproduce the record bitwise") {
    GenParams p = tiny_benchmark(2);
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA_KD);
    c.record_snapshots = true;
    RunRecord a = run_sequence(seq, c);
    RunRecord b = run_sequence(seq, c);
    CHECK(record_to_json(a).dump() == record_to_json(b).dump());

    c.seed += 1;
    RunRecord d = run_sequence(seq, c);
    CHECK(record_to_json(a).dump() != record_to_json(d).dump());
}

TEST_CASE("divergence guard reports non-finite loss") {
    GenParams p = tiny_benchmark(1);
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA);
    c.learning_rate = 1e308;
    c.epochs = 3;
    CHECK_THROWS_AS(run_sequence(seq, c), DivergenceError);
}

TEST_CASE("record json round trip") {
    GenParams p = tiny_benchmark(2);
    TaskSequence seq = generate_sequence(p);
    TrainerConfig c = tiny_config(Variant::SDLoRA);
    c.record_snapshots = true;
    RunRecord r = run_sequence(seq, c);
    nlohmann::json j = record_to_json(r);
    RunRecord back = record_from_json(j);
    CHECK(record_to_json(back).dump() == j.dump());
}
