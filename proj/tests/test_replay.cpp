#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace gmat;
using gmat::test::random_matrix;

namespace {

Model codec_model(Rng& rng, std::size_t m = 4) {
    return make_model(build_codec(3, {5}, 2, rng), test::random_prototypes(m, 2, rng));
}

TrainConfig short_training() {
    TrainConfig t;
    t.max_epochs = 4;
    t.batch_size = 32;
    return t;
}

TaskStream two_tasks() {
    Dataset d = gen_blobs(4, 200, 0.5, {-10.0, 10.0}, 3);
    return split_tasks(d, {{0, 1}, {2, 3}});
}

} // namespace

TEST(Replay, ZeroScaleSamplesDecodeMeans) {
    Rng rng(1);
    Model m = codec_model(rng);
    m.prototypes.log_scales.fill(-std::numeric_limits<double>::infinity());
    auto gen = snapshot_generator(m);
    auto batch = sample_replay(gen, 50, rng);
    Matrix decoded = decode(*m.codec, m.prototypes.means);
    ASSERT_EQ(batch.x.cols(), 3u);
    for (std::size_t i = 0; i < 50; ++i) {
        const auto j = static_cast<std::size_t>(batch.source[i]);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(batch.x(i, k), decoded(j, k));
    }
}

TEST(Replay, PrototypeChoiceIsUniform) {
    Rng rng(2);
    auto gen = snapshot_generator(codec_model(rng, 4));
    auto batch = sample_replay(gen, 10000, rng);
    std::vector<double> counts(4, 0.0);
    for (int s : batch.source) counts[static_cast<std::size_t>(s)] += 1.0;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - 2500.0) * (c - 2500.0) / 2500.0;
    // chi-square with 3 degrees of freedom at p = 0.01
    EXPECT_LT(chi2, 11.345);
}

TEST(Replay, DeterministicUnderSeed) {
    Rng rng(3);
    auto gen = snapshot_generator(codec_model(rng));
    Rng a(9), b(9);
    auto x = sample_replay(gen, 20, a);
    auto y = sample_replay(gen, 20, b);
    EXPECT_TRUE(x.x == y.x);
    EXPECT_EQ(x.source, y.source);
    EXPECT_THROW(sample_replay(gen, 0, a), ContractError);
}

TEST(Replay, SnapshotIsImmutable) {
    Rng rng(4);
    Model m = codec_model(rng);
    auto gen = snapshot_generator(m, 2);
    const ReplayGenerator copy = gen;
    Dataset d{random_matrix(200, 3, rng), std::nullopt};
    TrainConfig t;
    t.max_epochs = 10;
    t.batch_size = 20;
    train_to_convergence(m, d, t, {}, rng);
    EXPECT_FALSE(m.prototypes == copy.prototypes());
    EXPECT_TRUE(gen == copy);
    EXPECT_EQ(gen.task(), 2u);
    EXPECT_EQ(gen.prototypes().count(), 4u);

    Model again = make_model(gen.codec(), gen.prototypes());
    EXPECT_TRUE(snapshot_generator(again, 2) == gen);
}

TEST(Replay, AugmentedBatchFraction) {
    Rng rng(5);
    Dataset d{random_matrix(10, 2, rng), std::vector<int>(10, 1)};
    TrainHooks hooks;
    hooks.replay_ratio = 0.55;
    hooks.replay = [](std::size_t n, Rng&) { return Matrix(n, 2, 7.0); };
    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    auto b = detail::make_batch(d, idx, hooks, rng);
    ASSERT_EQ(b.x.rows(), 15u);
    std::size_t synthetic = 0;
    for (int l : b.labels) synthetic += l < 0 ? 1 : 0;
    EXPECT_EQ(synthetic, 5u);
    EXPECT_EQ(b.x(14, 0), 7.0);
}

TEST(Replay, ZeroRatioIsSequentialFineTuning) {
    auto stream = two_tasks();
    GrowthConfig g;
    g.enabled = false;

    Rng r1(6);
    Model a = make_model(std::nullopt, init_prototypes(2, 2, InitStrategy::random_normal, r1));
    Model b = a;
    Rng run_a(7), run_b(7);
    continual_fit(a, stream, 0.0, short_training(), g, {}, run_a);
    for (std::size_t t = 0; t < stream.size(); ++t) {
        Rng task_rng = run_b.split("task", t);
        grow_until_converged(b, stream.tasks[t], g, short_training(), {}, task_rng);
    }
    EXPECT_TRUE(a == b);
}

TEST(Replay, SingleTaskNeverSnapshots) {
    auto stream = two_tasks();
    stream.tasks.resize(1);
    GrowthConfig g;
    g.enabled = false;
    Rng r(8);
    Model a = make_model(std::nullopt, init_prototypes(2, 2, InitStrategy::random_normal, r));
    Model b = a;
    Rng ra(9), rb(9);
    auto ha = continual_fit(a, stream, 1.0, short_training(), g, {}, ra);
    continual_fit(b, stream, 0.0, short_training(), g, {}, rb);
    EXPECT_EQ(ha.size(), 1u);
    EXPECT_TRUE(a == b);
}

TEST(Replay, ObserverSeesEveryTask) {
    auto stream = two_tasks();
    GrowthConfig g;
    g.enabled = false;
    Rng r(10);
    Model m = make_model(std::nullopt, init_prototypes(2, 2, InitStrategy::random_normal, r));
    std::vector<std::size_t> seen;
    continual_fit(m, stream, 1.0, short_training(), g, {}, r,
                  [&](std::size_t t, const Model&, const GrowthHistory& h) {
                      seen.push_back(t);
                      EXPECT_EQ(h.size(), 1u);
                  });
    EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1}));
    TaskStream empty;
    EXPECT_THROW(continual_fit(m, empty, 1.0, short_training(), g, {}, r), ContractError);
}
