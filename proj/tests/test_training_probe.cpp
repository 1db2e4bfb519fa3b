// Slow: full-width network memorising one batch. Registered as its own ctest
// entry so the unit suite stays fast.

#include <cstdio>

#include <gtest/gtest.h>

#include "qpcnet/estimator.hpp"

using namespace qpcnet;

TEST(TrainingProbe, OverfitsSingleBatch) {
    dataset::BatchSpec spec;
    spec.grid = dataset::ParamGrid::evenly_spaced(3);
    spec.batch_size = 200;
    spec.duration = 20.0;
    const dataset::LabeledBatch batch = dataset::generate_batch(spec, 42);

    nn::ModelConfig model;
    model.input_len = batch.trace_len;
    model.classes = 3;
    estimator::TrainConfig cfg;
    cfg.steps_per_batch = 3000;
    cfg.total_steps = 3000;
    cfg.eval_every = 500;
    cfg.seed = 1;
    const estimator::BatchSource source = [&](std::size_t) -> const dataset::LabeledBatch& { return batch; };
    // Evaluating on the training batch itself measures memorisation.
    const auto result = estimator::train_on(cfg, model, source, batch, std::nullopt, [](const estimator::MetricRecord& r) {
        std::printf("step %zu loss %.4f fidelity %.4f\n", r.step, r.loss, r.fidelity);
        std::fflush(stdout);
    });
    EXPECT_GE(result.log.records.back().fidelity, 0.95);
}
