// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "ada/model.hpp"
#include "ada/synthetic.hpp"
#include "ada/training.hpp"

using namespace ada;

namespace {

struct BenchModel {
    FeaturePipeline pipeline;
    EncodedDataset data;
    AdaEnsembleModel model;
};

BenchModel make_model(int layers, int k_final) {
    SyntheticSpec spec;
    spec.fields = 6;
    spec.levels = 16;
    spec.examples = 2048;
    spec.seed = 17;
    spec.interactions.push_back(
        PlantedInteraction{{0, 1}, PlantedInteraction::Kind::multiplicative, 1.0});
    SyntheticDataset data = generate_synthetic(spec);
    FitOptions options;
    options.min_frequency = 1;
    FeaturePipeline pipeline =
        FeaturePipeline::fit(data.records, synthetic_schema(spec, 8), options);
    EncodedDataset encoded = pipeline.encode_all(data.records);

    ModelConfig cfg;
    cfg.layers = layers;
    cfg.layer_experts.assign(static_cast<std::size_t>(layers),
                             {ExpertKind::pin, ExpertKind::cross, ExpertKind::dense});
    cfg.dense_hidden = 64;
    cfg.k_final = k_final;
    Rng rng(3);
    AdaEnsembleModel model = AdaEnsembleModel::init(cfg, pipeline, rng);
    return BenchModel{std::move(pipeline), std::move(encoded), std::move(model)};
}

}  // namespace

static void BM_InferBatch(benchmark::State& state) {
    BenchModel bm = make_model(2, static_cast<int>(state.range(0)));
    std::span<const EncodedRecord> batch(bm.data.data(), 256);
    for (auto _ : state) {
        InferOutput out = bm.model.forward_infer(batch);
        benchmark::DoNotOptimize(out.probabilities);
    }
    state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_InferBatch)->Arg(1)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
    BenchModel bm = make_model(2, 2);
    std::span<const EncodedRecord> batch(bm.data.data(), 256);
    std::vector<int> labels;
    for (const auto& r : batch) labels.push_back(r.label);
    Adam opt(bm.model.params().tensors(ParamSet::weights), AdamConfig{});
    Rng jitter(5);
    int step = 0;
    for (auto _ : state) {
        Tape tape;
        TrainOutput fwd = bm.model.forward_train(tape, batch, step++, jitter);
        TotalLoss loss = total_loss(tape, fwd, labels, 0.01, 0.01);
        bm.model.params().zero_all_grads();
        tape.backward(loss.total);
        opt.step();
        benchmark::DoNotOptimize(loss.total);
    }
    state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_FullDepthVsEarlyExit(benchmark::State& state) {
    BenchModel bm = make_model(3, 2);
    std::span<const EncodedRecord> batch(bm.data.data(), 256);
    const bool force_full = state.range(0) != 0;
    for (auto _ : state) {
        InferOutput out = bm.model.forward_infer(batch, force_full);
        benchmark::DoNotOptimize(out.flops);
    }
    state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_FullDepthVsEarlyExit)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
