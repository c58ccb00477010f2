// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>

#include "ada/error.hpp"
#include "ada/sparse_moe.hpp"
#include "support/grad_check.hpp"

using namespace ada;
using testsupport::random_tensor;

namespace {

MoeLayerConfig small_layer_config(int fields = 3, int dim = 4) {
    MoeLayerConfig cfg;
    cfg.experts = {ExpertKind::pin, ExpertKind::cross, ExpertKind::dense};
    cfg.dims.fields = fields;
    cfg.dims.embedding_dim = dim;
    cfg.dims.dense_hidden = 6;
    cfg.gate.reduction_ratio = 4;
    cfg.gate.hidden_dim = 8;
    cfg.gate.jitter_eps = 0.01;
    return cfg;
}

std::vector<Tensor> batch_of(std::size_t n, int fields, int dim, Rng& rng) {
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < n; ++i)
        xs.push_back(testsupport::random_tensor(
            {static_cast<std::size_t>(fields), static_cast<std::size_t>(dim)}, rng, false));
    return xs;
}

// Plain softmax for oracles.
std::vector<double> softmax_oracle(std::span<const double> xs) {
    double mx = xs[0];
    for (double v : xs) mx = std::max(mx, v);
    std::vector<double> out(xs.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = std::exp(xs[i] - mx);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

}  // namespace

TEST_SUITE("sparse_moe") {

TEST_CASE("gating scores are deterministic in eval mode and bounded by 1/tau") {
    Rng rng(51);
    GatingNetwork gate(12, 4, GateConfig{4, 8, 0.01, 0.05}, rng);
    Tensor input = random_tensor({12}, rng, false);
    Tape tape(false);
    Tensor s1 = gate.scores(tape, input, false, nullptr);
    Tensor s2 = gate.scores(tape, input, false, nullptr);
    REQUIRE(s1.size() == 4);
    for (std::size_t j = 0; j < 4; ++j) CHECK(s1.at(j) == s2.at(j));

    const double bound = 1.0 / gate.temperature() + 1e-12;
    for (int trial = 0; trial < 200; ++trial) {
        Tensor x = random_tensor({12}, rng, false, -5.0, 5.0);
        Tensor s = gate.scores(tape, x, false, nullptr);
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(s.at(j) <= bound);
            CHECK(s.at(j) >= -bound);
        }
    }
}

TEST_CASE("hidden state aligned with an expert embedding scores 1/tau") {
    Rng rng(52);
    GateConfig gc;
    gc.reduction_ratio = 1;
    gc.hidden_dim = 2;
    GatingNetwork gate(2, 2, gc, rng);
    ParamRegistry registry;
    gate.register_params(registry, "g");
    Tensor w_reduce = registry.find("g.w_reduce")->tensor;
    Tensor w_project = registry.find("g.w_project")->tensor;
    Tensor e0 = registry.find("g.embed0")->tensor;
    w_reduce.mutable_values() = {1, 0, 0, 1};
    w_project.mutable_values() = {1, 0, 0, 1};
    Tensor input = Tensor::from({2}, {3.0, 4.0});  // positive, relu passes it
    e0.mutable_values() = {3.0, 4.0};              // parallel to h

    Tape tape(false);
    Tensor s = gate.scores(tape, input, false, nullptr);
    // raw tau initializes so the temperature is exactly 1.
    CHECK(gate.temperature() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.at(0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("training jitter perturbs the scores, eval ignores the rng") {
    Rng rng(53);
    GatingNetwork gate(8, 3, GateConfig{2, 4, 0.05, 0.05}, rng);
    Tensor input = random_tensor({8}, rng, false, 0.5, 1.5);
    Tape tape(false);
    Rng j1(99), j2(99), j3(100);
    Tensor a = gate.scores(tape, input, true, &j1);
    Tensor b = gate.scores(tape, input, true, &j2);
    Tensor c = gate.scores(tape, input, true, &j3);
    Tensor eval = gate.scores(tape, input, false, nullptr);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.at(i) == b.at(i));  // same stream, same noise
    bool differs = false;
    for (std::size_t i = 0; i < 3; ++i)
        differs = differs || a.at(i) != c.at(i) || a.at(i) != eval.at(i);
    CHECK(differs);
}

TEST_CASE("top_k_gate masks to exact zeros and normalizes the survivors") {
    Tape tape(false);
    Tensor g = Tensor::from({3}, {0.5, 0.2, -0.1});
    TopKResult r = top_k_gate(tape, g, 2);
    CHECK(r.weights.at(0) == doctest::Approx(0.5744).epsilon(1e-3));
    CHECK(r.weights.at(1) == doctest::Approx(0.4256).epsilon(1e-3));
    CHECK(r.weights.at(2) == 0.0);
    CHECK(r.decision.selected == std::vector<int>{0, 1});

    TopKResult top1 = top_k_gate(tape, g, 1);
    CHECK(top1.weights.at(0) == 1.0);
    CHECK(top1.weights.at(1) == 0.0);

    // k = N reduces to the plain softmax.
    TopKResult full = top_k_gate(tape, g, 3);
    auto expect = softmax_oracle(g.values());
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(full.weights.at(i) == doctest::Approx(expect[i]).epsilon(1e-12));

    CHECK_THROWS_AS(top_k_gate(tape, g, 0), ConfigError);
    CHECK_THROWS_AS(top_k_gate(tape, g, 4), ConfigError);
}

TEST_CASE("top_k_gate breaks ties toward the lower expert index") {
    Tape tape(false);
    Tensor g = Tensor::from({4}, {0.7, 0.7, 0.7, 0.7});
    TopKResult r = top_k_gate(tape, g, 2);
    CHECK(r.decision.selected == std::vector<int>{0, 1});
    TopKResult one = top_k_gate(tape, g, 1);
    CHECK(one.decision.selected == std::vector<int>{0});
}

TEST_CASE("gate decisions satisfy the weight contract for all k") {
    Rng rng(54);
    Tape tape(false);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(6);
        Tensor g = random_tensor({n}, rng, false, -2.0, 2.0);
        for (int k = 1; k <= static_cast<int>(n); ++k) {
            TopKResult r = top_k_gate(tape, g, k);
            double sum = 0.0;
            int nonzero = 0;
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(r.decision.weights[j] >= 0.0);
                sum += r.decision.weights[j];
                nonzero += r.decision.weights[j] != 0.0;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
            CHECK(nonzero <= k);
            CHECK(static_cast<int>(r.decision.selected.size()) <= k);
        }
    }
}

TEST_CASE("anneal schedule hits both endpoints and never increases") {
    AnnealSchedule s{5, 2, 3};
    CHECK(s.k_at(0) == 5);
    CHECK(s.k_at(1) == 4);
    CHECK(s.k_at(2) == 3);
    CHECK(s.k_at(3) == 2);
    CHECK(s.k_at(1000) == 2);

    AnnealSchedule immediate{4, 4, 0};
    CHECK(immediate.k_at(0) == 4);
    CHECK(immediate.k_at(5) == 4);

    AnnealSchedule zero_steps{5, 1, 0};
    CHECK(zero_steps.k_at(0) == 5);
    CHECK(zero_steps.k_at(1) == 1);

    AnnealSchedule long_run{7, 3, 1000};
    int prev = long_run.k_at(0);
    CHECK(prev == 7);
    for (int step = 1; step <= 1200; ++step) {
        const int k = long_run.k_at(step);
        CHECK(k <= prev);
        prev = k;
    }
    CHECK(prev == 3);
}

TEST_CASE("dispatch groups examples by nonzero weight") {
    std::vector<GateDecision> decisions(4);
    for (auto& d : decisions) {
        d.selected = {0};
        d.weights = {1.0, 0.0, 0.0};
    }
    DispatchPlan plan = dispatch(decisions, 3);
    CHECK(plan.groups[0].size() == 4);
    CHECK(plan.groups[1].empty());
    CHECK(plan.groups[2].empty());

    for (auto& d : decisions) {
        d.selected = {0, 1, 2};
        d.weights = {0.4, 0.3, 0.3};
    }
    DispatchPlan dense_plan = dispatch(decisions, 3);
    for (const auto& group : dense_plan.groups) CHECK(group.size() == 4);
}

TEST_CASE("dispatch then combine with identity experts reconstructs the batch") {
    Rng rng(55);
    Tape tape(false);
    const std::size_t batch = 6, experts = 4;
    std::vector<Tensor> xs = batch_of(batch, 2, 3, rng);
    std::vector<GateDecision> decisions(batch);
    std::vector<Tensor> weight_tensors;
    for (std::size_t i = 0; i < batch; ++i) {
        const int pick = static_cast<int>(rng.uniform_int(experts));
        decisions[i].selected = {pick};
        decisions[i].weights.assign(experts, 0.0);
        decisions[i].weights[static_cast<std::size_t>(pick)] = 1.0;
        weight_tensors.push_back(
            Tensor::from({experts}, std::vector<double>(decisions[i].weights)));
    }
    DispatchPlan plan = dispatch(decisions, experts);
    std::vector<std::vector<Tensor>> outputs(experts);
    for (std::size_t j = 0; j < experts; ++j)
        for (int i : plan.groups[j]) outputs[j].push_back(xs[static_cast<std::size_t>(i)]);

    std::vector<Tensor> combined = combine(tape, plan, outputs, weight_tensors, decisions);
    REQUIRE(combined.size() == batch);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t e = 0; e < xs[i].size(); ++e)
            CHECK(combined[i].at(e) == xs[i].at(e));  // exact, weight is exactly 1
}

TEST_CASE("dispatch/combine with identity experts reconstructs any-k batches") {
    Rng rng(66);
    Tape tape(false);
    const std::size_t batch = 8, experts = 4;
    std::vector<Tensor> xs = batch_of(batch, 2, 3, rng);
    std::vector<GateDecision> decisions(batch);
    std::vector<Tensor> weight_tensors;
    for (std::size_t i = 0; i < batch; ++i) {
        // Random top-k selection through the real gate path.
        Tensor scores = testsupport::random_tensor({experts}, rng, false, -1.0, 1.0);
        const int k = 1 + static_cast<int>(rng.uniform_int(experts));
        TopKResult r = top_k_gate(tape, scores, k);
        decisions[i] = r.decision;
        weight_tensors.push_back(r.weights);
    }
    DispatchPlan plan = dispatch(decisions, experts);
    std::vector<std::vector<Tensor>> outputs(experts);
    for (std::size_t j = 0; j < experts; ++j)
        for (int i : plan.groups[j]) outputs[j].push_back(xs[static_cast<std::size_t>(i)]);
    std::vector<Tensor> combined = combine(tape, plan, outputs, weight_tensors, decisions);
    // Weights sum to 1 up to rounding, so identity experts give back the input.
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t e = 0; e < xs[i].size(); ++e)
            CHECK(combined[i].at(e) == doctest::Approx(xs[i].at(e)).epsilon(1e-12));
}

TEST_CASE("combine midpoint and verbatim endpoints") {
    Tape tape(false);
    Tensor a = Tensor::from({2}, {2.0, 4.0});
    Tensor b = Tensor::from({2}, {6.0, 8.0});
    std::vector<GateDecision> decisions(1);
    decisions[0].selected = {0, 1};
    decisions[0].weights = {0.5, 0.5};
    std::vector<Tensor> weights = {Tensor::from({2}, {0.5, 0.5})};
    DispatchPlan plan = dispatch(decisions, 2);
    std::vector<std::vector<Tensor>> outputs = {{a}, {b}};
    auto mid = combine(tape, plan, outputs, weights, decisions);
    CHECK(mid[0].at(0) == doctest::Approx(4.0));
    CHECK(mid[0].at(1) == doctest::Approx(6.0));
}

TEST_CASE("combine rejects mismatched plans") {
    Tape tape(false);
    std::vector<GateDecision> decisions(1);
    decisions[0].selected = {0};
    decisions[0].weights = {1.0};
    std::vector<Tensor> weights = {Tensor::from({1}, {1.0})};
    DispatchPlan plan = dispatch(decisions, 1);
    std::vector<std::vector<Tensor>> empty_outputs = {{}};
    CHECK_THROWS_AS(combine(tape, plan, empty_outputs, weights, decisions), InternalError);
}

TEST_CASE("moe layer with zeroed experts is a residual passthrough") {
    Rng rng(56);
    MoeLayerConfig cfg = small_layer_config();
    cfg.experts = {ExpertKind::pin};
    MoeLayer layer(cfg, rng);
    ParamRegistry registry;
    layer.register_params(registry, "l");
    Tensor w = registry.find("l.expert_pin.w")->tensor;
    std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0);

    Tape tape(false);
    auto xs = batch_of(3, 3, 4, rng);
    MoeForward fwd = layer.forward(tape, xs, xs, 1, false, nullptr);

    Tensor gain = registry.find("l.norm_gain")->tensor;
    Tensor bias = registry.find("l.norm_bias")->tensor;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        Tensor expect = layer_norm(tape, xs[i], gain, bias, cfg.norm_eps);
        for (std::size_t e = 0; e < expect.size(); ++e)
            CHECK(fwd.outputs[i].at(e) == doctest::Approx(expect.at(e)).epsilon(1e-12));
    }
}

TEST_CASE("k = N layer forward equals the dense mixture oracle within 1e-9") {
    Rng rng(57);
    MoeLayerConfig cfg = small_layer_config();
    MoeLayer layer(cfg, rng);
    ParamRegistry registry;
    layer.register_params(registry, "l");
    Tensor gain = registry.find("l.norm_gain")->tensor;
    Tensor bias = registry.find("l.norm_bias")->tensor;

    Tape tape(false);
    auto xs = batch_of(5, 3, 4, rng);
    auto x0s = batch_of(5, 3, 4, rng);
    MoeForward fwd = layer.forward(tape, xs, x0s, 3, false, nullptr);

    for (std::size_t i = 0; i < xs.size(); ++i) {
        Tensor scores = layer.gate().scores(tape, flatten(tape, x0s[i]), false, nullptr);
        auto weights = softmax_oracle(scores.values());
        // Dense mixture, ascending expert order like the dispatcher.
        std::vector<double> mix(xs[i].size(), 0.0);
        for (std::size_t j = 0; j < layer.expert_count(); ++j) {
            Tensor out = layer.expert(j).forward(tape, xs[i], x0s[i]);
            for (std::size_t e = 0; e < mix.size(); ++e) mix[e] += weights[j] * out.at(e);
        }
        Tensor residual =
            add(tape, xs[i], Tensor::from(xs[i].shape(), std::move(mix)));
        Tensor expect = layer_norm(tape, residual, gain, bias, cfg.norm_eps);
        for (std::size_t e = 0; e < expect.size(); ++e)
            CHECK(std::abs(fwd.outputs[i].at(e) - expect.at(e)) < 1e-9);
    }
}

TEST_CASE("eval-mode layer forward is deterministic across calls") {
    Rng rng(58);
    MoeLayer layer(small_layer_config(), rng);
    Tape tape(false);
    auto xs = batch_of(4, 3, 4, rng);
    MoeForward a = layer.forward(tape, xs, xs, 2, false, nullptr);
    MoeForward b = layer.forward(tape, xs, xs, 2, false, nullptr);
    for (std::size_t i = 0; i < xs.size(); ++i)
        for (std::size_t e = 0; e < a.outputs[i].size(); ++e)
            CHECK(a.outputs[i].at(e) == b.outputs[i].at(e));
}

TEST_CASE("experts with zero weight are never evaluated") {
    Rng rng(59);
    MoeLayer layer(small_layer_config(), rng);
    layer.reset_eval_counts();
    Tape tape(false);
    auto xs = batch_of(8, 3, 4, rng);
    MoeForward fwd = layer.forward(tape, xs, xs, 1, false, nullptr);

    std::vector<std::uint64_t> expected(layer.expert_count(), 0);
    for (const auto& d : fwd.decisions)
        for (int j : d.selected) expected[static_cast<std::size_t>(j)]++;
    for (std::size_t j = 0; j < layer.expert_count(); ++j)
        CHECK(layer.expert(j).eval_count() == expected[j]);
    // k=1 on 8 examples cannot touch all three experts 8 times each.
    std::uint64_t total = 0;
    for (std::size_t j = 0; j < layer.expert_count(); ++j) total += layer.expert(j).eval_count();
    CHECK(total == 8);
}

TEST_CASE("max_routed tracks the realized per-batch expert count") {
    Rng rng(60);
    MoeLayer layer(small_layer_config(), rng);
    Tape tape(false);
    auto xs = batch_of(5, 3, 4, rng);
    for (int k = 1; k <= 3; ++k) {
        MoeForward fwd = layer.forward(tape, xs, xs, k, false, nullptr);
        CHECK(fwd.max_routed <= k);
        CHECK(fwd.max_routed >= 1);
    }
}

TEST_CASE("load balance loss fixed points") {
    LoadStats stats;
    stats.batch_size = 100;
    const std::size_t n = 4;
    stats.dispatch_fraction.assign(n, 1.0 / n);
    stats.mean_probability.assign(n, 1.0 / n);
    stats.target.assign(n, 1.0 / n);
    CHECK(load_balance_loss(stats, 0.7) == doctest::Approx(0.7).epsilon(1e-12));

    // Full collapse: all dispatch and all probability on one expert.
    stats.dispatch_fraction = {1, 0, 0, 0};
    stats.mean_probability = {1, 0, 0, 0};
    CHECK(load_balance_loss(stats, 0.7) == doctest::Approx(0.7 * 4).epsilon(1e-12));

    stats.batch_size = 0;
    CHECK_THROWS_AS(load_balance_loss(stats, 1.0), DomainError);
}

TEST_CASE("load distribution loss fixed point and uniform-target reduction") {
    Rng rng(61);
    LoadStats stats;
    stats.batch_size = 10;
    std::vector<double> w = {0.5, 0.3, 0.2};
    stats.dispatch_fraction = w;
    stats.mean_probability = w;
    stats.target = w;
    CHECK(load_distribution_loss(stats, w, 1.3) == doctest::Approx(1.3).epsilon(1e-12));

    // Uniform targets recover the balance loss exactly.
    const std::size_t n = 5;
    LoadStats u;
    u.batch_size = 10;
    u.dispatch_fraction.resize(n);
    u.mean_probability.resize(n);
    double fs = 0.0, ps = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        u.dispatch_fraction[j] = rng.uniform(0.0, 1.0);
        u.mean_probability[j] = rng.uniform(0.0, 1.0);
        fs += u.dispatch_fraction[j];
        ps += u.mean_probability[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
        u.dispatch_fraction[j] /= fs;
        u.mean_probability[j] /= ps;
    }
    std::vector<double> uniform(n, 1.0 / n);
    CHECK(load_distribution_loss(u, uniform, 0.4) ==
          doctest::Approx(load_balance_loss(u, 0.4)).epsilon(1e-12));

    std::vector<double> bad = {0.5, 0.5, 0.0};
    CHECK_THROWS_AS(load_distribution_loss(stats, bad, 1.0), ConfigError);
}

TEST_CASE("concentrating traffic on one expert strictly raises the distribution loss") {
    std::vector<double> w = {0.4, 0.35, 0.25};
    LoadStats stats;
    stats.batch_size = 10;
    stats.target = w;
    for (std::size_t hot = 0; hot < w.size(); ++hot) {
        double prev = 1.0;  // loss at t = 0 with lambda 1
        for (double t : {0.1, 0.3, 0.6, 0.9}) {
            std::vector<double> v(w.size());
            for (std::size_t j = 0; j < w.size(); ++j)
                v[j] = (1.0 - t) * w[j] + (j == hot ? t : 0.0);
            stats.dispatch_fraction = v;
            stats.mean_probability = v;
            const double loss = load_distribution_loss(stats, w, 1.0);
            CHECK(loss > prev);
            prev = loss;
        }
    }
}

TEST_CASE("tape-route distribution loss matches the formula and differentiates P only") {
    Rng rng(62);
    const std::size_t n = 4;
    std::vector<double> f = {0.25, 0.5, 0.125, 0.125};
    std::vector<double> w = {0.4, 0.2, 0.2, 0.2};
    std::vector<double> p_values(n);
    double ps = 0.0;
    for (auto& v : p_values) {
        v = rng.uniform(0.01, 1.0);
        ps += v;
    }
    for (auto& v : p_values) v /= ps;

    Tensor p = Tensor::from({n}, std::vector<double>(p_values), true);
    Tape tape;
    Tensor loss = load_distribution_loss(tape, p, f, w, 0.8);

    LoadStats stats;
    stats.batch_size = 3;
    stats.dispatch_fraction = f;
    stats.mean_probability = p_values;
    CHECK(loss.at(0) == doctest::Approx(load_distribution_loss(stats, w, 0.8)).epsilon(1e-12));

    tape.backward(loss);
    for (std::size_t j = 0; j < n; ++j)
        CHECK(p.grad()[j] == doctest::Approx(0.8 * f[j] / w[j]).epsilon(1e-12));
}

TEST_CASE("layer target loads validate") {
    Rng rng(63);
    MoeLayerConfig cfg = small_layer_config();
    cfg.target_loads = {0.5, 0.5};  // three experts
    CHECK_THROWS_AS(MoeLayer(cfg, rng), ConfigError);
    cfg.target_loads = {0.5, 0.4, 0.2};  // sums to 1.1
    CHECK_THROWS_AS(MoeLayer(cfg, rng), ConfigError);
    cfg.target_loads = {0.5, 0.3, 0.2};
    MoeLayer ok(cfg, rng);
    CHECK(ok.target_loads() == cfg.target_loads);

    MoeLayerConfig dup = small_layer_config();
    dup.experts = {ExpertKind::pin, ExpertKind::pin};
    CHECK_THROWS_AS(MoeLayer(dup, rng), ConfigError);
}

TEST_CASE("gating gradients flow through scores to the gate parameters") {
    Rng rng(64);
    GatingNetwork gate(8, 3, GateConfig{2, 4, 0.0, 0.05}, rng);
    ParamRegistry registry;
    gate.register_params(registry, "g");
    Tensor input = random_tensor({8}, rng, false);
    Tensor probe = random_tensor({3}, rng, false);

    Tape tape;
    tape.backward(dot(tape, softmax(tape, gate.scores(tape, input, false, nullptr)), probe));
    auto eval = [&]() {
        Tape t(false);
        return dot(t, softmax(t, gate.scores(t, input, false, nullptr)), probe).at(0);
    };
    for (const auto& entry : registry.entries()) {
        Tensor p = entry.tensor;
        CHECK(testsupport::max_rel_grad_error(p, p.grad(), eval) < 1e-3);
    }
}

}  // TEST_SUITE
