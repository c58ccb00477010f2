// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "ada/error.hpp"
#include "ada/experts.hpp"
#include "support/grad_check.hpp"

using namespace ada;
using testsupport::max_rel_grad_error;
using testsupport::random_tensor;

namespace {

ExpertDims dims_for(int f, int d) {
    ExpertDims dims;
    dims.fields = f;
    dims.embedding_dim = d;
    return dims;
}

std::vector<Tensor> params_of(const Expert& expert) {
    ParamRegistry registry;
    expert.register_params(registry, "e");
    return registry.all_tensors();
}

void zero_params(const Expert& expert) {
    for (Tensor t : params_of(expert)) {
        auto& v = t.mutable_values();
        std::fill(v.begin(), v.end(), 0.0);
    }
}

// Plain-double matmul for oracles.
std::vector<double> mm(const std::vector<double>& a, std::size_t m, std::size_t k,
                       const std::vector<double>& b, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
    return c;
}

}  // namespace

TEST_SUITE("experts") {

TEST_CASE("dense expert: zero weights give zero output") {
    Rng rng(31);
    ExpertDims dims = dims_for(3, 4);
    dims.dense_hidden = 8;
    auto expert = make_expert(ExpertKind::dense, dims, rng);
    zero_params(*expert);
    Tape tape(false);
    Tensor x = random_tensor({3, 4}, rng, false);
    Tensor y = expert->forward(tape, x, x);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("dense expert: hand-computed relu chain, F=2 D=2 H=2") {
    Rng rng(32);
    ExpertDims dims = dims_for(2, 2);
    dims.dense_hidden = 2;
    auto expert = make_expert(ExpertKind::dense, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    Tensor w1 = registry.find("e.w_hidden")->tensor;  // 2 x 4
    Tensor w2 = registry.find("e.w_out")->tensor;     // 4 x 2
    w1.mutable_values() = {1, 0, -1, 0,
                           0, 2, 0, 1};
    w2.mutable_values() = {1, 0,
                           0, 1,
                           1, 1,
                           -1, 0};

    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    // flat = [1,2,3,4]; h = relu([1*1-1*3, 2*2+1*4]) = relu([-2, 8]) = [0, 8]
    // out  = w2 . h = [0*1+8*0, 0, 0+8, -0] = [0, 8, 8, 0] -> 2x2
    Tape tape(false);
    Tensor y = expert->forward(tape, x, x);
    CHECK(y.at(0, 0) == doctest::Approx(0.0));
    CHECK(y.at(0, 1) == doctest::Approx(8.0));
    CHECK(y.at(1, 0) == doctest::Approx(8.0));
    CHECK(y.at(1, 1) == doctest::Approx(0.0));
}

TEST_CASE("conv expert: zero kernel and projection give zero output") {
    Rng rng(33);
    ExpertDims dims = dims_for(4, 2);
    dims.conv_kernel = 2;
    dims.conv_channels = 2;
    auto expert = make_expert(ExpertKind::conv, dims, rng);
    zero_params(*expert);
    Tape tape(false);
    Tensor x = random_tensor({4, 2}, rng, false);
    Tensor y = expert->forward(tape, x, x);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("conv expert: single field, kernel 1, identity weights") {
    Rng rng(34);
    ExpertDims dims = dims_for(1, 1);
    dims.conv_kernel = 1;
    dims.conv_channels = 1;
    auto expert = make_expert(ExpertKind::conv, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    Tensor kernel = registry.find("e.kernel")->tensor;
    Tensor project = registry.find("e.w_project")->tensor;
    kernel.mutable_values() = {1.0};
    project.mutable_values() = {1.0};
    Tape tape(false);
    // Positive value: relu passes it, the single-element pool returns it.
    Tensor x = Tensor::from({1, 1}, {0.75});
    CHECK(expert->forward(tape, x, x).at(0) == doctest::Approx(0.75));
}

TEST_CASE("conv expert matches a sliding-window oracle, F=4 D=2 w=2 C=2") {
    Rng rng(35);
    ExpertDims dims = dims_for(4, 2);
    dims.conv_kernel = 2;
    dims.conv_channels = 2;
    auto expert = make_expert(ExpertKind::conv, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    const Tensor kernel = registry.find("e.kernel")->tensor;       // 2 x 4 (C x w*D)
    const Tensor project = registry.find("e.w_project")->tensor;   // 8 x 4 (F*D x pooled*C)
    Tensor x = random_tensor({4, 2}, rng, false);

    // Direct convolution: window [f, f+1] with zero padding past the end.
    std::vector<double> conv(4 * 2, 0.0);
    for (int f = 0; f < 4; ++f)
        for (int c = 0; c < 2; ++c) {
            double acc = 0.0;
            for (int t = 0; t < 2; ++t) {
                const int src = f + t;  // offset (w-1)/2 = 0
                if (src >= 4) continue;
                for (int d = 0; d < 2; ++d)
                    acc += kernel.at(static_cast<std::size_t>(c), static_cast<std::size_t>(t * 2 + d)) *
                           x.at(static_cast<std::size_t>(src), static_cast<std::size_t>(d));
            }
            conv[static_cast<std::size_t>(f * 2 + c)] = acc;
        }
    for (double& v : conv) v = std::max(v, 0.0);
    // Pool width 2 stride 2 over fields: rows {0,1} and {2,3}.
    std::vector<double> pooled(2 * 2);
    for (int w = 0; w < 2; ++w)
        for (int c = 0; c < 2; ++c)
            pooled[static_cast<std::size_t>(w * 2 + c)] =
                std::max(conv[static_cast<std::size_t>((2 * w) * 2 + c)],
                         conv[static_cast<std::size_t>((2 * w + 1) * 2 + c)]);
    // Projection to F*D.
    std::vector<double> expect(8, 0.0);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 4; ++j)
            expect[static_cast<std::size_t>(i)] +=
                project.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) *
                pooled[static_cast<std::size_t>(j)];

    Tape tape(false);
    Tensor y = expert->forward(tape, x, x);
    for (std::size_t i = 0; i < 8; ++i)
        CHECK(y.at(i) == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("conv expert rejects kernels wider than the field count") {
    Rng rng(36);
    ExpertDims dims = dims_for(2, 3);
    dims.conv_kernel = 3;
    CHECK_THROWS_AS(make_expert(ExpertKind::conv, dims, rng), ConfigError);
}

TEST_CASE("attention expert: single field means attention weight one") {
    Rng rng(37);
    ExpertDims dims = dims_for(1, 4);
    dims.attention_heads = 2;
    auto expert = make_expert(ExpertKind::attention, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    Tensor x = random_tensor({1, 4}, rng, false);

    // With one token, softmax over scores is exactly 1, so the output is the
    // concatenated per-head value projections through the output projection.
    std::vector<double> merged(4);
    for (int h = 0; h < 2; ++h) {
        const Tensor wv = registry.find("e.head" + std::to_string(h) + ".w_value")->tensor;
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int d = 0; d < 4; ++d)
                acc += x.at(0, static_cast<std::size_t>(d)) *
                       wv.at(static_cast<std::size_t>(d), static_cast<std::size_t>(j));
            merged[static_cast<std::size_t>(h * 2 + j)] = acc;
        }
    }
    const Tensor wo = registry.find("e.w_out")->tensor;
    std::vector<double> expect = mm(merged, 1, 4, {wo.values().begin(), wo.values().end()}, 4);

    Tape tape(false);
    Tensor y = expert->forward(tape, x, x);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(y.at(i) == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("attention expert: identical tokens attend uniformly") {
    Rng rng(38);
    ExpertDims dims = dims_for(3, 4);
    dims.attention_heads = 2;
    auto expert = make_expert(ExpertKind::attention, dims, rng);
    std::vector<double> row = {0.3, -0.7, 1.1, 0.2};
    std::vector<double> data;
    for (int f = 0; f < 3; ++f) data.insert(data.end(), row.begin(), row.end());
    Tensor x = Tensor::from({3, 4}, data);
    Tape tape(false);
    Tensor y = expert->forward(tape, x, x);
    // Every token sees the same mixture, so all output rows coincide.
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(y.at(0, j) == doctest::Approx(y.at(1, j)).epsilon(1e-12));
        CHECK(y.at(1, j) == doctest::Approx(y.at(2, j)).epsilon(1e-12));
    }
}

TEST_CASE("attention expert matches brute-force oracle, F=3 D=4 heads=2") {
    Rng rng(39);
    ExpertDims dims = dims_for(3, 4);
    dims.attention_heads = 2;
    auto expert = make_expert(ExpertKind::attention, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    Tensor x = random_tensor({3, 4}, rng, false);

    auto vec = [](const Tensor& t) {
        return std::vector<double>(t.values().begin(), t.values().end());
    };
    const std::vector<double> xs = vec(x);
    std::vector<double> merged(3 * 4, 0.0);
    for (int h = 0; h < 2; ++h) {
        const std::string hp = "e.head" + std::to_string(h);
        auto q = mm(xs, 3, 4, vec(registry.find(hp + ".w_query")->tensor), 2);
        auto kk = mm(xs, 3, 4, vec(registry.find(hp + ".w_key")->tensor), 2);
        auto v = mm(xs, 3, 4, vec(registry.find(hp + ".w_value")->tensor), 2);
        // softmax(QK^T / sqrt(2)) V, row by row
        for (int i = 0; i < 3; ++i) {
            double scores[3];
            double mx = -1e300;
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int d = 0; d < 2; ++d) s += q[i * 2 + d] * kk[j * 2 + d];
                scores[j] = s / std::sqrt(2.0);
                mx = std::max(mx, scores[j]);
            }
            double denom = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            for (int d = 0; d < 2; ++d) {
                double acc = 0.0;
                for (int j = 0; j < 3; ++j) acc += scores[j] / denom * v[j * 2 + d];
                merged[static_cast<std::size_t>(i * 4 + h * 2 + d)] = acc;
            }
        }
    }
    auto expect = mm(merged, 3, 4, vec(registry.find("e.w_out")->tensor), 4);

    Tape tape(false);
    Tensor y = expert->forward(tape, x, x);
    for (std::size_t i = 0; i < 12; ++i)
        CHECK(y.at(i) == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("attention expert rejects indivisible head count") {
    Rng rng(40);
    ExpertDims dims = dims_for(3, 4);
    dims.attention_heads = 3;
    CHECK_THROWS_AS(make_expert(ExpertKind::attention, dims, rng), ConfigError);
}

TEST_CASE("pin expert identity, annihilation, and composition oracle") {
    Rng rng(41);
    ExpertDims dims = dims_for(3, 2);
    auto expert = make_expert(ExpertKind::pin, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    Tensor w = registry.find("e.w")->tensor;

    Tensor x = random_tensor({3, 2}, rng, false);
    Tensor x0 = random_tensor({3, 2}, rng, false);
    Tape tape(false);

    w.mutable_values() = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    Tensor y = expert->forward(tape, x, x0);
    for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(y.at(i) == doctest::Approx(x.at(i) * x0.at(i)).epsilon(1e-12));

    std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0);
    Tensor zero = expert->forward(tape, x, x0);
    for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero.at(i) == 0.0);

    for (double& v : w.mutable_values()) v = rng.uniform(-1.0, 1.0);
    auto wx0 = mm({w.values().begin(), w.values().end()}, 3, 3,
                  {x0.values().begin(), x0.values().end()}, 2);
    Tensor z = expert->forward(tape, x, x0);
    for (std::size_t i = 0; i < z.size(); ++i)
        CHECK(z.at(i) == doctest::Approx(x.at(i) * wx0[i]).epsilon(1e-12));
}

TEST_CASE("cross expert bias-only, identity, and composition oracle") {
    Rng rng(42);
    ExpertDims dims = dims_for(3, 2);
    auto expert = make_expert(ExpertKind::cross, dims, rng);
    ParamRegistry registry;
    expert->register_params(registry, "e");
    Tensor w = registry.find("e.w")->tensor;
    Tensor bias = registry.find("e.bias")->tensor;

    Tensor x = random_tensor({3, 2}, rng, false);
    Tensor x0 = random_tensor({3, 2}, rng, false);
    Tape tape(false);

    std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0);
    for (double& v : bias.mutable_values()) v = rng.uniform(-1.0, 1.0);
    Tensor only_bias = expert->forward(tape, x, x0);
    for (std::size_t i = 0; i < only_bias.size(); ++i)
        CHECK(only_bias.at(i) == doctest::Approx(bias.at(i)).epsilon(1e-12));

    w.mutable_values() = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::fill(bias.mutable_values().begin(), bias.mutable_values().end(), 0.0);
    Tensor prod = expert->forward(tape, x, x0);
    for (std::size_t i = 0; i < prod.size(); ++i)
        CHECK(prod.at(i) == doctest::Approx(x0.at(i) * x.at(i)).epsilon(1e-12));

    for (double& v : w.mutable_values()) v = rng.uniform(-1.0, 1.0);
    for (double& v : bias.mutable_values()) v = rng.uniform(-1.0, 1.0);
    auto wx = mm({w.values().begin(), w.values().end()}, 3, 3,
                 {x.values().begin(), x.values().end()}, 2);
    Tensor z = expert->forward(tape, x, x0);
    for (std::size_t i = 0; i < z.size(); ++i)
        CHECK(z.at(i) == doctest::Approx(x0.at(i) * wx[i] + bias.at(i)).epsilon(1e-12));
}

TEST_CASE("every expert kind preserves the F x D shape") {
    Rng rng(43);
    for (auto kind : {ExpertKind::dense, ExpertKind::conv, ExpertKind::attention,
                      ExpertKind::pin, ExpertKind::cross}) {
        for (int f : {3, 5}) {
            ExpertDims dims = dims_for(f, 4);
            dims.dense_hidden = 6;
            dims.conv_kernel = 2;
            dims.conv_channels = 3;
            dims.attention_heads = 2;
            auto expert = make_expert(kind, dims, rng);
            Tape tape(false);
            Tensor x = random_tensor({static_cast<std::size_t>(f), 4}, rng, false);
            Tensor x0 = random_tensor({static_cast<std::size_t>(f), 4}, rng, false);
            Tensor y = expert->forward(tape, x, x0);
            CHECK(y.shape() == x.shape());
            CHECK(y.all_finite());
        }
    }
}

TEST_CASE("every expert kind passes finite-difference gradient checks") {
    Rng rng(44);
    for (auto kind : {ExpertKind::dense, ExpertKind::conv, ExpertKind::attention,
                      ExpertKind::pin, ExpertKind::cross}) {
        ExpertDims dims = dims_for(4, 4);
        dims.dense_hidden = 6;
        dims.conv_kernel = 2;
        dims.conv_channels = 3;
        dims.attention_heads = 2;
        auto expert = make_expert(kind, dims, rng);
        Tensor x = random_tensor({4, 4}, rng, true);
        Tensor x0 = random_tensor({4, 4}, rng, true);
        Tensor probe = random_tensor({4, 4}, rng, false);

        Tape tape;
        tape.backward(sum_all(tape, hadamard(tape, expert->forward(tape, x, x0), probe)));
        auto eval = [&]() {
            Tape t(false);
            return sum_all(t, hadamard(t, expert->forward(t, x, x0), probe)).at(0);
        };
        INFO("kind = ", expert_kind_name(kind));
        CHECK(max_rel_grad_error(x, x.grad(), eval) < 1e-3);
        for (Tensor p : params_of(*expert))
            CHECK(max_rel_grad_error(p, p.grad(), eval) < 1e-3);
    }
}

TEST_CASE("expert flops follow the documented counting formulas") {
    ExpertDims dims = dims_for(2, 2);
    dims.dense_hidden = 2;
    CHECK(expert_flops(ExpertKind::dense, dims) == 32);  // 2*(4*2) + 2*(2*4)

    ExpertDims pd = dims_for(5, 3);
    CHECK(expert_flops(ExpertKind::pin, pd) == 2 * 5 * 5 * 3 + 5 * 3);
    CHECK(expert_flops(ExpertKind::cross, pd) == 2 * 5 * 5 * 3 + 2 * 5 * 3);

    // PIN flops are exactly linear in D.
    ExpertDims d1 = dims_for(4, 3), d2 = dims_for(4, 6);
    CHECK(expert_flops(ExpertKind::pin, d2) == 2 * expert_flops(ExpertKind::pin, d1));

    ExpertDims cd = dims_for(6, 4);
    cd.conv_kernel = 3;
    cd.conv_channels = 4;
    CHECK(expert_flops(ExpertKind::conv, cd) ==
          2 * 6 * (3 * 4) * 4 + 2 * (3 * 4) * (6 * 4));

    ExpertDims ad = dims_for(6, 4);
    CHECK(expert_flops(ExpertKind::attention, ad) == 8 * 6 * 4 * 4 + 4 * 6 * 6 * 4);

    // Constructed experts report the same numbers.
    Rng rng(45);
    auto pin = make_expert(ExpertKind::pin, pd, rng);
    CHECK(pin->flops_per_example() == expert_flops(ExpertKind::pin, pd));
}

TEST_CASE("eval counters record expert invocations") {
    Rng rng(46);
    auto expert = make_expert(ExpertKind::pin, dims_for(2, 2), rng);
    CHECK(expert->eval_count() == 0);
    Tape tape(false);
    Tensor x = random_tensor({2, 2}, rng, false);
    expert->forward(tape, x, x);
    expert->forward(tape, x, x);
    CHECK(expert->eval_count() == 2);
    expert->reset_eval_count();
    CHECK(expert->eval_count() == 0);
}

}  // TEST_SUITE
