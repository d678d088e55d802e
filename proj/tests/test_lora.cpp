// Copyright (C) 2026 The spq-kit authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "spq/lora.hpp"
#include "test_helpers.hpp"

using namespace spq;

namespace {

double brute_force_loss(const MatD& w_orig, const MatD& w_c, const LoraAdapter& adapter) {
    const double scale = adapter.alpha / static_cast<double>(adapter.rank);
    double loss = 0.0;
    for (std::size_t i = 0; i < w_orig.rows(); ++i)
        for (std::size_t j = 0; j < w_orig.cols(); ++j) {
            double update = 0.0;
            for (std::size_t r = 0; r < adapter.rank; ++r)
                update += adapter.b(i, r) * adapter.a(r, j);
            const double d = w_c(i, j) + scale * update - w_orig(i, j);
            loss += d * d;
        }
    return loss;
}

} // namespace

TEST_SUITE("lora") {

TEST_CASE("forward is the identity at initialization") {
    const MatD w = test::random_matrix(5, 4, 10);
    const LoraAdapter adapter = init_adapter(5, 4, 2, 8.0, 3);
    const CounterRng rng(4, "test.x");
    for (std::uint64_t t = 0; t < 5; ++t) {
        std::vector<double> x(4);
        for (std::size_t i = 0; i < 4; ++i)
            x[i] = rng.normal(t * 4 + i);
        const auto y = lora_forward(w, adapter, x);
        const auto base = matvec(w, std::span<const double>(x));
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(y[i] == doctest::Approx(base[i]).epsilon(1e-14));
    }
}

TEST_CASE("alpha equal to rank gives the unscaled update") {
    const MatD w = test::random_matrix(4, 4, 11);
    LoraAdapter adapter = init_adapter(4, 4, 2, 2.0, 5); // alpha = r = 2
    adapter.b = test::random_matrix(4, 2, 12);
    const std::vector<double> x = {1.0, -0.5, 0.25, 2.0};

    const auto y = lora_forward(w, adapter, x);
    const MatD ba = matmul(adapter.b, adapter.a);
    for (std::size_t i = 0; i < 4; ++i) {
        double expect = 0.0;
        for (std::size_t j = 0; j < 4; ++j)
            expect += (w(i, j) + ba(i, j)) * x[j];
        CHECK(y[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("forward matches the dense merge on a seeded case") {
    const MatD w = test::random_matrix(4, 4, 13);
    LoraAdapter adapter = init_adapter(4, 4, 2, 16.0, 6);
    adapter.b = test::random_matrix(4, 2, 14);
    const MatD merged = merge_adapter(w, adapter);
    const CounterRng rng(7, "test.x2");
    for (std::uint64_t t = 0; t < 10; ++t) {
        std::vector<double> x(4);
        for (std::size_t i = 0; i < 4; ++i)
            x[i] = rng.normal(t * 4 + i);
        const auto via_adapter = lora_forward(w, adapter, x);
        const auto via_merge = matvec(merged, std::span<const double>(x));
        for (std::size_t i = 0; i < 4; ++i)
            CHECK(via_adapter[i] == doctest::Approx(via_merge[i]).epsilon(1e-12));
    }
}

TEST_CASE("reconstruction loss examples") {
    const MatD w = test::random_matrix(5, 3, 20);
    const LoraAdapter init = init_adapter(5, 3, 2, 4.0, 8);
    CHECK(recon_loss(w, w, init) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));

    // W_orig - W_c is exactly the adapter update
    LoraAdapter adapter = init_adapter(5, 3, 2, 4.0, 9);
    adapter.b = test::random_matrix(5, 2, 21);
    const MatD update = matmul(adapter.b, adapter.a);
    MatD w_orig = w;
    const double scale = adapter.alpha / static_cast<double>(adapter.rank);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j)
            w_orig(i, j) += scale * update(i, j);
    CHECK(recon_loss(w_orig, w, adapter) == doctest::Approx(0.0).scale(1.0).epsilon(1e-18));

    // random case cross-checked against elementwise brute force
    const MatD w_c = test::random_matrix(5, 3, 22);
    CHECK(recon_loss(w_orig, w_c, adapter) ==
          doctest::Approx(brute_force_loss(w_orig, w_c, adapter)).epsilon(1e-12));
}

TEST_CASE("gradients vanish at the stationary points") {
    const MatD w_orig = test::random_matrix(4, 4, 30);
    const MatD w_c = test::random_matrix(4, 4, 31);
    const LoraAdapter init = init_adapter(4, 4, 2, 8.0, 10); // B = 0
    const LoraGradients g = recon_grad(w_orig, w_c, init);
    for (const double v : g.grad_a.values())
        CHECK(v == 0.0); // dL/dA = 2(alpha/r) B^T Delta with B = 0

    // Delta = 0: both gradients vanish
    LoraAdapter adapter = init_adapter(4, 4, 2, 8.0, 11);
    adapter.b = test::random_matrix(4, 2, 32);
    const MatD merged = merge_adapter(w_c, adapter);
    const LoraGradients g2 = recon_grad(merged, w_c, adapter);
    for (const double v : g2.grad_a.values())
        CHECK(std::abs(v) <= 1e-12);
    for (const double v : g2.grad_b.values())
        CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("analytic gradients match central finite differences") {
    const double h = 1e-5;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const MatD w_orig = test::random_matrix(5, 3, 600 + seed);
        const MatD w_c = test::random_matrix(5, 3, 700 + seed);
        LoraAdapter adapter = init_adapter(5, 3, 2, 8.0, 800 + seed);
        adapter.b = test::random_matrix(5, 2, 900 + seed, 0.3);

        const LoraGradients g = recon_grad(w_orig, w_c, adapter);
        double worst = 0.0;
        double grad_norm = 0.0;

        for (std::size_t i = 0; i < adapter.a.size(); ++i) {
            LoraAdapter plus = adapter, minus = adapter;
            plus.a.data()[i] += h;
            minus.a.data()[i] -= h;
            const double fd =
                (recon_loss(w_orig, w_c, plus) - recon_loss(w_orig, w_c, minus)) / (2 * h);
            worst = std::max(worst, std::abs(fd - g.grad_a.data()[i]));
            grad_norm = std::max(grad_norm, std::abs(g.grad_a.data()[i]));
        }
        for (std::size_t i = 0; i < adapter.b.size(); ++i) {
            LoraAdapter plus = adapter, minus = adapter;
            plus.b.data()[i] += h;
            minus.b.data()[i] -= h;
            const double fd =
                (recon_loss(w_orig, w_c, plus) - recon_loss(w_orig, w_c, minus)) / (2 * h);
            worst = std::max(worst, std::abs(fd - g.grad_b.data()[i]));
            grad_norm = std::max(grad_norm, std::abs(g.grad_b.data()[i]));
        }
        CHECK(worst <= 1e-6 * std::max(grad_norm, 1.0));
    }
}

TEST_CASE("zero steps returns the initial adapter and loss") {
    const MatD w_orig = test::random_matrix(6, 6, 40);
    const MatD w_c = test::random_matrix(6, 6, 41);
    const LoraRecovery rec = lora_recover(w_orig, w_c, 2, 4.0, 0, 0.1, 50);
    REQUIRE(rec.loss_history.size() == 1);
    double direct = 0.0;
    for (std::size_t i = 0; i < w_orig.rows(); ++i)
        for (std::size_t j = 0; j < w_orig.cols(); ++j) {
            const double d = w_c(i, j) - w_orig(i, j);
            direct += d * d;
        }
    CHECK(rec.loss_history[0] == doctest::Approx(direct).epsilon(1e-12));
    for (const double v : rec.adapter.b.values())
        CHECK(v == 0.0);
}

TEST_CASE("rank-1 difference is recovered within 200 steps") {
    const MatD u = test::random_matrix(8, 1, 42);
    const MatD v = test::random_matrix(1, 8, 43);
    const MatD w_c = test::random_matrix(8, 8, 44);
    MatD w_orig = w_c;
    const MatD diff = matmul(u, v);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            w_orig(i, j) += diff(i, j);

    const LoraRecovery rec = lora_recover(w_orig, w_c, 1, 1.0, 200, 0.2, 45);
    CHECK(rec.loss_history.back() <= 1e-6 * rec.loss_history.front());
}

TEST_CASE("loss sequence is non-increasing") {
    const MatD w_orig = test::random_matrix(7, 5, 46);
    const MatD w_c = test::random_matrix(7, 5, 47);
    const LoraRecovery rec = lora_recover(w_orig, w_c, 3, 6.0, 50, 0.3, 48);
    for (std::size_t i = 1; i < rec.loss_history.size(); ++i)
        CHECK(rec.loss_history[i] <= rec.loss_history[i - 1]);
}

TEST_CASE("absurd learning rates exhaust the halving budget") {
    const MatD w_orig = test::random_matrix(4, 4, 49);
    const MatD w_c = test::random_matrix(4, 4, 50);
    CHECK_THROWS_AS(static_cast<void>(lora_recover(w_orig, w_c, 2, 4.0, 5, 1e30, 51)),
                    std::runtime_error);
}

TEST_CASE("merging twice applies the update twice") {
    const MatD w = test::random_matrix(4, 4, 52);
    LoraAdapter adapter = init_adapter(4, 4, 2, 4.0, 53);
    adapter.b = test::random_matrix(4, 2, 54);
    const MatD once = merge_adapter(w, adapter);
    const MatD twice = merge_adapter(once, adapter);
    const double scale = adapter.alpha / static_cast<double>(adapter.rank);
    const MatD update = matmul(adapter.b, adapter.a);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(twice(i, j) ==
                  doctest::Approx(w(i, j) + 2.0 * scale * update(i, j)).epsilon(1e-12));
}

TEST_CASE("adapter validation") {
    CHECK_THROWS_AS(static_cast<void>(init_adapter(4, 4, 0, 1.0, 0)), std::invalid_argument);
    CHECK_THROWS_AS(static_cast<void>(init_adapter(4, 4, 5, 1.0, 0)), std::invalid_argument);
    CHECK_THROWS_AS(static_cast<void>(init_adapter(4, 4, 2, -1.0, 0)), std::invalid_argument);

    const MatD w = test::random_matrix(4, 4, 55);
    const LoraAdapter adapter = init_adapter(4, 4, 2, 4.0, 56);
    const std::vector<double> bad_x = {1.0, 2.0};
    CHECK_THROWS_AS(static_cast<void>(lora_forward(w, adapter, bad_x)), std::invalid_argument);
    const MatD w_small = test::random_matrix(3, 3, 57);
    CHECK_THROWS_AS(static_cast<void>(recon_loss(w_small, w, adapter)), std::invalid_argument);
}

} // TEST_SUITE
