#include <doctest.h>

#include <cmath>
#include <cstring>

#include "echotune/adapters.hpp"
#include "echotune/error.hpp"
#include "fd_check.hpp"
#include "helpers.hpp"

using namespace echotune;
using echotune::testing::fd_check;
using echotune::testing::rand_tensor;

namespace {

// Dense oracle: materialize W + (alpha/r) B A by plain loops.
std::vector<double> dense_combined(const Tensor& w, const LoraParams& p) {
    const int d_out = w.dim(0), d_in = w.dim(1), r = p.rank;
    std::vector<double> c(w.values().begin(), w.values().end());
    for (int i = 0; i < d_out; ++i) {
        for (int j = 0; j < d_in; ++j) {
            double acc = 0.0;
            for (int k = 0; k < r; ++k) acc += p.b.at(i, k) * p.a.at(k, j);
            c[static_cast<size_t>(i) * d_in + j] += p.scaling() * acc;
        }
    }
    return c;
}

std::vector<double> dense_matvec(const std::vector<double>& m, int d_out, int d_in,
                                 std::span<const double> u) {
    std::vector<double> out(static_cast<size_t>(d_out), 0.0);
    for (int i = 0; i < d_out; ++i) {
        for (int j = 0; j < d_in; ++j) out[static_cast<size_t>(i)] += u[static_cast<size_t>(j)] * m[static_cast<size_t>(i) * d_in + j];
    }
    return out;
}

} // namespace

TEST_SUITE("adapters") {

TEST_CASE("lora with zero B equals the frozen projection exactly") {
    DetRng rng(1);
    Tensor w = rand_tensor({6, 5}, rng, false);
    DetRng init_rng(2);
    AdapterParams p = init_adapter(AdapterKind::lora, w, 3, 6.0, 0.0, init_rng);
    Tensor u = rand_tensor({4, 5}, rng, false);
    Tensor adapted = lora_forward(w, p.lora, u);
    Tensor frozen = matmul(u, w, false, true);
    for (int i = 0; i < adapted.numel(); ++i) {
        CHECK(adapted.values()[static_cast<size_t>(i)] == frozen.values()[static_cast<size_t>(i)]);
    }
}

TEST_CASE("rank-1 unit outer product writes a single entry") {
    Tensor w = Tensor::zeros({4, 3});
    LoraParams p;
    p.rank = 1;
    p.alpha = 1.0;
    p.a = Tensor::from_values({1, 3}, {0, 1, 0}); // e_i^T with i = 1
    p.b = Tensor::from_values({4, 1}, {0, 0, 1, 0}); // e_j with j = 2
    Tensor merged = merge_lora(w, p);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 3; ++j) {
            CHECK(merged.at(i, j) == ((i == 2 && j == 1) ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("lora forward matches dense oracle") {
    DetRng rng(3);
    Tensor w = rand_tensor({8, 8}, rng, false);
    LoraParams p;
    p.rank = 2;
    p.alpha = 4.0;
    p.a = rand_tensor({2, 8}, rng);
    p.b = rand_tensor({8, 2}, rng);
    Tensor u = rand_tensor({3, 8}, rng, false);

    Tensor out = lora_forward(w, p, u);
    const std::vector<double> dense = dense_combined(w, p);
    for (int t = 0; t < 3; ++t) {
        auto expect = dense_matvec(dense, 8, 8, u.values().subspan(static_cast<size_t>(t) * 8, 8));
        for (int i = 0; i < 8; ++i) CHECK(std::abs(out.at(t, i) - expect[static_cast<size_t>(i)]) < 1e-10);
    }
}

TEST_CASE("lora rank above min dimension is rejected") {
    DetRng rng(4);
    Tensor w = rand_tensor({4, 6}, rng, false);
    LoraParams p;
    p.rank = 5;
    p.alpha = 5.0;
    p.a = rand_tensor({5, 6}, rng);
    p.b = rand_tensor({4, 5}, rng);
    Tensor u = rand_tensor({2, 6}, rng, false);
    CHECK_THROWS_AS(lora_forward(w, p, u), ConfigError);

    bool capped = false;
    DetRng init_rng(5);
    AdapterParams ap = init_adapter(AdapterKind::lora, w, 5, 5.0, 0.0, init_rng, &capped);
    CHECK(capped);
    CHECK(ap.lora.rank == 4);
}

TEST_CASE("lora dropout is train-only and limited to the low-rank branch") {
    DetRng rng(6);
    Tensor w = rand_tensor({6, 6}, rng, false);
    DetRng init_rng(7);
    AdapterParams p = init_adapter(AdapterKind::lora, w, 2, 4.0, 0.5, init_rng);
    // Nonzero B so the low-rank branch matters.
    for (auto& v : p.lora.b.raw_values()) v = 0.3;
    Tensor u = rand_tensor({2, 6}, rng, false);

    Tensor eval1 = lora_forward(w, p.lora, u, false, nullptr);
    Tensor eval2 = lora_forward(w, p.lora, u, false, nullptr);
    CHECK(std::memcmp(eval1.values().data(), eval2.values().data(), sizeof(double) * 12) == 0);

    DetRng d1(99), d2(100);
    Tensor t1 = lora_forward(w, p.lora, u, true, &d1);
    Tensor t2 = lora_forward(w, p.lora, u, true, &d2);
    bool differs = false;
    for (int i = 0; i < 12; ++i) {
        if (t1.values()[static_cast<size_t>(i)] != t2.values()[static_cast<size_t>(i)]) differs = true;
    }
    CHECK(differs);
}

TEST_CASE("dora init reproduces the frozen output") {
    DetRng rng(8);
    Tensor w = rand_tensor({6, 5}, rng, false);
    DetRng init_rng(9);
    AdapterParams p = init_adapter(AdapterKind::dora, w, 2, 4.0, 0.0, init_rng);
    Tensor u = rand_tensor({3, 5}, rng, false);
    Tensor adapted = dora_forward(w, p, u);
    Tensor frozen = matmul(u, w, false, true);
    for (int i = 0; i < adapted.numel(); ++i) {
        CHECK(std::abs(adapted.values()[static_cast<size_t>(i)] -
                       frozen.values()[static_cast<size_t>(i)]) < 1e-10);
    }
}

TEST_CASE("dora decomposition tracks a rescaled weight") {
    DetRng rng(10);
    Tensor w = rand_tensor({5, 5}, rng, false);
    std::vector<double> w2v(w.values().begin(), w.values().end());
    for (auto& v : w2v) v *= 2.0;
    Tensor w2 = Tensor::from_values({5, 5}, w2v);

    DetRng init_rng(11);
    AdapterParams p = init_adapter(AdapterKind::dora, w2, 2, 4.0, 0.0, init_rng);
    Tensor u = rand_tensor({2, 5}, rng, false);
    Tensor adapted = dora_forward(w2, p, u);
    Tensor frozen2 = matmul(u, w2, false, true);
    for (int i = 0; i < adapted.numel(); ++i) {
        CHECK(std::abs(adapted.values()[static_cast<size_t>(i)] -
                       frozen2.values()[static_cast<size_t>(i)]) < 1e-10);
    }
}

TEST_CASE("dora forward matches explicit decompose-then-multiply oracle") {
    DetRng rng(12);
    Tensor w = rand_tensor({7, 6}, rng, false);
    DetRng init_rng(13);
    AdapterParams p = init_adapter(AdapterKind::dora, w, 3, 6.0, 0.0, init_rng);
    for (auto& v : p.lora.b.raw_values()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : p.magnitude.raw_values()) v *= rng.uniform(0.8, 1.2);

    Tensor u = rand_tensor({2, 6}, rng, false);
    Tensor adapted = dora_forward(w, p, u);

    std::vector<double> combined = dense_combined(w, p.lora);
    for (int i = 0; i < 7; ++i) {
        double norm = 0.0;
        for (int j = 0; j < 6; ++j) {
            const double e = combined[static_cast<size_t>(i) * 6 + j];
            norm += e * e;
        }
        norm = std::max(std::sqrt(norm), kDoraNormFloor);
        const double rescale = p.magnitude.at(i) / norm;
        for (int j = 0; j < 6; ++j) combined[static_cast<size_t>(i) * 6 + j] *= rescale;
    }
    for (int t = 0; t < 2; ++t) {
        auto expect = dense_matvec(combined, 7, 6, u.values().subspan(static_cast<size_t>(t) * 6, 6));
        for (int i = 0; i < 7; ++i) CHECK(std::abs(adapted.at(t, i) - expect[static_cast<size_t>(i)]) < 1e-9);
    }
}

TEST_CASE("dora gradients pass finite differences") {
    DetRng rng(14);
    Tensor w = rand_tensor({5, 4}, rng, false);
    DetRng init_rng(15);
    AdapterParams p = init_adapter(AdapterKind::dora, w, 2, 4.0, 0.0, init_rng);
    for (auto& v : p.lora.b.raw_values()) v = rng.uniform(-0.3, 0.3);
    Tensor u = rand_tensor({2, 4}, rng, false);
    Tensor wsum = rand_tensor({2, 5}, rng, false);
    auto rep = fd_check([&] { return sum(mul(dora_forward(w, p, u), wsum)); },
                        {p.lora.a, p.lora.b, p.magnitude});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("merge: zero B keeps W bitwise; 1x1 hand example") {
    DetRng rng(16);
    Tensor w = rand_tensor({4, 4}, rng, false);
    DetRng init_rng(17);
    AdapterParams p = init_adapter(AdapterKind::lora, w, 2, 4.0, 0.0, init_rng);
    Tensor merged = merge_lora(w, p.lora);
    CHECK(std::memcmp(merged.values().data(), w.values().data(), sizeof(double) * 16) == 0);

    LoraParams tiny;
    tiny.rank = 1;
    tiny.alpha = 2.0;
    tiny.a = Tensor::from_values({1, 1}, {3.0});
    tiny.b = Tensor::from_values({1, 1}, {4.0});
    Tensor w1 = Tensor::from_values({1, 1}, {2.0});
    CHECK(merge_lora(w1, tiny).item() == 26.0); // 2 + 2 * 12
}

TEST_CASE("merged forward equals adapted forward on random inputs") {
    DetRng rng(18);
    Tensor w = rand_tensor({16, 16}, rng, false);
    LoraParams p;
    p.rank = 4;
    p.alpha = 8.0;
    p.a = rand_tensor({4, 16}, rng);
    p.b = rand_tensor({16, 4}, rng);
    Tensor merged = merge_lora(w, p);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        Tensor u = rand_tensor({1, 16}, rng, false);
        Tensor adapted = lora_forward(w, p, u);
        Tensor direct = matmul(u, merged, false, true);
        for (int j = 0; j < 16; ++j) {
            worst = std::max(worst, std::abs(adapted.at(0, j) - direct.at(0, j)));
        }
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("dora merge equals dora forward") {
    DetRng rng(19);
    Tensor w = rand_tensor({8, 8}, rng, false);
    DetRng init_rng(20);
    AdapterParams p = init_adapter(AdapterKind::dora, w, 2, 4.0, 0.0, init_rng);
    for (auto& v : p.lora.b.raw_values()) v = rng.uniform(-0.4, 0.4);
    Tensor merged = merge_dora(w, p);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        Tensor u = rand_tensor({1, 8}, rng, false);
        Tensor adapted = dora_forward(w, p, u);
        Tensor direct = matmul(u, merged, false, true);
        for (int j = 0; j < 8; ++j) {
            worst = std::max(worst, std::abs(adapted.at(0, j) - direct.at(0, j)));
        }
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("trainable parameter count is adapters plus echo only") {
    Model m = echotune::testing::micro_model(21);
    // 4 layers x 4 projections x (A[2x8] + B[8x2]) = 16 x 32
    // echo: 1 layer x 2 projections x (2*4*8 + 2*8*4 + 8 + 1) = 2 x 137
    CHECK(m.trainable_count() == 16 * 32 + 2 * 137);
    Model no_echo = echotune::testing::micro_model(21, false);
    CHECK(no_echo.trainable_count() == 16 * 32);
}

} // TEST_SUITE
