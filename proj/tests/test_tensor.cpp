#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "droplab/tensor.hpp"

using namespace droplab;

TEST_CASE("construction and indexing") {
    Tensor t = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.ndim() == 2);
    CHECK(t.dim(-1) == 3);
    CHECK(t.at({1, 2}) == 6);
    CHECK(Tensor::scalar(4.0).item() == 4.0);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("matmul identity and hand dot product") {
    Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::from_vector({2, 1}, {3, 4});
    Tensor out = ops::matmul(eye, v);
    CHECK(out.shape() == Shape{2, 1});
    CHECK(out.at({0, 0}) == 3.0);
    CHECK(out.at({1, 0}) == 4.0);

    Tensor row = Tensor::from_vector({1, 2}, {1, 2});
    CHECK(ops::matmul(row, v).at({0, 0}) == 11.0);
}

TEST_CASE("matmul shape errors name both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        ops::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 2]") != std::string::npos);
    }
}

TEST_CASE("matmul broadcasts batch dims") {
    // [2,2,3] x [3,2] -> [2,2,2], the weight shared across the batch
    Tensor a = Tensor::from_vector({2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Tensor w = Tensor::from_vector({3, 2}, {1, 0, 0, 1, 1, 1});
    Tensor out = ops::matmul(a, w);
    CHECK(out.shape() == Shape{2, 2, 2});
    CHECK(out.at({0, 0, 0}) == 1 + 3);
    CHECK(out.at({0, 0, 1}) == 2 + 3);
    CHECK(out.at({1, 1, 0}) == 10 + 12);
    CHECK(out.at({1, 1, 1}) == 11 + 12);
}

TEST_CASE("elementwise broadcasting follows trailing alignment") {
    Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor bias = Tensor::from_vector({3}, {10, 20, 30});
    Tensor out = ops::add(x, bias);
    CHECK(out.at({0, 0}) == 11);
    CHECK(out.at({1, 2}) == 36);

    Tensor col = Tensor::from_vector({2, 1}, {1, 2});
    Tensor rowv = Tensor::from_vector({1, 3}, {10, 20, 30});
    Tensor outer = ops::mul(col, rowv);
    CHECK(outer.shape() == Shape{2, 3});
    CHECK(outer.at({1, 1}) == 40);

    CHECK_THROWS_AS(ops::add(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), ShapeError);
}

TEST_CASE("softmax of uniform logits is uniform") {
    Tensor x = Tensor::zeros({4});
    Tensor p = ops::softmax(x, 0);
    for (int i = 0; i < 4; ++i) CHECK(p.data()[i] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one within 1e-12 on every axis") {
    Rng rng(3);
    Tensor x = Tensor::zeros({3, 4, 5});
    for (auto& v : x.mutable_data()) v = rng.normal() * 3.0;
    for (int axis : {0, 1, 2, -1}) {
        Tensor p = ops::softmax(x, axis);
        const int64_t len = x.dim(axis);
        const int64_t rows = x.numel() / len;
        // Sum along the softmax axis by iterating the complementary index set.
        const auto& shape = x.shape();
        const int ax = axis < 0 ? axis + 3 : axis;
        int64_t inner = 1;
        for (int d = ax + 1; d < 3; ++d) inner *= shape[static_cast<size_t>(d)];
        int64_t checked = 0;
        for (int64_t outer = 0; outer < x.numel() / (len * inner); ++outer) {
            for (int64_t in = 0; in < inner; ++in) {
                double sum = 0.0;
                for (int64_t i = 0; i < len; ++i) {
                    sum += p.data()[outer * len * inner + i * inner + in];
                }
                CHECK(std::abs(sum - 1.0) < 1e-12);
                ++checked;
            }
        }
        CHECK(checked == rows);
    }
}

TEST_CASE("layernorm maps zero-variance input to zeros") {
    Tensor x = Tensor::from_vector({3}, {2, 2, 2});
    Tensor y = ops::layernorm(x, 0, 1e-5);
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("layernorm output has near-zero mean and near-unit variance") {
    Rng rng(4);
    Tensor x = Tensor::zeros({8, 64});
    for (auto& v : x.mutable_data()) v = rng.normal() * 10.0; // variance ~100 >> eps
    Tensor y = ops::layernorm(x, -1, 1e-5);
    for (int64_t r = 0; r < 8; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t i = 0; i < 64; ++i) mean += y.data()[r * 64 + i];
        mean /= 64.0;
        for (int64_t i = 0; i < 64; ++i) {
            const double c = y.data()[r * 64 + i] - mean;
            var += c * c;
        }
        var /= 64.0;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("log rejects non-positive input") {
    CHECK_THROWS_AS(ops::log(Tensor::from_vector({2}, {1.0, 0.0})), DomainError);
    CHECK_THROWS_AS(ops::log(Tensor::from_vector({1}, {-3.0})), DomainError);
}

TEST_CASE("unary math goldens") {
    Tensor x = Tensor::from_vector({3}, {0.0, 1.0, -1.0});
    CHECK(ops::exp(x).data()[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
    CHECK(ops::tanh(x).data()[2] == doctest::Approx(std::tanh(-1.0)).epsilon(1e-15));
    CHECK(ops::scale(x, 2.5).data()[1] == 2.5);
    // gelu(0) = 0, gelu(large) ~ identity, gelu(-large) ~ 0
    Tensor g = ops::gelu(Tensor::from_vector({3}, {0.0, 10.0, -10.0}));
    CHECK(g.data()[0] == 0.0);
    CHECK(g.data()[1] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(std::abs(g.data()[2]) < 1e-12);
}

TEST_CASE("permute, reshape, slice goldens") {
    Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor xt = ops::permute(x, {1, 0});
    CHECK(xt.shape() == Shape{3, 2});
    CHECK(xt.at({0, 1}) == 4);
    CHECK(xt.at({2, 0}) == 3);

    Tensor r = ops::reshape(x, {3, 2});
    CHECK(r.at({2, 1}) == 6);
    CHECK_THROWS_AS(ops::reshape(x, {4, 2}), ShapeError);
    CHECK_THROWS_AS(ops::permute(x, {0, 0}), ShapeError);

    Tensor s = ops::slice_rows(x, 1, 1);
    CHECK(s.shape() == Shape{1, 3});
    CHECK(s.at({0, 0}) == 4);
    CHECK_THROWS_AS(ops::slice_rows(x, 1, 5), ShapeError);
}

TEST_CASE("embedding gathers rows and validates ids") {
    Tensor table = Tensor::from_vector({3, 2}, {0, 1, 10, 11, 20, 21});
    Tensor out = ops::embedding(table, {2, 0, 1}, {3});
    CHECK(out.shape() == Shape{3, 2});
    CHECK(out.at({0, 1}) == 21);
    CHECK(out.at({2, 0}) == 10);
    try {
        ops::embedding(table, {0, 5}, {2});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("5") != std::string::npos);
        CHECK(msg.find("position 1") != std::string::npos);
    }
}

TEST_CASE("cross entropy goldens") {
    // Uniform logits over vocab 4 -> ln 4.
    Tensor uniform = Tensor::zeros({2, 4});
    CHECK(ops::cross_entropy(uniform, {0, 3}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));

    // Saturated correct class -> loss < 1e-6.
    Tensor sat = Tensor::zeros({1, 4});
    sat.mutable_data()[2] = 20.0;
    CHECK(ops::cross_entropy(sat, {2}).item() < 1e-6);

    // Two hand-built rows: -log softmax at the target.
    Tensor hand = Tensor::from_vector({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 1.0});
    auto row_loss = [](std::vector<double> row, int tgt) {
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - mx);
        return mx + std::log(sum) - row[static_cast<size_t>(tgt)];
    };
    const double expected = 0.5 * (row_loss({1.0, 2.0, 0.5}, 1) + row_loss({-1.0, 0.0, 1.0}, 0));
    CHECK(ops::cross_entropy(hand, {1, 0}).item() == doctest::Approx(expected).epsilon(1e-14));

    CHECK_THROWS_AS(ops::cross_entropy(hand, {1}), ShapeError);
    CHECK_THROWS_AS(ops::cross_entropy(hand, {1, 7}), DataError);
}

TEST_CASE("bernoulli mask endpoints, stats, and determinism") {
    Rng rng(11);
    Tensor ones = ops::bernoulli_mask({100}, 0.0, rng);
    for (double v : ones.data()) CHECK(v == 1.0);
    Tensor zeros = ops::bernoulli_mask({100}, 1.0, rng);
    for (double v : zeros.data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(ops::bernoulli_mask({4}, -0.1, rng), DomainError);
    CHECK_THROWS_AS(ops::bernoulli_mask({4}, 1.5, rng), DomainError);

    const int64_t n = 1000000;
    Rng r1(99, 5);
    Tensor mask = ops::bernoulli_mask({n}, 0.1, r1);
    CHECK_FALSE(mask.requires_grad());
    int64_t zeros_seen = 0;
    for (double v : mask.data()) zeros_seen += v == 0.0 ? 1 : 0;
    const double frac = static_cast<double>(zeros_seen) / static_cast<double>(n);
    CHECK(std::abs(frac - 0.1) < 0.001); // ~3.3 sigma of Binomial(n, 0.1)

    Rng r2(99, 5);
    Tensor mask2 = ops::bernoulli_mask({n}, 0.1, r2);
    CHECK(std::memcmp(mask.data().data(), mask2.data().data(),
                      static_cast<size_t>(n) * sizeof(double)) == 0);
}

TEST_CASE("bernoulli mask concentration across zero ratios") {
    for (double p : {0.05, 0.5, 0.9}) {
        Rng rng(7, static_cast<uint64_t>(p * 100));
        const int64_t n = 200000;
        Tensor mask = ops::bernoulli_mask({n}, p, rng);
        int64_t zeros_seen = 0;
        for (double v : mask.data()) zeros_seen += v == 0.0 ? 1 : 0;
        const double frac = static_cast<double>(zeros_seen) / static_cast<double>(n);
        const double bound = 4.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
        CHECK(std::abs(frac - p) < bound);
    }
}
