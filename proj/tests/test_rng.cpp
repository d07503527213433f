#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <set>
#include <vector>

#include "minstrel/rng.hpp"

using namespace minstrel;

TEST_CASE("same seed reproduces the exact stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        CHECK(a.raw() == b.raw());
    }
    Rng c(42), d(43);
    int diffs = 0;
    for (int i = 0; i < 100; ++i)
        if (c.raw() != d.raw()) ++diffs;
    CHECK(diffs > 90);
}

TEST_CASE("substreams are stable and independent of draw order") {
    Rng root(7);
    Rng s1 = root.substream("alpha", 3);
    root.uniform();  // consuming the parent must not shift substreams
    Rng s2 = root.substream("alpha", 3);
    CHECK(s1.raw() == s2.raw());

    Rng t1 = root.substream("alpha", 4);
    Rng t2 = root.substream("beta", 3);
    CHECK(root.substream("alpha", 3).raw() != t1.raw());
    CHECK(root.substream("alpha", 3).raw() != t2.raw());
}

TEST_CASE("uniform stays in [0,1) with sane mean") {
    Rng r(1);
    double sum = 0.0;
    for (int i = 0; i < 20000; ++i) {
        double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / 20000 - 0.5) < 0.01);
}

TEST_CASE("uniform_int covers the full range without bias") {
    Rng r(2);
    std::array<int, 7> counts{};
    for (int i = 0; i < 70000; ++i) counts[r.uniform_int(7)]++;
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);

    Rng r2(3);
    for (int i = 0; i < 100; ++i) {
        int64_t v = r2.uniform_range(-3, 5);
        REQUIRE(v >= -3);
        REQUIRE(v <= 5);
    }
}

TEST_CASE("normal matches standard moments") {
    Rng r(4);
    const int n = 100000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        sum += x;
        sum2 += x * x;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("categorical follows the weights") {
    Rng r(5);
    std::vector<double> w = {1.0, 0.0, 3.0};
    std::array<int, 3> counts{};
    for (int i = 0; i < 40000; ++i) counts[r.categorical(w)]++;
    CHECK(counts[1] == 0);
    CHECK(std::abs(counts[0] / 40000.0 - 0.25) < 0.02);
    CHECK(std::abs(counts[2] / 40000.0 - 0.75) < 0.02);
}

TEST_CASE("categorical_logits matches softmax frequencies") {
    Rng r(6);
    std::vector<double> logits = {0.0, 1.0, 2.0};
    // softmax: e^0, e^1, e^2 normalized
    double z = std::exp(0.0) + std::exp(1.0) + std::exp(2.0);
    std::array<int, 3> counts{};
    const int n = 60000;
    for (int i = 0; i < n; ++i) counts[r.categorical_logits(logits)]++;
    for (int k = 0; k < 3; ++k)
        CHECK(std::abs(counts[k] / double(n) - std::exp(double(k)) / z) < 0.015);
}

TEST_CASE("categorical_logits at zero temperature is argmax") {
    Rng r(7);
    std::vector<double> logits = {0.3, 5.0, -2.0, 4.9};
    for (int i = 0; i < 50; ++i) CHECK(r.categorical_logits(logits, 0.0) == 1);
    // Very small but positive temperature concentrates all mass on the max.
    for (int i = 0; i < 50; ++i) CHECK(r.categorical_logits(logits, 1e-9) == 1);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    std::vector<double> v = {1.0, 3.0, 3.0, 2.0};
    CHECK(argmax(v) == 1);
    std::vector<double> flat = {2.0, 2.0, 2.0};
    CHECK(argmax(flat) == 0);
}

TEST_CASE("shuffle permutes deterministically") {
    std::vector<int> v = {0, 1, 2, 3, 4, 5, 6, 7};
    Rng a(9), b(9);
    auto va = v, vb = v;
    a.shuffle(va);
    b.shuffle(vb);
    CHECK(va == vb);
    CHECK(std::set<int>(va.begin(), va.end()) == std::set<int>(v.begin(), v.end()));
    // 8 elements almost surely move under a fair shuffle.
    CHECK(va != v);
}
