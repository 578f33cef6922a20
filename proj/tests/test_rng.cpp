#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sapiens/rng.hpp"

using sapiens::Rng;

TEST_CASE("uniform stays in [0,1) and covers the range") {
    Rng rng(1);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01);
    CHECK(hi > 0.99);
}

TEST_CASE("uniform_int is bounded and hits every residue") {
    Rng rng(2);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const int v = rng.uniform_int(7);
        REQUIRE(v >= 0);
        REQUIRE(v < 7);
        ++hits[static_cast<size_t>(v)];
    }
    for (int h : hits) CHECK(h > 500);
}

TEST_CASE("normal has roughly unit moments") {
    Rng rng(3);
    const int n = 50000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("state roundtrip replays the exact stream") {
    Rng rng(42);
    for (int i = 0; i < 10; ++i) (void)rng.next_u64();
    const auto st = rng.state();
    std::vector<uint64_t> expect;
    for (int i = 0; i < 100; ++i) expect.push_back(rng.next_u64());
    Rng other(0);
    other.set_state(st);
    for (int i = 0; i < 100; ++i) CHECK(other.next_u64() == expect[static_cast<size_t>(i)]);
}

TEST_CASE("fork gives an independent stream and leaves the parent unchanged") {
    Rng a(7);
    const auto before = a.state();
    Rng child = a.fork(3);
    CHECK(a.state() == before);
    Rng child_again = a.fork(3);
    CHECK(child.next_u64() == child_again.next_u64());
    Rng other_child = a.fork(4);
    CHECK(child.next_u64() != other_child.next_u64());
}

TEST_CASE("same seed, same stream; different seed, different stream") {
    Rng a(9), b(9), c(10);
    bool all_eq = true, any_diff = false;
    for (int i = 0; i < 50; ++i) {
        const uint64_t va = a.next_u64();
        all_eq = all_eq && (va == b.next_u64());
        any_diff = any_diff || (va != c.next_u64());
    }
    CHECK(all_eq);
    CHECK(any_diff);
}
