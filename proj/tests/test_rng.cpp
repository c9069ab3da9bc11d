#include <doctest.h>

#include <algorithm>
#include <set>

#include "regmerge/rng.hpp"

using regmerge::Philox;

// Known-answer vectors of the reference Philox4x32-10 implementation.
TEST_CASE("philox known answers") {
    CHECK(Philox(0, 0).block(0) == Philox::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
    CHECK(Philox(~0ull, ~0ull).block(~0ull) == Philox::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
    const Philox pi(0x299f31d0a4093822ull, 0x0370734413198a2eull);
    CHECK(pi.block(0x85a308d3243f6a88ull) == Philox::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("sequential draws are reproducible and in range") {
    Philox a(42, 3), b(42, 3), c(42, 4);
    bool differs = false;
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        differs |= u != c.uniform();
    }
    CHECK(differs);
    for (int i = 0; i < 1000; ++i) CHECK(a.below(7) < 7);
}

TEST_CASE("normal draws have roughly unit variance") {
    Philox r(9);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.03);
    CHECK(std::abs(s2 / n - 1.0) < 0.05);
}

TEST_CASE("permutation is a bijection") {
    auto p = Philox(5).permutation(100);
    auto sorted = p;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
    CHECK(p != sorted);
    CHECK(Philox(5).permutation(0).empty());
}

TEST_CASE("derive_seed separates labels") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t l = 0; l < 100; ++l) seen.insert(regmerge::derive_seed(1, l));
    CHECK(seen.size() == 100);
    CHECK(regmerge::derive_seed(1, 2) == regmerge::derive_seed(1, 2));
}
