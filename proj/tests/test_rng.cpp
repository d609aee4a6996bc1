#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lanetape/rng.hpp"

using namespace lanetape;

// Known-answer vectors for Philox4x32-10 from the reference implementation's
// test suite (kat_vectors, philox4x32 rounds=10).
TEST_CASE("philox4x32-10 known answers") {
    {
        const auto out = Philox4x32::block({0u, 0u, 0u, 0u}, {0u, 0u});
        CHECK(out[0] == 0x6627e8d5u);
        CHECK(out[1] == 0xe169c58du);
        CHECK(out[2] == 0xbc57ac4cu);
        CHECK(out[3] == 0x9b00dbd8u);
    }
    {
        const auto out = Philox4x32::block(
            {0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
        CHECK(out[0] == 0x408f276du);
        CHECK(out[1] == 0x41c83b0eu);
        CHECK(out[2] == 0xa20bc7c6u);
        CHECK(out[3] == 0x6d5451fdu);
    }
    {
        const auto out = Philox4x32::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                           {0xa4093822u, 0x299f31d0u});
        CHECK(out[0] == 0xd16cfe09u);
        CHECK(out[1] == 0x94fdccebu);
        CHECK(out[2] == 0x5001e420u);
        CHECK(out[3] == 0x24126ea1u);
    }
}

TEST_CASE("uniform mapping stays strictly inside (0,1)") {
    const double lo = uniform_from_bits(0u, 0u);
    const double hi = uniform_from_bits(0xffffffffu, 0xffffffffu);
    CHECK(lo > 0.0);
    CHECK(hi < 1.0);
    CHECK(lo == 0.5 / 4503599627370496.0);
    CHECK(hi == (4503599627370496.0 - 0.5) / 4503599627370496.0);
}

// Frozen values from an independent implementation of the same algorithm
// (Wichura's PPND16).
TEST_CASE("inverse normal cdf reference points") {
    CHECK(inverse_normal_cdf(0.5) == 0.0);
    CHECK_THAT(inverse_normal_cdf(0.025),
               Catch::Matchers::WithinRel(-1.9599639845400545, 1e-14));
    CHECK_THAT(inverse_normal_cdf(0.975),
               Catch::Matchers::WithinRel(1.959963984540054, 1e-14));
    CHECK_THAT(inverse_normal_cdf(1e-10),
               Catch::Matchers::WithinRel(-6.361340902404056, 1e-13));
    CHECK_THAT(inverse_normal_cdf(0.9999999999),
               Catch::Matchers::WithinRel(6.361340889697422, 1e-13));
    CHECK_THAT(inverse_normal_cdf(0.31830988618),
               Catch::Matchers::WithinRel(-0.47243017216530314, 1e-14));
    CHECK_THAT(inverse_normal_cdf(0.841344746068543), Catch::Matchers::WithinRel(1.0, 1e-13));
    CHECK_THROWS_AS(inverse_normal_cdf(0.0), std::domain_error);
    CHECK_THROWS_AS(inverse_normal_cdf(1.0), std::domain_error);
    CHECK_THROWS_AS(inverse_normal_cdf(-0.1), std::domain_error);
}

TEST_CASE("philox normal source matches the hand-derived draw") {
    // path 7, slot pair 3 under seed 42: counter (7, 0, 3, tag), key (42, 0)
    PhiloxNormalSource src(42, 8);
    std::vector<double> out(8);
    src.fill(7, out);
    CHECK_THAT(out[6], Catch::Matchers::WithinRel(0.020415871554285415, 1e-14));
    CHECK_THAT(out[7], Catch::Matchers::WithinRel(-0.17620946540988347, 1e-14));
}

TEST_CASE("philox normal source is deterministic and instance-independent") {
    PhiloxNormalSource a(9001, 6), b(9001, 6);
    std::vector<double> x(6), y(6);
    a.fill(123456789, x);
    b.fill(123456789, y);
    CHECK(x == y);
    a.fill(123456789, y);
    CHECK(x == y);

    PhiloxNormalSource c(9002, 6);
    c.fill(123456789, y);
    CHECK(x != y);
}

TEST_CASE("odd dimension fills every slot") {
    PhiloxNormalSource src(5, 3);
    std::vector<double> out(3, 1e300);
    src.fill(0, out);
    for (double v : out) {
        CHECK(std::isfinite(v));
        CHECK(v != 1e300);
    }
}

TEST_CASE("antithetic pairs negate the even path's draws") {
    PhiloxNormalSource plain(77, 4);
    PhiloxNormalSource anti(77, 4, true);
    std::vector<double> base(4), odd(4), even(4);

    plain.fill(0, base);
    anti.fill(0, even);
    CHECK(base == even);
    anti.fill(1, odd);
    for (std::size_t i = 0; i < 4; ++i) CHECK(odd[i] == -base[i]);

    plain.fill(1, base);
    anti.fill(2, even);
    CHECK(base == even);
}

TEST_CASE("draws are independent of batching through path-keyed counters") {
    // the draw for (path, slot) never moves when more paths are consumed
    PhiloxNormalSource src(31415, 4);
    std::vector<double> first(4), again(4);
    src.fill(999, first);
    for (std::uint64_t p = 0; p < 32; ++p) src.fill(p, again);
    src.fill(999, again);
    CHECK(first == again);
}

TEST_CASE("buffer source replays the generator exactly") {
    PhiloxNormalSource src(8, 5);
    const BufferDrawSource buf = BufferDrawSource::materialize(src, 10);
    CHECK(buf.dimension() == 5);
    CHECK(buf.paths() == 10);
    std::vector<double> a(5), b(5);
    for (std::uint64_t p = 0; p < 10; ++p) {
        src.fill(p, a);
        buf.fill(p, b);
        CHECK(a == b);
    }
    CHECK_THROWS_AS(buf.fill(10, a), std::out_of_range);
}

TEST_CASE("buffer source rejects ragged buffers") {
    CHECK_THROWS_AS(BufferDrawSource(std::vector<double>(7), 2), std::invalid_argument);
    CHECK_THROWS_AS(BufferDrawSource(std::vector<double>(4), 0), std::invalid_argument);
}
