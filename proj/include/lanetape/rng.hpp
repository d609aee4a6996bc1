#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace lanetape {

// Philox4x32-10 counter-based generator (Salmon et al.). Stateless: every
// 128-bit block is a pure function of (counter, key), so draw k of path p is
// reproducible regardless of how many paths are run or in which order.
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter block(Counter ctr, Key key) noexcept {
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * ctr[2];
            ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
                   static_cast<std::uint32_t>(p1),
                   static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
                   static_cast<std::uint32_t>(p0)};
            key[0] += 0x9E3779B9u;
            key[1] += 0xBB67AE85u;
        }
        return ctr;
    }
};

// Two 32-bit words -> uniform strictly inside (0,1): bin centers of a
// 2^52 grid. Every intermediate is exactly representable, so the extremes
// are exactly 2^-53 and 1 - 2^-53; a wider mantissa would round the top
// bin to 1.0 and poison the inverse CDF.
inline double uniform_from_bits(std::uint32_t w0, std::uint32_t w1) noexcept {
    return ((w0 >> 6) * 67108864.0 + (w1 >> 6) + 0.5) * (1.0 / 4503599627370496.0);
}

// Inverse standard normal CDF, Wichura's AS241 (PPND16). Absolute error is
// around 1e-15 over (0,1); good enough that draw quality is limited by the
// 53-bit uniform, not by this map.
inline double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("inverse_normal_cdf: p outside (0,1)");
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                     6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
                   1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
                 1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
               (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                     3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
                   5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
                 4.2313330701600911252e+1) * r + 1.0);
    }
    double r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double value;
    if (r <= 5.0) {
        r -= 1.6;
        value = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                      2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
                    3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
                  4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
                (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                      1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                    6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
                  2.05319162663775882187e+0) * r + 1.0);
    } else {
        r -= 5.0;
        value = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                      1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                    2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
                  5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
                (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                      1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                    1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                  5.99832206555887937690e-1) * r + 1.0);
    }
    return q < 0.0 ? -value : value;
}

// Source of the N random-input values consumed by one path evaluation.
class PathDrawSource {
public:
    virtual ~PathDrawSource() = default;

    /// Number of draws per path (the tape's random-input count).
    virtual std::size_t dimension() const noexcept = 0;

    /// Fill `out` (size dimension()) with the draws for path `path`.
    virtual void fill(std::uint64_t path, std::span<double> out) const = 0;
};

// Standard normal draws keyed on (seed, path, step, component): one Philox
// block per (path, slot-pair) yields two normals, and slot 2*step+component
// is the tape's random-input ordering, so a draw never depends on the total
// path count or on batching.
//
// Antithetic mode pairs consecutive paths: path 2k+1 gets the negated draws
// of path 2k (an odd trailing path keeps its own draws).
class PhiloxNormalSource final : public PathDrawSource {
public:
    PhiloxNormalSource(std::uint64_t seed, std::size_t dimension, bool antithetic = false)
        : seed_(seed), dim_(dimension), antithetic_(antithetic) {}

    std::size_t dimension() const noexcept override { return dim_; }

    void fill(std::uint64_t path, std::span<double> out) const override {
        const std::uint64_t base = antithetic_ ? path / 2 : path;
        const double sign = (antithetic_ && (path & 1u)) ? -1.0 : 1.0;
        const Philox4x32::Key key{static_cast<std::uint32_t>(seed_),
                                  static_cast<std::uint32_t>(seed_ >> 32)};
        for (std::size_t pair = 0; 2 * pair < dim_; ++pair) {
            const auto w = Philox4x32::block({static_cast<std::uint32_t>(base),
                                              static_cast<std::uint32_t>(base >> 32),
                                              static_cast<std::uint32_t>(pair), 0x6C616E65u},
                                             key);
            out[2 * pair] = sign * inverse_normal_cdf(uniform_from_bits(w[0], w[1]));
            if (2 * pair + 1 < dim_)
                out[2 * pair + 1] = sign * inverse_normal_cdf(uniform_from_bits(w[2], w[3]));
        }
    }

    std::uint64_t seed() const noexcept { return seed_; }
    bool antithetic() const noexcept { return antithetic_; }

private:
    std::uint64_t seed_;
    std::size_t dim_;
    bool antithetic_;
};

// Draws read from a flat path-major buffer. Used where generation cost must
// stay out of a timed region, and to replay an explicit scenario list.
class BufferDrawSource final : public PathDrawSource {
public:
    BufferDrawSource(std::vector<double> draws, std::size_t dimension)
        : draws_(std::move(draws)), dim_(dimension) {
        if (dim_ == 0 || draws_.size() % dim_ != 0)
            throw std::invalid_argument("BufferDrawSource: buffer size not a multiple of dimension");
    }

    static BufferDrawSource materialize(const PathDrawSource& src, std::uint64_t paths) {
        std::vector<double> buf(paths * src.dimension());
        for (std::uint64_t p = 0; p < paths; ++p)
            src.fill(p, std::span<double>(buf.data() + p * src.dimension(), src.dimension()));
        return BufferDrawSource(std::move(buf), src.dimension());
    }

    std::size_t dimension() const noexcept override { return dim_; }
    std::uint64_t paths() const noexcept { return draws_.size() / dim_; }

    void fill(std::uint64_t path, std::span<double> out) const override {
        if (path >= paths()) throw std::out_of_range("BufferDrawSource: path index out of range");
        const double* row = draws_.data() + path * dim_;
        for (std::size_t i = 0; i < dim_; ++i) out[i] = row[i];
    }

private:
    std::vector<double> draws_;
    std::size_t dim_;
};

}  // namespace lanetape
