#pragma once

// Counter-based random number generation and the distribution kernels built
// on top of it.  The generator is Philox4x64-10 keyed by (seed, stream_id),
// so any component of a run can draw from its own stream without coordination
// and results are independent of thread scheduling.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace survdtr {

namespace detail {

inline std::uint64_t mulhilo64(std::uint64_t a, std::uint64_t b, std::uint64_t& hi) {
    unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
    hi = static_cast<std::uint64_t>(p >> 64);
    return static_cast<std::uint64_t>(p);
}

} // namespace detail

// Philox4x64-10 block cipher: 256-bit counter, 128-bit key, 256-bit output.
// Matches the Random123 reference (and numpy's Philox bit generator) exactly.
struct Philox4x64 {
    static constexpr std::uint64_t M0 = 0xD2E7470EE14C6C93ULL;
    static constexpr std::uint64_t M1 = 0xCA5A826395121157ULL;
    static constexpr std::uint64_t W0 = 0x9E3779B97F4A7C15ULL;
    static constexpr std::uint64_t W1 = 0xBB67AE8584CAA73BULL;

    static std::array<std::uint64_t, 4> block(std::array<std::uint64_t, 4> ctr,
                                              std::array<std::uint64_t, 2> key) {
        for (int round = 0; round < 10; ++round) {
            std::uint64_t hi0, hi1;
            std::uint64_t lo0 = detail::mulhilo64(M0, ctr[0], hi0);
            std::uint64_t lo1 = detail::mulhilo64(M1, ctr[2], hi1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += W0;
            key[1] += W1;
        }
        return ctr;
    }
};

// One independent stream of draws, identified by (seed, stream_id).
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id)
        : key_{seed, stream_id}, counter_{0, 0, 0, 0}, index_(4) {}

    // numpy semantics: the counter is advanced before each block, so the
    // stream equals numpy.random.Philox(counter=0, key=seed | stream_id<<64).
    std::uint64_t next_u64() {
        if (index_ == 4) {
            advance_counter();
            buffer_ = Philox4x64::block(counter_, key_);
            index_ = 0;
        }
        return buffer_[index_++];
    }

    // Uniform on the open interval (0, 1); safe as input to quantile functions.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal();                       // standard normal via inverse CDF
    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Standard normal conditioned on exceeding `lower`.
    double truncated_normal_lower(double lower);
    // N(mean, sd^2) conditioned on exceeding `lower`.
    double truncated_normal_lower(double mean, double sd, double lower) {
        return mean + sd * truncated_normal_lower((lower - mean) / sd);
    }

    double gamma(double shape);            // unit scale
    double chi_square(double df) { return 2.0 * gamma(0.5 * df); }

    // sigma^2 ~ nu*lambda / chi^2_nu (scaled inverse chi-square).
    double scaled_inv_chi_square(double df, double scale) {
        return df * scale / chi_square(df);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_index: empty range");
        // rejection to avoid modulo bias
        std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do { v = next_u64(); } while (v >= limit);
        return v % n;
    }

private:
    void advance_counter() {
        for (int i = 0; i < 4; ++i) {
            if (++counter_[i] != 0) break;
        }
    }

    std::array<std::uint64_t, 2> key_;
    std::array<std::uint64_t, 4> counter_;
    std::array<std::uint64_t, 4> buffer_{};
    int index_;
};

// ---------------------------------------------------------------------------
// Deterministic distribution functions.

inline double expit(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double normal_pdf(double z) {
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.70710678118654752440); }

// log(1 - Phi(z)), stable over the whole real line.
inline double normal_logsf(double z) {
    if (z < 25.0) {
        return std::log(0.5 * std::erfc(z * 0.70710678118654752440));
    }
    // asymptotic expansion of the Mills ratio for the far upper tail
    double z2 = z * z;
    double z4 = z2 * z2;
    return -0.5 * z2 - std::log(z) - 0.91893853320467274178
         + std::log1p(-1.0 / z2 + 3.0 / z4 - 15.0 / (z4 * z2));
}

inline double normal_logpdf(double z) { return -0.5 * z * z - 0.91893853320467274178; }

// Mills ratio phi(z) / (1 - Phi(z)).
inline double normal_hazard(double z) { return std::exp(normal_logpdf(z) - normal_logsf(z)); }

// Inverse standard normal CDF, Wichura's algorithm AS 241 (PPND16).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p outside (0,1)");
    double q = p - 0.5;
    if (std::fabs(q) <= 0.425) {
        double r = 0.180625 - q * q;
        return q *
            (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
              133.14166789178437745) * r + 3.387132872796366608)
          / (((((((5226.495278852545703 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                 21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
              42.313330701600911252) * r + 1.0);
    }
    double r = (q < 0.0) ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
                   1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
                4.6303378461565452959) * r + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
                   0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
                2.05319162663775882187) * r + 1.0);
    } else {
        r -= 5.0;
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
                   0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
                5.4637849111641143699) * r + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
                   7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
                0.59983220655588793769) * r + 1.0);
    }
    return (q < 0.0) ? -val : val;
}

inline double RngStream::normal() { return normal_quantile(uniform()); }

inline double RngStream::truncated_normal_lower(double lower) {
    if (!std::isfinite(lower)) throw std::invalid_argument("truncated_normal_lower: bound not finite");
    if (lower <= 0.45) {
        // acceptance probability 1 - Phi(lower) >= 0.33; plain rejection
        for (;;) {
            double z = normal();
            if (z >= lower) return z;
        }
    }
    // Robert (1995) exponential-proposal rejection for the upper tail
    double alpha = 0.5 * (lower + std::sqrt(lower * lower + 4.0));
    for (;;) {
        double z = lower - std::log(uniform()) / alpha;
        double d = z - alpha;
        if (std::log(uniform()) <= -0.5 * d * d) return z;
    }
}

inline double RngStream::gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
        // boost to shape+1, then scale back (Marsaglia-Tsang trick)
        double g = gamma(shape + 1.0);
        return g * std::pow(uniform(), 1.0 / shape);
    }
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        double u = uniform();
        double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
        if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
}

// ---------------------------------------------------------------------------
// Regularized incomplete gamma and the chi-square distribution.

namespace detail {

// lower regularized incomplete gamma P(a, x)
inline double gamma_p(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw std::invalid_argument("gamma_p: bad arguments");
    if (x == 0.0) return 0.0;
    double lg = std::lgamma(a);
    if (x < a + 1.0) {
        // series expansion
        double term = 1.0 / a;
        double sum = term;
        double ap = a;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
        }
        return sum * std::exp(-x + a * std::log(x) - lg);
    }
    // continued fraction (modified Lentz)
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= 500; ++i) {
        double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    double q = std::exp(-x + a * std::log(x) - lg) * h;
    return 1.0 - q;
}

} // namespace detail

inline double chi_square_cdf(double x, double df) {
    if (x <= 0.0) return 0.0;
    return detail::gamma_p(0.5 * df, 0.5 * x);
}

// Inverse chi-square CDF: Wilson-Hilferty start, Newton polish with a
// bisection safeguard.
inline double chi_square_quantile(double p, double df) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("chi_square_quantile: p outside (0,1)");
    if (!(df > 0.0)) throw std::invalid_argument("chi_square_quantile: df must be positive");
    double x;
    if (df >= 1.0) {
        double z = normal_quantile(p);
        double t = 1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df));
        x = df * t * t * t;
        if (x <= 0.0) x = 1e-10;
    } else {
        // small df: invert the leading series term P(a,x) ~ x^a / (a Gamma(a))
        double a = 0.5 * df;
        x = 2.0 * std::exp((std::log(p) + std::lgamma(a + 1.0)) / a);
    }
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 200; ++it) {
        double f = chi_square_cdf(x, df) - p;
        if (f > 0.0) hi = x; else lo = x;
        // density of chi-square at x
        double logpdf = (0.5 * df - 1.0) * std::log(x) - 0.5 * x - std::lgamma(0.5 * df) - 0.5 * df * 0.6931471805599453;
        double step = f / std::exp(logpdf);
        double next = x - step;
        if (!(next > lo && (next < hi || !std::isfinite(hi)))) {
            next = std::isfinite(hi) ? 0.5 * (lo + hi) : 2.0 * x;
        }
        if (std::fabs(next - x) <= 1e-14 * std::max(1.0, x)) return next;
        x = next;
    }
    return x;
}

} // namespace survdtr
