#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "imta/common.hpp"
#include "imta/flow.hpp"

namespace imta::detect {

enum class Hypothesis { H0, H1 };

struct EventMatchConfig {
    double delta_s = 3.0;        // timing tolerance
    double gamma_bytes = 10000;  // size tolerance (10 KB)
    double eta = 0.5;            // decision threshold on r = k/n
    double skew_window_s = 10.0; // clock-skew search range, +/-
    double skew_step_s = 0.5;
    double sync_prefix_s = 10.0; // skew is estimated on this initial stretch
};

struct MatchResult {
    std::size_t k = 0;  // matched channel events
    std::size_t n = 0;  // channel events
    double r = 0;       // k/n
    Hypothesis decision = Hypothesis::H0;
    std::vector<std::ptrdiff_t> assignment;  // user index per channel event, -1 unmatched
};

// Greedy in-order matching: walking the channel events by time, each one takes
// the earliest still-unmatched user event within both tolerances. One-to-one
// by construction and bounded above by the optimal assignment.
inline MatchResult match_events(const Flow& channel, const Flow& user,
                                const EventMatchConfig& cfg, double user_offset_s = 0) {
    if (!(cfg.delta_s > 0)) throw runtime_fault("match_events: delta must be > 0");
    if (cfg.gamma_bytes < 0) throw runtime_fault("match_events: gamma must be >= 0");
    if (cfg.eta < 0 || cfg.eta > 1) throw runtime_fault("match_events: eta must be in [0,1]");
    if (channel.events.empty())
        throw runtime_fault("match_events: empty channel flow, ratio undefined");
    MatchResult res;
    res.n = channel.events.size();
    res.assignment.assign(res.n, -1);
    const auto& ue = user.events;
    std::vector<bool> used(ue.size(), false);
    std::size_t lo = 0;
    for (std::size_t i = 0; i < channel.events.size(); ++i) {
        const Event& ce = channel.events[i];
        double tmin = ce.time_s - cfg.delta_s;
        double tmax = ce.time_s + cfg.delta_s;
        while (lo < ue.size() && ue[lo].time_s + user_offset_s <= tmin) ++lo;
        for (std::size_t j = lo; j < ue.size(); ++j) {
            double tj = ue[j].time_s + user_offset_s;
            if (tj >= tmax) break;
            if (used[j]) continue;
            if (std::fabs(ce.size_bytes - ue[j].size_bytes) < cfg.gamma_bytes) {
                used[j] = true;
                res.assignment[i] = std::ptrdiff_t(j);
                ++res.k;
                break;
            }
        }
    }
    res.r = double(res.k) / double(res.n);
    res.decision = res.r > cfg.eta ? Hypothesis::H1 : Hypothesis::H0;
    return res;
}

// Generic sliding-window synchronizer. Scans offsets in [-window, +window] at
// the given step and returns the offset whose score is maximal; ties prefer
// the smallest magnitude, then the smaller offset. scorer(offset) must be
// deterministic.
inline double synchronize(double window_s, double step_s,
                          const std::function<double(double)>& scorer) {
    if (window_s < 0) throw runtime_fault("synchronize: window must be >= 0");
    if (window_s == 0) return 0;
    if (!(step_s > 0)) throw runtime_fault("synchronize: step must be > 0");
    double best_off = 0, best_score = -1e300;
    long steps = std::lround(window_s / step_s);
    for (long i = -steps; i <= steps; ++i) {
        double off = double(i) * step_s;
        double sc = scorer(off);
        bool better = sc > best_score + 1e-12;
        if (!better && std::fabs(sc - best_score) <= 1e-12) {
            better = std::fabs(off) < std::fabs(best_off) - 1e-12 ||
                     (std::fabs(std::fabs(off) - std::fabs(best_off)) <= 1e-12 && off < best_off);
        }
        if (better) {
            best_score = sc;
            best_off = off;
        }
    }
    return best_off;
}

namespace detail {
inline Flow prefix_of(const Flow& f, double limit_s) {
    Flow out;
    out.principal = f.principal;
    out.direction = f.direction;
    for (const auto& e : f.events) {
        if (e.time_s >= limit_s) break;
        out.events.push_back(e);
    }
    return out;
}
} // namespace detail

// Match count with alignment refinement packed into one score: more matches
// always win, equal counts prefer the offset with the smaller mean timing
// discrepancy. The refinement term stays inside [0, 1).
inline double match_alignment_score(const Flow& channel, const Flow& user,
                                    const EventMatchConfig& cfg, double offset) {
    MatchResult r = match_events(channel, user, cfg, offset);
    if (r.k == 0) return 0;
    double dt = 0;
    for (std::size_t i = 0; i < r.assignment.size(); ++i) {
        if (r.assignment[i] < 0) continue;
        dt += std::fabs(channel.events[i].time_s -
                        (user.events[std::size_t(r.assignment[i])].time_s + offset));
    }
    double mean_dt = dt / double(r.k);
    return double(r.k) + std::max(0.0, 1.0 - mean_dt / cfg.delta_s) * 0.999;
}

// Clock-skew estimate for the event detector: the match score over the first
// sync_prefix_s seconds of the channel, maximized over candidate offsets.
// With no events in the prefix every offset scores zero and the estimate is 0.
inline double synchronize_events(const Flow& channel, const Flow& user,
                                 const EventMatchConfig& cfg) {
    Flow cp = detail::prefix_of(channel, cfg.sync_prefix_s);
    Flow up = detail::prefix_of(user, cfg.sync_prefix_s + cfg.skew_window_s + cfg.delta_s);
    if (cp.events.empty() || up.events.empty()) return 0;
    return synchronize(cfg.skew_window_s, cfg.skew_step_s,
                       [&](double off) { return match_alignment_score(cp, up, cfg, off); });
}

struct BoundParams {
    double p0 = 0.002;  // match probability under H0
    double p1 = 0.921;  // match probability under H1
    std::size_t n = 1;  // channel event count
    double eta = 0.5;   // decision threshold
};

namespace detail {
// KL divergence between Bernoulli(a) and Bernoulli(p), in nats
inline double kl_bernoulli(double a, double p) {
    double term1 = a == 0 ? 0.0 : a * std::log(a / p);
    double term2 = a == 1 ? 0.0 : (1 - a) * std::log((1 - a) / (1 - p));
    return term1 + term2;
}
} // namespace detail

// Large-deviation upper bound on P(false positive) = P(k >= eta n | H0)
//   = F(n - eta n; n, 1 - p0) <= exp(-n KL(1-eta || 1-p0)),
// evaluated in log space. Valid as a bound for eta > p0; eta = 0 and eta = 1
// return the closed-form limits (1-p0)^n and p0^n.
inline double log_fp_bound(const BoundParams& p) {
    if (!(p.p0 > 0 && p.p0 < 1)) throw runtime_fault("fp_bound: p0 must be in (0,1)");
    if (p.n < 1) throw runtime_fault("fp_bound: n must be >= 1");
    if (p.eta < 0 || p.eta > 1) throw runtime_fault("fp_bound: eta must be in [0,1]");
    return -double(p.n) * detail::kl_bernoulli(1.0 - p.eta, 1.0 - p.p0);
}

inline double fp_bound(const BoundParams& p) {
    return std::min(1.0, std::exp(log_fp_bound(p)));
}

// Upper bound on P(false negative) = P(k <= eta n | H1)
//   = F(eta n; n, p1) <= exp(-n KL(eta || p1)), log space. Requires eta < p1
// (the bound direction is only meaningful on that side).
inline double log_fn_bound(const BoundParams& p) {
    if (!(p.p1 > 0 && p.p1 < 1)) throw runtime_fault("fn_bound: p1 must be in (0,1)");
    if (p.n < 1) throw runtime_fault("fn_bound: n must be >= 1");
    if (!(p.eta < p.p1)) throw runtime_fault("fn_bound: requires eta < p1");
    if (p.eta < 0) throw runtime_fault("fn_bound: eta must be >= 0");
    return -double(p.n) * detail::kl_bernoulli(p.eta, p.p1);
}

inline double fn_bound(const BoundParams& p) {
    return std::min(1.0, std::exp(log_fn_bound(p)));
}

// ---------------------------------------------------------------------------
// Exact binomial CDF in extended precision. This is the second, independent
// route against which the closed-form bounds are checked: the partial sum
// sum_{k<=r} C(m,k) a^k (d-a)^(m-k) is accumulated in exact big-integer
// arithmetic for rational p = a/d, and only the final logarithm is rounded.

namespace bigint {

struct Big {
    std::vector<std::uint64_t> w;  // little-endian limbs, no leading zeros

    static Big from_u64(std::uint64_t v) {
        Big b;
        if (v) b.w.push_back(v);
        return b;
    }
    bool zero() const { return w.empty(); }

    void mul_small(std::uint64_t m) {
        if (m == 0) { w.clear(); return; }
        unsigned __int128 carry = 0;
        for (auto& limb : w) {
            unsigned __int128 cur = (unsigned __int128)limb * m + carry;
            limb = std::uint64_t(cur);
            carry = cur >> 64;
        }
        while (carry) {
            w.push_back(std::uint64_t(carry));
            carry >>= 64;
        }
    }

    // exact division by a small divisor; the remainder must be zero for the
    // binomial recurrence, which is asserted by construction
    void div_small(std::uint64_t d) {
        unsigned __int128 rem = 0;
        for (std::size_t i = w.size(); i-- > 0;) {
            unsigned __int128 cur = (rem << 64) | w[i];
            w[i] = std::uint64_t(cur / d);
            rem = cur % d;
        }
        while (!w.empty() && w.back() == 0) w.pop_back();
    }

    void add(const Big& o) {
        std::size_t n = std::max(w.size(), o.w.size());
        w.resize(n, 0);
        unsigned __int128 carry = 0;
        for (std::size_t i = 0; i < n; ++i) {
            unsigned __int128 cur = (unsigned __int128)w[i] + (i < o.w.size() ? o.w[i] : 0) + carry;
            w[i] = std::uint64_t(cur);
            carry = cur >> 64;
        }
        if (carry) w.push_back(std::uint64_t(carry));
    }

    // natural log; exact limbs make this accurate to ~1 ulp of long double
    long double log() const {
        if (zero()) return -std::numeric_limits<long double>::infinity();
        std::size_t top = w.size() - 1;
        long double mant = (long double)w[top];
        if (top >= 1) mant = mant * 18446744073709551616.0L + (long double)w[top - 1];
        if (top >= 2) mant = mant * 18446744073709551616.0L + (long double)w[top - 2];
        std::size_t used = std::min<std::size_t>(top + 1, 3);
        long double shift = (long double)(top + 1 - used) * 64.0L;
        return std::log(mant) + shift * 0.69314718055994530942L;
    }
};

} // namespace bigint

// Rationalizes a probability given as a double; p must be within 1e-12 of
// num/10^9 (grid values like 0.002, 0.824 all are).
inline void rationalize_probability(double p, std::uint64_t& num, std::uint64_t& den) {
    den = 1000000000ULL;
    num = std::uint64_t(std::llround(p * double(den)));
    if (std::fabs(double(num) / double(den) - p) > 1e-12)
        throw runtime_fault("binomial_cdf_exact: probability is not on the 1e-9 grid");
    std::uint64_t g = std::gcd(num, den);
    if (g > 1) {
        num /= g;
        den /= g;
    }
}

// Natural log of F(r; m, p) = P(Bin(m, p) <= r), exact partial summation.
inline long double log_binomial_cdf_exact(std::int64_t r, std::uint64_t m, double p) {
    if (r < 0) return -std::numeric_limits<long double>::infinity();
    if (std::uint64_t(r) >= m) return 0.0L;
    std::uint64_t a, d;
    rationalize_probability(p, a, d);
    if (a == 0) return 0.0L;      // all mass at 0 <= r
    if (a == d) return -std::numeric_limits<long double>::infinity();  // mass at m > r
    std::uint64_t b = d - a;

    bigint::Big term = bigint::Big::from_u64(1);  // b^m
    for (std::uint64_t i = 0; i < m; ++i) term.mul_small(b);
    bigint::Big sum = term;
    for (std::uint64_t k = 1; k <= std::uint64_t(r); ++k) {
        term.mul_small(a);
        term.mul_small(m - k + 1);
        term.div_small(k * b);  // exact: term is C(m,k) a^k b^(m-k)
        sum.add(term);
    }
    long double log_den = (long double)m * std::log((long double)d);
    return sum.log() - log_den;
}

inline double binomial_cdf_exact(std::int64_t r, std::uint64_t m, double p) {
    long double lg = log_binomial_cdf_exact(r, m, p);
    return double(std::exp(lg));
}

inline std::string match_result_csv(const std::string& pair_id, const MatchResult& mr,
                                    double offset_s) {
    std::ostringstream os;
    os << pair_id << ',' << mr.n << ',' << mr.k << ',' << fmt_double(mr.r) << ','
       << fmt_double(offset_s) << ',' << (mr.decision == Hypothesis::H1 ? "H1" : "H0");
    return os.str();
}

} // namespace imta::detect
