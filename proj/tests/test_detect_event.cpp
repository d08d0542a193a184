#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "imta/detect_event.hpp"
#include "support/oracles.hpp"

using namespace imta;
using namespace imta::detect;

namespace {
Flow flow_of(std::vector<std::pair<double, double>> ts) {
    Flow f;
    for (auto [t, s] : ts) f.events.push_back(Event{t, s, -1, false});
    return f;
}

Flow shifted(const Flow& f, double dt) {
    Flow out = f;
    for (auto& e : out.events) e.time_s += dt;
    return out;
}
} // namespace

TEST_CASE("identical flows match completely and decide H1") {
    auto ch = flow_of({{1, 1000}, {5, 2000}, {9, 500}});
    EventMatchConfig cfg;
    cfg.eta = 0.99;
    auto r = match_events(ch, ch, cfg);
    CHECK(r.k == 3);
    CHECK(r.n == 3);
    CHECK(r.r == 1.0);
    CHECK(r.decision == Hypothesis::H1);
}

TEST_CASE("a shift beyond the tolerance matches nothing") {
    auto ch = flow_of({{1, 1000}, {5, 20000}, {9, 45000}});
    auto us = shifted(ch, 10.0);
    auto r = match_events(ch, us, EventMatchConfig{});
    CHECK(r.k == 0);
    CHECK(r.decision == Hypothesis::H0);
}

TEST_CASE("matching is one-to-one") {
    // two channel events in tolerance of one user event: only one may take it
    auto ch = flow_of({{1.0, 1000}, {1.5, 1000}});
    auto us = flow_of({{1.2, 1000}});
    auto r = match_events(ch, us, EventMatchConfig{});
    CHECK(r.k == 1);
}

TEST_CASE("empty channel flow is an error") {
    Flow empty;
    auto us = flow_of({{1, 100}});
    CHECK_THROWS_AS(match_events(empty, us, EventMatchConfig{}), runtime_fault);
}

TEST_CASE("greedy match count never exceeds the exhaustive optimum") {
    std::mt19937_64 gen(2024);
    std::uniform_real_distribution<double> ut(0, 30), us(0, 30000), un(0, 1);
    EventMatchConfig cfg;
    std::size_t equal = 0, total = 0;
    for (int trial = 0; trial < 500; ++trial) {
        oracle::MatchInstance in;
        int nc = 1 + int(un(gen) * 7.99), nu = int(un(gen) * 8.99);
        for (int i = 0; i < nc; ++i) {
            in.ct.push_back(ut(gen));
            in.cs.push_back(us(gen));
        }
        for (int j = 0; j < nu; ++j) {
            in.ut.push_back(ut(gen));
            in.us.push_back(us(gen));
        }
        std::sort(in.ct.begin(), in.ct.end());
        std::sort(in.ut.begin(), in.ut.end());
        Flow ch, usr;
        for (int i = 0; i < nc; ++i) ch.events.push_back(Event{in.ct[i], in.cs[i], -1, false});
        for (int j = 0; j < nu; ++j) usr.events.push_back(Event{in.ut[j], in.us[j], -1, false});
        std::size_t greedy = match_events(ch, usr, cfg).k;
        std::size_t opt = oracle::max_matching(in, cfg.delta_s, cfg.gamma_bytes);
        CHECK(greedy <= opt);
        if (greedy == opt) ++equal;
        ++total;
    }
    // greedy is usually optimal on sparse instances
    CHECK(double(equal) / double(total) > 0.9);
}

TEST_CASE("decision monotonicity: raising eta never turns H0 into H1") {
    std::mt19937_64 gen(55);
    std::uniform_real_distribution<double> ut(0, 60), us(0, 30000);
    auto ch = flow_of({{3, 5000}, {10, 9000}, {22, 700}, {40, 15000}});
    for (int trial = 0; trial < 100; ++trial) {
        Flow usr;
        int nu = int(ut(gen) / 8);
        for (int j = 0; j < nu; ++j) usr.events.push_back(Event{ut(gen), us(gen), -1, false});
        usr.sort_by_time();
        bool prev_h1 = true;
        for (double eta : {0.0, 0.2, 0.4, 0.6, 0.8, 0.999}) {
            EventMatchConfig cfg;
            cfg.eta = eta;
            bool h1 = match_events(ch, usr, cfg).decision == Hypothesis::H1;
            if (!prev_h1) CHECK(!h1);
            prev_h1 = h1;
        }
    }
}

TEST_CASE("shift symmetry: offsetting the user equals counter-offsetting the channel") {
    auto ch = flow_of({{3, 5000}, {10, 9000}, {22, 700}});
    auto us = flow_of({{2.2, 5100}, {11.4, 9100}, {30, 800}});
    EventMatchConfig cfg;
    for (double d : {-2.0, -0.5, 0.0, 1.5, 3.0}) {
        auto a = match_events(ch, us, cfg, d);
        auto b = match_events(shifted(ch, -d), us, cfg, 0);
        CHECK(a.k == b.k);
    }
}

TEST_CASE("synchronize recovers a constructed clock skew") {
    auto ch = flow_of({{1, 1000}, {3, 2000}, {5, 1500}, {8, 800}});
    auto us = shifted(ch, 2.0);
    EventMatchConfig cfg;
    double off = synchronize_events(ch, us, cfg);
    CHECK(off == doctest::Approx(-2.0));
    CHECK(match_events(ch, us, cfg, off).r == 1.0);
}

TEST_CASE("window zero pins the offset to zero") {
    auto ch = flow_of({{1, 1000}});
    auto us = shifted(ch, 2.0);
    EventMatchConfig cfg;
    cfg.skew_window_s = 0;
    CHECK(synchronize_events(ch, us, cfg) == 0);
}

TEST_CASE("skew recovery lands within one step of the exhaustive scan") {
    std::mt19937_64 gen(500);
    std::uniform_real_distribution<double> upick(-5, 5);
    auto ch = flow_of({{0.5, 1000}, {2, 2500}, {4.5, 1200}, {6, 3000}, {9, 640}});
    EventMatchConfig cfg;
    for (int trial = 0; trial < 25; ++trial) {
        double shift = upick(gen);
        auto us = shifted(ch, shift);
        double got = synchronize_events(ch, us, cfg);
        // exhaustive oracle at 0.1 s steps over the same prefix
        double best = 0, best_score = -1;
        for (double off = -cfg.skew_window_s; off <= cfg.skew_window_s + 1e-9; off += 0.1) {
            double sc = match_alignment_score(ch, us, cfg, off);
            if (sc > best_score) {
                best_score = sc;
                best = off;
            }
        }
        CHECK(std::fabs(got - best) <= cfg.skew_step_s + 1e-9);
        CHECK(match_events(ch, us, cfg, got).k == match_events(ch, us, cfg, best).k);
    }
}

TEST_CASE("binomial cdf closed forms") {
    CHECK(binomial_cdf_exact(3, 10, 0.5) == doctest::Approx(176.0 / 1024).epsilon(1e-12));
    CHECK(binomial_cdf_exact(10, 10, 0.37) == doctest::Approx(1.0));
    CHECK(binomial_cdf_exact(0, 20, 0.25) == doctest::Approx(std::pow(0.75, 20)).epsilon(1e-12));
    CHECK(binomial_cdf_exact(-1, 5, 0.5) == 0.0);
}

TEST_CASE("fp bound dominates the exact binomial tail") {
    BoundParams bp;
    bp.p0 = 0.002;
    bp.n = 100;
    bp.eta = 0.5;
    double v1 = fp_bound(bp);
    long double exact = std::exp(log_binomial_cdf_exact(
        std::int64_t(bp.n) - std::int64_t(std::ceil(bp.eta * double(bp.n))), bp.n, 1 - bp.p0));
    CHECK(double(exact) <= v1);
    CHECK(v1 < 1e-90);  // deep in the tail at these parameters
}

TEST_CASE("fp bound is monotone non-increasing in n") {
    double prev = 2;
    for (std::size_t n : {10, 20, 50, 100, 200, 500, 1000}) {
        BoundParams bp;
        bp.p0 = 0.002;
        bp.eta = 0.3;
        bp.n = n;
        double v = fp_bound(bp);
        CHECK(v <= prev);
        prev = v;
    }
}

TEST_CASE("fp bound limits") {
    BoundParams bp;
    bp.p0 = 1e-9;
    bp.eta = 0.4;
    bp.n = 50;
    CHECK(fp_bound(bp) < 1e-30);
    bp.p0 = 0.01;
    bp.eta = 0.0;
    bp.n = 20;
    CHECK(fp_bound(bp) == doctest::Approx(std::pow(0.99, 20)));
    bp.eta = 1.0;
    CHECK(fp_bound(bp) == doctest::Approx(std::pow(0.01, 20)));
}

TEST_CASE("fn bound dominates the exact binomial tail and hits its limits") {
    BoundParams bp;
    bp.p1 = 0.921;
    bp.n = 100;
    bp.eta = 0.5;
    double v2 = fn_bound(bp);
    long double exact = std::exp(log_binomial_cdf_exact(
        std::int64_t(std::floor(bp.eta * double(bp.n))), bp.n, bp.p1));
    CHECK(double(exact) <= v2);

    bp.eta = 0.92;
    double near_one = fn_bound(bp);
    CHECK(near_one > 0.5);
    CHECK(near_one <= 1.0);

    bp.eta = 0.9215;
    CHECK_THROWS_AS(fn_bound(bp), runtime_fault);  // eta >= p1 is the wrong tail
}

TEST_CASE("probabilities off the rational grid are rejected") {
    CHECK_THROWS_AS(binomial_cdf_exact(1, 10, 0.1 + 1e-10), runtime_fault);
}

TEST_CASE("match result serializes to one CSV line") {
    auto ch = flow_of({{1, 1000}, {5, 2000}});
    auto r = match_events(ch, ch, EventMatchConfig{});
    CHECK(match_result_csv("42", r, -0.5) == "42,2,2,1,-0.5,H1");
}

TEST_CASE("tolerance configuration is validated") {
    auto ch = flow_of({{1, 1000}});
    EventMatchConfig bad;
    bad.delta_s = 0;
    CHECK_THROWS_AS(match_events(ch, ch, bad), runtime_fault);
    bad = EventMatchConfig{};
    bad.gamma_bytes = -1;
    CHECK_THROWS_AS(match_events(ch, ch, bad), runtime_fault);
    bad = EventMatchConfig{};
    bad.eta = 1.5;
    CHECK_THROWS_AS(match_events(ch, ch, bad), runtime_fault);
}
