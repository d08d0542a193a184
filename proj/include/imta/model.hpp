#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <algorithm>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "imta/common.hpp"
#include "imta/flow.hpp"
#include "imta/rng.hpp"

namespace imta::model {

// Tabulated survival function of message sizes for one type. Breakpoints are
// (normalized size, survival probability), normalized by max_bytes, sorted by
// size with probabilities non-increasing from 1 to 0. The distribution is the
// piecewise-linear interpolation of the table.
struct SizeTable {
    double min_bytes = 0;
    double max_bytes = 0;
    double mean_bytes = 0;
    std::vector<double> s;  // normalized sizes, increasing
    std::vector<double> p;  // survival, 1 -> 0

    // inverse-CCDF with linear interpolation; u uniform in [0,1)
    double sample_bytes(double u) const {
        // find the segment with p[i] >= 1-u... survival decreases, so draw
        // target q = 1-u in (0,1] and invert
        double q = 1.0 - u;
        if (q >= p.front()) return s.front() * max_bytes;
        if (q <= p.back()) return s.back() * max_bytes;
        std::size_t lo = 0, hi = p.size() - 1;
        while (hi - lo > 1) {
            std::size_t mid = (lo + hi) / 2;
            if (p[mid] >= q) lo = mid; else hi = mid;
        }
        double t = (p[lo] - q) / (p[lo] - p[hi]);
        return (s[lo] + t * (s[hi] - s[lo])) * max_bytes;
    }

    // mean implied by the table: max * (s0 + integral of survival)
    double implied_mean_bytes() const {
        double area = 0;
        for (std::size_t i = 0; i + 1 < s.size(); ++i)
            area += (s[i + 1] - s[i]) * (p[i] + p[i + 1]) / 2.0;
        return (s.front() + area) * max_bytes;
    }
};

struct SizeModel {
    std::array<SizeTable, kNumMessageTypes> per_type;

    const SizeTable& table(MessageType t) const { return per_type[std::size_t(t)]; }
    double mean_bytes(MessageType t) const { return table(t).mean_bytes; }
};

struct TypeMarkovChain {
    std::string label;
    double rate_per_day = 0;  // 0 for the aggregate matrix
    std::array<std::array<double, kNumMessageTypes>, kNumMessageTypes> p{};
    std::array<double, kNumMessageTypes> initial{};
};

struct ImdModel {
    double rate_per_day = 0;
    double rate_per_s = 0;        // exponential rate, stored explicitly
    double merge_threshold_s = 0; // t_e
    double long_gap_cutoff_s = 0; // late-night inactivity filter
};

struct LatencyModel {
    double mu_s = 0;
    double b_s = 0;
};

struct TrafficModel {
    SizeModel sizes;
    ImdModel imd;
    LatencyModel latency;
    TypeMarkovChain aggregate;
    std::vector<TypeMarkovChain> buckets;          // ascending rate
    std::vector<std::pair<double, double>> bw_p1;  // (Mbps, p1) from measurements

    double p1_for_bandwidth(double mbps) const {
        // nearest in log scale, ties to the lower bandwidth
        double best = bw_p1.front().second, bestd = 1e300;
        for (const auto& [bw, p1] : bw_p1) {
            double d = std::fabs(std::log(mbps) - std::log(bw));
            if (d < bestd - 1e-12) { bestd = d; best = p1; }
        }
        return best;
    }
};

namespace detail {

struct Cursor {
    std::string path;
    std::vector<std::string> lines;
    std::size_t i = 0;

    bool eof() const { return i >= lines.size(); }
    // next meaningful line; returns false at end
    bool next(std::string_view& out) {
        while (i < lines.size()) {
            std::string_view sv = strip_cr(lines[i]);
            ++i;
            if (sv.empty() || sv[0] == '#') continue;
            out = sv;
            return true;
        }
        return false;
    }
    std::size_t lineno() const { return i; }
    [[noreturn]] void fail(const std::string& msg) const {
        throw parse_error(loc(path, lineno()), msg);
    }
};

inline double need_double(Cursor& c, std::string_view tok) {
    double v;
    if (!parse_double(tok, v)) c.fail("expected a number, got '" + std::string(tok) + "'");
    return v;
}

inline int type_index(std::string_view name) {
    for (int t = 0; t < kNumMessageTypes; ++t)
        if (name == message_type_name(MessageType(t))) return t;
    return -1;
}

} // namespace detail

// Parses and validates a model file (version "imta-model/1"). All type
// invariants are enforced here so the rest of the toolkit can assume a
// well-formed model.
inline TrafficModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw runtime_fault("cannot open model file: " + path);
    detail::Cursor c;
    c.path = path;
    for (std::string line; std::getline(is, line);) c.lines.push_back(std::move(line));

    std::string_view line;
    if (!c.next(line) || line != "imta-model/1")
        throw parse_error(loc(path, c.lineno()), "bad magic, expected imta-model/1");

    TrafficModel m;
    std::array<bool, kNumMessageTypes> have_size{};
    bool have_imd = false, have_lat = false, have_agg = false, have_bw = false;

    while (c.next(line)) {
        auto toks = split_ws(line);
        if (toks[0] == "[imd]") {
            have_imd = true;
            std::map<std::string, double> kv;
            for (int k = 0; k < 4; ++k) {
                if (!c.next(line)) c.fail("truncated [imd] section");
                auto t = split_ws(line);
                if (t.size() != 2) c.fail("expected 'key value' in [imd]");
                kv[std::string(t[0])] = detail::need_double(c, t[1]);
            }
            m.imd.rate_per_day = kv["rate_per_day"];
            m.imd.rate_per_s = kv["rate_per_s"];
            m.imd.merge_threshold_s = kv["merge_threshold_s"];
            m.imd.long_gap_cutoff_s = kv["long_gap_cutoff_s"];
            if (m.imd.rate_per_day <= 0 || m.imd.rate_per_s <= 0)
                c.fail("[imd] rates must be strictly positive");
            if (m.imd.merge_threshold_s <= 0)
                c.fail("[imd] merge_threshold_s must be strictly positive");
            if (!(m.imd.merge_threshold_s < m.imd.long_gap_cutoff_s))
                c.fail("[imd] requires merge_threshold_s < long_gap_cutoff_s");
        } else if (toks[0] == "[latency]") {
            have_lat = true;
            std::map<std::string, double> kv;
            for (int k = 0; k < 2; ++k) {
                if (!c.next(line)) c.fail("truncated [latency] section");
                auto t = split_ws(line);
                if (t.size() != 2) c.fail("expected 'key value' in [latency]");
                kv[std::string(t[0])] = detail::need_double(c, t[1]);
            }
            m.latency.mu_s = kv["mu_s"];
            m.latency.b_s = kv["b_s"];
            if (m.latency.b_s <= 0) c.fail("[latency] b_s must be > 0");
        } else if (toks[0] == "[sizes" && toks.size() == 2 && toks[1].back() == ']') {
            auto name = toks[1].substr(0, toks[1].size() - 1);
            int ti = detail::type_index(name);
            if (ti < 0) c.fail("unknown message type '" + std::string(name) + "'");
            SizeTable st;
            for (int k = 0; k < 3; ++k) {
                if (!c.next(line)) c.fail("truncated [sizes] section");
                auto t = split_ws(line);
                if (t.size() != 2) c.fail("expected 'key value' in [sizes]");
                double v = detail::need_double(c, t[1]);
                if (t[0] == "min_bytes") st.min_bytes = v;
                else if (t[0] == "max_bytes") st.max_bytes = v;
                else if (t[0] == "mean_bytes") st.mean_bytes = v;
                else c.fail("unknown key '" + std::string(t[0]) + "' in [sizes]");
            }
            if (!c.next(line) || line != "ccdf") c.fail("expected 'ccdf' table start");
            while (true) {
                if (!c.next(line)) c.fail("unterminated ccdf table");
                if (line == "end") break;
                auto t = split_ws(line);
                if (t.size() != 2) c.fail("ccdf rows are 'size survival'");
                st.s.push_back(detail::need_double(c, t[0]));
                st.p.push_back(detail::need_double(c, t[1]));
            }
            if (st.s.size() < 1) c.fail("empty ccdf table");
            if (!(st.min_bytes > 0))
                c.fail("sizes must be > 0 (min_bytes)");
            if (!(st.min_bytes <= st.mean_bytes && st.mean_bytes <= st.max_bytes))
                c.fail("requires min <= mean <= max for type '" + std::string(name) + "'");
            if (st.p.front() != 1.0 || st.p.back() != 0.0)
                c.fail("ccdf must start at 1 and end at 0");
            for (std::size_t k = 1; k < st.s.size(); ++k) {
                if (st.s[k] < st.s[k - 1]) c.fail("ccdf sizes must be non-decreasing");
                if (st.p[k] > st.p[k - 1])
                    c.fail("non-monotone ccdf for type '" + std::string(name) + "' at row " +
                           std::to_string(k + 1));
            }
            m.sizes.per_type[ti] = std::move(st);
            have_size[ti] = true;
        } else if (toks[0] == "[markov" && toks.size() == 2 && toks[1].back() == ']') {
            TypeMarkovChain mc;
            mc.label = std::string(toks[1].substr(0, toks[1].size() - 1));
            if (!c.next(line)) c.fail("truncated [markov] section");
            auto t = split_ws(line);
            if (t.size() != 2 || t[0] != "rate_per_day") c.fail("expected rate_per_day");
            mc.rate_per_day = detail::need_double(c, t[1]);
            if (!c.next(line)) c.fail("truncated [markov] section");
            t = split_ws(line);
            if (t.size() != std::size_t(kNumMessageTypes) + 1 || t[0] != "initial")
                c.fail("expected 'initial' with 5 probabilities");
            double isum = 0;
            for (int k = 0; k < kNumMessageTypes; ++k) {
                mc.initial[k] = detail::need_double(c, t[k + 1]);
                isum += mc.initial[k];
            }
            if (std::fabs(isum - 1.0) > 1e-9) c.fail("initial distribution does not sum to 1");
            for (int r = 0; r < kNumMessageTypes; ++r) {
                if (!c.next(line)) c.fail("truncated [markov] row block");
                t = split_ws(line);
                if (t.size() != std::size_t(kNumMessageTypes) + 1 || t[0] != "row")
                    c.fail("expected 'row' with 5 probabilities");
                double rsum = 0;
                for (int k = 0; k < kNumMessageTypes; ++k) {
                    double v = detail::need_double(c, t[k + 1]);
                    if (v < 0 || v > 1) c.fail("transition probability out of [0,1]");
                    mc.p[r][k] = v;
                    rsum += v;
                }
                if (std::fabs(rsum - 1.0) > 1e-9)
                    c.fail("matrix '" + mc.label + "' row " + std::to_string(r + 1) +
                           " sums to " + fmt_double(rsum) + ", not 1");
            }
            if (mc.label == "aggregate") {
                m.aggregate = std::move(mc);
                have_agg = true;
            } else {
                if (mc.rate_per_day <= 0) c.fail("bucket matrix needs rate_per_day > 0");
                m.buckets.push_back(std::move(mc));
            }
        } else if (toks[0] == "[bandwidth_p1]") {
            have_bw = true;
            while (!c.eof()) {
                std::size_t save = c.i;
                if (!c.next(line)) break;
                if (line[0] == '[') { c.i = save; break; }
                auto t = split_ws(line);
                if (t.size() != 2) c.fail("bandwidth_p1 rows are 'mbps p1'");
                m.bw_p1.emplace_back(detail::need_double(c, t[0]), detail::need_double(c, t[1]));
            }
            if (m.bw_p1.empty()) c.fail("empty bandwidth_p1 table");
        } else {
            c.fail("unrecognized section '" + std::string(line) + "'");
        }
    }

    if (!have_imd) throw parse_error(path, "missing [imd] section");
    if (!have_lat) throw parse_error(path, "missing [latency] section");
    if (!have_agg) throw parse_error(path, "missing aggregate markov matrix");
    for (int t = 0; t < kNumMessageTypes; ++t)
        if (!have_size[t])
            throw parse_error(path, std::string("missing [sizes ") +
                                        message_type_name(MessageType(t)) + "]");
    if (m.buckets.size() != 5)
        throw parse_error(path, "expected 5 rate-bucket matrices, found " +
                                    std::to_string(m.buckets.size()));
    std::sort(m.buckets.begin(), m.buckets.end(),
              [](const TypeMarkovChain& a, const TypeMarkovChain& b) {
                  return a.rate_per_day < b.rate_per_day;
              });
    if (!have_bw) throw parse_error(path, "missing [bandwidth_p1] section");
    return m;
}

// Bucket whose labeled mean rate is nearest in log scale; ties resolve to the
// lower bucket. Total over (0, inf).
inline const TypeMarkovChain& select_matrix(const TrafficModel& m, double rate_per_day) {
    if (!(rate_per_day > 0)) throw runtime_fault("select_matrix: rate must be > 0");
    const TypeMarkovChain* best = &m.buckets.front();
    double bestd = 1e300;
    for (const auto& b : m.buckets) {
        double d = std::fabs(std::log(rate_per_day) - std::log(b.rate_per_day));
        if (d < bestd - 1e-12) {
            bestd = d;
            best = &b;
        }
    }
    return *best;
}

inline std::size_t bucket_index(const TrafficModel& m, double rate_per_day) {
    const TypeMarkovChain& mc = select_matrix(m, rate_per_day);
    return std::size_t(&mc - m.buckets.data());
}

// Exponential inter-message delay, rejecting draws beyond the long-gap cutoff.
inline double sample_imd(const ImdModel& imd, Rng& rng) {
    while (true) {
        double d = rng.exponential(imd.rate_per_s);
        if (d <= imd.long_gap_cutoff_s) return d;
    }
}

// Whole bytes: messages have integral sizes on the wire, and integer-valued
// doubles keep byte totals exact under any summation order.
inline double sample_size(const SizeModel& sizes, MessageType type, Rng& rng) {
    const SizeTable& t = sizes.table(type);
    double b = std::round(t.sample_bytes(rng.next_unit()));
    return std::clamp(b, std::max(1.0, std::round(t.min_bytes)), std::round(t.max_bytes));
}

// Laplace(mu, b) truncated to non-negative support by rejection, so there is
// no point mass at zero.
inline double sample_latency(const LatencyModel& lat, Rng& rng) {
    while (true) {
        double d = rng.laplace(lat.mu_s, lat.b_s);
        if (d >= 0) return d;
    }
}

inline MessageType sample_initial_type(const TypeMarkovChain& mc, Rng& rng) {
    return MessageType(int(rng.discrete(std::span<const double>(mc.initial))));
}

inline MessageType sample_next_type(const TypeMarkovChain& mc, MessageType cur, Rng& rng) {
    return MessageType(int(rng.discrete(std::span<const double>(mc.p[std::size_t(cur)]))));
}

} // namespace imta::model
