#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "imta/common.hpp"
#include "imta/detect_event.hpp"
#include "imta/detect_shape.hpp"
#include "imta/flow.hpp"
#include "imta/synth.hpp"

namespace imta::eval {

enum class Detector { Event, Shape };

inline const char* to_string(Detector d) { return d == Detector::Event ? "event" : "shape"; }

struct PairScore {
    std::uint64_t pair_id = 0;
    bool associated = false;
    Detector detector = Detector::Event;
    double length_s = 0;
    double score = 0;  // match ratio or correlation, in [0,1]
};

// One pair to score: channel ground truth against a wiretapped user flow.
struct EvalPair {
    std::uint64_t pair_id = 0;
    bool associated = false;
    const Flow* channel = nullptr;
    const Flow* user = nullptr;
};

// Observation length is measured in active time: the part of any inter-event
// gap beyond the long-gap cutoff does not advance the clock (long inactivity
// is excluded from the traffic length). Returns the wall-clock time at which
// the channel's active clock reaches length_s, or +inf if it never does.
inline double active_wall_limit(const Flow& channel, double length_s, double gap_cutoff_s) {
    double acc = 0, anchor = 0;
    for (const auto& e : channel.events) {
        double gap = e.time_s - anchor;
        double credit = std::min(gap, gap_cutoff_s);
        if (acc + credit >= length_s) return anchor + (length_s - acc);
        acc += credit;
        anchor = e.time_s;
    }
    if (acc + gap_cutoff_s >= length_s) return anchor + (length_s - acc);
    return std::numeric_limits<double>::infinity();
}

inline Flow truncate_wall(const Flow& f, double wall_s) {
    Flow out;
    out.principal = f.principal;
    out.direction = f.direction;
    for (const auto& e : f.events) {
        if (e.time_s >= wall_s) break;
        out.events.push_back(e);
    }
    return out;
}

struct ScoreConfig {
    detect::EventMatchConfig event{};
    detect::ShapeConfig shape{};
    double observation_s = 900;
    double gap_cutoff_s = 7200;
    // The shape detector normalizes bandwidth away. Extracted events are
    // stamped at burst completion, so when the monitored user's link rate is
    // known (the wiretap operator knows the access link) the shape pipeline
    // folds the transfer time 8*size/bw back out before building bars.
    // 0 disables the adjustment. The event detector never adjusts timestamps;
    // its bandwidth dependence lives in the p1 table.
    double user_bandwidth_bps = 0;
    Detector detector = Detector::Event;
};

namespace detail {
inline Flow compensate_transfer_time(Flow f, double bw_bps) {
    if (bw_bps <= 0) return f;
    for (auto& e : f.events) e.time_s -= 8.0 * e.size_bytes / bw_bps;
    f.sort_by_time();
    return f;
}
} // namespace detail

// Scores one pair: truncate both flows to the channel's active-time window,
// synchronize, correlate. Empty windows score 0 (no evidence, H0).
inline double score_pair(const Flow& channel, const Flow& user, const ScoreConfig& cfg) {
    double wall = active_wall_limit(channel, cfg.observation_s, cfg.gap_cutoff_s);
    Flow ch = truncate_wall(channel, wall);
    Flow us = truncate_wall(user, wall);
    if (ch.events.empty()) return 0;
    if (cfg.detector == Detector::Event) {
        if (us.events.empty()) return 0;
        double off = detect::synchronize_events(ch, us, cfg.event);
        return detect::match_events(ch, us, cfg.event, off).r;
    }
    us = detail::compensate_transfer_time(std::move(us), cfg.user_bandwidth_bps);
    auto cs = detect::normalize_shape(ch, cfg.shape);
    auto ussh = detect::normalize_shape(us, cfg.shape);
    if (cs.h.empty() || ussh.h.empty()) return 0;
    // clock-skew estimate from the opening stretch of traffic, as on the
    // event side; an eventless prefix pins the offset to zero
    double off = 0;
    Flow cp = detect::detail::prefix_of(ch, cfg.event.sync_prefix_s);
    Flow up = detect::detail::prefix_of(us, cfg.event.sync_prefix_s + cfg.event.skew_window_s);
    if (!cp.events.empty() && !up.events.empty())
        off = detect::synchronize_shapes(detect::normalize_shape(cp, cfg.shape),
                                         detect::normalize_shape(up, cfg.shape),
                                         cfg.event.skew_window_s, cfg.event.skew_step_s);
    double corr = detect::shape_correlation(cs, ussh,
                                            std::int64_t(std::llround(off / cfg.shape.ts_s)));
    return std::clamp(corr, 0.0, 1.0);
}

// Scores a corpus, optionally across threads. The output is indexed by pair
// order and therefore identical for any worker count.
inline std::vector<PairScore> score_corpus(const std::vector<EvalPair>& pairs,
                                           const ScoreConfig& cfg, unsigned jobs = 1) {
    if (pairs.empty()) throw runtime_fault("score_corpus: empty corpus");
    std::vector<PairScore> out(pairs.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const EvalPair& p = pairs[i];
            out[i] = PairScore{p.pair_id, p.associated, cfg.detector, cfg.observation_s,
                               score_pair(*p.channel, *p.user, cfg)};
        }
    };
    if (jobs <= 1) {
        work(0, pairs.size());
    } else {
        std::vector<std::thread> ts;
        std::size_t chunk = (pairs.size() + jobs - 1) / jobs;
        for (unsigned j = 0; j < jobs; ++j) {
            std::size_t b = std::min(pairs.size(), std::size_t(j) * chunk);
            std::size_t e = std::min(pairs.size(), b + chunk);
            if (b < e) ts.emplace_back(work, b, e);
        }
        for (auto& t : ts) t.join();
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const PairScore& a, const PairScore& b) { return a.pair_id < b.pair_id; });
    return out;
}

struct RocPoint {
    double eta = 0;
    double tp = 0;
    double fp = 0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // ordered by eta
    std::size_t positives = 0;
    std::size_t negatives = 0;

    // best TP subject to an FP ceiling; (0, eta=1) if unattainable
    std::pair<double, double> tp_at_fp(double fp_ceiling) const {
        for (const auto& p : points)
            if (p.fp <= fp_ceiling) return {p.tp, p.eta};
        return {0.0, 1.0};
    }
};

inline std::vector<double> default_threshold_grid(std::size_t n = 512) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = double(i) / double(n - 1);
    return g;
}

// TP(eta) and FP(eta) with the strict decision rule score > eta.
inline RocCurve roc(const std::vector<PairScore>& scores, const std::vector<double>& thresholds) {
    RocCurve c;
    std::vector<double> pos, neg;
    for (const auto& s : scores) (s.associated ? pos : neg).push_back(s.score);
    if (pos.empty() || neg.empty())
        throw runtime_fault("roc: need at least one associated and one non-associated score");
    c.positives = pos.size();
    c.negatives = neg.size();
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    auto frac_above = [](const std::vector<double>& v, double eta) {
        auto it = std::upper_bound(v.begin(), v.end(), eta);
        return double(v.end() - it) / double(v.size());
    };
    for (double eta : thresholds) c.points.push_back({eta, frac_above(pos, eta), frac_above(neg, eta)});
    return c;
}

// Rank-based AUC (Mann-Whitney), ties counted half.
inline double auc(const std::vector<PairScore>& scores) {
    std::vector<double> pos, neg;
    for (const auto& s : scores) (s.associated ? pos : neg).push_back(s.score);
    if (pos.empty() || neg.empty()) throw runtime_fault("auc: degenerate corpus");
    std::sort(neg.begin(), neg.end());
    double acc = 0;
    for (double p : pos) {
        auto lo = std::lower_bound(neg.begin(), neg.end(), p);
        auto hi = std::upper_bound(neg.begin(), neg.end(), p);
        acc += double(lo - neg.begin()) + 0.5 * double(hi - lo);
    }
    return acc / (double(pos.size()) * double(neg.size()));
}

struct CascadeResult {
    std::size_t stage1_survivors = 0;
    double tp = 0;
    double fp = 0;
    std::vector<std::pair<std::uint64_t, bool>> decisions;  // (pair_id, flagged)
};

// Two-stage detection: a pair is flagged only if its score clears the
// threshold at both observation lengths. Cheap screening at the short length,
// confirmation on the survivors.
inline CascadeResult cascade(const std::vector<PairScore>& short_scores,
                             const std::vector<PairScore>& long_scores, double eta_short,
                             double eta_long) {
    if (short_scores.size() != long_scores.size())
        throw runtime_fault("cascade: score sets differ in size");
    std::map<std::uint64_t, const PairScore*> longs;
    for (const auto& s : long_scores) longs[s.pair_id] = &s;
    CascadeResult res;
    std::size_t pos = 0, neg = 0, tp = 0, fp = 0;
    for (const auto& s : short_scores) {
        auto it = longs.find(s.pair_id);
        if (it == longs.end()) throw runtime_fault("cascade: pair_id sets differ");
        bool stage1 = s.score > eta_short;
        if (stage1) ++res.stage1_survivors;
        bool flagged = stage1 && it->second->score > eta_long;
        res.decisions.emplace_back(s.pair_id, flagged);
        if (s.associated) {
            ++pos;
            if (flagged) ++tp;
        } else {
            ++neg;
            if (flagged) ++fp;
        }
    }
    res.tp = pos ? double(tp) / double(pos) : 0;
    res.fp = neg ? double(fp) / double(neg) : 0;
    return res;
}

inline void write_scores_csv(const std::vector<PairScore>& scores, std::ostream& os) {
    os << "pair_id,associated,detector,length_s,score\n";
    for (const auto& s : scores)
        os << s.pair_id << ',' << (s.associated ? 1 : 0) << ',' << to_string(s.detector) << ','
           << fmt_double(s.length_s) << ',' << fmt_double(s.score) << '\n';
}

inline std::vector<PairScore> read_scores_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw runtime_fault("cannot open: " + path);
    std::vector<PairScore> out;
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        auto sv = strip_cr(line);
        if (sv.empty() || (ln == 1 && sv.rfind("pair_id", 0) == 0)) continue;
        PairScore s;
        std::vector<std::string_view> cols;
        std::size_t start = 0;
        while (true) {
            std::size_t p = sv.find(',', start);
            cols.push_back(sv.substr(start, p == std::string_view::npos ? p : p - start));
            if (p == std::string_view::npos) break;
            start = p + 1;
        }
        std::uint64_t assoc = 0;
        if (cols.size() != 5 || !parse_u64(cols[0], s.pair_id) || !parse_u64(cols[1], assoc) ||
            !parse_double(cols[3], s.length_s) || !parse_double(cols[4], s.score))
            throw parse_error(loc(path, ln), "malformed score row");
        s.associated = assoc == 1;
        s.detector = cols[2] == "shape" ? Detector::Shape : Detector::Event;
        out.push_back(s);
    }
    return out;
}

inline void write_roc_csv(const RocCurve& c, std::ostream& os) {
    os << "eta,tp,fp\n";
    for (const auto& p : c.points)
        os << fmt_double(p.eta) << ',' << fmt_double(p.tp) << ',' << fmt_double(p.fp) << '\n';
}

// Chance-match probability estimate over non-associated pairs: the fraction
// of channel events that find a match in an unrelated user flow under the
// given tolerances. This is the empirical counterpart of the bound's p0
// parameter; the shipped default of 0.002 is kept as the reference value.
inline double estimate_p0(const std::vector<EvalPair>& pairs, const ScoreConfig& cfg) {
    std::size_t matched = 0, total = 0;
    for (const auto& p : pairs) {
        if (p.associated) continue;
        double wall = active_wall_limit(*p.channel, cfg.observation_s, cfg.gap_cutoff_s);
        Flow ch = truncate_wall(*p.channel, wall);
        Flow us = truncate_wall(*p.user, wall);
        if (ch.events.empty()) continue;
        total += ch.events.size();
        if (!us.events.empty()) matched += detect::match_events(ch, us, cfg.event).k;
    }
    if (total == 0) throw runtime_fault("estimate_p0: no channel events in any window");
    return double(matched) / double(total);
}

// Builds the evaluation pairing for a synthetic corpus: every channel against
// its own user flow, plus negatives_per_channel cross pairings drawn within
// the same rate bucket (deterministic in the seed).
inline std::vector<EvalPair> build_eval_pairs(const synth::PairCorpus& corpus,
                                              const model::TrafficModel& m,
                                              std::size_t negatives_per_channel,
                                              std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_bucket(5);
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i)
        by_bucket[model::bucket_index(m, corpus.pairs[i].rate_per_day)].push_back(i);

    std::vector<EvalPair> out;
    std::uint64_t next_id = 0;
    Rng rng(seed);
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
        const auto& p = corpus.pairs[i];
        out.push_back({next_id++, true, &p.channel, &p.user});
        const auto& peers = by_bucket[model::bucket_index(m, p.rate_per_day)];
        if (peers.size() < 2) continue;
        for (std::size_t k = 0; k < negatives_per_channel; ++k) {
            std::size_t j = i;
            while (j == i) j = peers[std::size_t(rng.next_unit() * double(peers.size()))];
            out.push_back({next_id++, false, &p.channel, &corpus.pairs[j].user});
        }
    }
    return out;
}

} // namespace imta::eval
