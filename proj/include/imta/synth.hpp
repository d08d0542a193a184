#pragma once

#include <cstdint>
#include <thread>
#include <vector>

#include "imta/flow.hpp"
#include "imta/model.hpp"
#include "imta/rng.hpp"

namespace imta::synth {

struct SynthConfig {
    double rate_per_day = 0;  // lambda
    double duration_s = 0;    // T
    std::uint64_t seed = 0;
};

// Which side of the communication the simulated user is on. An admin posts
// the messages (the channel sees them after the network latency); a member
// receives them. The math is symmetric, only the sign of the latency shift
// differs.
enum class UserRole { Admin, Member };

struct UserSimConfig {
    double bandwidth_bps = 0;       // link rate, bits/second
    model::LatencyModel latency{};  // transit latency draws
    double merge_threshold_s = 0.5; // t_e
    double overhead_factor = 1.0;   // multiplier on size*8/bw, protocol framing
    UserRole role = UserRole::Member;
    std::uint64_t seed = 0;
};

// Channel-side merge: messages closer than t_e collapse into one event at the
// last message's time with the summed size.
inline Flow merge_channel_events(Flow f, double te) {
    if (f.events.empty()) return f;
    std::vector<Event> out;
    Event cur = f.events.front();
    for (std::size_t i = 1; i < f.events.size(); ++i) {
        const Event& e = f.events[i];
        if (e.time_s - cur.time_s < te) {
            cur.size_bytes += e.size_bytes;
            cur.time_s = e.time_s;
            cur.type = e.type;
            cur.dummy = cur.dummy && e.dummy;
        } else {
            out.push_back(cur);
            cur = e;
        }
    }
    out.push_back(cur);
    f.events = std::move(out);
    return f;
}

// Synthetic channel flow: exponential IMDs (long gaps rejected), message types
// from the rate-matched Markov chain, sizes from the per-type tables, then the
// t_e merge pass.
inline Flow generate_channel(const model::TrafficModel& m, const SynthConfig& cfg) {
    if (!(cfg.rate_per_day > 0)) throw runtime_fault("generate_channel: rate must be > 0");
    if (cfg.duration_s < 0) throw runtime_fault("generate_channel: duration must be >= 0");
    Rng rng(cfg.seed);
    model::ImdModel imd = m.imd;
    imd.rate_per_day = cfg.rate_per_day;
    imd.rate_per_s = cfg.rate_per_day / 86400.0;
    const model::TypeMarkovChain& chain = model::select_matrix(m, cfg.rate_per_day);

    Flow f;
    f.principal = PrincipalKind::Channel;
    f.direction = Direction::Down;
    double t = 0;
    while (true) {
        t += model::sample_imd(imd, rng);
        if (t >= cfg.duration_s) break;
        f.events.push_back(Event{t, 0, -1, false});
    }
    if (f.events.empty()) return f;
    MessageType ty = model::sample_initial_type(chain, rng);
    for (auto& e : f.events) {
        e.type = int(ty);
        e.size_bytes = model::sample_size(m.sizes, ty, rng);
        ty = model::sample_next_type(chain, ty, rng);
    }
    return merge_channel_events(std::move(f), imd.merge_threshold_s);
}

struct UserSimResult {
    Flow flow;
    std::size_t clamped_to_zero = 0;  // events whose shifted time went negative
};

// Simulates what a wiretap on the user side of the channel would see: every
// message shifted by an independent latency draw, then sent over a bw-limited
// link. Bursts whose spacing drops below t_e merge; a merged batch appears as
// one event at the completion time of its last transfer with the summed size.
// Event timestamps are wire completion times throughout, matching what burst
// extraction reports.
inline UserSimResult simulate_user_flow(const Flow& channel, const UserSimConfig& cfg) {
    if (!(cfg.bandwidth_bps > 0)) throw runtime_fault("simulate_user_flow: bandwidth must be > 0");
    if (!(cfg.merge_threshold_s > 0)) throw runtime_fault("simulate_user_flow: t_e must be > 0");
    Rng rng(cfg.seed);
    UserSimResult res;
    res.flow.principal = PrincipalKind::User;
    res.flow.direction = cfg.role == UserRole::Admin ? Direction::Up : Direction::Down;

    struct Arrival {
        double t;
        double size;
        int type;
        bool dummy;
    };
    std::vector<Arrival> arr;
    arr.reserve(channel.events.size());
    for (const auto& e : channel.events) {
        double d = model::sample_latency(cfg.latency, rng);
        double t = cfg.role == UserRole::Admin ? e.time_s - d : e.time_s + d;
        if (t < 0) {
            t = 0;
            ++res.clamped_to_zero;
        }
        arr.push_back({t, e.size_bytes, e.type, e.dummy});
    }
    std::stable_sort(arr.begin(), arr.end(),
                     [](const Arrival& a, const Arrival& b) { return a.t < b.t; });

    const double per_byte = 8.0 * cfg.overhead_factor / cfg.bandwidth_bps;
    Event cur;
    double link_free = 0;  // completion time of the previous transfer
    bool open = false;
    for (const auto& a : arr) {
        double start = std::max(a.t, link_free);
        double done = start + a.size * per_byte;
        if (open && a.t - link_free < cfg.merge_threshold_s) {
            cur.size_bytes += a.size;
            cur.time_s = done;
            cur.type = a.type;
            cur.dummy = cur.dummy && a.dummy;
        } else {
            if (open) res.flow.events.push_back(cur);
            cur = Event{done, a.size, a.type, a.dummy};
        }
        link_free = done;
        open = true;
    }
    if (open) res.flow.events.push_back(cur);
    res.flow.sort_by_time();
    return res;
}

struct PairCorpusConfig {
    std::uint64_t master_seed = 1;
    double duration_s = 0;
    std::vector<double> rates_per_day;  // cycled over channel indices
    UserSimConfig user;                 // seed field ignored, derived per index
};

struct FlowPair {
    std::size_t id = 0;
    double rate_per_day = 0;
    Flow channel;
    Flow user;
};

struct PairCorpus {
    std::vector<FlowPair> pairs;
    std::array<std::size_t, 5> bucket_counts{};
};

// Deterministic corpus of (channel, user) pairs. Per-index substreams make
// every pair independent of generation order, so the worker count changes
// nothing but the wall-clock time.
inline PairCorpus make_pair_corpus(const model::TrafficModel& m, std::size_t n_channels,
                                   const PairCorpusConfig& cfg, unsigned jobs = 1) {
    if (n_channels < 1) throw runtime_fault("make_pair_corpus: need at least one channel");
    if (cfg.rates_per_day.empty()) throw runtime_fault("make_pair_corpus: no rates given");
    PairCorpus corpus;
    corpus.pairs.resize(n_channels);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            FlowPair& p = corpus.pairs[i];
            p.id = i;
            p.rate_per_day = cfg.rates_per_day[i % cfg.rates_per_day.size()];
            SynthConfig sc{p.rate_per_day, cfg.duration_s,
                           Rng::substream(cfg.master_seed, 2 * i).next_u64()};
            p.channel = generate_channel(m, sc);
            UserSimConfig uc = cfg.user;
            uc.seed = Rng::substream(cfg.master_seed, 2 * i + 1).next_u64();
            p.user = simulate_user_flow(p.channel, uc).flow;
        }
    };
    if (jobs <= 1) {
        work(0, n_channels);
    } else {
        std::vector<std::thread> workers;
        std::size_t chunk = (n_channels + jobs - 1) / jobs;
        for (unsigned j = 0; j < jobs; ++j) {
            std::size_t b = std::min(n_channels, std::size_t(j) * chunk);
            std::size_t e = std::min(n_channels, b + chunk);
            if (b < e) workers.emplace_back(work, b, e);
        }
        for (auto& w : workers) w.join();
    }
    for (const auto& p : corpus.pairs)
        corpus.bucket_counts[model::bucket_index(m, p.rate_per_day)]++;
    return corpus;
}

} // namespace imta::synth
