#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "imta/flow.hpp"
#include "imta/model.hpp"
#include "imta/rng.hpp"

namespace imta::obfuscate {

struct ObfuscationConfig {
    double r_padding = 0;         // per-event size growth cap, uniform in [0, r]
    double p_padding = 0;         // dummy-event probability per silent 1 s interval
    double delay_rate_per_s = 0;  // exponential delay rate; 0 disables delays
    const model::SizeTable* dummy_sizes = nullptr;  // image-size distribution
    std::uint64_t seed = 0;
};

struct OverheadReport {
    double dummy_bytes = 0;
    double padded_bytes = 0;
    double real_bytes = 0;
    double overhead = 0;             // (dummy + padded) / real, realized
    double analytical_overhead = 0;  // p_padding * length * mean_dummy / real
    double added_mean_latency_s = 0;
};

// Grows each event by u*size with u ~ Uniform[0, r_padding]; timings are left
// alone. The dummy bytes ride inside the event's burst, so the wire observer
// just sees a bigger event.
inline Flow pad_events(const Flow& flow, const ObfuscationConfig& cfg, Rng& rng) {
    if (cfg.r_padding < 0) throw runtime_fault("pad_events: r_padding must be >= 0");
    Flow out = flow;
    if (cfg.r_padding == 0) return out;
    for (auto& e : out.events) e.size_bytes *= 1.0 + rng.uniform(0.0, cfg.r_padding);
    return out;
}

// Injects a dummy event with probability p_padding into every 1-second
// interval that holds no real event, over [0, duration). Dummy sizes come
// from the image-size distribution. The dummy flag is internal bookkeeping:
// the proxy strips flagged events, the wire observer cannot tell them apart.
inline Flow inject_dummies(const Flow& flow, double duration_s, const ObfuscationConfig& cfg,
                           Rng& rng) {
    if (cfg.p_padding < 0 || cfg.p_padding > 1)
        throw runtime_fault("inject_dummies: p_padding must be in [0,1]");
    if (duration_s < flow.span_s())
        throw runtime_fault("inject_dummies: duration shorter than the flow span");
    Flow out = flow;
    if (cfg.p_padding == 0) return out;
    if (!cfg.dummy_sizes) throw runtime_fault("inject_dummies: no dummy size distribution");

    std::vector<bool> busy(std::size_t(std::ceil(duration_s)), false);
    for (const auto& e : flow.events) {
        auto k = std::size_t(e.time_s);
        if (k < busy.size()) busy[k] = true;
    }
    for (std::size_t k = 0; k < busy.size(); ++k) {
        if (busy[k] || !rng.bernoulli(cfg.p_padding)) continue;
        Event d;
        d.time_s = double(k) + rng.next_unit();
        d.size_bytes = cfg.dummy_sizes->sample_bytes(rng.next_unit());
        d.type = int(MessageType::Photo);
        d.dummy = true;
        out.events.push_back(d);
    }
    out.sort_by_time();
    return out;
}

// Shifts every event by an independent exponential delay and re-sorts.
// Upstream flows pass through untouched: delaying them would only move the
// latency to the matching downstream leg.
inline Flow delay_events(const Flow& flow, const ObfuscationConfig& cfg, Rng& rng) {
    Flow out = flow;
    if (cfg.delay_rate_per_s <= 0 || flow.direction == Direction::Up) return out;
    for (auto& e : out.events) e.time_s += rng.exponential(cfg.delay_rate_per_s);
    out.sort_by_time();
    return out;
}

// Convenience pipeline: pad, inject, delay with one seed.
inline Flow apply(const Flow& flow, double duration_s, const ObfuscationConfig& cfg) {
    Rng rng(cfg.seed);
    Flow f = pad_events(flow, cfg, rng);
    f = inject_dummies(f, duration_s, cfg, rng);
    return delay_events(f, cfg, rng);
}

// Realized overhead from the two flows plus the closed-form expectation
// p_padding * length * mean_dummy_size / real_bytes. Added latency is averaged
// over the surviving real events (obfuscation never drops or splits them).
inline OverheadReport overhead(const Flow& original, const Flow& obfuscated,
                               const ObfuscationConfig& cfg, double length_s) {
    OverheadReport rep;
    rep.real_bytes = original.total_bytes();
    std::vector<const Event*> real_events;
    for (const auto& e : obfuscated.events) {
        if (e.dummy) rep.dummy_bytes += e.size_bytes;
        else real_events.push_back(&e);
    }
    if (real_events.size() != original.events.size())
        throw runtime_fault("overhead: flows do not correspond");
    double padded_total = 0, lat = 0;
    for (std::size_t i = 0; i < real_events.size(); ++i) {
        padded_total += real_events[i]->size_bytes - original.events[i].size_bytes;
        lat += real_events[i]->time_s - original.events[i].time_s;
    }
    rep.padded_bytes = padded_total;
    rep.added_mean_latency_s = real_events.empty() ? 0 : lat / double(real_events.size());
    rep.overhead = rep.real_bytes > 0 ? (rep.dummy_bytes + rep.padded_bytes) / rep.real_bytes : 0;
    double mean_dummy = cfg.dummy_sizes ? cfg.dummy_sizes->implied_mean_bytes() : 0;
    rep.analytical_overhead =
        rep.real_bytes > 0 ? cfg.p_padding * length_s * mean_dummy / rep.real_bytes : 0;
    return rep;
}

inline std::string overhead_csv_header() {
    return "dummy_bytes,padded_bytes,real_bytes,overhead,analytical_overhead,added_mean_latency_s";
}

inline std::string overhead_csv(const OverheadReport& r) {
    return fmt_double(r.dummy_bytes) + "," + fmt_double(r.padded_bytes) + "," +
           fmt_double(r.real_bytes) + "," + fmt_double(r.overhead) + "," +
           fmt_double(r.analytical_overhead) + "," + fmt_double(r.added_mean_latency_s);
}

} // namespace imta::obfuscate
