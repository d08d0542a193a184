#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "imta/common.hpp"
#include "imta/flow.hpp"

namespace imta::trace {

struct PacketRecord {
    double time_s = 0;
    double size_bytes = 0;  // IP-layer length
    Direction dir = Direction::Down;
};

struct PacketTrace {
    std::vector<PacketRecord> packets;
    int link_type = -1;          // pcap link type, -1 for line traces
    std::string endpoint;        // filter that was applied, if any

    void sort_by_time() {
        std::stable_sort(packets.begin(), packets.end(),
                         [](const PacketRecord& a, const PacketRecord& b) {
                             return a.time_s < b.time_s;
                         });
    }
};

namespace detail {

inline std::uint32_t rd32(const unsigned char* p, bool swap) {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    if (swap) v = __builtin_bswap32(v);
    return v;
}
inline std::uint16_t rd16be(const unsigned char* p) {
    return std::uint16_t((p[0] << 8) | p[1]);
}

inline std::optional<std::uint32_t> parse_ipv4(const std::string& dotted) {
    std::uint32_t parts[4];
    int n = 0;
    std::size_t i = 0;
    while (n < 4) {
        std::size_t j = dotted.find('.', i);
        std::string_view tok(dotted.data() + i, (j == std::string::npos ? dotted.size() : j) - i);
        std::uint64_t v;
        if (!parse_u64(tok, v) || v > 255) return std::nullopt;
        parts[n++] = std::uint32_t(v);
        if (j == std::string::npos) break;
        i = j + 1;
    }
    if (n != 4) return std::nullopt;
    return (parts[0] << 24) | (parts[1] << 16) | (parts[2] << 8) | parts[3];
}

} // namespace detail

// Classic pcap reader (microsecond and nanosecond magics, either byte order).
// Keeps only IPv4 frames where the endpoint address is the source (Up) or the
// destination (Down); sizes are IP total lengths.
inline PacketTrace read_pcap(const std::string& path, const std::string& endpoint) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw runtime_fault("cannot open: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    auto at = [&](std::size_t off) { return path + " @byte " + std::to_string(off); };
    if (buf.size() < 24) throw parse_error(at(0), "file shorter than pcap global header");

    std::uint32_t magic = detail::rd32(buf.data(), false);
    bool swap = false;
    double frac_unit = 1e-6;
    switch (magic) {
        case 0xa1b2c3d4u: break;
        case 0xd4c3b2a1u: swap = true; break;
        case 0xa1b23c4du: frac_unit = 1e-9; break;
        case 0x4d3cb2a1u: swap = true; frac_unit = 1e-9; break;
        default: throw parse_error(at(0), "bad pcap magic");
    }
    std::uint32_t link = detail::rd32(buf.data() + 20, swap);
    if (link != 1 && link != 101)
        throw parse_error(at(20), "unsupported link type " + std::to_string(link) +
                                      " (expected Ethernet or raw IP)");

    auto ep = detail::parse_ipv4(endpoint);
    if (!ep) throw runtime_fault("endpoint filter is not an IPv4 address: " + endpoint);

    PacketTrace t;
    t.link_type = int(link);
    t.endpoint = endpoint;
    std::size_t off = 24;
    while (off < buf.size()) {
        if (off + 16 > buf.size()) throw parse_error(at(off), "truncated record header");
        std::uint32_t sec = detail::rd32(buf.data() + off, swap);
        std::uint32_t frac = detail::rd32(buf.data() + off + 4, swap);
        std::uint32_t incl = detail::rd32(buf.data() + off + 8, swap);
        off += 16;
        if (off + incl > buf.size()) throw parse_error(at(off), "truncated record data");
        const unsigned char* p = buf.data() + off;
        std::size_t len = incl;
        off += incl;

        if (link == 1) {  // strip Ethernet, keep IPv4 only
            if (len < 14 || detail::rd16be(p + 12) != 0x0800) continue;
            p += 14;
            len -= 14;
        }
        if (len < 20 || (p[0] >> 4) != 4) continue;
        auto rd32be = [](const unsigned char* q) {
            return (std::uint32_t(q[0]) << 24) | (std::uint32_t(q[1]) << 16) |
                   (std::uint32_t(q[2]) << 8) | std::uint32_t(q[3]);
        };
        std::uint32_t src = rd32be(p + 12);
        std::uint32_t dst = rd32be(p + 16);
        Direction dir;
        if (src == *ep) dir = Direction::Up;
        else if (dst == *ep) dir = Direction::Down;
        else continue;
        double ts = double(sec) + double(frac) * frac_unit;
        t.packets.push_back({ts, double(detail::rd16be(p + 2)), dir});
    }
    t.sort_by_time();
    return t;
}

// Line trace: one packet per line, `time_s<TAB>size_bytes<TAB>U|D`.
inline PacketTrace read_line_trace(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw runtime_fault("cannot open: " + path);
    PacketTrace t;
    std::string line;
    std::size_t ln = 0;
    double prev = -1e300;
    while (std::getline(is, line)) {
        ++ln;
        auto sv = strip_cr(line);
        if (sv.empty() || sv[0] == '#') continue;
        auto cols = split_ws(sv);
        if (cols.size() != 3) throw parse_error(loc(path, ln), "expected 3 columns");
        PacketRecord r;
        if (!parse_double(cols[0], r.time_s) || !parse_double(cols[1], r.size_bytes))
            throw parse_error(loc(path, ln), "malformed packet record");
        if (cols[2] == "U") r.dir = Direction::Up;
        else if (cols[2] == "D") r.dir = Direction::Down;
        else throw parse_error(loc(path, ln), "direction must be U or D");
        if (r.size_bytes < 0) throw parse_error(loc(path, ln), "negative packet size");
        if (r.time_s < prev) throw parse_error(loc(path, ln), "timestamps not non-decreasing");
        prev = r.time_s;
        t.packets.push_back(r);
    }
    return t;
}

inline void write_line_trace(const PacketTrace& t, std::ostream& os) {
    for (const auto& r : t.packets)
        os << fmt_double(r.time_s) << '\t' << fmt_double(r.size_bytes) << '\t'
           << (r.dir == Direction::Up ? 'U' : 'D') << '\n';
}

inline void write_line_trace_file(const PacketTrace& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw runtime_fault("cannot open for writing: " + path);
    write_line_trace(t, os);
}

struct BurstConfig {
    double te_s = 0.5;                  // burst gap threshold
    double min_packet_size = 512;       // floor for MTU-sized data packets
    std::optional<Direction> dir_filter;
};

// Burst detection: protocol chatter below min_packet_size is dropped, then
// packets separated by less than t_e form one burst. Each burst becomes an
// event stamped at its last packet with the summed size.
inline Flow extract_events(const PacketTrace& trace, const BurstConfig& cfg) {
    if (!(cfg.te_s > 0)) throw runtime_fault("extract_events: t_e must be > 0");
    Flow f;
    f.principal = PrincipalKind::User;
    f.direction = cfg.dir_filter.value_or(Direction::Down);
    bool open = false;
    double last_ts = 0, burst_bytes = 0;
    for (const auto& p : trace.packets) {
        if (cfg.dir_filter && p.dir != *cfg.dir_filter) continue;
        if (p.size_bytes < cfg.min_packet_size) continue;
        if (open && p.time_s - last_ts < cfg.te_s) {
            burst_bytes += p.size_bytes;
        } else {
            if (open) f.events.push_back(Event{last_ts, burst_bytes, -1, false});
            burst_bytes = p.size_bytes;
        }
        last_ts = p.time_s;
        open = true;
    }
    if (open) f.events.push_back(Event{last_ts, burst_bytes, -1, false});
    return f;
}

struct RenderConfig {
    double bandwidth_bps = 10e6;
    double mtu_bytes = 1500;
    Direction dir = Direction::Down;
};

// Inverse of extraction for test and study pipelines: each event becomes a
// burst of MTU-sized packets on a bw-limited link, finishing at the event
// time (event timestamps are completion times throughout the toolkit).
inline PacketTrace render_packets(const Flow& flow, const RenderConfig& cfg) {
    if (!(cfg.bandwidth_bps > 0) || !(cfg.mtu_bytes > 0))
        throw runtime_fault("render_packets: bandwidth and mtu must be > 0");
    PacketTrace t;
    const double per_byte = 8.0 / cfg.bandwidth_bps;
    for (const auto& e : flow.events) {
        // the trailing packet absorbs the remainder so every data packet
        // stays MTU-sized; the burst completes exactly at the event time
        std::size_t n = std::size_t(e.size_bytes / cfg.mtu_bytes);
        if (n == 0) n = 1;
        double last_sz = e.size_bytes - double(n - 1) * cfg.mtu_bytes;
        for (std::size_t k = 0; k < n; ++k) {
            double sz = (k + 1 == n) ? last_sz : cfg.mtu_bytes;
            double ts = e.time_s - double(n - 1 - k) * cfg.mtu_bytes * per_byte;
            t.packets.push_back({ts, sz, cfg.dir});
        }
    }
    t.sort_by_time();
    return t;
}

} // namespace imta::trace
