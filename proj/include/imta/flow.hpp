#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "imta/common.hpp"

namespace imta {

enum class MessageType : int { Text = 0, Photo = 1, Video = 2, File = 3, Audio = 4 };
constexpr int kNumMessageTypes = 5;

inline const char* message_type_name(MessageType t) {
    switch (t) {
        case MessageType::Text: return "text";
        case MessageType::Photo: return "photo";
        case MessageType::Video: return "video";
        case MessageType::File: return "file";
        case MessageType::Audio: return "audio";
    }
    return "?";
}

enum class Direction { Up, Down };
enum class PrincipalKind { Channel, User };

// One IM message, or a batch of messages merged below the t_e threshold.
// type is -1 for events recovered from encrypted traffic, where the type is
// not observable. The dummy flag exists only so the proxy can strip cover
// events; on-the-wire observers never see it.
struct Event {
    double time_s = 0;
    double size_bytes = 0;
    int type = -1;
    bool dummy = false;

    bool operator==(const Event&) const = default;
};

struct Flow {
    PrincipalKind principal = PrincipalKind::Channel;
    Direction direction = Direction::Down;
    std::vector<Event> events;

    bool operator==(const Flow&) const = default;

    double span_s() const { return events.empty() ? 0.0 : events.back().time_s; }
    double total_bytes() const {
        double sum = 0;
        for (const auto& e : events) sum += e.size_bytes;
        return sum;
    }
    void sort_by_time() {
        std::stable_sort(events.begin(), events.end(),
                         [](const Event& a, const Event& b) { return a.time_s < b.time_s; });
    }
};

inline const char* to_string(PrincipalKind k) {
    return k == PrincipalKind::Channel ? "channel" : "user";
}
inline const char* to_string(Direction d) { return d == Direction::Up ? "up" : "down"; }

// Flow file: two header lines, then one event per line
//   imta-flow/1
//   <channel|user> <up|down>
//   time_s<TAB>size_bytes<TAB>type_code[<TAB>dummy_flag]
// The 4-column form is the ".obf" variant carrying the dummy flag.
inline void write_flow(const Flow& f, std::ostream& os, bool with_dummy_flag = false) {
    os << "imta-flow/1\n" << to_string(f.principal) << " " << to_string(f.direction) << "\n";
    for (const auto& e : f.events) {
        os << fmt_double(e.time_s) << '\t' << fmt_double(e.size_bytes) << '\t' << e.type;
        if (with_dummy_flag) os << '\t' << (e.dummy ? 1 : 0);
        os << '\n';
    }
}

inline void write_flow_file(const Flow& f, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw runtime_fault("cannot open for writing: " + path);
    bool obf = path.size() > 4 && path.substr(path.size() - 4) == ".obf";
    write_flow(f, os, obf);
    if (!os) throw runtime_fault("write failed: " + path);
}

inline Flow read_flow(std::istream& is, const std::string& path) {
    std::string line;
    std::size_t ln = 0;
    if (!std::getline(is, line)) throw parse_error(loc(path, 1), "empty file");
    ++ln;
    if (strip_cr(line) != "imta-flow/1")
        throw parse_error(loc(path, ln), "bad magic, expected imta-flow/1");
    if (!std::getline(is, line)) throw parse_error(loc(path, 2), "missing principal/direction header");
    ++ln;
    auto hdr = split_ws(strip_cr(line));
    if (hdr.size() != 2) throw parse_error(loc(path, ln), "header must be '<channel|user> <up|down>'");
    Flow f;
    if (hdr[0] == "channel") f.principal = PrincipalKind::Channel;
    else if (hdr[0] == "user") f.principal = PrincipalKind::User;
    else throw parse_error(loc(path, ln), "unknown principal '" + std::string(hdr[0]) + "'");
    if (hdr[1] == "up") f.direction = Direction::Up;
    else if (hdr[1] == "down") f.direction = Direction::Down;
    else throw parse_error(loc(path, ln), "unknown direction '" + std::string(hdr[1]) + "'");

    while (std::getline(is, line)) {
        ++ln;
        auto sv = strip_cr(line);
        if (sv.empty()) continue;
        auto cols = split_ws(sv);
        if (cols.size() != 3 && cols.size() != 4)
            throw parse_error(loc(path, ln), "expected 3 or 4 columns");
        Event e;
        std::int64_t ty = 0;
        if (!parse_double(cols[0], e.time_s) || !parse_double(cols[1], e.size_bytes) ||
            !parse_i64(cols[2], ty))
            throw parse_error(loc(path, ln), "malformed event record");
        if (ty < -1 || ty >= kNumMessageTypes)
            throw parse_error(loc(path, ln), "type code out of range");
        e.type = int(ty);
        if (cols.size() == 4) {
            std::int64_t d = 0;
            if (!parse_i64(cols[3], d) || (d != 0 && d != 1))
                throw parse_error(loc(path, ln), "dummy flag must be 0 or 1");
            e.dummy = d == 1;
        }
        if (e.size_bytes <= 0) throw parse_error(loc(path, ln), "event size must be > 0");
        if (!(e.time_s >= 0) || !std::isfinite(e.time_s))
            throw parse_error(loc(path, ln), "event time must be finite and non-negative");
        f.events.push_back(e);
    }
    for (std::size_t i = 1; i < f.events.size(); ++i)
        if (f.events[i].time_s < f.events[i - 1].time_s)
            throw parse_error(loc(path, 0), "events not sorted by time");
    return f;
}

inline Flow read_flow_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw runtime_fault("cannot open: " + path);
    return read_flow(is, path);
}

} // namespace imta
