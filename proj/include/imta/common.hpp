#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace imta {

// Malformed input files (model, flow, trace, pcap). Carries a human-readable
// location: "path:line" for text formats, "path @byte N" for binary ones.
class parse_error : public std::runtime_error {
public:
    parse_error(const std::string& where, const std::string& what)
        : std::runtime_error(where + ": " + what) {}
};

// Anything that is not an input-format problem: bad arguments, violated
// preconditions, I/O failures.
class runtime_fault : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string loc(const std::string& path, std::size_t line) {
    return path + ":" + std::to_string(line);
}

inline bool parse_double(std::string_view s, double& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e;
}

inline bool parse_u64(std::string_view s, std::uint64_t& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e;
}

inline bool parse_i64(std::string_view s, std::int64_t& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e;
}

// Shortest decimal form that round-trips the exact double. Used by every
// writer so that reruns are byte-identical.
inline std::string fmt_double(double v) {
    char buf[64];
    if (v == std::floor(v) && std::fabs(v) < 9007199254740992.0) {
        std::snprintf(buf, sizeof(buf), "%.0f", v);
        return buf;
    }
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        double back = 0;
        if (parse_double(buf, back) && back == v) break;
    }
    return buf;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::string_view strip_cr(std::string_view s) {
    if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
    return s;
}

} // namespace imta
