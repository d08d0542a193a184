#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "imta/common.hpp"
#include "imta/detect_event.hpp"
#include "imta/flow.hpp"

namespace imta::detect {

struct ShapeConfig {
    double te_s = 0.5;  // bar half-width: bars are 2*t_e wide
    double ts_s = 0.01; // bin width
    double eta = 0.5;
};

// Bandwidth-normalized traffic shape: every event is a bar of width 2*t_e
// centered on the event, with height size/(2*t_e) so the bar area equals the
// event size. Bars are rasterized onto a global bin grid (bin i covers
// [i*ts, (i+1)*ts)); partially covered edge bins get the proportional height,
// which keeps the area exact. Overlapping bars sum.
struct NormalizedShape {
    std::int64_t origin_bin = 0;  // absolute index of h[0] on the global grid
    double ts_s = 0;
    std::vector<double> h;  // bytes/second per bin

    double total_area() const {
        double a = 0;
        for (double v : h) a += v;
        return a * ts_s;
    }
};

inline NormalizedShape normalize_shape(const Flow& flow, const ShapeConfig& cfg) {
    if (!(cfg.ts_s > 0)) throw runtime_fault("normalize_shape: t_s must be > 0");
    if (!(cfg.te_s >= cfg.ts_s)) throw runtime_fault("normalize_shape: requires t_e >= t_s");
    NormalizedShape sh;
    sh.ts_s = cfg.ts_s;
    if (flow.events.empty()) return sh;

    const double width = 2.0 * cfg.te_s;
    double lo_t = flow.events.front().time_s - cfg.te_s;
    double hi_t = flow.events.back().time_s + cfg.te_s;
    sh.origin_bin = std::int64_t(std::floor(lo_t / cfg.ts_s));
    std::int64_t end_bin = std::int64_t(std::ceil(hi_t / cfg.ts_s));
    sh.h.assign(std::size_t(end_bin - sh.origin_bin), 0.0);

    for (const auto& e : flow.events) {
        double b0 = e.time_s - cfg.te_s;
        double b1 = e.time_s + cfg.te_s;
        double height = e.size_bytes / width;
        std::int64_t first = std::int64_t(std::floor(b0 / cfg.ts_s));
        std::int64_t last = std::int64_t(std::ceil(b1 / cfg.ts_s));
        for (std::int64_t b = first; b < last; ++b) {
            double bin_lo = double(b) * cfg.ts_s;
            double bin_hi = bin_lo + cfg.ts_s;
            double overlap = std::min(b1, bin_hi) - std::max(b0, bin_lo);
            if (overlap <= 0) continue;
            sh.h[std::size_t(b - sh.origin_bin)] += height * (overlap / cfg.ts_s);
        }
    }
    return sh;
}

// Normalized correlation (2*sum(ab) / (sum(a^2)+sum(b^2))) over the first
// n = min(n_a, n_b) bins counted from the common grid alignment; shift_bins
// slides the second shape. All-zero overlap gives 0. Result is in [0,1] for
// non-negative inputs.
inline double shape_correlation(const NormalizedShape& a, const NormalizedShape& b,
                                std::int64_t shift_bins = 0) {
    if (a.ts_s != b.ts_s) throw runtime_fault("shape_correlation: bin widths differ");
    if (a.h.empty() || b.h.empty()) return 0;
    std::int64_t b_origin = b.origin_bin + shift_bins;
    std::int64_t start = std::max(a.origin_bin, b_origin);
    std::int64_t ia = start - a.origin_bin;
    std::int64_t ib = start - b_origin;
    if (ia >= std::int64_t(a.h.size()) || ib >= std::int64_t(b.h.size())) return 0;
    std::size_t n = std::min(a.h.size() - std::size_t(ia), b.h.size() - std::size_t(ib));
    double dot = 0, na = 0, nb = 0;
    const double* pa = a.h.data() + ia;
    const double* pb = b.h.data() + ib;
    for (std::size_t i = 0; i < n; ++i) {
        dot += pa[i] * pb[i];
        na += pa[i] * pa[i];
        nb += pb[i] * pb[i];
    }
    if (na + nb == 0) return 0;
    return 2.0 * dot / (na + nb);
}

inline Hypothesis shape_decide(double corr, double eta) {
    if (corr < 0 || corr > 1) throw runtime_fault("shape_decide: corr must be in [0,1]");
    return corr > eta ? Hypothesis::H1 : Hypothesis::H0;
}

// Alignment for the shape detector: unlike the event-side skew estimate, the
// correlation is maximized over the whole observation (offsets are snapped to
// whole bins).
inline double synchronize_shapes(const NormalizedShape& channel, const NormalizedShape& user,
                                 double window_s, double step_s) {
    if (window_s <= 0) return 0;
    return synchronize(window_s, step_s, [&](double off) {
        return shape_correlation(channel, user, std::int64_t(std::llround(off / channel.ts_s)));
    });
}

inline void write_shape_csv(const NormalizedShape& sh, std::ostream& os) {
    os << "bin_index,height\n";
    for (std::size_t i = 0; i < sh.h.size(); ++i)
        os << (sh.origin_bin + std::int64_t(i)) << ',' << fmt_double(sh.h[i]) << '\n';
}

} // namespace imta::detect
