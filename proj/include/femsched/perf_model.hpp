#pragma once

// Heuristic cost model and roofline ceiling. Modeled time is global bytes
// over the modeled global bandwidth plus local bytes over the modeled local
// bandwidth, where each bandwidth ramps linearly with the effective number of
// resident sub-groups and saturates at the device's peak.

#include <istream>
#include <optional>
#include <ostream>
#include <sstream>

#include "femsched/qoi.hpp"

namespace femsched {

// ---------------------------------------------------------------------------
// Device specification
// ---------------------------------------------------------------------------

struct DeviceSpec {
    std::string name;
    double peak_gflops = 0.0;
    double peak_global_bw_gbs = 0.0;
    double peak_local_bw_gbs = 0.0;
    long long max_local_bytes = 0;       // per work-group
    int max_workgroups_per_cu = 0;
    int saturation_subgroups_global = 1; // sub-groups at which global bw saturates
    int saturation_subgroups_local = 1;
    int max_registers_per_work_item = 0; // informational only

    void validate() const {
        if (peak_gflops <= 0 || peak_global_bw_gbs <= 0 || peak_local_bw_gbs <= 0 ||
            max_local_bytes <= 0 || max_workgroups_per_cu <= 0)
            throw std::invalid_argument("device: all limits must be positive");
        if (saturation_subgroups_global < 1 || saturation_subgroups_local < 1)
            throw std::invalid_argument("device: saturation sub-group counts must be >= 1");
    }
};

inline DeviceSpec k40_device() {
    return {"k40", 1430.0, 288.0, 1000.0, 48LL * 1024, 32, 8, 10, 255};
}

inline DeviceSpec titan_v_device() {
    return {"titan-v", 6144.0, 653.0, 13800.0, 96LL * 1024, 32, 1, 12, 255};
}

inline void save_device(std::ostream& os, const DeviceSpec& d) {
    os << "name: " << d.name << "\n"
       << "peak_gflops: " << d.peak_gflops << "\n"
       << "peak_global_bw_gbs: " << d.peak_global_bw_gbs << "\n"
       << "peak_local_bw_gbs: " << d.peak_local_bw_gbs << "\n"
       << "max_local_bytes: " << d.max_local_bytes << "\n"
       << "max_workgroups_per_cu: " << d.max_workgroups_per_cu << "\n"
       << "saturation_subgroups_global: " << d.saturation_subgroups_global << "\n"
       << "saturation_subgroups_local: " << d.saturation_subgroups_local << "\n"
       << "max_registers_per_work_item: " << d.max_registers_per_work_item << "\n";
}

inline DeviceSpec load_device(std::istream& is) {
    DeviceSpec d;
    d.max_registers_per_work_item = 0;
    std::string line;
    while (std::getline(is, line)) {
        const auto colon = line.find(':');
        if (line.empty() || line[0] == '#' || colon == std::string::npos) continue;
        const std::string key = line.substr(0, colon);
        std::istringstream value(line.substr(colon + 1));
        if (key == "name") value >> d.name;
        else if (key == "peak_gflops") value >> d.peak_gflops;
        else if (key == "peak_global_bw_gbs") value >> d.peak_global_bw_gbs;
        else if (key == "peak_local_bw_gbs") value >> d.peak_local_bw_gbs;
        else if (key == "max_local_bytes") value >> d.max_local_bytes;
        else if (key == "max_workgroups_per_cu") value >> d.max_workgroups_per_cu;
        else if (key == "saturation_subgroups_global") value >> d.saturation_subgroups_global;
        else if (key == "saturation_subgroups_local") value >> d.saturation_subgroups_local;
        else if (key == "max_registers_per_work_item") value >> d.max_registers_per_work_item;
        else throw std::invalid_argument("device: unknown field '" + key + "'");
        if (value.fail()) throw std::invalid_argument("device: bad value for '" + key + "'");
    }
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Per-cell memory access counts
// ---------------------------------------------------------------------------

struct GlobalAccessWords {
    long long gather = 0;   // trial DOF words per cell
    long long scatter = 0;  // output words per cell
    Ratio reference{0};     // tabulation words per cell, amortized over the group
    Ratio total() const { return Ratio(gather + scatter) + reference; }
};

/// Global words touched per cell by the tiled schedule. DOF tiles are
/// re-gathered once per evaluation row-tile pass; the scatter flushes once
/// per quadrature tile; tabulation slabs and the weight vector are fetched
/// once per work-group and amortize over its cells.
inline GlobalAccessWords global_access_words(const FormSignature& sig, const TilingParams& p) {
    if (p.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("global_access_words: multi-level tiling only");
    p.validate(sig);
    const long long q = sig.quad_points;
    GlobalAccessWords w;
    const long long passes = (q / p.quad_tile) * ceil_div(p.quad_tile, p.eval_row_tile) +
                             ceil_div(q % p.quad_tile, p.eval_row_tile);
    long long dof_words = 0;
    for (const auto& s : sig.scalar_spaces) dof_words += s.dofs;
    for (const auto& v : sig.vector_spaces) dof_words += static_cast<long long>(v.dofs) * sig.dim;
    w.gather = passes * dof_words;
    w.scatter = ceil_div(q, p.quad_tile) * sig.test_dofs;
    long long slab = q;  // quadrature weights
    for (const auto& s : sig.scalar_spaces) slab += static_cast<long long>(s.dofs) * q;
    for (const auto& v : sig.vector_spaces) slab += static_cast<long long>(v.dofs) * q;
    w.reference = Ratio(slab, p.cells_per_group);
    return w;
}

struct LocalAccessWords {
    long long eval_read = 0;
    long long eval_write = 0;
    long long quad_read = 0;
    long long total() const { return eval_read + eval_write + quad_read; }
};

/// Local words touched per cell; independent of the tile choice.
inline LocalAccessWords local_access_words(const FormSignature& sig) {
    sig.validate();
    const long long q = sig.quad_points;
    LocalAccessWords w;
    for (const auto& s : sig.scalar_spaces)
        w.eval_read += static_cast<long long>(s.deriv_terms) * s.dofs * q;
    for (const auto& v : sig.vector_spaces)
        w.eval_read += static_cast<long long>(v.deriv_terms) * v.dofs * q;
    w.eval_write = static_cast<long long>(sig.test_deriv_terms) * q;
    w.quad_read = static_cast<long long>(sig.test_deriv_terms) * q * (1 + sig.test_dofs);
    return w;
}

// ---------------------------------------------------------------------------
// Residency and the bandwidth ramp
// ---------------------------------------------------------------------------

struct Residency {
    long long subgroups = 0;   // resident sub-groups per compute unit
    Ratio effective{0};        // derated by predication and SIMD efficiency
};

/// Work-groups resident per compute unit are limited by local memory or the
/// device's work-group cap; the count is integral. A work-group whose local
/// allocation exceeds the device cap cannot launch at all.
inline Residency residency(const TilingParams& p, long long local_words, int word_bytes,
                           const DeviceSpec& dev, Ratio predication_eff = Ratio(1),
                           Ratio simd_eff = Ratio(1)) {
    dev.validate();
    if (local_words < 0) throw std::invalid_argument("residency: negative local words");
    const long long local_bytes = local_words * word_bytes;
    long long groups_per_cu;
    if (local_bytes == 0) {
        groups_per_cu = dev.max_workgroups_per_cu;
    } else {
        if (local_bytes > dev.max_local_bytes)
            throw InfeasibleError("candidate needs " + std::to_string(local_bytes) +
                                  " local bytes but the device caps work-groups at " +
                                  std::to_string(dev.max_local_bytes));
        groups_per_cu = std::min<long long>(dev.max_local_bytes / local_bytes, dev.max_workgroups_per_cu);
    }
    Residency r;
    r.subgroups = ceil_div(p.group_size(), kSubgroupSize) * groups_per_cu;
    r.effective = predication_eff * simd_eff * Ratio(r.subgroups);
    return r;
}

struct ModeledBandwidths {
    double global_gbs = 0.0;
    double local_gbs = 0.0;
};

/// Linear ramp in the effective resident sub-groups, saturating exactly at
/// the device's saturation count.
inline ModeledBandwidths modeled_bandwidths(Ratio effective_subgroups, const DeviceSpec& dev) {
    dev.validate();
    if (effective_subgroups < Ratio(0))
        throw std::invalid_argument("modeled_bandwidths: negative sub-group count");
    auto ramp = [&](double peak, int sat) {
        if (effective_subgroups >= Ratio(sat)) return peak;
        return peak * boost::rational_cast<double>(effective_subgroups) / sat;
    };
    return {ramp(dev.peak_global_bw_gbs, dev.saturation_subgroups_global),
            ramp(dev.peak_local_bw_gbs, dev.saturation_subgroups_local)};
}

// ---------------------------------------------------------------------------
// Heuristic cost
// ---------------------------------------------------------------------------

struct CostEstimate {
    GlobalAccessWords global_words;  // per cell
    LocalAccessWords local_words;    // per cell
    QoIReport qoi;
    Residency residency;
    ModeledBandwidths bandwidth;
    double seconds_per_cell = 0.0;

    double seconds(long long n_cells) const { return seconds_per_cell * static_cast<double>(n_cells); }
};

/// Modeled execution time of a multi-level-tiling candidate: per-cell global
/// and local byte traffic over the respective modeled bandwidths. Scale by
/// the cell count for aggregate time; the estimate is exactly linear in it.
inline CostEstimate estimate_cost(const FormSignature& sig, const TilingParams& p,
                                  const DeviceSpec& dev) {
    if (p.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("estimate_cost: the single-cell-per-work-item variant is not modeled");
    CostEstimate est;
    est.qoi = qoi_report(sig, p);
    est.global_words = global_access_words(sig, p);
    est.local_words = local_access_words(sig);
    est.residency = residency(p, est.qoi.local_words, sig.word_bytes, dev,
                              est.qoi.predication_efficiency, est.qoi.simd_efficiency);
    est.bandwidth = modeled_bandwidths(est.residency.effective, dev);
    const double global_bytes = boost::rational_cast<double>(est.global_words.total()) * sig.word_bytes;
    const double local_bytes = static_cast<double>(est.local_words.total()) * sig.word_bytes;
    // bandwidths are GB/s = 1e9 bytes/s
    est.seconds_per_cell = global_bytes / (est.bandwidth.global_gbs * 1e9) +
                           local_bytes / (est.bandwidth.local_gbs * 1e9);
    return est;
}

// ---------------------------------------------------------------------------
// Roofline
// ---------------------------------------------------------------------------

enum class RooflineBinding { global_bw, local_bw, compute };

inline const char* binding_name(RooflineBinding b) {
    switch (b) {
        case RooflineBinding::global_bw: return "global-bandwidth";
        case RooflineBinding::local_bw: return "local-bandwidth";
        case RooflineBinding::compute: return "compute";
    }
    return "?";
}

struct RooflineReport {
    double ai_global = 0.0;  // FLOP per global byte
    double ai_local = 0.0;   // FLOP per local byte
    double gflops = 0.0;     // attainable ceiling
    RooflineBinding binding = RooflineBinding::compute;
};

/// Global bytes the untransformed kernel must move: gather and scatter DOF
/// traffic per cell, plus every tabulation array once (cached thereafter).
inline double default_global_footprint_bytes(const FormSignature& sig, long long n_cells) {
    sig.validate();
    long long per_cell = sig.test_dofs;
    for (const auto& s : sig.scalar_spaces) per_cell += s.dofs;
    for (const auto& v : sig.vector_spaces) per_cell += static_cast<long long>(v.dofs) * sig.dim;
    long long once = sig.quad_points;
    for (const auto& s : sig.scalar_spaces)
        once += static_cast<long long>(s.deriv_terms) * s.dofs * sig.quad_points;
    for (const auto& v : sig.vector_spaces)
        once += static_cast<long long>(v.deriv_terms) * v.dofs * sig.quad_points;
    once += static_cast<long long>(sig.test_deriv_terms) * sig.test_dofs * sig.quad_points;
    return static_cast<double>(per_cell * n_cells + once) * sig.word_bytes;
}

inline RooflineReport roofline(const FormSignature& sig, const DeviceSpec& dev, long long n_cells,
                               double global_footprint_bytes) {
    sig.validate();
    dev.validate();
    if (n_cells < 1) throw std::invalid_argument("roofline: n_cells >= 1 required");
    if (!(global_footprint_bytes > 0.0))
        throw std::invalid_argument("roofline: global footprint must be positive");
    const double flops = static_cast<double>(usable_flops(sig)) * static_cast<double>(n_cells);
    const double local_bytes =
        static_cast<double>(local_access_words(sig).total()) * sig.word_bytes *
        static_cast<double>(n_cells);

    RooflineReport r;
    r.ai_global = flops / global_footprint_bytes;
    r.ai_local = flops / local_bytes;
    const double terms[3] = {r.ai_global * dev.peak_global_bw_gbs, r.ai_local * dev.peak_local_bw_gbs,
                             dev.peak_gflops};
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (terms[i] < terms[best]) best = i;
    r.gflops = terms[best];
    r.binding = best == 0 ? RooflineBinding::global_bw
                          : (best == 1 ? RooflineBinding::local_bw : RooflineBinding::compute);
    return r;
}

}  // namespace femsched
