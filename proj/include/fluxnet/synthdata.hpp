#pragma once

// Synthetic measurement campaigns: a closed-form axial flux model and a
// Poisson counting model mimicking copper-wire activation scans of a small
// research core. Profiles decay between irradiation and the sequential wire
// scans, so raw counts need decay correction downstream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/rng.hpp"
#include "json.hpp"

namespace fluxnet::synthdata {

enum class AssemblyKind { fuel, follower };

inline std::string to_string(AssemblyKind k) {
    return k == AssemblyKind::fuel ? "fuel" : "follower";
}

inline AssemblyKind assembly_kind_from_string(const std::string& s) {
    if (s == "fuel") return AssemblyKind::fuel;
    if (s == "follower") return AssemblyKind::follower;
    throw DataError("unknown assembly kind: " + s);
}

struct AssemblyDescriptor {
    std::string id;
    AssemblyKind kind = AssemblyKind::fuel;
    // Count-magnitude factor in (0,1]; 1 at the core centre, smallest at the
    // periphery. Encodes the radial flux depression of the cosine-like core.
    double radial_weight = 1.0;
};

struct CoreLayout {
    std::vector<AssemblyDescriptor> assemblies;

    // 26 fuel assemblies and 6 control-rod followers (C5, C7, E5, E7, G5, G7)
    // on a 9x8 grid with centre E6. Weights fall off with squared grid
    // distance from the centre; H3 is the most peripheral position.
    static CoreLayout standard();

    const AssemblyDescriptor& find(const std::string& id) const {
        for (const auto& a : assemblies)
            if (a.id == id) return a;
        throw DataError("assembly not in core layout: " + id);
    }

    bool contains(const std::string& id) const {
        return std::any_of(assemblies.begin(), assemblies.end(),
                           [&](const AssemblyDescriptor& a) { return a.id == id; });
    }

    void validate() const {
        if (assemblies.empty()) throw ConfigError("core layout has no assemblies");
        int at_unity = 0;
        for (const auto& a : assemblies) {
            if (a.id.empty()) throw ConfigError("core layout has an assembly without id");
            if (!(a.radial_weight > 0.0) || a.radial_weight > 1.0)
                throw ConfigError("radial weight outside (0,1] for assembly " + a.id);
            if (a.radial_weight == 1.0) ++at_unity;
            if (std::count_if(assemblies.begin(), assemblies.end(),
                              [&](const AssemblyDescriptor& b) { return b.id == a.id; }) != 1)
                throw ConfigError("duplicate assembly id in core layout: " + a.id);
        }
        if (at_unity != 1) throw ConfigError("core layout needs exactly one centre assembly with weight 1");
    }
};

inline CoreLayout CoreLayout::standard() {
    // Grid positions (row 1..7 for B..H, column number) of the instrumented
    // assemblies. Starred positions hold control-rod followers.
    struct Pos { const char* id; int row, col; bool follower; };
    static const Pos table[] = {
        {"B5", 1, 5, false}, {"B6", 1, 6, false},
        {"C4", 2, 4, false}, {"C5", 2, 5, true},  {"C6", 2, 6, false}, {"C7", 2, 7, true},  {"C8", 2, 8, false},
        {"D3", 3, 3, false}, {"D4", 3, 4, false}, {"D5", 3, 5, false}, {"D6", 3, 6, false}, {"D7", 3, 7, false}, {"D8", 3, 8, false},
        {"E3", 4, 3, false}, {"E4", 4, 4, false}, {"E5", 4, 5, true},  {"E6", 4, 6, false}, {"E7", 4, 7, true},  {"E8", 4, 8, false},
        {"F3", 5, 3, false}, {"F4", 5, 4, false}, {"F5", 5, 5, false}, {"F6", 5, 6, false}, {"F7", 5, 7, false}, {"F8", 5, 8, false},
        {"G4", 6, 4, false}, {"G5", 6, 5, true},  {"G6", 6, 6, false}, {"G7", 6, 7, true},  {"G8", 6, 8, false},
        {"H3", 7, 3, false}, {"H6", 7, 6, false},
    };
    CoreLayout layout;
    for (const auto& p : table) {
        const double d2 = static_cast<double>((p.row - 4) * (p.row - 4) + (p.col - 6) * (p.col - 6));
        AssemblyDescriptor a;
        a.id = p.id;
        a.kind = p.follower ? AssemblyKind::follower : AssemblyKind::fuel;
        a.radial_weight = std::pow(0.2, d2 / 18.0);
        layout.assemblies.push_back(std::move(a));
    }
    layout.validate();
    return layout;
}

// Per-assembly parameters of the closed-form axial flux shape.
struct AssemblyShape {
    double extrap_bottom_mm = 80.0;  // extrapolated length below the active height
    double extrap_top_mm = 80.0;     // extrapolated length above the active height
    double rod_coupling = 0.0;       // suppression amplitude above the rod tip, in [0,1)
    double rod_width_mm = 30.0;      // axial width of the suppression transition
    double dip_depth = 0.0;          // follower absorber dip, in [0,1)
    double dip_center_mm = 400.0;
    double dip_width_mm = 35.0;
    double top_peak_amp = 0.0;       // additive local peak near the follower top end
    double top_peak_center_mm = 560.0;
    double top_peak_width_mm = 25.0;

    void validate(const std::string& id) const {
        if (!(extrap_bottom_mm > 0.0) || !(extrap_top_mm > 0.0))
            throw ConfigError("extrapolated lengths must be positive for assembly " + id);
        if (rod_coupling < 0.0 || rod_coupling >= 1.0)
            throw ConfigError("rod coupling outside [0,1) for assembly " + id);
        if (dip_depth < 0.0 || dip_depth >= 1.0)
            throw ConfigError("dip depth outside [0,1) for assembly " + id);
        if (!(rod_width_mm > 0.0) || !(dip_width_mm > 0.0) || !(top_peak_width_mm > 0.0))
            throw ConfigError("shape widths must be positive for assembly " + id);
        if (top_peak_amp < 0.0)
            throw ConfigError("top peak amplitude must be non-negative for assembly " + id);
    }
};

struct TrueFluxModel {
    double active_height_mm = 600.0;
    int n_axial = 180;
    double bank_min_mm = 450.0;   // operating range sampled by default
    double bank_max_mm = 550.0;
    double exposure = 600.0;      // expected peak counts at the core centre
    double half_life_h = 12.7;    // Cu-64
    double scan_minutes_per_wire = 5.0;
    std::map<std::string, AssemblyShape> shapes;

    double grid_step_mm() const { return active_height_mm / n_axial; }
    double z_at(int i) const { return (i + 0.5) * grid_step_mm(); }

    const AssemblyShape& shape_of(const std::string& id) const {
        auto it = shapes.find(id);
        if (it == shapes.end()) throw DataError("no flux shape for assembly " + id);
        return it->second;
    }

    void validate() const {
        if (!(active_height_mm > 0.0)) throw ConfigError("active height must be positive");
        if (n_axial < 2) throw ConfigError("axial grid needs at least 2 points");
        if (!(bank_min_mm >= 0.0) || !(bank_max_mm <= active_height_mm) || !(bank_min_mm < bank_max_mm))
            throw ConfigError("bank operating range must satisfy 0 <= min < max <= active height");
        if (!(exposure > 0.0)) throw ConfigError("exposure must be positive");
        if (!(half_life_h > 0.0)) throw ConfigError("half-life must be positive");
        if (scan_minutes_per_wire < 0.0) throw ConfigError("scan time must be non-negative");
        for (const auto& [id, s] : shapes) s.validate(id);
    }

    // Default shapes: a chopped cosine over the extrapolated height for every
    // assembly, suppression above the rod tip scaled with proximity to the
    // control bank, and for followers an absorber dip plus a local peak near
    // the top end of the follower.
    static TrueFluxModel standard(const CoreLayout& layout) {
        TrueFluxModel m;
        for (const auto& a : layout.assemblies) {
            AssemblyShape s;
            s.rod_coupling = 0.35 * (0.25 + 0.75 * a.radial_weight);
            if (a.kind == AssemblyKind::follower) {
                s.dip_depth = 0.45;
                s.top_peak_amp = 0.35;
            }
            m.shapes[a.id] = s;
        }
        m.validate();
        return m;
    }
};

namespace detail {
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double gauss_bump(double d, double width) { return std::exp(-d * d / (2.0 * width * width)); }
}  // namespace detail

// Relative flux at axial position z for a given control-bank position. The
// bank position is the rod tip height above the core bottom; a smaller value
// means deeper insertion and stronger suppression above the tip.
inline double true_flux(const TrueFluxModel& m, const AssemblyShape& s, double bank_mm, double z_mm) {
    if (!(z_mm >= 0.0) || !(z_mm <= m.active_height_mm))
        throw ConfigError("axial position outside active height: " + format_double(z_mm));
    if (!(bank_mm >= 0.0) || !(bank_mm <= m.active_height_mm))
        throw ConfigError("bank position outside active height: " + format_double(bank_mm));
    const double h_ex = m.active_height_mm + s.extrap_bottom_mm + s.extrap_top_mm;
    const double z_c = 0.5 * (m.active_height_mm + s.extrap_top_mm - s.extrap_bottom_mm);
    const double base = std::cos(std::numbers::pi * (z_mm - z_c) / h_ex);
    const double rod = 1.0 - s.rod_coupling * detail::logistic((z_mm - bank_mm) / s.rod_width_mm);
    double flux = base * rod;
    if (s.dip_depth > 0.0)
        flux *= 1.0 - s.dip_depth * detail::gauss_bump(z_mm - s.dip_center_mm, s.dip_width_mm);
    if (s.top_peak_amp > 0.0)
        flux += s.top_peak_amp * detail::gauss_bump(z_mm - s.top_peak_center_mm, s.top_peak_width_mm);
    return flux;
}

inline double true_flux(const TrueFluxModel& m, const AssemblyDescriptor& a, double bank_mm, double z_mm) {
    return true_flux(m, m.shape_of(a.id), bank_mm, z_mm);
}

inline std::vector<double> true_profile(const TrueFluxModel& m, const AssemblyDescriptor& a, double bank_mm) {
    std::vector<double> out(static_cast<std::size_t>(m.n_axial));
    const AssemblyShape& s = m.shape_of(a.id);
    for (int i = 0; i < m.n_axial; ++i) out[static_cast<std::size_t>(i)] = true_flux(m, s, bank_mm, m.z_at(i));
    return out;
}

struct AxialProfile {
    std::string assembly;
    double t_scan_h = 0.0;                // scan start, hours after the reference time
    std::vector<double> counts;           // observed counts, after pre-scan decay
    std::vector<double> counts_pre_decay; // generator truth, kept in memory only
};

enum class DefectKind { axial_shift, missing_points, under_exposure };

inline std::string to_string(DefectKind k) {
    switch (k) {
        case DefectKind::axial_shift: return "axial_shift";
        case DefectKind::missing_points: return "missing_points";
        case DefectKind::under_exposure: return "under_exposure";
    }
    throw ConfigError("unknown defect kind");
}

inline DefectKind defect_kind_from_string(const std::string& s) {
    if (s == "axial_shift") return DefectKind::axial_shift;
    if (s == "missing_points") return DefectKind::missing_points;
    if (s == "under_exposure") return DefectKind::under_exposure;
    throw DataError("unknown defect kind: " + s);
}

struct DefectSpec {
    DefectKind kind = DefectKind::axial_shift;
    double magnitude = 0.0;   // mm shift, dropped point count, or exposure scale
    std::string cycle_id;
    std::string assembly;     // empty targets the whole cycle (under_exposure)

    void validate(const TrueFluxModel& m) const {
        switch (kind) {
            case DefectKind::axial_shift:
                if (std::abs(magnitude) > 0.1 * m.active_height_mm)
                    throw ConfigError("axial shift magnitude exceeds 10% of the active height");
                if (assembly.empty()) throw ConfigError("axial_shift defect needs a target assembly");
                break;
            case DefectKind::missing_points: {
                const double r = std::round(magnitude);
                if (r != magnitude || r < 1 || r > m.n_axial)
                    throw ConfigError("missing_points magnitude must be an integer in [1, n_axial]");
                if (assembly.empty()) throw ConfigError("missing_points defect needs a target assembly");
                break;
            }
            case DefectKind::under_exposure:
                if (!(magnitude > 0.0) || !(magnitude < 1.0))
                    throw ConfigError("under_exposure scale must lie in (0,1)");
                break;
        }
        if (cycle_id.empty()) throw ConfigError("defect needs a target cycle id");
    }
};

struct DefectLabel {
    std::string kind;
    double magnitude = 0.0;
    std::string assembly;
};

struct MeasurementCycle {
    std::string id;
    double bank_mm = 0.0;
    std::vector<AxialProfile> profiles;
    std::vector<DefectLabel> defect_labels;

    const AxialProfile* find_profile(const std::string& assembly) const {
        for (const auto& p : profiles)
            if (p.assembly == assembly) return &p;
        return nullptr;
    }
};

inline std::string cycle_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "C%04d", index + 1);
    return buf;
}

// One measurement cycle: every wire in layout order, scanned sequentially at
// scan_minutes_per_wire spacing. Counts decay between the reference time and
// each wire's scan slot.
inline MeasurementCycle simulate_cycle(const TrueFluxModel& m, const CoreLayout& layout,
                                       double bank_mm, double exposure, std::uint64_t rng_seed) {
    m.validate();
    layout.validate();
    if (!(exposure > 0.0)) throw ConfigError("exposure must be positive");
    if (!(bank_mm >= 0.0) || !(bank_mm <= m.active_height_mm))
        throw ConfigError("bank position outside active height: " + format_double(bank_mm));

    MeasurementCycle cycle;
    cycle.bank_mm = bank_mm;
    cycle.profiles.reserve(layout.assemblies.size());
    for (std::size_t k = 0; k < layout.assemblies.size(); ++k) {
        const auto& a = layout.assemblies[k];
        Rng rng = substream(rng_seed, "wire", k);
        AxialProfile prof;
        prof.assembly = a.id;
        prof.t_scan_h = static_cast<double>(k) * m.scan_minutes_per_wire / 60.0;
        // Counting statistics apply at detection time: the wire is scanned
        // after decaying for t_scan_h, so the Poisson mean carries the
        // attenuation and the pre-decay value is the corrected estimate.
        // Using the identical exp2 factor the correction uses makes the
        // round trip exact.
        const double decay = std::exp2(prof.t_scan_h / m.half_life_h);
        prof.counts.resize(static_cast<std::size_t>(m.n_axial));
        prof.counts_pre_decay.resize(static_cast<std::size_t>(m.n_axial));
        const AssemblyShape& shape = m.shape_of(a.id);
        for (int i = 0; i < m.n_axial; ++i) {
            const double mean = exposure * a.radial_weight * true_flux(m, shape, bank_mm, m.z_at(i));
            if (!(mean > 0.0)) throw NumericError("non-positive expected count for assembly " + a.id);
            std::poisson_distribution<long long> pois(mean / decay);
            const double observed = static_cast<double>(pois(rng));
            prof.counts[static_cast<std::size_t>(i)] = observed;
            prof.counts_pre_decay[static_cast<std::size_t>(i)] = observed * decay;
        }
        cycle.profiles.push_back(std::move(prof));
    }
    return cycle;
}

namespace detail {

inline void apply_axial_shift(AxialProfile& prof, double shift_mm, double grid_step_mm) {
    const long k = std::lround(shift_mm / grid_step_mm);
    if (k == 0) return;
    auto shifted = [&](const std::vector<double>& src) {
        const long n = static_cast<long>(src.size());
        std::vector<double> out(src.size());
        for (long i = 0; i < n; ++i)
            out[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(std::clamp(i - k, 0L, n - 1))];
        return out;
    };
    prof.counts = shifted(prof.counts);
    prof.counts_pre_decay = shifted(prof.counts_pre_decay);
}

inline void apply_missing_points(AxialProfile& prof, int n_missing, Rng& rng) {
    std::vector<std::size_t> idx(prof.counts.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::size_t> drop;
    std::sample(idx.begin(), idx.end(), std::back_inserter(drop),
                static_cast<std::size_t>(n_missing), rng);
    for (std::size_t i : drop) {
        prof.counts[i] = 0.0;
        prof.counts_pre_decay[i] = 0.0;
    }
}

}  // namespace detail

using BankSampler = std::function<double(Rng&)>;

inline BankSampler default_bank_sampler(const TrueFluxModel& m) {
    const double lo = m.bank_min_mm, hi = m.bank_max_mm;
    return [lo, hi](Rng& rng) {
        std::uniform_real_distribution<double> dist(lo, hi);
        return dist(rng);
    };
}

// Runs n_cycles independent measurement cycles with bank positions drawn from
// bank_sampler, then injects the requested defects. Every defect must target
// a cycle and assembly that exist.
inline std::vector<MeasurementCycle> simulate_campaign(const TrueFluxModel& m, const CoreLayout& layout,
                                                       int n_cycles, const BankSampler& bank_sampler,
                                                       const std::vector<DefectSpec>& defects,
                                                       std::uint64_t rng_seed) {
    m.validate();
    layout.validate();
    if (n_cycles <= 0) throw ConfigError("campaign needs at least one cycle");
    if (!bank_sampler) throw ConfigError("campaign needs a bank sampler");
    for (const auto& d : defects) {
        d.validate(m);
        bool known = false;
        for (int c = 0; c < n_cycles; ++c)
            if (d.cycle_id == cycle_name(c)) { known = true; break; }
        if (!known) throw ConfigError("defect targets unknown cycle " + d.cycle_id);
        if (!d.assembly.empty() && !layout.contains(d.assembly))
            throw ConfigError("defect targets unknown assembly " + d.assembly);
    }

    Rng bank_rng = substream(rng_seed, "bank");
    std::vector<MeasurementCycle> cycles;
    cycles.reserve(static_cast<std::size_t>(n_cycles));
    for (int c = 0; c < n_cycles; ++c) {
        const std::string id = cycle_name(c);
        const double bank = bank_sampler(bank_rng);
        double exposure = m.exposure;
        for (const auto& d : defects)
            if (d.kind == DefectKind::under_exposure && d.cycle_id == id) exposure *= d.magnitude;

        MeasurementCycle cycle = simulate_cycle(m, layout, bank, exposure,
                                                derive_seed(rng_seed, "cycle", static_cast<std::uint64_t>(c)));
        cycle.id = id;

        Rng defect_rng = substream(rng_seed, "defect", static_cast<std::uint64_t>(c));
        for (const auto& d : defects) {
            if (d.cycle_id != id) continue;
            if (d.kind == DefectKind::axial_shift || d.kind == DefectKind::missing_points) {
                bool found = false;
                for (auto& prof : cycle.profiles) {
                    if (prof.assembly != d.assembly) continue;
                    found = true;
                    if (d.kind == DefectKind::axial_shift)
                        detail::apply_axial_shift(prof, d.magnitude, m.grid_step_mm());
                    else
                        detail::apply_missing_points(prof, static_cast<int>(d.magnitude), defect_rng);
                }
                if (!found) throw ConfigError("defect targets unknown assembly " + d.assembly);
            }
            cycle.defect_labels.push_back({to_string(d.kind), d.magnitude, d.assembly});
        }
        cycles.push_back(std::move(cycle));
    }
    return cycles;
}

struct Campaign {
    CoreLayout layout;
    TrueFluxModel model;
    std::uint64_t seed = 0;
    std::vector<MeasurementCycle> cycles;
};

inline Campaign make_campaign(const TrueFluxModel& m, const CoreLayout& layout, int n_cycles,
                              const BankSampler& bank_sampler, const std::vector<DefectSpec>& defects,
                              std::uint64_t rng_seed) {
    Campaign c;
    c.layout = layout;
    c.model = m;
    c.seed = rng_seed;
    c.cycles = simulate_campaign(m, layout, n_cycles, bank_sampler, defects, rng_seed);
    return c;
}

// ---- JSON serialization ----------------------------------------------------

namespace detail {

inline nlohmann::json shape_to_json(const AssemblyShape& s) {
    return {
        {"extrap_bottom_mm", s.extrap_bottom_mm}, {"extrap_top_mm", s.extrap_top_mm},
        {"rod_coupling", s.rod_coupling},         {"rod_width_mm", s.rod_width_mm},
        {"dip_depth", s.dip_depth},               {"dip_center_mm", s.dip_center_mm},
        {"dip_width_mm", s.dip_width_mm},         {"top_peak_amp", s.top_peak_amp},
        {"top_peak_center_mm", s.top_peak_center_mm}, {"top_peak_width_mm", s.top_peak_width_mm},
    };
}

inline AssemblyShape shape_from_json(const nlohmann::json& j) {
    AssemblyShape s;
    s.extrap_bottom_mm = j.at("extrap_bottom_mm").get<double>();
    s.extrap_top_mm = j.at("extrap_top_mm").get<double>();
    s.rod_coupling = j.at("rod_coupling").get<double>();
    s.rod_width_mm = j.at("rod_width_mm").get<double>();
    s.dip_depth = j.at("dip_depth").get<double>();
    s.dip_center_mm = j.at("dip_center_mm").get<double>();
    s.dip_width_mm = j.at("dip_width_mm").get<double>();
    s.top_peak_amp = j.at("top_peak_amp").get<double>();
    s.top_peak_center_mm = j.at("top_peak_center_mm").get<double>();
    s.top_peak_width_mm = j.at("top_peak_width_mm").get<double>();
    return s;
}

}  // namespace detail

inline nlohmann::json model_to_json(const TrueFluxModel& m) {
    nlohmann::json shapes = nlohmann::json::object();
    for (const auto& [id, s] : m.shapes) shapes[id] = detail::shape_to_json(s);
    return {
        {"active_height_mm", m.active_height_mm},
        {"n_axial", m.n_axial},
        {"bank_min_mm", m.bank_min_mm},
        {"bank_max_mm", m.bank_max_mm},
        {"exposure", m.exposure},
        {"half_life_h", m.half_life_h},
        {"scan_minutes_per_wire", m.scan_minutes_per_wire},
        {"shapes", shapes},
    };
}

inline TrueFluxModel model_from_json(const nlohmann::json& j) {
    TrueFluxModel m;
    m.active_height_mm = j.at("active_height_mm").get<double>();
    m.n_axial = j.at("n_axial").get<int>();
    m.bank_min_mm = j.at("bank_min_mm").get<double>();
    m.bank_max_mm = j.at("bank_max_mm").get<double>();
    m.exposure = j.at("exposure").get<double>();
    m.half_life_h = j.at("half_life_h").get<double>();
    m.scan_minutes_per_wire = j.at("scan_minutes_per_wire").get<double>();
    for (const auto& [id, sj] : j.at("shapes").items()) m.shapes[id] = detail::shape_from_json(sj);
    m.validate();
    return m;
}

inline nlohmann::json layout_to_json(const CoreLayout& layout) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : layout.assemblies)
        arr.push_back({{"id", a.id}, {"kind", to_string(a.kind)}, {"radial_weight", a.radial_weight}});
    return {{"assemblies", arr}};
}

inline CoreLayout layout_from_json(const nlohmann::json& j) {
    CoreLayout layout;
    for (const auto& aj : j.at("assemblies")) {
        AssemblyDescriptor a;
        a.id = aj.at("id").get<std::string>();
        a.kind = assembly_kind_from_string(aj.at("kind").get<std::string>());
        a.radial_weight = aj.at("radial_weight").get<double>();
        layout.assemblies.push_back(std::move(a));
    }
    layout.validate();
    return layout;
}

inline void save_campaign(const std::filesystem::path& path, const Campaign& campaign) {
    nlohmann::json cycles = nlohmann::json::array();
    for (const auto& c : campaign.cycles) {
        nlohmann::json profiles = nlohmann::json::array();
        for (const auto& p : c.profiles)
            profiles.push_back({{"assembly", p.assembly}, {"t_scan_h", p.t_scan_h}, {"counts", p.counts}});
        nlohmann::json defects = nlohmann::json::array();
        for (const auto& d : c.defect_labels)
            defects.push_back({{"kind", d.kind}, {"magnitude", d.magnitude}, {"assembly", d.assembly}});
        cycles.push_back({{"id", c.id}, {"bank_mm", c.bank_mm}, {"defects", defects}, {"profiles", profiles}});
    }
    nlohmann::json j = {
        {"format", "fluxnet-campaign"},
        {"version", 1},
        {"seed", campaign.seed},
        {"layout", layout_to_json(campaign.layout)},
        {"model", model_to_json(campaign.model)},
        {"cycles", cycles},
    };
    write_file(path, j.dump(2) + "\n");
}

inline Campaign load_campaign(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("campaign file is not valid JSON: " + path.string() + " (" + e.what() + ")");
    }
    try {
        if (j.at("format").get<std::string>() != "fluxnet-campaign")
            throw DataError("not a campaign file: " + path.string());
        if (j.at("version").get<int>() != 1)
            throw DataError("unsupported campaign file version in " + path.string());
        Campaign campaign;
        campaign.seed = j.at("seed").get<std::uint64_t>();
        campaign.layout = layout_from_json(j.at("layout"));
        campaign.model = model_from_json(j.at("model"));
        for (const auto& cj : j.at("cycles")) {
            MeasurementCycle c;
            c.id = cj.at("id").get<std::string>();
            c.bank_mm = cj.at("bank_mm").get<double>();
            for (const auto& dj : cj.at("defects"))
                c.defect_labels.push_back({dj.at("kind").get<std::string>(),
                                           dj.at("magnitude").get<double>(),
                                           dj.at("assembly").get<std::string>()});
            for (const auto& pj : cj.at("profiles")) {
                AxialProfile p;
                p.assembly = pj.at("assembly").get<std::string>();
                p.t_scan_h = pj.at("t_scan_h").get<double>();
                p.counts = pj.at("counts").get<std::vector<double>>();
                if (static_cast<int>(p.counts.size()) != campaign.model.n_axial)
                    throw DataError("profile length mismatch in " + c.id + "/" + p.assembly);
                c.profiles.push_back(std::move(p));
            }
            campaign.cycles.push_back(std::move(c));
        }
        return campaign;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("campaign file schema mismatch: " + path.string() + " (" + e.what() + ")");
    }
}

}  // namespace fluxnet::synthdata
