#include <catch2/catch_amalgamated.hpp>

#include "fluxnet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

using namespace fluxnet;
using namespace fluxnet::synthdata;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

TrueFluxModel std_model() { return TrueFluxModel::standard(CoreLayout::standard()); }

}  // namespace

TEST_CASE("standard core layout invariants") {
    const CoreLayout layout = CoreLayout::standard();
    REQUIRE(layout.assemblies.size() == 32);

    int fuel = 0, followers = 0;
    std::set<std::string> follower_ids;
    for (const auto& a : layout.assemblies) {
        if (a.kind == AssemblyKind::follower) {
            ++followers;
            follower_ids.insert(a.id);
        } else {
            ++fuel;
        }
        CHECK(a.radial_weight > 0.0);
        CHECK(a.radial_weight <= 1.0);
    }
    CHECK(fuel == 26);
    CHECK(followers == 6);
    CHECK(follower_ids == std::set<std::string>{"C5", "C7", "E5", "E7", "G5", "G7"});

    CHECK(layout.find("E6").radial_weight == 1.0);
    // H3 sits 18 squared-grid-units out, the farthest instrumented position.
    CHECK_THAT(layout.find("H3").radial_weight, WithinRel(0.2, 1e-15));
    const auto most_peripheral =
        std::min_element(layout.assemblies.begin(), layout.assemblies.end(),
                         [](const auto& a, const auto& b) { return a.radial_weight < b.radial_weight; });
    CHECK(most_peripheral->id == "H3");
    CHECK_THAT(layout.find("C5").radial_weight, WithinRel(std::pow(0.2, 5.0 / 18.0), 1e-15));
    CHECK_NOTHROW(layout.validate());
    CHECK_THROWS_AS(layout.find("Z9"), DataError);
}

TEST_CASE("layout validation rejects malformed cores") {
    CoreLayout layout = CoreLayout::standard();
    layout.assemblies[0].radial_weight = 1.0;  // second centre
    CHECK_THROWS_AS(layout.validate(), ConfigError);

    layout = CoreLayout::standard();
    layout.assemblies.push_back(layout.assemblies[0]);
    CHECK_THROWS_AS(layout.validate(), ConfigError);

    layout = CoreLayout::standard();
    layout.assemblies[3].radial_weight = 0.0;
    CHECK_THROWS_AS(layout.validate(), ConfigError);
}

TEST_CASE("true flux matches closed-form oracle values") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();

    // Values computed independently from the documented closed form.
    CHECK_THAT(true_flux(m, layout.find("E6"), 500.0, 300.0), WithinRel(0.9995551443079215, 1e-13));
    CHECK_THAT(true_flux(m, layout.find("E6"), 450.0, 100.0), WithinRel(0.6772795389662898, 1e-13));
    CHECK_THAT(true_flux(m, layout.find("E6"), 550.0, 599.0), WithinRel(0.23238418636602298, 1e-13));
    CHECK_THAT(true_flux(m, layout.find("H3"), 475.0, 250.0), WithinRel(0.9786411034004373, 1e-13));
    CHECK_THAT(true_flux(m, layout.find("C5"), 500.0, 400.0), WithinRel(0.4992448803056329, 1e-13));
    CHECK_THAT(true_flux(m, layout.find("C5"), 500.0, 560.0), WithinRel(0.7188884832687187, 1e-13));
}

TEST_CASE("flux model rejects out-of-range inputs") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();
    const auto& e6 = layout.find("E6");
    CHECK_THROWS_AS(true_flux(m, e6, 500.0, -0.001), ConfigError);
    CHECK_THROWS_AS(true_flux(m, e6, 500.0, 600.001), ConfigError);
    CHECK_THROWS_AS(true_flux(m, e6, -1.0, 300.0), ConfigError);
    CHECK_THROWS_AS(true_flux(m, e6, 601.0, 300.0), ConfigError);
    CHECK_NOTHROW(true_flux(m, e6, 0.0, 0.0));
    CHECK_NOTHROW(true_flux(m, e6, 600.0, 600.0));
}

TEST_CASE("axial grid uses cell midpoints") {
    const TrueFluxModel m = std_model();
    CHECK(m.n_axial == 180);
    CHECK_THAT(m.grid_step_mm(), WithinRel(600.0 / 180.0, 1e-15));
    CHECK_THAT(m.z_at(0), WithinRel(1.6666666666666667, 1e-15));
    CHECK_THAT(m.z_at(179), WithinRel(598.3333333333334, 1e-14));
    const auto prof = true_profile(m, CoreLayout::standard().find("E6"), 500.0);
    REQUIRE(prof.size() == 180);
    // Rod inserted to 500 mm suppresses the top relative to the bottom half.
    CHECK(prof[160] < prof[90]);
}

TEST_CASE("follower profiles dip near the coupling piece and peak near the top") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();
    const auto follower = true_profile(m, layout.find("E5"), 500.0);
    const auto fuel = true_profile(m, layout.find("E6"), 500.0);

    auto at = [&](const std::vector<double>& p, double z) {
        return p[static_cast<std::size_t>(z / m.grid_step_mm())];
    };
    // Normalized comparison: the dip region is depressed relative to fuel.
    CHECK(at(follower, 400.0) / at(follower, 200.0) < at(fuel, 400.0) / at(fuel, 200.0));
    // Local maximum near 560 mm exists for the follower only.
    const std::size_t i560 = static_cast<std::size_t>(560.0 / m.grid_step_mm());
    CHECK(follower[i560] > follower[i560 - 9]);
    CHECK(follower[i560] > follower[i560 + 9]);
    CHECK(fuel[i560] < fuel[i560 - 9]);
}

TEST_CASE("simulate_cycle is deterministic and decay-consistent") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();

    const MeasurementCycle a = simulate_cycle(m, layout, 500.0, m.exposure, 99);
    const MeasurementCycle b = simulate_cycle(m, layout, 500.0, m.exposure, 99);
    const MeasurementCycle c = simulate_cycle(m, layout, 500.0, m.exposure, 100);

    REQUIRE(a.profiles.size() == 32);
    CHECK(a.profiles[0].counts == b.profiles[0].counts);
    CHECK(a.profiles[31].counts == b.profiles[31].counts);
    CHECK(a.profiles[5].counts != c.profiles[5].counts);

    for (std::size_t k = 0; k < a.profiles.size(); ++k) {
        const auto& p = a.profiles[k];
        REQUIRE(p.counts.size() == 180);
        CHECK_THAT(p.t_scan_h, WithinAbs(static_cast<double>(k) * 5.0 / 60.0, 1e-15));
        const double decay = std::exp2(p.t_scan_h / m.half_life_h);
        bool exact = true, integral = true;
        for (std::size_t i = 0; i < p.counts.size(); ++i) {
            integral = integral && p.counts[i] == std::floor(p.counts[i]);
            exact = exact && p.counts[i] * decay == p.counts_pre_decay[i];
        }
        CHECK(integral);  // detected counts are whole numbers
        CHECK(exact);     // pre-decay estimate is the exact corrected value
    }
    // Wire 0 is scanned at the reference time: no decay at all.
    CHECK(a.profiles[0].counts == a.profiles[0].counts_pre_decay);
    // Later wires observe a measurably attenuated signal.
    const auto& last = a.profiles[31];
    double obs = 0.0, pre = 0.0;
    for (std::size_t i = 0; i < last.counts.size(); ++i) {
        obs += last.counts[i];
        pre += last.counts_pre_decay[i];
    }
    CHECK(obs < 0.95 * pre);
}

TEST_CASE("poisson counts scale with radial weight") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();
    const MeasurementCycle cyc = simulate_cycle(m, layout, 500.0, m.exposure, 7);

    auto total = [&](const std::string& id) {
        const AxialProfile* p = cyc.find_profile(id);
        REQUIRE(p != nullptr);
        double s = 0.0;
        for (double v : p->counts_pre_decay) s += v;
        return s;
    };
    const double e6 = total("E6"), h3 = total("H3");
    CHECK(h3 < 0.3 * e6);  // weight 0.2 plus sampling noise
    CHECK(h3 > 0.1 * e6);
}

TEST_CASE("campaign generation honours defects") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();

    std::vector<DefectSpec> defects;
    defects.push_back({DefectKind::axial_shift, 20.0, "C0002", "E6"});
    defects.push_back({DefectKind::missing_points, 12.0, "C0003", "H3"});
    defects.push_back({DefectKind::under_exposure, 0.05, "C0004", ""});

    const auto cycles =
        simulate_campaign(m, layout, 5, default_bank_sampler(m), defects, 1234);
    REQUIRE(cycles.size() == 5);
    for (const auto& c : cycles) {
        CHECK(c.bank_mm >= m.bank_min_mm);
        CHECK(c.bank_mm <= m.bank_max_mm);
    }
    CHECK(cycles[0].id == "C0001");
    CHECK(cycles[4].id == "C0005");
    CHECK(cycles[0].defect_labels.empty());
    REQUIRE(cycles[1].defect_labels.size() == 1);
    CHECK(cycles[1].defect_labels[0].kind == "axial_shift");

    // Axial shift: C0002/E6 equals the unshifted counts displaced by 6 cells
    // (20 mm at 10/3 mm per cell), because the same per-cycle seed is used.
    const auto clean = simulate_campaign(m, layout, 5, default_bank_sampler(m), {}, 1234);
    const auto* shifted = cycles[1].find_profile("E6");
    const auto* base = clean[1].find_profile("E6");
    REQUIRE(shifted != nullptr);
    REQUIRE(base != nullptr);
    const long k = std::lround(20.0 / m.grid_step_mm());
    CHECK(k == 6);
    for (std::size_t i = 40; i < 140; ++i)
        CHECK(shifted->counts[i] == base->counts[i - static_cast<std::size_t>(k)]);

    // Missing points: exactly 12 zeroed cells in C0003/H3, none elsewhere.
    const auto* gappy = cycles[2].find_profile("H3");
    int zeros = 0;
    for (double v : gappy->counts) zeros += v == 0.0 ? 1 : 0;
    CHECK(zeros == 12);

    // Under-exposure: the whole C0004 cycle drops to roughly 5 % intensity.
    double hot = 0.0, cold = 0.0;
    for (double v : clean[3].find_profile("E6")->counts_pre_decay) hot += v;
    for (double v : cycles[3].find_profile("E6")->counts_pre_decay) cold += v;
    CHECK(cold < 0.10 * hot);

    // Bank draws are unaffected by defect injection.
    for (std::size_t i = 0; i < cycles.size(); ++i) CHECK(cycles[i].bank_mm == clean[i].bank_mm);
}

TEST_CASE("defect validation rejects bad specs") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();
    const auto sampler = default_bank_sampler(m);

    CHECK_THROWS_AS(simulate_campaign(m, layout, 3, sampler,
                                      {{DefectKind::axial_shift, 20.0, "C0009", "E6"}}, 1),
                    ConfigError);
    CHECK_THROWS_AS(simulate_campaign(m, layout, 3, sampler,
                                      {{DefectKind::axial_shift, 20.0, "C0001", "Z9"}}, 1),
                    ConfigError);
    CHECK_THROWS_AS(simulate_campaign(m, layout, 3, sampler,
                                      {{DefectKind::axial_shift, 100.0, "C0001", "E6"}}, 1),
                    ConfigError);  // above 10 % of the active height
    CHECK_THROWS_AS(simulate_campaign(m, layout, 3, sampler,
                                      {{DefectKind::missing_points, 0.5, "C0001", "E6"}}, 1),
                    ConfigError);
    CHECK_THROWS_AS(simulate_campaign(m, layout, 3, sampler,
                                      {{DefectKind::under_exposure, 1.5, "C0001", ""}}, 1),
                    ConfigError);
    CHECK_NOTHROW(simulate_campaign(m, layout, 3, sampler,
                                    {{DefectKind::axial_shift, 60.0, "C0001", "E6"}}, 1));
}

TEST_CASE("campaign JSON round trip preserves counts bit-exactly") {
    namespace fs = std::filesystem;
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();
    Campaign camp = make_campaign(m, layout, 3, default_bank_sampler(m),
                                  {{DefectKind::axial_shift, 20.0, "C0002", "E6"}}, 555);

    const fs::path dir = fs::temp_directory_path() / "fluxnet_synth_test";
    fs::create_directories(dir);
    const fs::path path = dir / "campaign.json";
    save_campaign(path, camp);
    const Campaign back = load_campaign(path);

    CHECK(back.seed == camp.seed);
    REQUIRE(back.cycles.size() == camp.cycles.size());
    for (std::size_t c = 0; c < camp.cycles.size(); ++c) {
        CHECK(back.cycles[c].id == camp.cycles[c].id);
        CHECK(back.cycles[c].bank_mm == camp.cycles[c].bank_mm);
        REQUIRE(back.cycles[c].profiles.size() == camp.cycles[c].profiles.size());
        for (std::size_t p = 0; p < camp.cycles[c].profiles.size(); ++p) {
            CHECK(back.cycles[c].profiles[p].counts == camp.cycles[c].profiles[p].counts);
            CHECK(back.cycles[c].profiles[p].t_scan_h == camp.cycles[c].profiles[p].t_scan_h);
        }
    }
    REQUIRE(back.cycles[1].defect_labels.size() == 1);
    CHECK(back.cycles[1].defect_labels[0].kind == "axial_shift");
    CHECK(back.layout.assemblies.size() == 32);
    CHECK(back.model.half_life_h == m.half_life_h);

    // Saving the loaded campaign again produces identical bytes.
    const fs::path path2 = dir / "campaign2.json";
    save_campaign(path2, back);
    CHECK(read_file(path) == read_file(path2));

    write_file(dir / "garbage.json", "{\"format\": \"nope\"}");
    CHECK_THROWS_AS(load_campaign(dir / "garbage.json"), DataError);
    write_file(dir / "broken.json", "not json");
    CHECK_THROWS_AS(load_campaign(dir / "broken.json"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("campaign defaults reject degenerate parameters") {
    const TrueFluxModel m = std_model();
    const CoreLayout layout = CoreLayout::standard();
    CHECK_THROWS_AS(simulate_campaign(m, layout, 0, default_bank_sampler(m), {}, 1), ConfigError);
    CHECK_THROWS_AS(simulate_cycle(m, layout, 500.0, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(simulate_cycle(m, layout, 700.0, m.exposure, 1), ConfigError);

    TrueFluxModel bad = m;
    bad.bank_min_mm = 500.0;
    bad.bank_max_mm = 450.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
