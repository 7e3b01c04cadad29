#pragma once

// End-to-end orchestration: gen -> prep -> (hpo) -> train -> predict -> eval
// driven by one JSON config and one master seed. Every stage records the
// digests of its declared inputs and outputs in a run manifest; a stage is
// skipped when its config digest and all artifact digests match the previous
// run.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fluxnet/bnnvi.hpp"
#include "fluxnet/errors.hpp"
#include "fluxnet/evalmetrics.hpp"
#include "fluxnet/hpo.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/mcd.hpp"
#include "fluxnet/model_io.hpp"
#include "fluxnet/nncore.hpp"
#include "fluxnet/predictive.hpp"
#include "fluxnet/preprocess.hpp"
#include "fluxnet/synthdata.hpp"
#include "json.hpp"

namespace fluxnet::pipeline {

inline constexpr const char* kToolName = "fluxnet";
inline constexpr const char* kToolVersion = "0.1.0";

// ---- configuration ---------------------------------------------------------

struct GenConfig {
    int cycles = 86;
    double exposure = 600.0;
    std::vector<synthdata::DefectSpec> defects;
};

struct PrepConfig {
    double reject_threshold = 100.0;
    std::optional<preprocess::SavgolSettings> smooth = preprocess::SavgolSettings{};
    int holdout_cycles = 10;                // kept cycles reserved for prediction scoring
    std::vector<std::string> assemblies;    // empty means every assembly
};

struct HpoStageConfig {
    std::string assembly = "E6";
    int budget = 8;
    int epoch_cap = 40;  // epoch budget per trial
    hpo::SearchSpace space;
};

struct TrainStageConfig {
    std::vector<std::string> assemblies = {"E6"};
    model_io::ModelMode mode = model_io::ModelMode::dnn;
    std::vector<int> hidden = {64, 32};
    nncore::Activation activation = nncore::Activation::relu;
    std::optional<nncore::Head> head;   // defaulted from the mode when unset
    std::optional<nncore::Loss> loss;   // defaulted from the mode when unset
    nncore::TrainConfig tcfg;
    preprocess::Fractions fractions;
    // Monte Carlo dropout settings
    double drop_rate = 0.2;
    bool input_dropout = true;
    mcd::DropoutScaling scaling = mcd::DropoutScaling::none;
    // variational settings
    double prior_std = 1.0;
    double init_scale_fraction = 0.05;
    int mc_samples = 1;

    nncore::Head effective_head() const {
        if (head) return *head;
        return mode == model_io::ModelMode::dnn ? nncore::Head::point : nncore::Head::gaussian;
    }
    nncore::Loss effective_loss() const {
        if (loss) return *loss;
        return mode == model_io::ModelMode::dnn ? nncore::Loss::mae : nncore::Loss::gaussian_nll;
    }
};

struct PredictStageConfig {
    int passes = 2000;
    double level = 0.95;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "run_out";
    int workers = 1;
    GenConfig gen;
    PrepConfig prep;
    std::optional<HpoStageConfig> hpo;
    TrainStageConfig train;
    PredictStageConfig predict;
    nlohmann::json raw;  // parsed config, used for stage digests
};

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::string& section,
                         std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end())
            throw ConfigError("unknown config key '" + key + "' in section '" + section + "'");
    }
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

// Enum spellings inside a config are configuration problems, not data
// problems, whatever the shared parser throws.
template <class F>
auto as_config_error(F&& parse) {
    try {
        return parse();
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace detail

// Reads the worker count from the FLUXNET_WORKERS environment variable; this
// is the only environment influence on the pipeline and never changes
// numerical results, only scheduling.
inline int env_workers(int fallback = 1) {
    const char* env = std::getenv("FLUXNET_WORKERS");
    if (!env || !*env) return fallback;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (!end || *end != '\0' || v < 1 || v > 1024)
        throw ConfigError("FLUXNET_WORKERS must be a positive integer");
    return static_cast<int>(v);
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::get_or;
    using detail::require_keys;
    require_keys(j, "run", {"seed", "out_dir", "workers", "gen", "prep", "hpo", "train",
                            "predict"});
    RunConfig cfg;
    cfg.raw = j;
    cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
    cfg.out_dir = get_or<std::string>(j, "out_dir", "run_out");
    cfg.workers = env_workers(get_or<int>(j, "workers", 1));
    if (cfg.workers < 1) throw ConfigError("worker count must be at least 1");

    if (j.contains("gen")) {
        const auto& g = j.at("gen");
        require_keys(g, "gen", {"cycles", "exposure", "defects"});
        cfg.gen.cycles = get_or<int>(g, "cycles", cfg.gen.cycles);
        cfg.gen.exposure = get_or<double>(g, "exposure", cfg.gen.exposure);
        if (g.contains("defects")) {
            for (const auto& dj : g.at("defects")) {
                require_keys(dj, "gen.defects[]", {"kind", "magnitude", "cycle", "assembly"});
                synthdata::DefectSpec d;
                d.kind = detail::as_config_error([&] {
                    return synthdata::defect_kind_from_string(
                        get_or<std::string>(dj, "kind", "axial_shift"));
                });
                d.magnitude = get_or<double>(dj, "magnitude", 0.0);
                d.cycle_id = get_or<std::string>(dj, "cycle", "");
                d.assembly = get_or<std::string>(dj, "assembly", "");
                cfg.gen.defects.push_back(std::move(d));
            }
        }
    }

    if (j.contains("prep")) {
        const auto& p = j.at("prep");
        require_keys(p, "prep", {"reject_threshold", "smooth", "holdout_cycles", "assemblies"});
        cfg.prep.reject_threshold = get_or<double>(p, "reject_threshold", cfg.prep.reject_threshold);
        cfg.prep.holdout_cycles = get_or<int>(p, "holdout_cycles", cfg.prep.holdout_cycles);
        cfg.prep.assemblies = get_or<std::vector<std::string>>(p, "assemblies", {});
        if (p.contains("smooth")) {
            if (p.at("smooth").is_null()) {
                cfg.prep.smooth.reset();
            } else {
                require_keys(p.at("smooth"), "prep.smooth", {"window", "poly_order"});
                preprocess::SavgolSettings s;
                s.window = get_or<int>(p.at("smooth"), "window", s.window);
                s.poly_order = get_or<int>(p.at("smooth"), "poly_order", s.poly_order);
                cfg.prep.smooth = s;
            }
        }
    }

    if (j.contains("hpo") && !j.at("hpo").is_null()) {
        const auto& h = j.at("hpo");
        require_keys(h, "hpo", {"assembly", "budget", "epoch_cap", "space"});
        HpoStageConfig hc;
        hc.assembly = get_or<std::string>(h, "assembly", hc.assembly);
        hc.budget = get_or<int>(h, "budget", hc.budget);
        hc.epoch_cap = get_or<int>(h, "epoch_cap", hc.epoch_cap);
        if (h.contains("space")) {
            const auto& s = h.at("space");
            require_keys(s, "hpo.space",
                         {"min_layers", "max_layers", "min_units", "max_units", "pyramid",
                          "lr_min", "lr_max", "batch_sizes", "stage1_learning_rate",
                          "stage1_batch_size"});
            hc.space.min_layers = get_or<int>(s, "min_layers", hc.space.min_layers);
            hc.space.max_layers = get_or<int>(s, "max_layers", hc.space.max_layers);
            hc.space.min_units = get_or<int>(s, "min_units", hc.space.min_units);
            hc.space.max_units = get_or<int>(s, "max_units", hc.space.max_units);
            hc.space.pyramid = get_or<bool>(s, "pyramid", hc.space.pyramid);
            hc.space.lr_min = get_or<double>(s, "lr_min", hc.space.lr_min);
            hc.space.lr_max = get_or<double>(s, "lr_max", hc.space.lr_max);
            hc.space.batch_sizes = get_or<std::vector<int>>(s, "batch_sizes", hc.space.batch_sizes);
            hc.space.stage1_learning_rate =
                get_or<double>(s, "stage1_learning_rate", hc.space.stage1_learning_rate);
            hc.space.stage1_batch_size =
                get_or<int>(s, "stage1_batch_size", hc.space.stage1_batch_size);
        }
        hc.space.validate();
        cfg.hpo = std::move(hc);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        require_keys(t, "train",
                     {"assemblies", "mode", "hidden", "activation", "head", "loss",
                      "learning_rate", "batch_size", "max_epochs", "weight_decay", "early_stop",
                      "plateau", "fractions", "drop_rate", "input_dropout", "scaling",
                      "prior_std", "init_scale_fraction", "mc_samples"});
        auto& tc = cfg.train;
        tc.assemblies = get_or<std::vector<std::string>>(t, "assemblies", tc.assemblies);
        tc.mode = detail::as_config_error(
            [&] { return model_io::mode_from_string(get_or<std::string>(t, "mode", "dnn")); });
        tc.hidden = get_or<std::vector<int>>(t, "hidden", tc.hidden);
        tc.activation = detail::as_config_error([&] {
            return nncore::activation_from_string(get_or<std::string>(t, "activation", "relu"));
        });
        if (t.contains("head"))
            tc.head = detail::as_config_error(
                [&] { return nncore::head_from_string(t.at("head").get<std::string>()); });
        if (t.contains("loss"))
            tc.loss = detail::as_config_error(
                [&] { return nncore::loss_from_string(t.at("loss").get<std::string>()); });
        tc.tcfg.learning_rate = get_or<double>(t, "learning_rate", 1e-3);
        tc.tcfg.batch_size = get_or<int>(t, "batch_size", 32);
        tc.tcfg.max_epochs = get_or<int>(t, "max_epochs", 150);
        tc.tcfg.weight_decay = get_or<double>(t, "weight_decay", 0.0);
        if (t.contains("early_stop")) {
            const auto& es = t.at("early_stop");
            require_keys(es, "train.early_stop", {"enabled", "patience", "min_delta"});
            tc.tcfg.early_stop.enabled = detail::get_or<bool>(es, "enabled", true);
            tc.tcfg.early_stop.patience = detail::get_or<int>(es, "patience", 20);
            tc.tcfg.early_stop.min_delta = detail::get_or<double>(es, "min_delta", 0.0);
        }
        if (t.contains("plateau")) {
            const auto& pl = t.at("plateau");
            require_keys(pl, "train.plateau", {"enabled", "factor", "patience", "min_lr"});
            tc.tcfg.plateau.enabled = detail::get_or<bool>(pl, "enabled", true);
            tc.tcfg.plateau.factor = detail::get_or<double>(pl, "factor", 0.5);
            tc.tcfg.plateau.patience = detail::get_or<int>(pl, "patience", 10);
            tc.tcfg.plateau.min_lr = detail::get_or<double>(pl, "min_lr", 1e-6);
        }
        if (t.contains("fractions")) {
            const auto& fr = t.at("fractions");
            require_keys(fr, "train.fractions", {"train", "test", "validation"});
            tc.fractions.train = detail::get_or<double>(fr, "train", tc.fractions.train);
            tc.fractions.test = detail::get_or<double>(fr, "test", tc.fractions.test);
            tc.fractions.validation =
                detail::get_or<double>(fr, "validation", tc.fractions.validation);
        }
        tc.fractions.validate();
        tc.drop_rate = get_or<double>(t, "drop_rate", tc.drop_rate);
        tc.input_dropout = get_or<bool>(t, "input_dropout", tc.input_dropout);
        tc.scaling = detail::as_config_error(
            [&] { return mcd::scaling_from_string(get_or<std::string>(t, "scaling", "none")); });
        tc.prior_std = get_or<double>(t, "prior_std", tc.prior_std);
        tc.init_scale_fraction = get_or<double>(t, "init_scale_fraction", tc.init_scale_fraction);
        tc.mc_samples = get_or<int>(t, "mc_samples", tc.mc_samples);
        if (tc.assemblies.empty()) throw ConfigError("train stage needs at least one assembly");
    }

    if (j.contains("predict")) {
        const auto& p = j.at("predict");
        require_keys(p, "predict", {"passes", "level"});
        cfg.predict.passes = detail::get_or<int>(p, "passes", cfg.predict.passes);
        cfg.predict.level = detail::get_or<double>(p, "level", cfg.predict.level);
    }
    if (cfg.predict.passes < 2) throw ConfigError("predict stage needs at least two passes");
    if (!(cfg.predict.level > 0.0) || !(cfg.predict.level < 1.0))
        throw ConfigError("interval level must lie in (0,1)");
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    if (path.extension() == ".toml")
        throw ConfigError("TOML configs are not supported; use the JSON schema");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("run config is not valid JSON: " + path.string() + " (" + e.what() + ")");
    }
    return parse_run_config(j);
}

// ---- prediction artifacts --------------------------------------------------

struct PredRow {
    std::string cycle_id;  // "-" for bank sweeps
    std::string assembly;
    double bank_mm = 0.0;
    double z_mm = 0.0;
    predictive::PredictiveDistribution d;
};

inline void write_pred_csv(const std::filesystem::path& path, const std::vector<PredRow>& rows) {
    std::string csv =
        "cycle_id,assembly,bank_mm,z_mm,mean,epistemic_std,aleatoric_std,total_std,ci_low,ci_high\n";
    for (const auto& r : rows) {
        csv += r.cycle_id + ',' + r.assembly + ',';
        csv += format_double(r.bank_mm) + ',' + format_double(r.z_mm) + ',';
        csv += format_double(r.d.mean) + ',' + format_double(r.d.epistemic_std) + ',';
        csv += format_double(r.d.aleatoric_std) + ',' + format_double(r.d.total_std) + ',';
        csv += format_double(r.d.ci_low) + ',' + format_double(r.d.ci_high) + '\n';
    }
    write_file(path, csv);
}

inline std::vector<PredRow> read_pred_csv(const std::filesystem::path& path) {
    const std::vector<std::string> lines = split_lines(read_file(path));
    if (lines.empty() ||
        lines[0] !=
            "cycle_id,assembly,bank_mm,z_mm,mean,epistemic_std,aleatoric_std,total_std,ci_low,ci_high")
        throw DataError("unexpected prediction header in " + path.string());
    std::vector<PredRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = split_csv_line(lines[i]);
        if (f.size() != 10)
            throw DataError("bad prediction row " + std::to_string(i + 1) + " in " + path.string());
        PredRow r;
        r.cycle_id = f[0];
        r.assembly = f[1];
        r.bank_mm = parse_double(f[2], "bank_mm");
        r.z_mm = parse_double(f[3], "z_mm");
        r.d.mean = parse_double(f[4], "mean");
        r.d.epistemic_std = parse_double(f[5], "epistemic_std");
        r.d.aleatoric_std = parse_double(f[6], "aleatoric_std");
        r.d.total_std = parse_double(f[7], "total_std");
        r.d.ci_low = parse_double(f[8], "ci_low");
        r.d.ci_high = parse_double(f[9], "ci_high");
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw DataError("prediction file has no rows: " + path.string());
    return rows;
}

// Axial sweep at a fixed bank position over the model's grid. Columns follow
// the per-point schema used everywhere else.
inline void write_sweep_csv(const std::filesystem::path& path, const model_io::ModelFile& model,
                            double bank_mm, int passes, std::uint64_t seed, double level,
                            int workers = 1) {
    std::vector<std::vector<double>> points;
    const auto& grid = model.grid;
    points.reserve(static_cast<std::size_t>(grid.n_axial));
    for (int i = 0; i < grid.n_axial; ++i)
        points.push_back({bank_mm, (i + 0.5) * grid.active_height_mm / grid.n_axial});
    const auto preds = model_io::predict_points(model, points, passes, seed, level, workers);
    std::string csv = "z_mm,mean,epistemic_std,aleatoric_std,total_std,ci_low,ci_high\n";
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& d = preds[i];
        csv += format_double(points[i][1]) + ',' + format_double(d.mean) + ',';
        csv += format_double(d.epistemic_std) + ',' + format_double(d.aleatoric_std) + ',';
        csv += format_double(d.total_std) + ',' + format_double(d.ci_low) + ',' +
               format_double(d.ci_high) + '\n';
    }
    write_file(path, csv);
}

// ---- evaluation ------------------------------------------------------------

// Scores aligned prediction/truth rows: per-cycle normalized RMSE against the
// decay-corrected raw counts, R^2 over all points, and interval coverage.
inline nlohmann::json evaluate_predictions(const std::vector<PredRow>& preds,
                                           const preprocess::RegressionDataset& truth,
                                           double level) {
    if (preds.size() != truth.samples.size())
        throw DataError("prediction and truth row counts differ");
    std::vector<double> mean_all, raw_all;
    std::vector<predictive::PredictiveDistribution> dist_all;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_cycle;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& p = preds[i];
        const auto& t = truth.samples[i];
        if (p.assembly != truth.assembly || p.cycle_id != t.cycle_id ||
            std::abs(p.bank_mm - t.bank_mm) > 1e-9 || std::abs(p.z_mm - t.z_mm) > 1e-9)
            throw DataError("prediction row " + std::to_string(i + 1) +
                            " does not align with the truth dataset");
        mean_all.push_back(p.d.mean);
        raw_all.push_back(t.y_raw);
        dist_all.push_back(p.d);
        auto& bucket = by_cycle[t.cycle_id];
        bucket.first.push_back(p.d.mean);
        bucket.second.push_back(t.y_raw);
    }

    std::map<std::string, std::vector<std::pair<std::string, double>>> box_input;
    nlohmann::json cycle_nrmse = nlohmann::json::object();
    for (const auto& [cycle, pair] : by_cycle) {
        const double v = evalmetrics::nrmse(pair.first, pair.second);
        cycle_nrmse[cycle] = v;
        box_input[truth.assembly].push_back({cycle, v});
    }
    const auto boxes = evalmetrics::boxplot_summary(box_input);
    const auto& box = boxes.front();
    const auto cov = evalmetrics::ci_coverage(dist_all, raw_all, level);

    return {
        {"assembly", truth.assembly},
        {"n_points", preds.size()},
        {"n_cycles", by_cycle.size()},
        {"nrmse", evalmetrics::nrmse(mean_all, raw_all)},
        {"nrmse_per_cycle", cycle_nrmse},
        {"r_squared", evalmetrics::r_squared(mean_all, raw_all)},
        {"box",
         {{"q1", box.q1},
          {"median", box.median},
          {"q3", box.q3},
          {"whisker_low", box.whisker_low},
          {"whisker_high", box.whisker_high},
          {"outlier_cycles", box.outlier_cycles}}},
        {"coverage",
         {{"level", cov.level},
          {"n_points", cov.n_points},
          {"n_covered", cov.n_covered},
          {"coverage", cov.coverage}}},
    };
}

// ---- manifest --------------------------------------------------------------

struct StageRecord {
    std::string name;
    std::string config_digest;
    bool skipped = false;
    double wall_ms = 0.0;
    std::map<std::string, std::string> inputs;   // relative path -> digest
    std::map<std::string, std::string> outputs;  // relative path -> digest
};

struct RunManifest {
    std::string tool = std::string(kToolName) + " " + kToolVersion;
    std::string config_digest;
    std::vector<StageRecord> stages;

    const StageRecord* find(const std::string& name) const {
        for (const auto& s : stages)
            if (s.name == name) return &s;
        return nullptr;
    }
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : m.stages)
        stages.push_back({{"name", s.name},
                          {"config_digest", s.config_digest},
                          {"skipped", s.skipped},
                          {"wall_ms", s.wall_ms},
                          {"inputs", s.inputs},
                          {"outputs", s.outputs}});
    return {{"format", "fluxnet-manifest"},
            {"version", 1},
            {"tool", m.tool},
            {"config_digest", m.config_digest},
            {"stages", stages}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
    if (j.at("format").get<std::string>() != "fluxnet-manifest" || j.at("version").get<int>() != 1)
        throw DataError("not a supported run manifest");
    RunManifest m;
    m.tool = j.at("tool").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& sj : j.at("stages")) {
        StageRecord s;
        s.name = sj.at("name").get<std::string>();
        s.config_digest = sj.at("config_digest").get<std::string>();
        s.skipped = sj.at("skipped").get<bool>();
        s.wall_ms = sj.at("wall_ms").get<double>();
        s.inputs = sj.at("inputs").get<std::map<std::string, std::string>>();
        s.outputs = sj.at("outputs").get<std::map<std::string, std::string>>();
        m.stages.push_back(std::move(s));
    }
    return m;
}

namespace detail {

class StageRunner {
public:
    StageRunner(std::filesystem::path out_dir, std::optional<RunManifest> previous)
        : out_dir_(std::move(out_dir)), previous_(std::move(previous)) {}

    // Runs fn unless the previous manifest proves the stage is up to date:
    // same config digest, all inputs unchanged, all outputs present with
    // their recorded digests. Inputs must exist either way.
    void stage(const std::string& name, const std::string& config_digest,
               const std::vector<std::filesystem::path>& inputs,
               const std::vector<std::filesystem::path>& outputs,
               const std::function<void()>& fn) {
        StageRecord rec;
        rec.name = name;
        rec.config_digest = config_digest;
        for (const auto& in : inputs) {
            if (!std::filesystem::exists(in))
                throw DataError("stage " + name + " is missing input " + in.string());
            rec.inputs[relative(in)] = hex64(file_digest(in));
        }
        if (const StageRecord* prev = previous_ ? previous_->find(name) : nullptr;
            prev && prev->config_digest == config_digest && prev->inputs == rec.inputs &&
            outputs_current(*prev, outputs)) {
            rec.outputs = prev->outputs;
            rec.skipped = true;
            records_.push_back(std::move(rec));
            return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        for (const auto& out : outputs) {
            if (!std::filesystem::exists(out))
                throw DataError("stage " + name + " did not produce output " + out.string());
            rec.outputs[relative(out)] = hex64(file_digest(out));
        }
        records_.push_back(std::move(rec));
    }

    std::vector<StageRecord> take_records() { return std::move(records_); }

private:
    std::string relative(const std::filesystem::path& p) const {
        std::error_code ec;
        const auto rel = std::filesystem::relative(p, out_dir_, ec);
        return ec || rel.empty() ? p.generic_string() : rel.generic_string();
    }

    bool outputs_current(const StageRecord& prev,
                         const std::vector<std::filesystem::path>& outputs) const {
        if (prev.outputs.size() != outputs.size()) return false;
        for (const auto& out : outputs) {
            const auto it = prev.outputs.find(relative(out));
            if (it == prev.outputs.end()) return false;
            if (!std::filesystem::exists(out)) return false;
            if (hex64(file_digest(out)) != it->second) return false;
        }
        return true;
    }

    std::filesystem::path out_dir_;
    std::optional<RunManifest> previous_;
    std::vector<StageRecord> records_;
};

inline std::string stage_digest(const RunConfig& cfg, const char* section,
                                const nlohmann::json& extra = nlohmann::json()) {
    nlohmann::json fingerprint = {
        {"tool", std::string(kToolName) + " " + kToolVersion},
        {"seed", cfg.seed},
        {"section", cfg.raw.contains(section) ? cfg.raw.at(section) : nlohmann::json(nullptr)},
    };
    if (!extra.is_null()) fingerprint["extra"] = extra;
    return hex64(fnv1a64(fingerprint.dump()));
}

}  // namespace detail

// ---- stage implementations -------------------------------------------------

inline synthdata::Campaign run_gen(const GenConfig& gen, std::uint64_t seed) {
    const synthdata::CoreLayout layout = synthdata::CoreLayout::standard();
    synthdata::TrueFluxModel model = synthdata::TrueFluxModel::standard(layout);
    model.exposure = gen.exposure;
    return synthdata::make_campaign(model, layout, gen.cycles,
                                    synthdata::default_bank_sampler(model), gen.defects, seed);
}

struct TrainedModel {
    model_io::ModelFile file;
    nncore::TrainHistory history;
    preprocess::DatasetSplits splits;  // normalized splits used for training
};

// Trains one assembly model: partition, normalization fitted on the training
// split, mode-specific network and trainer, and the packaged model file.
inline TrainedModel train_assembly(const preprocess::RegressionDataset& ds,
                                   const TrainStageConfig& tc, std::uint64_t master_seed) {
    if (ds.normalization)
        throw ConfigError("training expects physical-unit datasets; found normalized input");
    const std::string& assembly = ds.assembly;
    TrainedModel out;
    out.splits = preprocess::partition(ds, tc.fractions,
                                       derive_seed(master_seed, "partition-" + assembly));
    const preprocess::DatasetNormalization norm = preprocess::normalize_splits(out.splits);

    nncore::NetworkSpec spec =
        nncore::NetworkSpec::dense(2, 1, tc.hidden, tc.activation, tc.effective_head());
    nncore::TrainConfig cfg = tc.tcfg;
    cfg.loss = tc.effective_loss();
    cfg.rng_seed = derive_seed(master_seed, "sgd-" + assembly);
    const std::uint64_t init_seed = derive_seed(master_seed, "init-" + assembly);

    model_io::ModelFile file;
    file.assembly = assembly;
    file.grid = ds.grid;
    file.normalization = norm;
    file.train_config = cfg;
    switch (tc.mode) {
        case model_io::ModelMode::dnn: {
            nncore::Network net = nncore::make_network(spec, init_seed);
            out.history = nncore::train(net, out.splits.train, out.splits.validation, cfg);
            file.mode = model_io::ModelMode::dnn;
            file.dnn = std::move(net);
            break;
        }
        case model_io::ModelMode::mcd: {
            mcd::DropoutNetwork net = mcd::make_dropout_network(spec, init_seed, tc.drop_rate,
                                                                tc.input_dropout, tc.scaling);
            out.history = mcd::train_mcd(net, out.splits.train, out.splits.validation, cfg);
            file.mode = model_io::ModelMode::mcd;
            file.mcdnet = std::move(net);
            break;
        }
        case model_io::ModelMode::bnn: {
            bnnvi::BayesianNetwork net = bnnvi::make_bayesian_network(
                spec, init_seed, {0.0, tc.prior_std}, tc.init_scale_fraction);
            bnnvi::BnnTrainOptions opts;
            opts.mc_samples = tc.mc_samples;
            out.history = bnnvi::train_bnn(net, out.splits.train, out.splits.validation, cfg, opts);
            file.mode = model_io::ModelMode::bnn;
            file.bnn = std::move(net);
            break;
        }
    }
    file.history_digest = out.history.digest();
    out.file = std::move(file);
    return out;
}

// Validation objective for one hyperparameter candidate: a short plain
// network training on the pre-partitioned splits.
inline hpo::Evaluator make_hpo_evaluator(const preprocess::DatasetSplits& splits, int epoch_cap) {
    if (!splits.train.normalization)
        throw ConfigError("hyperparameter search expects normalized splits");
    const nncore::TabularData train = nncore::TabularData::from(splits.train);
    const nncore::TabularData val = nncore::TabularData::from(splits.validation);
    return [train, val, epoch_cap](const hpo::HyperParams& p, std::uint64_t seed) {
        nncore::NetworkSpec spec = nncore::NetworkSpec::dense(2, 1, p.hidden);
        nncore::Network net = nncore::make_network(spec, derive_seed(seed, "init"));
        nncore::TrainConfig cfg;
        cfg.loss = nncore::Loss::mse;
        cfg.learning_rate = p.learning_rate;
        cfg.batch_size = p.batch_size;
        cfg.max_epochs = epoch_cap;
        cfg.early_stop.patience = std::max(3, epoch_cap / 4);
        cfg.plateau.patience = std::max(2, epoch_cap / 8);
        cfg.rng_seed = derive_seed(seed, "sgd");
        const nncore::TrainHistory h = nncore::train(net, train, val, cfg);
        return h.best_val;
    };
}

inline nlohmann::json trial_to_json(const hpo::Trial& t) {
    return {{"hidden", t.params.hidden},
            {"learning_rate", t.params.learning_rate},
            {"batch_size", t.params.batch_size},
            {"objective", t.diverged ? nlohmann::json(nullptr) : nlohmann::json(t.objective)},
            {"diverged", t.diverged},
            {"note", t.note},
            {"draw_index", t.draw_index},
            {"seed", t.seed}};
}

// ---- full pipeline ---------------------------------------------------------

inline RunManifest run_pipeline(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    const fs::path out = cfg.out_dir;
    fs::create_directories(out);
    const fs::path manifest_path = out / "manifest.json";

    std::optional<RunManifest> previous;
    if (fs::exists(manifest_path)) {
        try {
            previous = manifest_from_json(nlohmann::json::parse(read_file(manifest_path)));
        } catch (const std::exception&) {
            previous.reset();  // unreadable manifest forces a full rerun
        }
    }

    RunManifest manifest;
    manifest.config_digest = hex64(fnv1a64(cfg.raw.dump()));
    detail::StageRunner runner(out, std::move(previous));

    const fs::path campaign_path = out / "campaign.json";
    runner.stage("gen", detail::stage_digest(cfg, "gen"), {}, {campaign_path}, [&] {
        save_campaign(campaign_path, run_gen(cfg.gen, derive_seed(cfg.seed, "gen")));
    });

    // Assemblies and artifact paths are fixed by the config, so later stages
    // can declare their inputs before earlier stages have run this session.
    std::vector<std::string> assemblies = cfg.train.assemblies;
    if (cfg.hpo) assemblies.push_back(cfg.hpo->assembly);
    assemblies.insert(assemblies.end(), cfg.prep.assemblies.begin(), cfg.prep.assemblies.end());
    std::sort(assemblies.begin(), assemblies.end());
    assemblies.erase(std::unique(assemblies.begin(), assemblies.end()), assemblies.end());
    auto data_path = [&](const std::string& a) { return out / "data" / (a + ".csv"); };
    auto holdout_path = [&](const std::string& a) { return out / "holdout" / (a + ".csv"); };
    auto model_path = [&](const std::string& a) {
        return out / "models" / (a + "." + model_io::to_string(cfg.train.mode) + ".json");
    };
    auto pred_path = [&](const std::string& a) { return out / "preds" / (a + ".csv"); };

    std::vector<fs::path> prep_outputs;
    for (const auto& a : assemblies) {
        prep_outputs.push_back(data_path(a));
        prep_outputs.push_back(holdout_path(a));
    }
    runner.stage("prep", detail::stage_digest(cfg, "prep", nlohmann::json{{"assemblies", assemblies}}),
                 {campaign_path}, prep_outputs, [&] {
        const synthdata::Campaign campaign = synthdata::load_campaign(campaign_path);
        preprocess::PrepOptions opt;
        opt.reject_threshold = cfg.prep.reject_threshold;
        opt.smooth = cfg.prep.smooth;
        preprocess::PrepResult prep = preprocess::run_prep(campaign, opt);
        const int holdout = cfg.prep.holdout_cycles;
        if (holdout < 1 || static_cast<std::size_t>(holdout) >= prep.corrected.size())
            throw ConfigError("holdout cycle count must leave at least one training cycle");
        const std::size_t n_train_cycles = prep.corrected.size() - static_cast<std::size_t>(holdout);
        const std::vector<synthdata::MeasurementCycle> train_cycles(
            prep.corrected.begin(), prep.corrected.begin() + static_cast<long>(n_train_cycles));
        const std::vector<synthdata::MeasurementCycle> holdout_cycles(
            prep.corrected.begin() + static_cast<long>(n_train_cycles), prep.corrected.end());
        auto train_ds = preprocess::build_dataset(train_cycles, campaign.model, cfg.prep.smooth);
        // The holdout keeps raw targets; smoothing would leak the filter into scoring.
        auto holdout_ds = preprocess::build_dataset(holdout_cycles, campaign.model, std::nullopt);
        for (const auto& a : assemblies) {
            const auto it = train_ds.find(a);
            const auto ih = holdout_ds.find(a);
            if (it == train_ds.end() || ih == holdout_ds.end())
                throw DataError("assembly " + a + " is not present in the campaign");
            preprocess::write_dataset_csv(data_path(a), it->second);
            preprocess::write_dataset_csv(holdout_path(a), ih->second);
        }
    });

    const fs::path hpo_path = out / "hpo.json";
    std::optional<hpo::HyperParams> tuned;
    if (cfg.hpo) {
        runner.stage("hpo", detail::stage_digest(cfg, "hpo"), {data_path(cfg.hpo->assembly)},
                     {hpo_path}, [&] {
            const preprocess::RegressionDataset ds =
                preprocess::read_dataset_csv(data_path(cfg.hpo->assembly));
            preprocess::DatasetSplits splits = preprocess::partition(
                ds, cfg.train.fractions, derive_seed(cfg.seed, "partition-" + cfg.hpo->assembly));
            preprocess::normalize_splits(splits);
            const hpo::Evaluator eval = make_hpo_evaluator(splits, cfg.hpo->epoch_cap);
            const hpo::TwoStageResult result = hpo::two_stage_search(
                cfg.hpo->space, cfg.hpo->budget, nullptr, eval, derive_seed(cfg.seed, "hpo"),
                cfg.workers);
            nlohmann::json s1 = nlohmann::json::array(), s2 = nlohmann::json::array();
            for (const auto& t : result.stage1) s1.push_back(trial_to_json(t));
            for (const auto& t : result.stage2) s2.push_back(trial_to_json(t));
            write_file(hpo_path, nlohmann::json{{"format", "fluxnet-hpo"},
                                                {"version", 1},
                                                {"assembly", cfg.hpo->assembly},
                                                {"best", trial_to_json(result.best)},
                                                {"stage1", s1},
                                                {"stage2", s2}}
                                     .dump(2) +
                                     "\n");
        });
        const nlohmann::json hj = nlohmann::json::parse(read_file(hpo_path));
        hpo::HyperParams p;
        p.hidden = hj.at("best").at("hidden").get<std::vector<int>>();
        p.learning_rate = hj.at("best").at("learning_rate").get<double>();
        p.batch_size = hj.at("best").at("batch_size").get<int>();
        tuned = std::move(p);
    }

    std::vector<fs::path> train_inputs, model_outputs;
    for (const auto& a : cfg.train.assemblies) {
        train_inputs.push_back(data_path(a));
        model_outputs.push_back(model_path(a));
    }
    if (cfg.hpo) train_inputs.push_back(hpo_path);
    runner.stage("train", detail::stage_digest(cfg, "train"), train_inputs, model_outputs, [&] {
        TrainStageConfig tc = cfg.train;
        if (tuned) {
            tc.hidden = tuned->hidden;
            tc.tcfg.learning_rate = tuned->learning_rate;
            tc.tcfg.batch_size = tuned->batch_size;
        }
        for (const auto& a : cfg.train.assemblies) {
            const preprocess::RegressionDataset ds = preprocess::read_dataset_csv(data_path(a));
            TrainedModel tm = train_assembly(ds, tc, cfg.seed);
            model_io::save_model(model_path(a), tm.file);
        }
    });

    std::vector<fs::path> predict_inputs, pred_outputs;
    for (const auto& a : cfg.train.assemblies) {
        predict_inputs.push_back(model_path(a));
        predict_inputs.push_back(holdout_path(a));
        pred_outputs.push_back(pred_path(a));
    }
    runner.stage("predict", detail::stage_digest(cfg, "predict"), predict_inputs, pred_outputs,
                 [&] {
        for (const auto& a : cfg.train.assemblies) {
            const model_io::ModelFile model = model_io::load_model(model_path(a), cfg.train.mode);
            const preprocess::RegressionDataset holdout =
                preprocess::read_dataset_csv(holdout_path(a));
            std::vector<std::vector<double>> points;
            points.reserve(holdout.samples.size());
            for (const auto& s : holdout.samples) points.push_back({s.bank_mm, s.z_mm});
            const auto preds = model_io::predict_points(model, points, cfg.predict.passes,
                                                        derive_seed(cfg.seed, "predict-" + a),
                                                        cfg.predict.level, cfg.workers);
            std::vector<PredRow> rows;
            rows.reserve(preds.size());
            for (std::size_t i = 0; i < preds.size(); ++i)
                rows.push_back({holdout.samples[i].cycle_id, a, holdout.samples[i].bank_mm,
                                holdout.samples[i].z_mm, preds[i]});
            write_pred_csv(pred_path(a), rows);
        }
    });

    const fs::path report_path = out / "report.json";
    std::vector<fs::path> eval_inputs;
    for (const auto& a : cfg.train.assemblies) {
        eval_inputs.push_back(pred_path(a));
        eval_inputs.push_back(holdout_path(a));
    }
    runner.stage("eval", detail::stage_digest(cfg, "predict", nlohmann::json{{"stage", "eval"}}),
                 eval_inputs, {report_path}, [&] {
        nlohmann::json per_assembly = nlohmann::json::object();
        long pooled_n = 0, pooled_covered = 0;
        for (const auto& a : cfg.train.assemblies) {
            const auto preds = read_pred_csv(pred_path(a));
            const auto truth = preprocess::read_dataset_csv(holdout_path(a));
            const nlohmann::json rep = evaluate_predictions(preds, truth, cfg.predict.level);
            pooled_n += rep.at("coverage").at("n_points").get<long>();
            pooled_covered += rep.at("coverage").at("n_covered").get<long>();
            per_assembly[a] = rep;
        }
        nlohmann::json report = {
            {"format", "fluxnet-report"},
            {"version", 1},
            {"level", cfg.predict.level},
            {"mode", model_io::to_string(cfg.train.mode)},
            {"per_assembly", per_assembly},
            {"pooled_coverage",
             {{"n_points", pooled_n},
              {"n_covered", pooled_covered},
              {"coverage", pooled_n ? static_cast<double>(pooled_covered) / pooled_n : 0.0}}},
        };
        write_file(report_path, report.dump(2) + "\n");
    });

    manifest.stages = runner.take_records();
    write_file(manifest_path, manifest_to_json(manifest).dump(2) + "\n");
    return manifest;
}

}  // namespace fluxnet::pipeline
