#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "fluxnet/pipeline.hpp"

using namespace fluxnet;
using namespace fluxnet::pipeline;
using Catch::Matchers::WithinRel;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("fluxnet_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string cli_binary() {
    if (const char* env = std::getenv("FLUXNET_BIN"); env && *env) return env;
    return "build/tools/fluxnet";
}

int run_cli(const std::string& args) {
    const std::string cmd = cli_binary() + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Small but complete run: a few cycles, one assembly, a tiny network.
nlohmann::json mini_config(const fs::path& out_dir, bool with_hpo = false) {
    nlohmann::json j = {
        {"seed", 2024},
        {"out_dir", out_dir.string()},
        {"gen", {{"cycles", 6}, {"exposure", 400.0}}},
        {"prep", {{"holdout_cycles", 2}, {"smooth", {{"window", 7}, {"poly_order", 2}}}}},
        {"train",
         {{"assemblies", {"E6"}},
          {"mode", "dnn"},
          {"hidden", {8}},
          {"learning_rate", 0.01},
          {"batch_size", 64},
          {"max_epochs", 6},
          {"early_stop", {{"enabled", false}}}}},
        {"predict", {{"passes", 8}}},
    };
    if (with_hpo) {
        j["hpo"] = {{"assembly", "E6"},
                    {"budget", 2},
                    {"epoch_cap", 3},
                    {"space",
                     {{"min_layers", 1},
                      {"max_layers", 1},
                      {"min_units", 4},
                      {"max_units", 8},
                      {"lr_min", 1e-3},
                      {"lr_max", 1e-2},
                      {"batch_sizes", {64}},
                      {"stage1_learning_rate", 5e-3},
                      {"stage1_batch_size", 64}}}};
    }
    return j;
}

}  // namespace

TEST_CASE("run config parsing fills defaults") {
    unsetenv("FLUXNET_WORKERS");
    const RunConfig cfg = parse_run_config(nlohmann::json::object());
    CHECK(cfg.seed == 0);
    CHECK(cfg.out_dir == fs::path("run_out"));
    CHECK(cfg.workers == 1);
    CHECK(cfg.gen.cycles == 86);
    CHECK(cfg.gen.exposure == 600.0);
    CHECK(cfg.gen.defects.empty());
    CHECK(cfg.prep.reject_threshold == 100.0);
    REQUIRE(cfg.prep.smooth.has_value());
    CHECK(cfg.prep.smooth->window == 15);
    CHECK(cfg.prep.smooth->poly_order == 3);
    CHECK(cfg.prep.holdout_cycles == 10);
    CHECK_FALSE(cfg.hpo.has_value());
    CHECK(cfg.train.assemblies == std::vector<std::string>{"E6"});
    CHECK(cfg.train.mode == model_io::ModelMode::dnn);
    CHECK(cfg.train.hidden == std::vector<int>{64, 32});
    CHECK(cfg.train.effective_head() == nncore::Head::point);
    CHECK(cfg.train.effective_loss() == nncore::Loss::mae);
    CHECK(cfg.predict.passes == 2000);
    CHECK(cfg.predict.level == 0.95);
}

TEST_CASE("run config parsing honors every section") {
    unsetenv("FLUXNET_WORKERS");
    const nlohmann::json j = {
        {"seed", 99},
        {"out_dir", "/tmp/flux_cfg"},
        {"workers", 3},
        {"gen",
         {{"cycles", 12},
          {"exposure", 250.0},
          {"defects",
           {{{"kind", "under_exposure"}, {"magnitude", 0.9}, {"cycle", "C0002"}}}}}},
        {"prep",
         {{"reject_threshold", 55.0},
          {"smooth", nullptr},
          {"holdout_cycles", 3},
          {"assemblies", {"H3"}}}},
        {"hpo",
         {{"assembly", "C5"},
          {"budget", 4},
          {"epoch_cap", 9},
          {"space", {{"min_layers", 2}, {"max_layers", 3}, {"pyramid", false}}}}},
        {"train",
         {{"assemblies", {"E6", "H3"}},
          {"mode", "mcd"},
          {"hidden", {48, 24}},
          {"activation", "tanh"},
          {"head", "gaussian"},
          {"loss", "gaussian_nll"},
          {"learning_rate", 2e-3},
          {"batch_size", 8},
          {"max_epochs", 11},
          {"weight_decay", 1e-5},
          {"early_stop", {{"enabled", true}, {"patience", 7}, {"min_delta", 1e-4}}},
          {"plateau", {{"enabled", true}, {"factor", 0.25}, {"patience", 4}, {"min_lr", 1e-8}}},
          {"fractions", {{"train", 0.7}, {"test", 0.1}, {"validation", 0.2}}},
          {"drop_rate", 0.35},
          {"input_dropout", false},
          {"scaling", "inverted"},
          {"prior_std", 0.5},
          {"init_scale_fraction", 0.02},
          {"mc_samples", 2}}},
        {"predict", {{"passes", 123}, {"level", 0.9}}},
    };
    const RunConfig cfg = parse_run_config(j);
    CHECK(cfg.seed == 99);
    CHECK(cfg.out_dir == fs::path("/tmp/flux_cfg"));
    CHECK(cfg.workers == 3);
    CHECK(cfg.gen.cycles == 12);
    REQUIRE(cfg.gen.defects.size() == 1);
    CHECK(cfg.gen.defects[0].kind == synthdata::DefectKind::under_exposure);
    CHECK(cfg.gen.defects[0].magnitude == 0.9);
    CHECK(cfg.gen.defects[0].cycle_id == "C0002");
    CHECK(cfg.prep.reject_threshold == 55.0);
    CHECK_FALSE(cfg.prep.smooth.has_value());
    CHECK(cfg.prep.holdout_cycles == 3);
    CHECK(cfg.prep.assemblies == std::vector<std::string>{"H3"});
    REQUIRE(cfg.hpo.has_value());
    CHECK(cfg.hpo->assembly == "C5");
    CHECK(cfg.hpo->budget == 4);
    CHECK(cfg.hpo->epoch_cap == 9);
    CHECK(cfg.hpo->space.min_layers == 2);
    CHECK(cfg.hpo->space.max_layers == 3);
    CHECK_FALSE(cfg.hpo->space.pyramid);
    CHECK(cfg.train.assemblies == std::vector<std::string>{"E6", "H3"});
    CHECK(cfg.train.mode == model_io::ModelMode::mcd);
    CHECK(cfg.train.hidden == std::vector<int>{48, 24});
    CHECK(cfg.train.activation == nncore::Activation::tanh);
    CHECK(cfg.train.effective_head() == nncore::Head::gaussian);
    CHECK(cfg.train.effective_loss() == nncore::Loss::gaussian_nll);
    CHECK(cfg.train.tcfg.learning_rate == 2e-3);
    CHECK(cfg.train.tcfg.batch_size == 8);
    CHECK(cfg.train.tcfg.max_epochs == 11);
    CHECK(cfg.train.tcfg.weight_decay == 1e-5);
    CHECK(cfg.train.tcfg.early_stop.patience == 7);
    CHECK(cfg.train.tcfg.plateau.factor == 0.25);
    CHECK(cfg.train.fractions.train == 0.7);
    CHECK(cfg.train.fractions.validation == 0.2);
    CHECK(cfg.train.drop_rate == 0.35);
    CHECK_FALSE(cfg.train.input_dropout);
    CHECK(cfg.train.scaling == mcd::DropoutScaling::inverted);
    CHECK(cfg.train.prior_std == 0.5);
    CHECK(cfg.train.init_scale_fraction == 0.02);
    CHECK(cfg.train.mc_samples == 2);
    CHECK(cfg.predict.passes == 123);
    CHECK(cfg.predict.level == 0.9);
}

TEST_CASE("run config rejects unknown keys in every section") {
    auto with_key = [](nlohmann::json j, const std::string& section, const char* key) {
        if (section.empty()) {
            j[key] = 1;
        } else {
            nlohmann::json* node = &j;
            std::string rest = section;
            while (!rest.empty()) {
                const auto dot = rest.find('.');
                const std::string part = rest.substr(0, dot);
                node = &((*node)[part]);
                rest = dot == std::string::npos ? "" : rest.substr(dot + 1);
            }
            (*node)[key] = 1;
        }
        return j;
    };
    const nlohmann::json base = {
        {"gen", nlohmann::json::object()},
        {"prep", {{"smooth", nlohmann::json::object()}}},
        {"hpo", {{"space", nlohmann::json::object()}}},
        {"train",
         {{"early_stop", nlohmann::json::object()},
          {"plateau", nlohmann::json::object()},
          {"fractions", nlohmann::json::object()}}},
        {"predict", nlohmann::json::object()},
    };
    CHECK_THROWS_AS(parse_run_config(with_key(base, "", "sead")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "gen", "cycels")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "prep", "threshold")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "prep.smooth", "order")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "hpo", "trials")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "hpo.space", "units")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "train", "lr")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "train.early_stop", "delta")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "train.plateau", "min")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "train.fractions", "val")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(with_key(base, "predict", "samples")), ConfigError);
    CHECK_NOTHROW(parse_run_config(base));
}

TEST_CASE("run config type and range errors") {
    unsetenv("FLUXNET_WORKERS");
    CHECK_THROWS_AS(parse_run_config({{"seed", "abc"}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"workers", 0}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"predict", {{"passes", 1}}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"predict", {{"level", 1.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"train", {{"mode", "gp"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"train", {{"activation", "swish"}}}}), ConfigError);
    CHECK_THROWS_AS(
        parse_run_config({{"train", {{"assemblies", nlohmann::json::array()}}}}),
        ConfigError);
    CHECK_THROWS_AS(
        parse_run_config(
            {{"train", {{"fractions", {{"train", 0.9}, {"test", 0.3}, {"validation", 0.1}}}}}}),
        ConfigError);
    CHECK_THROWS_AS(parse_run_config({{"hpo", {{"space", {{"min_layers", 0}}}}}}), ConfigError);
}

TEST_CASE("config files must be JSON") {
    const fs::path dir = temp_dir("cfg");
    const fs::path toml = dir / "run.toml";
    write_file(toml, "[gen]\ncycles = 4\n");
    CHECK_THROWS_AS(load_run_config(toml), ConfigError);

    const fs::path bad = dir / "bad.json";
    write_file(bad, "{not json");
    CHECK_THROWS_AS(load_run_config(bad), ConfigError);

    const fs::path good = dir / "run.json";
    write_file(good, nlohmann::json{{"seed", 5}}.dump());
    CHECK(load_run_config(good).seed == 5);

    CHECK_THROWS_AS(load_run_config(dir / "missing.json"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("worker override comes from the environment") {
    unsetenv("FLUXNET_WORKERS");
    CHECK(env_workers(4) == 4);
    setenv("FLUXNET_WORKERS", "6", 1);
    CHECK(env_workers(4) == 6);
    CHECK(parse_run_config({{"workers", 2}}).workers == 6);
    setenv("FLUXNET_WORKERS", "zero", 1);
    CHECK_THROWS_AS(env_workers(4), ConfigError);
    setenv("FLUXNET_WORKERS", "0", 1);
    CHECK_THROWS_AS(env_workers(4), ConfigError);
    unsetenv("FLUXNET_WORKERS");
    CHECK(env_workers() == 1);
}

TEST_CASE("prediction csv round trips bit-exactly") {
    const fs::path dir = temp_dir("pred_csv");
    const fs::path path = dir / "pred.csv";
    std::vector<PredRow> rows(3);
    rows[0] = {"C0001", "E6", 512.5, 1.6666666666666667,
               {123.456, 0.1, 0.2, 0.223606797749979, 100.0, 146.9, 0.95, 32}};
    rows[1] = {"C0002", "E6", 450.0, 598.3333333333334,
               {5e-324, 1e-17, 0.0, 1e-17, -1.0, 1.0, 0.95, 32}};
    rows[2] = {"-", "H3", 500.0, 300.0, {-2.5, 0.0, 0.0, 0.0, -2.5, -2.5, 0.95, 1}};
    write_pred_csv(path, rows);

    const auto back = read_pred_csv(path);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].cycle_id == rows[i].cycle_id);
        CHECK(back[i].assembly == rows[i].assembly);
        CHECK(back[i].bank_mm == rows[i].bank_mm);
        CHECK(back[i].z_mm == rows[i].z_mm);
        CHECK(back[i].d.mean == rows[i].d.mean);
        CHECK(back[i].d.epistemic_std == rows[i].d.epistemic_std);
        CHECK(back[i].d.aleatoric_std == rows[i].d.aleatoric_std);
        CHECK(back[i].d.total_std == rows[i].d.total_std);
        CHECK(back[i].d.ci_low == rows[i].d.ci_low);
        CHECK(back[i].d.ci_high == rows[i].d.ci_high);
    }

    write_file(path, "wrong,header\n1,2\n");
    CHECK_THROWS_AS(read_pred_csv(path), DataError);
    write_file(path,
               "cycle_id,assembly,bank_mm,z_mm,mean,epistemic_std,aleatoric_std,total_std,"
               "ci_low,ci_high\nC0001,E6,1,2,3\n");
    CHECK_THROWS_AS(read_pred_csv(path), DataError);
    write_file(path,
               "cycle_id,assembly,bank_mm,z_mm,mean,epistemic_std,aleatoric_std,total_std,"
               "ci_low,ci_high\n");
    CHECK_THROWS_AS(read_pred_csv(path), DataError);
    fs::remove_all(dir);
}

TEST_CASE("sweep csv spans the model grid at a fixed bank") {
    const fs::path dir = temp_dir("sweep");
    model_io::ModelFile m;
    m.mode = model_io::ModelMode::dnn;
    m.assembly = "E6";
    m.grid = {600.0, 6};
    m.train_config = {};
    m.dnn = nncore::make_network(nncore::NetworkSpec::dense(2, 1, {4}), 3);

    const fs::path path = dir / "sweep.csv";
    write_sweep_csv(path, m, 500.0, 4, 9, 0.95);
    const auto lines = split_lines(read_file(path));
    REQUIRE(lines.size() >= 7);
    CHECK(lines[0] == "z_mm,mean,epistemic_std,aleatoric_std,total_std,ci_low,ci_high");
    const std::vector<double> want_z = {50.0, 150.0, 250.0, 350.0, 450.0, 550.0};
    for (std::size_t i = 0; i < 6; ++i) {
        const auto f = split_csv_line(lines[i + 1]);
        REQUIRE(f.size() == 7);
        CHECK(parse_double(f[0], "z") == want_z[i]);
        const std::vector<double> q = {500.0, want_z[i]};
        CHECK(parse_double(f[1], "mean") == nncore::forward(*m.dnn, q)[0]);
        CHECK(parse_double(f[2], "epi") == 0.0);
    }
    fs::remove_all(dir);
}

TEST_CASE("evaluate_predictions scores aligned rows and rejects misalignment") {
    preprocess::RegressionDataset truth;
    truth.assembly = "E6";
    truth.grid = {600.0, 180};
    std::vector<PredRow> preds;
    // Two cycles, three points each; predictions off by a known margin.
    const std::vector<std::string> cycles = {"C0001", "C0002"};
    double y = 100.0;
    for (const auto& c : cycles) {
        for (int i = 0; i < 3; ++i) {
            preprocess::RegressionSample s;
            s.cycle_id = c;
            s.bank_mm = 500.0;
            s.z_mm = 100.0 * (i + 1);
            s.y_raw = y;
            s.y = y;
            truth.samples.push_back(s);

            PredRow r;
            r.cycle_id = c;
            r.assembly = "E6";
            r.bank_mm = 500.0;
            r.z_mm = s.z_mm;
            r.d.mean = y + 5.0;
            r.d.total_std = 10.0;
            preds.push_back(r);
            y += 10.0;
        }
    }

    const nlohmann::json rep = evaluate_predictions(preds, truth, 0.95);
    CHECK(rep.at("assembly") == "E6");
    CHECK(rep.at("n_points") == 6);
    CHECK(rep.at("n_cycles") == 2);
    std::vector<double> mean_all, raw_all;
    for (const auto& p : preds) mean_all.push_back(p.d.mean);
    for (const auto& s : truth.samples) raw_all.push_back(s.y_raw);
    CHECK_THAT(rep.at("nrmse").get<double>(),
               WithinRel(evalmetrics::nrmse(mean_all, raw_all), 1e-12));
    CHECK_THAT(rep.at("r_squared").get<double>(),
               WithinRel(evalmetrics::r_squared(mean_all, raw_all), 1e-12));
    // +5 offset against sigma 10 bands at 95%: everything is covered.
    CHECK(rep.at("coverage").at("coverage") == 1.0);
    CHECK(rep.at("nrmse_per_cycle").size() == 2);
    CHECK(rep.at("box").contains("median"));

    std::vector<PredRow> wrong = preds;
    wrong[0].cycle_id = "C9999";
    CHECK_THROWS_AS(evaluate_predictions(wrong, truth, 0.95), DataError);
    wrong = preds;
    wrong[1].z_mm += 0.5;
    CHECK_THROWS_AS(evaluate_predictions(wrong, truth, 0.95), DataError);
    wrong = preds;
    wrong[2].assembly = "H3";
    CHECK_THROWS_AS(evaluate_predictions(wrong, truth, 0.95), DataError);
    wrong = preds;
    wrong.pop_back();
    CHECK_THROWS_AS(evaluate_predictions(wrong, truth, 0.95), DataError);
}

TEST_CASE("manifest json round trips") {
    RunManifest m;
    m.config_digest = "abc123";
    StageRecord s;
    s.name = "gen";
    s.config_digest = "ddd";
    s.skipped = false;
    s.wall_ms = 12.5;
    s.inputs = {{"in.json", "1111"}};
    s.outputs = {{"campaign.json", "2222"}};
    m.stages.push_back(s);
    s.name = "prep";
    s.skipped = true;
    m.stages.push_back(s);

    const RunManifest r = manifest_from_json(manifest_to_json(m));
    CHECK(r.tool == std::string(kToolName) + " " + kToolVersion);
    CHECK(r.config_digest == "abc123");
    REQUIRE(r.stages.size() == 2);
    CHECK(r.stages[0].name == "gen");
    CHECK_FALSE(r.stages[0].skipped);
    CHECK(r.stages[0].wall_ms == 12.5);
    CHECK(r.stages[0].inputs.at("in.json") == "1111");
    CHECK(r.stages[0].outputs.at("campaign.json") == "2222");
    CHECK(r.stages[1].skipped);
    REQUIRE(r.find("prep") != nullptr);
    CHECK(r.find("prep")->skipped);
    CHECK(r.find("nope") == nullptr);

    nlohmann::json bad = manifest_to_json(m);
    bad["format"] = "other";
    CHECK_THROWS_AS(manifest_from_json(bad), DataError);
}

TEST_CASE("mini pipeline produces the artifact tree and caches stages") {
    unsetenv("FLUXNET_WORKERS");
    const fs::path dir = temp_dir("mini_run");
    const nlohmann::json j = mini_config(dir, true);
    const RunConfig cfg = parse_run_config(j);

    const RunManifest first = run_pipeline(cfg);
    REQUIRE(first.stages.size() == 6);
    const std::vector<std::string> names = {"gen", "prep", "hpo", "train", "predict", "eval"};
    for (std::size_t i = 0; i < names.size(); ++i) {
        CHECK(first.stages[i].name == names[i]);
        CHECK_FALSE(first.stages[i].skipped);
    }
    CHECK(fs::exists(dir / "campaign.json"));
    CHECK(fs::exists(dir / "data" / "E6.csv"));
    CHECK(fs::exists(dir / "holdout" / "E6.csv"));
    CHECK(fs::exists(dir / "hpo.json"));
    CHECK(fs::exists(dir / "models" / "E6.dnn.json"));
    CHECK(fs::exists(dir / "preds" / "E6.csv"));
    CHECK(fs::exists(dir / "report.json"));
    CHECK(fs::exists(dir / "manifest.json"));

    // The tuned architecture came from the search winner.
    const nlohmann::json hj = nlohmann::json::parse(read_file(dir / "hpo.json"));
    const auto tuned_hidden = hj.at("best").at("hidden").get<std::vector<int>>();
    const auto model = model_io::load_model(dir / "models" / "E6.dnn.json");
    CHECK(model.spec().hidden == tuned_hidden);

    // Holdout datasets carry the last kept cycles with raw targets.
    const auto holdout = preprocess::read_dataset_csv(dir / "holdout" / "E6.csv");
    std::set<std::string> holdout_cycles;
    for (const auto& s : holdout.samples) {
        holdout_cycles.insert(s.cycle_id);
        CHECK(s.y == s.y_raw);
    }
    CHECK(holdout_cycles.size() == 2);

    // Second run with the identical config skips everything.
    const RunManifest second = run_pipeline(cfg);
    REQUIRE(second.stages.size() == 6);
    for (const auto& s : second.stages) CHECK(s.skipped);

    // Touching only the predict section reruns prediction and scoring.
    nlohmann::json j2 = j;
    j2["predict"]["passes"] = 16;
    const RunManifest third = run_pipeline(parse_run_config(j2));
    CHECK(third.find("gen")->skipped);
    CHECK(third.find("prep")->skipped);
    CHECK(third.find("hpo")->skipped);
    CHECK(third.find("train")->skipped);
    CHECK_FALSE(third.find("predict")->skipped);
    CHECK_FALSE(third.find("eval")->skipped);

    // Deleting an output invalidates only the stages that rebuild it.
    fs::remove(dir / "preds" / "E6.csv");
    const RunManifest fourth = run_pipeline(parse_run_config(j2));
    CHECK(fourth.find("train")->skipped);
    CHECK_FALSE(fourth.find("predict")->skipped);
    fs::remove_all(dir);
}

TEST_CASE("pipeline reruns are byte-identical") {
    unsetenv("FLUXNET_WORKERS");
    const fs::path a = temp_dir("det_a");
    const fs::path b = temp_dir("det_b");
    run_pipeline(parse_run_config(mini_config(a)));
    run_pipeline(parse_run_config(mini_config(b)));
    for (const char* rel : {"campaign.json", "data/E6.csv", "holdout/E6.csv",
                            "models/E6.dnn.json", "preds/E6.csv", "report.json"}) {
        INFO(rel);
        CHECK(read_file(a / rel) == read_file(b / rel));
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("command line interface maps failures to exit codes") {
    const fs::path dir = temp_dir("cli_codes");
    CHECK(run_cli("") == 2);
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("gen --no-such-flag") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("prep --campaign " + (dir / "missing.json").string()) == 3);
    CHECK(run_cli("predict --model m.json") == 2);  // needs --bank xor --data
    const fs::path toml = dir / "cfg.toml";
    write_file(toml, "x = 1\n");
    CHECK(run_cli("run --config " + toml.string()) == 2);
    fs::remove_all(dir);
}

TEST_CASE("command line stages chain into each other") {
    const fs::path dir = temp_dir("cli_flow");
    const std::string campaign = (dir / "campaign.json").string();
    const std::string prep_dir = (dir / "prep").string();
    const std::string model = (dir / "model.json").string();
    const std::string sweep = (dir / "sweep.csv").string();
    const std::string pred = (dir / "pred.csv").string();
    const std::string report = (dir / "report.json").string();

    REQUIRE(run_cli("gen --out " + campaign + " --cycles 5 --exposure 400 --seed 7") == 0);
    REQUIRE(run_cli("prep --campaign " + campaign + " --out-dir " + prep_dir +
                    " --window 7 --order 2 --holdout 2 --assembly E6") == 0);
    REQUIRE(fs::exists(dir / "prep" / "data" / "E6.csv"));
    REQUIRE(fs::exists(dir / "prep" / "holdout" / "E6.csv"));

    REQUIRE(run_cli("train --data " + prep_dir + "/data/E6.csv --out " + model +
                    " --mode dnn --hidden 8 --lr 0.01 --batch 64 --epochs 5 --seed 11") == 0);
    REQUIRE(fs::exists(model));

    REQUIRE(run_cli("predict --model " + model + " --bank 500 --out " + sweep) == 0);
    const auto sweep_lines = split_lines(read_file(sweep));
    CHECK(sweep_lines.size() == 181);  // header + 180 grid rows

    REQUIRE(run_cli("predict --model " + model + " --data " + prep_dir +
                    "/holdout/E6.csv --out " + pred) == 0);
    REQUIRE(run_cli("eval --pred " + pred + " --truth " + prep_dir + "/holdout/E6.csv --report " +
                    report) == 0);
    const nlohmann::json rep = nlohmann::json::parse(read_file(report));
    CHECK(rep.at("assembly") == "E6");
    CHECK(rep.at("n_cycles") == 2);
    CHECK(rep.at("nrmse").get<double>() > 0.0);

    // Mode guard rejects a cross-mode load.
    CHECK(run_cli("predict --model " + model + " --bank 500 --mode bnn --out " + sweep) == 3);
    fs::remove_all(dir);
}
