// Command line front end: synthetic campaign generation, preprocessing,
// hyperparameter search, training, prediction, scoring, and the one-shot
// pipeline runner.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
// training failure.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fluxnet/fluxnet.hpp"

namespace {

namespace fs = std::filesystem;
using namespace fluxnet;

synthdata::DefectSpec parse_defect(const std::string& text) {
    // kind:cycle:assembly:magnitude, assembly empty for whole-cycle defects
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = text.find(':', start);
        if (pos == std::string::npos) {
            parts.push_back(text.substr(start));
            break;
        }
        parts.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
    if (parts.size() != 4)
        throw ConfigError("defect must be kind:cycle:assembly:magnitude, got '" + text + "'");
    synthdata::DefectSpec d;
    d.kind = synthdata::defect_kind_from_string(parts[0]);
    d.cycle_id = parts[1];
    d.assembly = parts[2];
    d.magnitude = parse_double(parts[3], "defect magnitude");
    return d;
}

std::vector<int> parse_widths(const std::string& text) {
    std::vector<int> widths;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t pos = text.find(',', start);
        const std::string tok =
            pos == std::string::npos ? text.substr(start) : text.substr(start, pos - start);
        if (tok.empty()) throw ConfigError("bad hidden width list '" + text + "'");
        widths.push_back(static_cast<int>(parse_long(tok, "hidden width")));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return widths;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"fluxnet: axial flux profile surrogates with uncertainty"};
    app.require_subcommand(1);
    std::function<void()> action;

    // ---- gen ----
    auto* gen = app.add_subcommand("gen", "generate a synthetic measurement campaign");
    struct {
        std::string out = "campaign.json";
        int cycles = 86;
        double exposure = 600.0;
        std::uint64_t seed = 0;
        std::vector<std::string> defects;
    } g;
    gen->add_option("--out", g.out, "campaign file to write");
    gen->add_option("--cycles", g.cycles, "number of measurement cycles");
    gen->add_option("--exposure", g.exposure, "expected peak counts at the core centre");
    gen->add_option("--seed", g.seed, "master seed");
    gen->add_option("--defect", g.defects, "defect as kind:cycle:assembly:magnitude");
    gen->callback([&] {
        action = [&] {
            pipeline::GenConfig cfg;
            cfg.cycles = g.cycles;
            cfg.exposure = g.exposure;
            for (const auto& d : g.defects) cfg.defects.push_back(parse_defect(d));
            synthdata::save_campaign(g.out, pipeline::run_gen(cfg, g.seed));
            std::cout << "wrote " << g.out << "\n";
        };
    });

    // ---- prep ----
    auto* prep = app.add_subcommand("prep", "preprocess a campaign into regression datasets");
    struct {
        std::string campaign;
        std::string out_dir = "prep_out";
        double threshold = 100.0;
        bool no_smooth = false;
        int window = 15;
        int order = 3;
        bool normalize = false;
        int holdout = 0;
        std::vector<std::string> assemblies;
    } p;
    prep->add_option("--campaign", p.campaign, "campaign file")->required();
    prep->add_option("--out-dir", p.out_dir, "output directory");
    prep->add_option("--threshold", p.threshold, "low-count rejection threshold");
    prep->add_flag("--no-smooth", p.no_smooth, "skip Savitzky-Golay smoothing");
    prep->add_option("--window", p.window, "smoothing window (odd)");
    prep->add_option("--order", p.order, "smoothing polynomial order");
    prep->add_flag("--normalize", p.normalize, "z-score each dataset (fit on all its samples)");
    prep->add_option("--holdout", p.holdout, "kept cycles reserved for scoring (0 = none)");
    prep->add_option("--assembly", p.assemblies, "restrict output to these assemblies");
    prep->callback([&] {
        action = [&] {
            const synthdata::Campaign campaign = synthdata::load_campaign(p.campaign);
            preprocess::PrepOptions opt;
            opt.reject_threshold = p.threshold;
            if (!p.no_smooth) opt.smooth = preprocess::SavgolSettings{p.window, p.order};
            preprocess::PrepResult prep_result = preprocess::run_prep(campaign, opt);

            if (p.holdout < 0 ||
                static_cast<std::size_t>(p.holdout) >= prep_result.corrected.size())
                throw ConfigError("holdout cycle count must leave at least one training cycle");
            const std::size_t n_train =
                prep_result.corrected.size() - static_cast<std::size_t>(p.holdout);
            const std::vector<synthdata::MeasurementCycle> train_cycles(
                prep_result.corrected.begin(),
                prep_result.corrected.begin() + static_cast<long>(n_train));
            auto datasets = preprocess::build_dataset(train_cycles, campaign.model, opt.smooth);

            auto want = [&](const std::string& id) {
                return p.assemblies.empty() ||
                       std::find(p.assemblies.begin(), p.assemblies.end(), id) !=
                           p.assemblies.end();
            };
            const fs::path out = p.out_dir;
            int written = 0;
            for (auto& [id, ds] : datasets) {
                if (!want(id)) continue;
                if (p.normalize) preprocess::normalize_dataset(ds);
                preprocess::write_dataset_csv(out / "data" / (id + ".csv"), ds);
                ++written;
            }
            if (p.holdout > 0) {
                const std::vector<synthdata::MeasurementCycle> holdout_cycles(
                    prep_result.corrected.begin() + static_cast<long>(n_train),
                    prep_result.corrected.end());
                auto holdout_ds =
                    preprocess::build_dataset(holdout_cycles, campaign.model, std::nullopt);
                for (auto& [id, ds] : holdout_ds) {
                    if (!want(id)) continue;
                    preprocess::write_dataset_csv(out / "holdout" / (id + ".csv"), ds);
                }
            }
            if (written == 0) throw ConfigError("no assembly matched the requested filter");
            nlohmann::json summary = {{"format", "fluxnet-prep"},
                                      {"version", 1},
                                      {"rejected_cycles", prep_result.rejected_cycles},
                                      {"kept_cycles", prep_result.corrected.size()},
                                      {"holdout_cycles", p.holdout}};
            write_file(out / "prep.json", summary.dump(2) + "\n");
            std::cout << "wrote " << written << " dataset(s) to " << out.string() << " ("
                      << prep_result.rejected_cycles.size() << " cycle(s) rejected)\n";
        };
    });

    // ---- hpo ----
    auto* hp = app.add_subcommand("hpo", "two-stage hyperparameter search on a dataset");
    struct {
        std::string data;
        std::string out = "hpo.json";
        int budget = 8;
        int epoch_cap = 40;
        std::uint64_t seed = 0;
        int workers = 1;
    } h;
    hp->add_option("--data", h.data, "training dataset CSV")->required();
    hp->add_option("--out", h.out, "trial log to write");
    hp->add_option("--budget", h.budget, "stage-1 architecture draws");
    hp->add_option("--epoch-cap", h.epoch_cap, "epoch budget per trial");
    hp->add_option("--seed", h.seed, "master seed");
    hp->add_option("--workers", h.workers, "parallel trial evaluations");
    hp->callback([&] {
        action = [&] {
            const preprocess::RegressionDataset ds = preprocess::read_dataset_csv(h.data);
            preprocess::DatasetSplits splits =
                preprocess::partition(ds, {}, derive_seed(h.seed, "partition-" + ds.assembly));
            preprocess::normalize_splits(splits);
            const hpo::Evaluator eval = pipeline::make_hpo_evaluator(splits, h.epoch_cap);
            hpo::SearchSpace space;
            const hpo::TwoStageResult result =
                hpo::two_stage_search(space, h.budget, nullptr, eval, derive_seed(h.seed, "hpo"),
                                      pipeline::env_workers(h.workers));
            nlohmann::json s1 = nlohmann::json::array(), s2 = nlohmann::json::array();
            for (const auto& t : result.stage1) s1.push_back(pipeline::trial_to_json(t));
            for (const auto& t : result.stage2) s2.push_back(pipeline::trial_to_json(t));
            write_file(h.out, nlohmann::json{{"format", "fluxnet-hpo"},
                                             {"version", 1},
                                             {"assembly", ds.assembly},
                                             {"best", pipeline::trial_to_json(result.best)},
                                             {"stage1", s1},
                                             {"stage2", s2}}
                                  .dump(2) +
                                  "\n");
            std::cout << "best " << result.best.params.describe() << " objective "
                      << format_double(result.best.objective) << "\n";
        };
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train one assembly model");
    struct {
        std::string data;
        std::string out = "model.json";
        std::string history;
        std::string mode = "dnn";
        std::string hidden = "64,32";
        std::string activation = "relu";
        std::string head;
        std::string loss;
        double lr = 1e-3;
        int batch = 32;
        int epochs = 150;
        double weight_decay = 0.0;
        int patience = 20;
        double min_delta = 0.0;
        double plateau_factor = 0.5;
        int plateau_patience = 10;
        double min_lr = 1e-6;
        double drop_rate = 0.2;
        bool no_input_dropout = false;
        std::string scaling = "none";
        double prior_std = 1.0;
        int mc_samples = 1;
        std::uint64_t seed = 0;
    } t;
    tr->add_option("--data", t.data, "training dataset CSV")->required();
    tr->add_option("--out", t.out, "model file to write");
    tr->add_option("--history", t.history, "optional training history JSON");
    tr->add_option("--mode", t.mode, "dnn, mcd, or bnn");
    tr->add_option("--hidden", t.hidden, "hidden widths, comma separated");
    tr->add_option("--activation", t.activation, "relu, tanh, or identity");
    tr->add_option("--head", t.head, "point or gaussian (default depends on mode)");
    tr->add_option("--loss", t.loss, "mse, mae, or gaussian_nll (default depends on mode)");
    tr->add_option("--lr", t.lr, "learning rate");
    tr->add_option("--batch", t.batch, "batch size");
    tr->add_option("--epochs", t.epochs, "epoch budget");
    tr->add_option("--weight-decay", t.weight_decay, "L2 penalty strength");
    tr->add_option("--patience", t.patience, "early stopping patience");
    tr->add_option("--min-delta", t.min_delta, "early stopping improvement threshold");
    tr->add_option("--plateau-factor", t.plateau_factor, "learning rate reduction factor");
    tr->add_option("--plateau-patience", t.plateau_patience, "plateau patience");
    tr->add_option("--min-lr", t.min_lr, "learning rate floor");
    tr->add_option("--drop-rate", t.drop_rate, "dropout rate (mcd)");
    tr->add_flag("--no-input-dropout", t.no_input_dropout, "disable the input mask (mcd)");
    tr->add_option("--scaling", t.scaling, "dropout scaling: none, sqrt_width, inverted");
    tr->add_option("--prior-std", t.prior_std, "prior scale (bnn)");
    tr->add_option("--mc-samples", t.mc_samples, "weight draws per batch (bnn)");
    tr->add_option("--seed", t.seed, "master seed");
    tr->callback([&] {
        action = [&] {
            const preprocess::RegressionDataset ds = preprocess::read_dataset_csv(t.data);
            pipeline::TrainStageConfig tc;
            tc.assemblies = {ds.assembly};
            tc.mode = model_io::mode_from_string(t.mode);
            tc.hidden = parse_widths(t.hidden);
            tc.activation = nncore::activation_from_string(t.activation);
            if (!t.head.empty()) tc.head = nncore::head_from_string(t.head);
            if (!t.loss.empty()) tc.loss = nncore::loss_from_string(t.loss);
            tc.tcfg.learning_rate = t.lr;
            tc.tcfg.batch_size = t.batch;
            tc.tcfg.max_epochs = t.epochs;
            tc.tcfg.weight_decay = t.weight_decay;
            tc.tcfg.early_stop.patience = t.patience;
            tc.tcfg.early_stop.min_delta = t.min_delta;
            tc.tcfg.plateau.factor = t.plateau_factor;
            tc.tcfg.plateau.patience = t.plateau_patience;
            tc.tcfg.plateau.min_lr = t.min_lr;
            tc.drop_rate = t.drop_rate;
            tc.input_dropout = !t.no_input_dropout;
            tc.scaling = mcd::scaling_from_string(t.scaling);
            tc.prior_std = t.prior_std;
            tc.mc_samples = t.mc_samples;
            pipeline::TrainedModel tm = pipeline::train_assembly(ds, tc, t.seed);
            model_io::save_model(t.out, tm.file);
            if (!t.history.empty()) {
                nlohmann::json hj = {{"train_loss", tm.history.train_loss},
                                     {"val_loss", tm.history.val_loss},
                                     {"learning_rate", tm.history.learning_rate},
                                     {"stop_reason", nncore::to_string(tm.history.stop_reason)},
                                     {"best_epoch", tm.history.best_epoch},
                                     {"best_val", tm.history.best_val}};
                write_file(t.history, hj.dump(2) + "\n");
            }
            std::cout << "trained " << ds.assembly << " (" << t.mode << "), "
                      << tm.history.epochs() << " epochs, best val "
                      << format_double(tm.history.best_val) << " at epoch "
                      << tm.history.best_epoch << ", wrote " << t.out << "\n";
        };
    });

    // ---- predict ----
    auto* pr = app.add_subcommand("predict", "predictive profiles from a trained model");
    struct {
        std::string model;
        std::string out = "pred.csv";
        std::optional<double> bank;
        std::string data;
        int passes = 2000;
        double level = 0.95;
        std::uint64_t seed = 0;
        int workers = 1;
        std::string mode;
    } q;
    pr->add_option("--model", q.model, "model file")->required();
    pr->add_option("--out", q.out, "prediction CSV to write");
    pr->add_option("--bank", q.bank, "bank position for an axial sweep");
    pr->add_option("--data", q.data, "dataset CSV to predict row by row");
    pr->add_option("--passes", q.passes, "stochastic passes");
    pr->add_option("--level", q.level, "central interval level");
    pr->add_option("--seed", q.seed, "prediction seed");
    pr->add_option("--workers", q.workers, "worker threads");
    pr->add_option("--mode", q.mode, "require this model mode (dnn, mcd, bnn)");
    pr->callback([&] {
        action = [&] {
            const bool has_bank = q.bank.has_value();
            const bool has_data = !q.data.empty();
            if (has_bank == has_data)
                throw ConfigError("predict needs exactly one of --bank or --data");
            const model_io::ModelFile model =
                q.mode.empty() ? model_io::load_model(q.model)
                               : model_io::load_model(q.model, model_io::mode_from_string(q.mode));
            const int workers = pipeline::env_workers(q.workers);
            if (q.bank) {
                pipeline::write_sweep_csv(q.out, model, *q.bank, q.passes, q.seed, q.level,
                                          workers);
            } else {
                const preprocess::RegressionDataset ds = preprocess::read_dataset_csv(q.data);
                std::vector<std::vector<double>> points;
                points.reserve(ds.samples.size());
                for (const auto& s : ds.samples) points.push_back({s.bank_mm, s.z_mm});
                const auto preds = model_io::predict_points(model, points, q.passes, q.seed,
                                                            q.level, workers);
                std::vector<pipeline::PredRow> rows;
                rows.reserve(preds.size());
                for (std::size_t i = 0; i < preds.size(); ++i)
                    rows.push_back({ds.samples[i].cycle_id, ds.assembly, ds.samples[i].bank_mm,
                                    ds.samples[i].z_mm, preds[i]});
                pipeline::write_pred_csv(q.out, rows);
            }
            std::cout << "wrote " << q.out << "\n";
        };
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "score predictions against a truth dataset");
    struct {
        std::string pred;
        std::string truth;
        std::string report = "report.json";
        double level = 0.95;
    } e;
    ev->add_option("--pred", e.pred, "prediction CSV")->required();
    ev->add_option("--truth", e.truth, "truth dataset CSV")->required();
    ev->add_option("--report", e.report, "report JSON to write");
    ev->add_option("--level", e.level, "interval level to check");
    ev->callback([&] {
        action = [&] {
            const auto preds = pipeline::read_pred_csv(e.pred);
            const auto truth = preprocess::read_dataset_csv(e.truth);
            const nlohmann::json rep = pipeline::evaluate_predictions(preds, truth, e.level);
            write_file(e.report, rep.dump(2) + "\n");
            std::cout << "assembly " << truth.assembly << " nrmse "
                      << format_double(rep.at("nrmse").get<double>()) << " r2 "
                      << format_double(rep.at("r_squared").get<double>()) << " coverage "
                      << format_double(rep.at("coverage").at("coverage").get<double>()) << "\n";
        };
    });

    // ---- run ----
    auto* rn = app.add_subcommand("run", "execute the full pipeline from a config");
    struct {
        std::string config;
        std::string out_dir;
        std::optional<std::uint64_t> seed;
    } r;
    rn->add_option("--config", r.config, "run config (JSON)")->required();
    rn->add_option("--out-dir", r.out_dir, "override the output directory");
    rn->add_option("--seed", r.seed, "override the master seed");
    rn->callback([&] {
        action = [&] {
            nlohmann::json j;
            if (fs::path(r.config).extension() == ".toml")
                throw ConfigError("TOML configs are not supported; use the JSON schema");
            try {
                j = nlohmann::json::parse(read_file(r.config));
            } catch (const nlohmann::json::exception& ex) {
                throw ConfigError("run config is not valid JSON: " + r.config + " (" + ex.what() +
                                  ")");
            }
            if (!r.out_dir.empty()) j["out_dir"] = r.out_dir;
            if (r.seed) j["seed"] = *r.seed;
            const pipeline::RunConfig cfg = pipeline::parse_run_config(j);
            const pipeline::RunManifest manifest = pipeline::run_pipeline(cfg);
            for (const auto& s : manifest.stages)
                std::cout << s.name << (s.skipped ? " (cached)" : "") << "\n";
            std::cout << "manifest " << (cfg.out_dir / "manifest.json").string() << "\n";
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // bad arguments are configuration errors
    }
    action();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const fluxnet::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
