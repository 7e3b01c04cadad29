#pragma once

// Model artifacts: one JSON file per trained model carrying the mode tag,
// network parameters, normalization state, training configuration, and a
// checksum over the payload. Loading is bit-exact and rejects corrupt or
// cross-mode files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fluxnet/bnnvi.hpp"
#include "fluxnet/errors.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/mcd.hpp"
#include "fluxnet/nncore.hpp"
#include "fluxnet/predictive.hpp"
#include "fluxnet/preprocess.hpp"
#include "json.hpp"

namespace fluxnet::model_io {

enum class ModelMode { dnn, mcd, bnn };

inline std::string to_string(ModelMode m) {
    switch (m) {
        case ModelMode::dnn: return "dnn";
        case ModelMode::mcd: return "mcd";
        case ModelMode::bnn: return "bnn";
    }
    throw ConfigError("unknown model mode");
}

inline ModelMode mode_from_string(const std::string& s) {
    if (s == "dnn") return ModelMode::dnn;
    if (s == "mcd") return ModelMode::mcd;
    if (s == "bnn") return ModelMode::bnn;
    throw DataError("unknown model mode: " + s);
}

struct ModelFile {
    ModelMode mode = ModelMode::dnn;
    std::string assembly;
    preprocess::GridInfo grid;
    std::optional<preprocess::DatasetNormalization> normalization;
    nncore::TrainConfig train_config;
    std::uint64_t history_digest = 0;
    // Exactly one payload is set, matching the mode.
    std::optional<nncore::Network> dnn;
    std::optional<mcd::DropoutNetwork> mcdnet;
    std::optional<bnnvi::BayesianNetwork> bnn;

    const nncore::NetworkSpec& spec() const {
        switch (mode) {
            case ModelMode::dnn: return dnn->spec;
            case ModelMode::mcd: return mcdnet->base.spec;
            case ModelMode::bnn: return bnn->spec;
        }
        throw ConfigError("unknown model mode");
    }

    void validate() const {
        const int set = (dnn ? 1 : 0) + (mcdnet ? 1 : 0) + (bnn ? 1 : 0);
        if (set != 1) throw ConfigError("model file must carry exactly one network payload");
        if ((mode == ModelMode::dnn) != dnn.has_value() ||
            (mode == ModelMode::mcd) != mcdnet.has_value() ||
            (mode == ModelMode::bnn) != bnn.has_value())
            throw ConfigError("model payload does not match its mode tag");
        if (dnn) dnn->validate_shapes();
        if (mcdnet) mcdnet->validate();
        if (bnn) bnn->validate();
    }
};

// ---- JSON helpers ----------------------------------------------------------

namespace detail {

inline nlohmann::json spec_to_json(const nncore::NetworkSpec& s) {
    nlohmann::json acts = nlohmann::json::array();
    for (auto a : s.activations) acts.push_back(nncore::to_string(a));
    return {{"input_dim", s.input_dim},
            {"output_dim", s.output_dim},
            {"hidden", s.hidden},
            {"activations", acts},
            {"head", nncore::to_string(s.head)}};
}

inline nncore::NetworkSpec spec_from_json(const nlohmann::json& j) {
    nncore::NetworkSpec s;
    s.input_dim = j.at("input_dim").get<int>();
    s.output_dim = j.at("output_dim").get<int>();
    s.hidden = j.at("hidden").get<std::vector<int>>();
    for (const auto& a : j.at("activations"))
        s.activations.push_back(nncore::activation_from_string(a.get<std::string>()));
    s.head = nncore::head_from_string(j.at("head").get<std::string>());
    s.validate();
    return s;
}

inline nlohmann::json layers_to_json(const std::vector<nncore::Layer>& layers) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : layers)
        arr.push_back({{"in", l.in}, {"out", l.out}, {"w", l.w}, {"b", l.b}});
    return arr;
}

inline std::vector<nncore::Layer> layers_from_json(const nlohmann::json& j) {
    std::vector<nncore::Layer> layers;
    for (const auto& lj : j) {
        nncore::Layer l;
        l.in = lj.at("in").get<int>();
        l.out = lj.at("out").get<int>();
        l.w = lj.at("w").get<std::vector<double>>();
        l.b = lj.at("b").get<std::vector<double>>();
        layers.push_back(std::move(l));
    }
    return layers;
}

inline nlohmann::json train_config_to_json(const nncore::TrainConfig& c) {
    return {{"loss", nncore::to_string(c.loss)},
            {"weight_decay", c.weight_decay},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"early_stop",
             {{"enabled", c.early_stop.enabled},
              {"patience", c.early_stop.patience},
              {"min_delta", c.early_stop.min_delta}}},
            {"plateau",
             {{"enabled", c.plateau.enabled},
              {"factor", c.plateau.factor},
              {"patience", c.plateau.patience},
              {"min_lr", c.plateau.min_lr}}},
            {"rng_seed", c.rng_seed}};
}

inline nncore::TrainConfig train_config_from_json(const nlohmann::json& j) {
    nncore::TrainConfig c;
    c.loss = nncore::loss_from_string(j.at("loss").get<std::string>());
    c.weight_decay = j.at("weight_decay").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.max_epochs = j.at("max_epochs").get<int>();
    const auto& es = j.at("early_stop");
    c.early_stop = {es.at("enabled").get<bool>(), es.at("patience").get<int>(),
                    es.at("min_delta").get<double>()};
    const auto& pl = j.at("plateau");
    c.plateau = {pl.at("enabled").get<bool>(), pl.at("factor").get<double>(),
                 pl.at("patience").get<int>(), pl.at("min_lr").get<double>()};
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    return c;
}

inline nlohmann::json vlayers_to_json(const std::vector<bnnvi::VariationalLayer>& layers) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : layers)
        arr.push_back({{"in", l.in},
                       {"out", l.out},
                       {"w_mean", l.w_mean},
                       {"w_rho", l.w_rho},
                       {"b_mean", l.b_mean},
                       {"b_rho", l.b_rho}});
    return arr;
}

inline std::vector<bnnvi::VariationalLayer> vlayers_from_json(const nlohmann::json& j) {
    std::vector<bnnvi::VariationalLayer> layers;
    for (const auto& lj : j) {
        bnnvi::VariationalLayer l;
        l.in = lj.at("in").get<int>();
        l.out = lj.at("out").get<int>();
        l.w_mean = lj.at("w_mean").get<std::vector<double>>();
        l.w_rho = lj.at("w_rho").get<std::vector<double>>();
        l.b_mean = lj.at("b_mean").get<std::vector<double>>();
        l.b_rho = lj.at("b_rho").get<std::vector<double>>();
        layers.push_back(std::move(l));
    }
    return layers;
}

inline nlohmann::json payload_to_json(const ModelFile& m) {
    nlohmann::json payload = {
        {"mode", to_string(m.mode)},
        {"assembly", m.assembly},
        {"grid", {{"active_height_mm", m.grid.active_height_mm}, {"n_axial", m.grid.n_axial}}},
        {"train_config", train_config_to_json(m.train_config)},
        {"history_digest", hex64(m.history_digest)},
    };
    payload["normalization"] = m.normalization
                                   ? preprocess::normalization_to_json(*m.normalization)
                                   : nlohmann::json(nullptr);
    switch (m.mode) {
        case ModelMode::dnn:
            payload["spec"] = spec_to_json(m.dnn->spec);
            payload["layers"] = layers_to_json(m.dnn->layers);
            break;
        case ModelMode::mcd:
            payload["spec"] = spec_to_json(m.mcdnet->base.spec);
            payload["layers"] = layers_to_json(m.mcdnet->base.layers);
            payload["keep_prob"] = m.mcdnet->keep_prob;
            payload["drop_rate"] = m.mcdnet->drop_rate();
            payload["input_dropout"] = m.mcdnet->input_dropout;
            payload["scaling"] = mcd::to_string(m.mcdnet->scaling);
            break;
        case ModelMode::bnn:
            payload["spec"] = spec_to_json(m.bnn->spec);
            payload["vlayers"] = vlayers_to_json(m.bnn->layers);
            payload["prior"] = {{"mean", m.bnn->prior.mean}, {"std", m.bnn->prior.std}};
            payload["n_train"] = m.bnn->n_train;
            break;
    }
    return payload;
}

inline ModelFile payload_from_json(const nlohmann::json& payload) {
    ModelFile m;
    m.mode = mode_from_string(payload.at("mode").get<std::string>());
    m.assembly = payload.at("assembly").get<std::string>();
    m.grid.active_height_mm = payload.at("grid").at("active_height_mm").get<double>();
    m.grid.n_axial = payload.at("grid").at("n_axial").get<int>();
    m.train_config = train_config_from_json(payload.at("train_config"));
    m.history_digest = std::stoull(payload.at("history_digest").get<std::string>(), nullptr, 16);
    if (!payload.at("normalization").is_null())
        m.normalization = preprocess::normalization_from_json(payload.at("normalization"));
    const nncore::NetworkSpec spec = spec_from_json(payload.at("spec"));
    switch (m.mode) {
        case ModelMode::dnn: {
            nncore::Network net;
            net.spec = spec;
            net.layers = layers_from_json(payload.at("layers"));
            m.dnn = std::move(net);
            break;
        }
        case ModelMode::mcd: {
            mcd::DropoutNetwork net;
            net.base.spec = spec;
            net.base.layers = layers_from_json(payload.at("layers"));
            net.keep_prob = payload.at("keep_prob").get<double>();
            net.input_dropout = payload.at("input_dropout").get<bool>();
            net.scaling = mcd::scaling_from_string(payload.at("scaling").get<std::string>());
            m.mcdnet = std::move(net);
            break;
        }
        case ModelMode::bnn: {
            bnnvi::BayesianNetwork net;
            net.spec = spec;
            net.layers = vlayers_from_json(payload.at("vlayers"));
            net.prior = {payload.at("prior").at("mean").get<double>(),
                         payload.at("prior").at("std").get<double>()};
            net.n_train = payload.at("n_train").get<long>();
            m.bnn = std::move(net);
            break;
        }
    }
    m.validate();
    return m;
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const ModelFile& m) {
    m.validate();
    const nlohmann::json payload = detail::payload_to_json(m);
    nlohmann::json j = {
        {"format", "fluxnet-model"},
        {"version", 1},
        {"checksum", hex64(fnv1a64(payload.dump()))},
        {"payload", payload},
    };
    write_file(path, j.dump(2) + "\n");
}

inline ModelFile load_model(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model file is not valid JSON: " + path.string() + " (" + e.what() + ")");
    }
    try {
        if (j.at("format").get<std::string>() != "fluxnet-model")
            throw DataError("not a model file: " + path.string());
        if (j.at("version").get<int>() != 1)
            throw DataError("unsupported model file version in " + path.string());
        const nlohmann::json& payload = j.at("payload");
        const std::string want = j.at("checksum").get<std::string>();
        const std::string got = hex64(fnv1a64(payload.dump()));
        if (want != got)
            throw DataError("model file checksum mismatch in " + path.string());
        return detail::payload_from_json(payload);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("model file schema mismatch: " + path.string() + " (" + e.what() + ")");
    }
}

// Typed load: rejects a file whose mode tag differs from the expected mode.
inline ModelFile load_model(const std::filesystem::path& path, ModelMode expect) {
    ModelFile m = load_model(path);
    if (m.mode != expect)
        throw DataError("model file " + path.string() + " holds a " + to_string(m.mode) +
                        " model, expected " + to_string(expect));
    return m;
}

// ---- unified prediction ----------------------------------------------------

// Predictive summaries in physical units for physical-unit query points
// (bank position, axial position). Stochastic modes run `passes` passes; the
// plain network is deterministic and reports zero epistemic spread.
inline std::vector<predictive::PredictiveDistribution> predict_points(
        const ModelFile& m, const std::vector<std::vector<double>>& points, int passes,
        std::uint64_t seed, double level = 0.95, int workers = 1) {
    m.validate();
    if (!(level > 0.0) || !(level < 1.0)) throw ConfigError("interval level must lie in (0,1)");
    std::vector<std::vector<double>> mapped = points;
    if (m.normalization) {
        for (auto& p : mapped) {
            if (p.size() != 2) throw ConfigError("normalized models take (bank, z) query points");
            p[0] = preprocess::zscore_apply(p[0], m.normalization->bank);
            p[1] = preprocess::zscore_apply(p[1], m.normalization->z);
        }
    }
    std::vector<predictive::PredictiveDistribution> preds;
    switch (m.mode) {
        case ModelMode::dnn: {
            preds.reserve(mapped.size());
            for (const auto& p : mapped) {
                const std::vector<double> raw = nncore::forward(*m.dnn, p);
                predictive::PredictiveDistribution d;
                d.mean = raw[0];
                if (m.dnn->spec.head == nncore::Head::gaussian)
                    d.aleatoric_std = nncore::decode_sigma(raw[m.dnn->spec.output_dim]);
                d.total_std = d.aleatoric_std;
                const double z = predictive::normal_quantile(0.5 * (1.0 + level));
                d.ci_low = d.mean - z * d.total_std;
                d.ci_high = d.mean + z * d.total_std;
                d.level = level;
                d.passes = 1;
                preds.push_back(d);
            }
            break;
        }
        case ModelMode::mcd:
            preds = mcd::mc_predict_batch(*m.mcdnet, mapped, passes, seed, level, workers);
            break;
        case ModelMode::bnn:
            preds = bnnvi::bnn_predict_batch(*m.bnn, mapped, passes, seed, level, workers);
            break;
    }
    if (m.normalization)
        for (auto& d : preds) d = predictive::denormalize(d, m.normalization->y);
    return preds;
}

}  // namespace fluxnet::model_io
