#pragma once

// Monte Carlo dropout: Bernoulli masks on the network input and on every
// hidden activation, kept active at prediction time. Repeated stochastic
// passes give a predictive distribution whose spread is the epistemic
// uncertainty; a gaussian head adds the aleatoric part.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/nncore.hpp"
#include "fluxnet/predictive.hpp"
#include "fluxnet/rng.hpp"

namespace fluxnet::mcd {

// Mask conventions: `none` feeds kept units through unchanged, `sqrt_width`
// additionally scales every hidden activation by sqrt(1/width), `inverted`
// divides kept units by the keep probability so the expected pre-activation
// is unchanged.
enum class DropoutScaling { none, sqrt_width, inverted };

inline std::string to_string(DropoutScaling s) {
    switch (s) {
        case DropoutScaling::none: return "none";
        case DropoutScaling::sqrt_width: return "sqrt_width";
        case DropoutScaling::inverted: return "inverted";
    }
    throw ConfigError("unknown dropout scaling");
}

inline DropoutScaling scaling_from_string(const std::string& s) {
    if (s == "none") return DropoutScaling::none;
    if (s == "sqrt_width") return DropoutScaling::sqrt_width;
    if (s == "inverted") return DropoutScaling::inverted;
    throw DataError("unknown dropout scaling: " + s);
}

struct DropoutNetwork {
    nncore::Network base;
    double keep_prob = 0.8;  // p; the drop rate is 1 - p
    bool input_dropout = true;
    DropoutScaling scaling = DropoutScaling::none;

    double drop_rate() const { return 1.0 - keep_prob; }

    void validate() const {
        base.validate_shapes();
        if (!(keep_prob > 0.0) || keep_prob > 1.0)
            throw ConfigError("keep probability must lie in (0,1]");
    }
};

inline DropoutNetwork make_dropout_network(const nncore::NetworkSpec& spec, std::uint64_t seed,
                                           double drop_rate = 0.2, bool input_dropout = true,
                                           DropoutScaling scaling = DropoutScaling::none) {
    if (drop_rate < 0.0 || !(drop_rate < 1.0)) throw ConfigError("drop rate must lie in [0,1)");
    DropoutNetwork net;
    net.base = nncore::make_network(spec, seed);
    net.keep_prob = 1.0 - drop_rate;
    net.input_dropout = input_dropout;
    net.scaling = scaling;
    net.validate();
    return net;
}

// Bernoulli(keep_prob) indicator per unit.
inline std::vector<double> dropout_mask(int width, double keep_prob, Rng& rng) {
    if (width < 1) throw ConfigError("mask width must be at least 1");
    if (!(keep_prob > 0.0) || keep_prob > 1.0)
        throw ConfigError("keep probability must lie in (0,1]");
    std::bernoulli_distribution keep(keep_prob);
    std::vector<double> mask(static_cast<std::size_t>(width));
    for (double& m : mask) m = keep(rng) ? 1.0 : 0.0;
    return mask;
}

// One realization of all masks plus the per-layer input scales.
struct DropoutPlan {
    std::vector<std::vector<double>> masks;
    std::vector<double> scales;

    nncore::LayerTransform transform() const { return {&masks, &scales}; }
};

inline DropoutPlan draw_plan(const DropoutNetwork& net, Rng& rng) {
    const auto& spec = net.base.spec;
    const std::size_t L = net.base.layers.size();
    DropoutPlan plan;
    plan.masks.resize(L);
    plan.scales.assign(L, 1.0);
    const double kept_value =
        net.scaling == DropoutScaling::inverted ? 1.0 / net.keep_prob : 1.0;
    for (std::size_t l = 0; l < L; ++l) {
        const int width = l == 0 ? spec.input_dim : spec.hidden[l - 1];
        if (l == 0 && !net.input_dropout) {
            plan.masks[l].assign(static_cast<std::size_t>(width), 1.0);
        } else {
            plan.masks[l] = dropout_mask(width, net.keep_prob, rng);
            if (kept_value != 1.0)
                for (double& m : plan.masks[l]) m *= kept_value;
        }
        if (l > 0 && net.scaling == DropoutScaling::sqrt_width)
            plan.scales[l] = std::sqrt(1.0 / static_cast<double>(width));
    }
    return plan;
}

// One stochastic pass with freshly drawn masks; returns the raw head output.
inline std::vector<double> forward_dropout(const DropoutNetwork& net, std::span<const double> x,
                                           Rng& rng) {
    const DropoutPlan plan = draw_plan(net, rng);
    const nncore::LayerTransform tf = plan.transform();
    return nncore::forward(net.base, x, nullptr, &tf);
}

// Masked data loss averaged over the batch plus the dropout-adjusted penalty
// lambda * sum(keep_prob*|W|^2 + |b|^2). Masks are redrawn per sample.
inline double mcd_loss(const DropoutNetwork& net, const std::vector<std::vector<double>>& xs,
                       const std::vector<std::vector<double>>& ys, nncore::Loss loss,
                       double lambda, Rng& rng) {
    if (xs.empty() || xs.size() != ys.size())
        throw ConfigError("batch needs equal non-zero numbers of inputs and targets");
    net.validate();
    double data = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::vector<double> raw = forward_dropout(net, xs[i], rng);
        data += nncore::sample_loss(loss, net.base.spec.head, raw, ys[i]);
    }
    return data / static_cast<double>(xs.size()) +
           nncore::l2_penalty(net.base, lambda, net.keep_prob);
}

namespace detail {

class McdAdapter {
public:
    McdAdapter(DropoutNetwork& net, const nncore::TabularData& train,
               const nncore::TabularData& val, const nncore::TrainConfig& cfg)
        : net_(net), train_(train), val_(val), cfg_(cfg),
          grads_(nncore::Gradients::like(net.base)) {
        net.validate();
        train.validate(net.base.spec.input_dim, net.base.spec.output_dim);
        val.validate(net.base.spec.input_dim, net.base.spec.output_dim);
        if (val.size() == 0) throw DataError("empty validation split");
    }

    std::size_t train_size() const { return train_.size(); }
    nncore::ParamRefs params() { return nncore::param_refs(net_.base); }
    nncore::GradRefs grads() const { return nncore::grad_refs(grads_); }

    // Per-sample masks, identical in the forward and backward passes.
    double compute_batch(std::span<const std::size_t> idx, Rng& rng) {
        grads_.zero();
        std::vector<double> dout(static_cast<std::size_t>(net_.base.spec.final_width()));
        double data = 0.0;
        for (std::size_t i : idx) {
            const DropoutPlan plan = draw_plan(net_, rng);
            const nncore::LayerTransform tf = plan.transform();
            const std::vector<double> raw = nncore::forward(net_.base, train_.xs[i], &cache_, &tf);
            data += nncore::sample_loss_grad(cfg_.loss, net_.base.spec.head, raw, train_.ys[i], dout);
            nncore::backward_sample(net_.base, cache_, dout, grads_, &tf);
        }
        const double inv = 1.0 / static_cast<double>(idx.size());
        grads_.scale(inv);
        nncore::add_l2_gradient(net_.base, cfg_.weight_decay, net_.keep_prob, grads_);
        return data * inv + nncore::l2_penalty(net_.base, cfg_.weight_decay, net_.keep_prob);
    }

    // Inverted scaling validates with masks off (the deterministic rescaled
    // approximation); the other modes average a few stochastic passes drawn
    // from the per-epoch validation stream.
    double validation_loss(Rng& rng) {
        double s = 0.0;
        if (net_.scaling == DropoutScaling::inverted) {
            for (std::size_t i = 0; i < val_.size(); ++i) {
                const std::vector<double> raw = nncore::forward(net_.base, val_.xs[i]);
                s += nncore::sample_loss(cfg_.loss, net_.base.spec.head, raw, val_.ys[i]);
            }
            return s / static_cast<double>(val_.size());
        }
        constexpr int kValPasses = 4;
        for (std::size_t i = 0; i < val_.size(); ++i) {
            for (int k = 0; k < kValPasses; ++k) {
                const std::vector<double> raw = forward_dropout(net_, val_.xs[i], rng);
                s += nncore::sample_loss(cfg_.loss, net_.base.spec.head, raw, val_.ys[i]);
            }
        }
        return s / static_cast<double>(val_.size() * kValPasses);
    }

    void snapshot() { saved_ = net_.base.layers; }
    void restore() {
        if (!saved_.empty()) net_.base.layers = saved_;
    }

private:
    DropoutNetwork& net_;
    const nncore::TabularData& train_;
    const nncore::TabularData& val_;
    const nncore::TrainConfig& cfg_;
    nncore::Gradients grads_;
    nncore::ForwardCache cache_;
    std::vector<nncore::Layer> saved_;
};

}  // namespace detail

inline nncore::TrainHistory train_mcd(DropoutNetwork& net, const nncore::TabularData& train_split,
                                      const nncore::TabularData& val_split,
                                      const nncore::TrainConfig& cfg) {
    detail::McdAdapter adapter(net, train_split, val_split, cfg);
    return nncore::train_loop(adapter, cfg);
}

inline nncore::TrainHistory train_mcd(DropoutNetwork& net,
                                      const preprocess::RegressionDataset& train_split,
                                      const preprocess::RegressionDataset& val_split,
                                      const nncore::TrainConfig& cfg) {
    const nncore::TabularData tr = nncore::TabularData::from(train_split);
    const nncore::TabularData va = nncore::TabularData::from(val_split);
    return train_mcd(net, tr, va, cfg);
}

// ---- prediction ------------------------------------------------------------

namespace detail {

inline void decode_prediction(const nncore::NetworkSpec& spec, std::span<const double> raw,
                              double& mu, double& sigma) {
    if (spec.head == nncore::Head::gaussian) {
        mu = raw[0];
        sigma = nncore::decode_sigma(raw[1]);
    } else {
        mu = raw[0];
        sigma = 0.0;
    }
}

// Runs chunks [0, n_chunks) of stochastic passes through eval_chunk on the
// requested number of workers. eval_chunk(chunk_index) must be independent
// across chunks; results are merged by the caller in chunk order.
template <class Fn>
void run_chunks(int n_chunks, int workers, Fn&& eval_chunk) {
    workers = std::max(1, std::min(workers, n_chunks));
    if (workers == 1) {
        for (int c = 0; c < n_chunks; ++c) eval_chunk(c);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            for (int c = w; c < n_chunks; c += workers) eval_chunk(c);
        });
    for (auto& t : pool) t.join();
}

}  // namespace detail

// Monte Carlo predictive summaries for a batch of query points. Every pass
// draws one mask realization shared by all points. Passes are organized in
// fixed-size chunks with independent substreams, so results depend on the
// seed and pass count but not on the worker count.
inline std::vector<predictive::PredictiveDistribution> mc_predict_batch(
        const DropoutNetwork& net, const std::vector<std::vector<double>>& points, int passes,
        std::uint64_t seed, double level = 0.95, int workers = 1) {
    net.validate();
    if (net.base.spec.output_dim != 1)
        throw ConfigError("predictive summaries support a single output");
    if (passes < 2) throw ConfigError("Monte Carlo prediction needs at least two passes");
    if (points.empty()) throw ConfigError("no query points");
    for (const auto& p : points)
        if (p.size() != static_cast<std::size_t>(net.base.spec.input_dim))
            throw ConfigError("query point size does not match network input dimension");

    const int n_chunks = predictive::chunk_count(passes);
    const std::size_t np = points.size();
    std::vector<std::vector<predictive::MomentAccumulator>> chunk_acc(
        static_cast<std::size_t>(n_chunks), std::vector<predictive::MomentAccumulator>(np));

    detail::run_chunks(n_chunks, workers, [&](int c) {
        Rng rng = substream(seed, "mc-chunk", static_cast<std::uint64_t>(c));
        const int begin = c * predictive::kChunkPasses;
        const int end = std::min(passes, begin + predictive::kChunkPasses);
        auto& acc = chunk_acc[static_cast<std::size_t>(c)];
        for (int t = begin; t < end; ++t) {
            const DropoutPlan plan = draw_plan(net, rng);
            const nncore::LayerTransform tf = plan.transform();
            for (std::size_t i = 0; i < np; ++i) {
                const std::vector<double> raw = nncore::forward(net.base, points[i], nullptr, &tf);
                double mu, sigma;
                detail::decode_prediction(net.base.spec, raw, mu, sigma);
                acc[i].add(mu, sigma);
            }
        }
    });

    std::vector<predictive::PredictiveDistribution> out;
    out.reserve(np);
    for (std::size_t i = 0; i < np; ++i) {
        predictive::MomentAccumulator total;
        for (int c = 0; c < n_chunks; ++c) total.merge(chunk_acc[static_cast<std::size_t>(c)][i]);
        out.push_back(total.finalize(level));
    }
    return out;
}

inline predictive::PredictiveDistribution mc_predict(const DropoutNetwork& net,
                                                     std::span<const double> x, int passes,
                                                     std::uint64_t seed, double level = 0.95) {
    const std::vector<std::vector<double>> pts = {std::vector<double>(x.begin(), x.end())};
    return mc_predict_batch(net, pts, passes, seed, level)[0];
}

}  // namespace fluxnet::mcd
