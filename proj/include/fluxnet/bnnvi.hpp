#pragma once

// Mean-field variational inference over network weights: independent
// gaussian posteriors q(w) = N(mu, softplus(rho)^2) trained against a
// gaussian prior by minimizing the variational free energy, with gradients
// through the reparameterization w = mu + softplus(rho)*eps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/mcd.hpp"
#include "fluxnet/nncore.hpp"
#include "fluxnet/predictive.hpp"
#include "fluxnet/rng.hpp"

namespace fluxnet::bnnvi {

using nncore::gaussian_nll;

struct GaussianPrior {
    double mean = 0.0;
    double std = 1.0;
};

struct VariationalLayer {
    int in = 0, out = 0;
    std::vector<double> w_mean, w_rho;  // sigma = softplus(rho)
    std::vector<double> b_mean, b_rho;
};

struct BayesianNetwork {
    nncore::NetworkSpec spec;
    std::vector<VariationalLayer> layers;
    GaussianPrior prior;
    long n_train = 1;  // dataset size N weighting the KL term

    void validate() const {
        spec.validate();
        if (!(prior.std > 0.0)) throw ConfigError("prior std must be positive");
        if (n_train < 1) throw ConfigError("bayesian network needs a positive training size");
        const std::vector<int> widths = spec.layer_widths();
        if (layers.size() + 1 != widths.size()) throw ConfigError("layer count does not match spec");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& lay = layers[l];
            if (lay.in != widths[l] || lay.out != widths[l + 1])
                throw ConfigError("variational layer " + std::to_string(l) + " shape mismatch");
            const auto wn = static_cast<std::size_t>(lay.in) * static_cast<std::size_t>(lay.out);
            if (lay.w_mean.size() != wn || lay.w_rho.size() != wn ||
                lay.b_mean.size() != static_cast<std::size_t>(lay.out) ||
                lay.b_rho.size() != static_cast<std::size_t>(lay.out))
                throw ConfigError("variational layer " + std::to_string(l) + " parameter sizes");
        }
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += 2 * (l.w_mean.size() + l.b_mean.size());
        return n;
    }
};

// Posterior means follow the plain network initialization; posterior scales
// start at a small fraction of the prior scale.
inline BayesianNetwork make_bayesian_network(const nncore::NetworkSpec& spec, std::uint64_t seed,
                                             const GaussianPrior& prior = {},
                                             double init_scale_fraction = 0.05) {
    if (!(prior.std > 0.0)) throw ConfigError("prior std must be positive");
    if (!(init_scale_fraction > 0.0) || init_scale_fraction >= 1.0)
        throw ConfigError("posterior scale fraction must lie in (0,1)");
    const nncore::Network proto = nncore::make_network(spec, seed);
    const double rho0 = nncore::softplus_inverse(init_scale_fraction * prior.std);
    BayesianNetwork net;
    net.spec = spec;
    net.prior = prior;
    for (const auto& lay : proto.layers) {
        VariationalLayer v;
        v.in = lay.in;
        v.out = lay.out;
        v.w_mean = lay.w;
        v.w_rho.assign(lay.w.size(), rho0);
        v.b_mean = lay.b;
        v.b_rho.assign(lay.b.size(), rho0);
        net.layers.push_back(std::move(v));
    }
    net.validate();
    return net;
}

// Unit normal draws for every weight and bias.
struct WeightDraw {
    std::vector<std::vector<double>> w_eps, b_eps;
};

inline WeightDraw draw_noise(const BayesianNetwork& net, Rng& rng) {
    std::normal_distribution<double> unit(0.0, 1.0);
    WeightDraw d;
    d.w_eps.reserve(net.layers.size());
    d.b_eps.reserve(net.layers.size());
    for (const auto& lay : net.layers) {
        std::vector<double> we(lay.w_mean.size());
        for (double& e : we) e = unit(rng);
        std::vector<double> be(lay.b_mean.size());
        for (double& e : be) e = unit(rng);
        d.w_eps.push_back(std::move(we));
        d.b_eps.push_back(std::move(be));
    }
    return d;
}

// Concrete network w = mean + softplus(rho) * eps.
inline nncore::Network materialize(const BayesianNetwork& net, const WeightDraw& draw) {
    nncore::Network out;
    out.spec = net.spec;
    out.layers.reserve(net.layers.size());
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& v = net.layers[l];
        nncore::Layer lay;
        lay.in = v.in;
        lay.out = v.out;
        lay.w.resize(v.w_mean.size());
        lay.b.resize(v.b_mean.size());
        for (std::size_t i = 0; i < lay.w.size(); ++i)
            lay.w[i] = v.w_mean[i] + nncore::softplus(v.w_rho[i]) * draw.w_eps[l][i];
        for (std::size_t i = 0; i < lay.b.size(); ++i)
            lay.b[i] = v.b_mean[i] + nncore::softplus(v.b_rho[i]) * draw.b_eps[l][i];
        out.layers.push_back(std::move(lay));
    }
    return out;
}

inline nncore::Network sample_weights(const BayesianNetwork& net, Rng& rng) {
    const WeightDraw d = draw_noise(net, rng);
    return materialize(net, d);
}

// Network built from the posterior means.
inline nncore::Network mean_network(const BayesianNetwork& net) {
    nncore::Network out;
    out.spec = net.spec;
    for (const auto& v : net.layers) {
        nncore::Layer lay;
        lay.in = v.in;
        lay.out = v.out;
        lay.w = v.w_mean;
        lay.b = v.b_mean;
        out.layers.push_back(std::move(lay));
    }
    return out;
}

// KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) in closed form.
inline double kl_gaussian(double mu_q, double sigma_q, double mu_p, double sigma_p) {
    if (!(sigma_q > 0.0) || !(sigma_p > 0.0)) throw ConfigError("KL needs positive scales");
    const double d = mu_q - mu_p;
    return std::log(sigma_p / sigma_q) +
           (sigma_q * sigma_q + d * d) / (2.0 * sigma_p * sigma_p) - 0.5;
}

// Total KL of the factorized posterior against the prior.
inline double kl_divergence(const BayesianNetwork& net) {
    double s = 0.0;
    auto add = [&](const std::vector<double>& mean, const std::vector<double>& rho) {
        for (std::size_t i = 0; i < mean.size(); ++i)
            s += kl_gaussian(mean[i], nncore::softplus(rho[i]), net.prior.mean, net.prior.std);
    };
    for (const auto& lay : net.layers) {
        add(lay.w_mean, lay.w_rho);
        add(lay.b_mean, lay.b_rho);
    }
    return s;
}

// ---- free energy and gradients ---------------------------------------------

// Variational free energy of one batch: (batch/N)*KL plus the negative log
// likelihood summed over the batch, averaged over mc_samples weight draws.
inline double free_energy(const BayesianNetwork& net, const std::vector<std::vector<double>>& xs,
                          const std::vector<std::vector<double>>& ys, int mc_samples, Rng& rng) {
    net.validate();
    if (xs.empty() || xs.size() != ys.size())
        throw ConfigError("batch needs equal non-zero numbers of inputs and targets");
    if (mc_samples < 1) throw ConfigError("free energy needs at least one weight draw");
    const double kl_weight = static_cast<double>(xs.size()) / static_cast<double>(net.n_train);
    double value = kl_weight * kl_divergence(net);
    double data = 0.0;
    for (int s = 0; s < mc_samples; ++s) {
        const nncore::Network sample = sample_weights(net, rng);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const std::vector<double> raw = nncore::forward(sample, xs[i]);
            data += nncore::sample_loss(nncore::Loss::gaussian_nll, net.spec.head, raw, ys[i]);
        }
    }
    return value + data / static_cast<double>(mc_samples);
}

struct VariationalGradients {
    struct LayerGrad {
        std::vector<double> w_mean, w_rho, b_mean, b_rho;
    };
    std::vector<LayerGrad> layers;

    static VariationalGradients like(const BayesianNetwork& net) {
        VariationalGradients g;
        for (const auto& lay : net.layers) {
            LayerGrad lg;
            lg.w_mean.assign(lay.w_mean.size(), 0.0);
            lg.w_rho.assign(lay.w_rho.size(), 0.0);
            lg.b_mean.assign(lay.b_mean.size(), 0.0);
            lg.b_rho.assign(lay.b_rho.size(), 0.0);
            g.layers.push_back(std::move(lg));
        }
        return g;
    }

    void zero() {
        for (auto& lg : layers) {
            std::fill(lg.w_mean.begin(), lg.w_mean.end(), 0.0);
            std::fill(lg.w_rho.begin(), lg.w_rho.end(), 0.0);
            std::fill(lg.b_mean.begin(), lg.b_mean.end(), 0.0);
            std::fill(lg.b_rho.begin(), lg.b_rho.end(), 0.0);
        }
    }
};

inline nncore::ParamRefs param_refs(BayesianNetwork& net) {
    nncore::ParamRefs refs;
    for (auto& lay : net.layers) {
        refs.emplace_back(lay.w_mean);
        refs.emplace_back(lay.w_rho);
        refs.emplace_back(lay.b_mean);
        refs.emplace_back(lay.b_rho);
    }
    return refs;
}

inline nncore::GradRefs grad_refs(const VariationalGradients& g) {
    nncore::GradRefs refs;
    for (const auto& lg : g.layers) {
        refs.emplace_back(lg.w_mean);
        refs.emplace_back(lg.w_rho);
        refs.emplace_back(lg.b_mean);
        refs.emplace_back(lg.b_rho);
    }
    return refs;
}

// Free energy of the batch under the given fixed draws, with its gradient
// with respect to all variational parameters. Data-term gradients flow
// through the reparameterization; the KL term is differentiated in closed
// form.
inline double free_energy_grad(const BayesianNetwork& net,
                               const std::vector<std::vector<double>>& xs,
                               const std::vector<std::vector<double>>& ys,
                               const std::vector<WeightDraw>& draws, VariationalGradients& grads) {
    if (xs.empty() || xs.size() != ys.size())
        throw ConfigError("batch needs equal non-zero numbers of inputs and targets");
    if (draws.empty()) throw ConfigError("free energy gradient needs at least one weight draw");
    grads.zero();

    const double kl_weight = static_cast<double>(xs.size()) / static_cast<double>(net.n_train);
    double value = kl_weight * kl_divergence(net);
    const double pv = net.prior.std * net.prior.std;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& lay = net.layers[l];
        auto& lg = grads.layers[l];
        auto kl_grads = [&](const std::vector<double>& mean, const std::vector<double>& rho,
                            std::vector<double>& gm, std::vector<double>& gr) {
            for (std::size_t i = 0; i < mean.size(); ++i) {
                const double sigma = nncore::softplus(rho[i]);
                gm[i] += kl_weight * (mean[i] - net.prior.mean) / pv;
                gr[i] += kl_weight * (sigma / pv - 1.0 / sigma) * nncore::softplus_grad(rho[i]);
            }
        };
        kl_grads(lay.w_mean, lay.w_rho, lg.w_mean, lg.w_rho);
        kl_grads(lay.b_mean, lay.b_rho, lg.b_mean, lg.b_rho);
    }

    const double inv_s = 1.0 / static_cast<double>(draws.size());
    nncore::ForwardCache cache;
    std::vector<double> dout(static_cast<std::size_t>(net.spec.final_width()));
    for (const WeightDraw& draw : draws) {
        const nncore::Network sample = materialize(net, draw);
        nncore::Gradients sample_grads = nncore::Gradients::like(sample);
        double data = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const std::vector<double> raw = nncore::forward(sample, xs[i], &cache);
            data += nncore::sample_loss_grad(nncore::Loss::gaussian_nll, net.spec.head, raw,
                                             ys[i], dout);
            nncore::backward_sample(sample, cache, dout, sample_grads);
        }
        value += data * inv_s;
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            const auto& lay = net.layers[l];
            const auto& sg = sample_grads.layers[l];
            auto& lg = grads.layers[l];
            for (std::size_t i = 0; i < lay.w_mean.size(); ++i) {
                const double g = sg.w[i] * inv_s;
                lg.w_mean[i] += g;
                lg.w_rho[i] += g * draw.w_eps[l][i] * nncore::softplus_grad(lay.w_rho[i]);
            }
            for (std::size_t i = 0; i < lay.b_mean.size(); ++i) {
                const double g = sg.b[i] * inv_s;
                lg.b_mean[i] += g;
                lg.b_rho[i] += g * draw.b_eps[l][i] * nncore::softplus_grad(lay.b_rho[i]);
            }
        }
    }
    return value;
}

// ---- training --------------------------------------------------------------

struct BnnTrainOptions {
    int mc_samples = 1;  // weight draws per training batch
};

namespace detail {

class BnnAdapter {
public:
    BnnAdapter(BayesianNetwork& net, const nncore::TabularData& train,
               const nncore::TabularData& val, const nncore::TrainConfig& cfg,
               const BnnTrainOptions& opts)
        : net_(net), train_(train), val_(val), cfg_(cfg), opts_(opts),
          grads_(VariationalGradients::like(net)) {
        if (net.spec.head != nncore::Head::gaussian)
            throw ConfigError("variational training requires a gaussian head");
        if (cfg.loss != nncore::Loss::gaussian_nll)
            throw ConfigError("variational training uses the gaussian nll loss");
        if (opts.mc_samples < 1) throw ConfigError("mc_samples must be at least 1");
        net.validate();
        train.validate(net.spec.input_dim, net.spec.output_dim);
        val.validate(net.spec.input_dim, net.spec.output_dim);
        if (val.size() == 0) throw DataError("empty validation split");
        net_.n_train = static_cast<long>(train.size());
    }

    std::size_t train_size() const { return train_.size(); }
    nncore::ParamRefs params() { return param_refs(net_); }
    nncore::GradRefs grads() const { return grad_refs(grads_); }

    double compute_batch(std::span<const std::size_t> idx, Rng& rng) {
        batch_xs_.clear();
        batch_ys_.clear();
        for (std::size_t i : idx) {
            batch_xs_.push_back(train_.xs[i]);
            batch_ys_.push_back(train_.ys[i]);
        }
        std::vector<WeightDraw> draws;
        draws.reserve(static_cast<std::size_t>(opts_.mc_samples));
        for (int s = 0; s < opts_.mc_samples; ++s) draws.push_back(draw_noise(net_, rng));
        const double value = free_energy_grad(net_, batch_xs_, batch_ys_, draws, grads_);
        return value / static_cast<double>(idx.size());
    }

    // Per-sample free energy on the validation split: KL/N plus the mean
    // negative log likelihood over a few fixed stochastic draws.
    double validation_loss(Rng& rng) {
        constexpr int kValDraws = 4;
        double nll = 0.0;
        for (int s = 0; s < kValDraws; ++s) {
            const nncore::Network sample = sample_weights(net_, rng);
            for (std::size_t i = 0; i < val_.size(); ++i) {
                const std::vector<double> raw = nncore::forward(sample, val_.xs[i]);
                nll += nncore::sample_loss(nncore::Loss::gaussian_nll, net_.spec.head, raw,
                                           val_.ys[i]);
            }
        }
        return kl_divergence(net_) / static_cast<double>(net_.n_train) +
               nll / static_cast<double>(val_.size() * kValDraws);
    }

    void snapshot() { saved_ = net_.layers; }
    void restore() {
        if (!saved_.empty()) net_.layers = saved_;
    }

private:
    BayesianNetwork& net_;
    const nncore::TabularData& train_;
    const nncore::TabularData& val_;
    const nncore::TrainConfig& cfg_;
    BnnTrainOptions opts_;
    VariationalGradients grads_;
    std::vector<VariationalLayer> saved_;
    std::vector<std::vector<double>> batch_xs_, batch_ys_;
};

}  // namespace detail

inline nncore::TrainHistory train_bnn(BayesianNetwork& net, const nncore::TabularData& train_split,
                                      const nncore::TabularData& val_split,
                                      const nncore::TrainConfig& cfg,
                                      const BnnTrainOptions& opts = {}) {
    detail::BnnAdapter adapter(net, train_split, val_split, cfg, opts);
    return nncore::train_loop(adapter, cfg);
}

inline nncore::TrainHistory train_bnn(BayesianNetwork& net,
                                      const preprocess::RegressionDataset& train_split,
                                      const preprocess::RegressionDataset& val_split,
                                      const nncore::TrainConfig& cfg,
                                      const BnnTrainOptions& opts = {}) {
    const nncore::TabularData tr = nncore::TabularData::from(train_split);
    const nncore::TabularData va = nncore::TabularData::from(val_split);
    return train_bnn(net, tr, va, cfg, opts);
}

// ---- prediction ------------------------------------------------------------

// Posterior predictive summaries: every pass draws one weight realization
// shared by all query points. Chunked substreams as in the dropout
// predictor, so results are independent of the worker count.
inline std::vector<predictive::PredictiveDistribution> bnn_predict_batch(
        const BayesianNetwork& net, const std::vector<std::vector<double>>& points, int passes,
        std::uint64_t seed, double level = 0.95, int workers = 1) {
    net.validate();
    if (net.spec.output_dim != 1)
        throw ConfigError("predictive summaries support a single output");
    if (passes < 2) throw ConfigError("posterior prediction needs at least two passes");
    if (points.empty()) throw ConfigError("no query points");
    for (const auto& p : points)
        if (p.size() != static_cast<std::size_t>(net.spec.input_dim))
            throw ConfigError("query point size does not match network input dimension");

    const int n_chunks = predictive::chunk_count(passes);
    const std::size_t np = points.size();
    std::vector<std::vector<predictive::MomentAccumulator>> chunk_acc(
        static_cast<std::size_t>(n_chunks), std::vector<predictive::MomentAccumulator>(np));

    mcd::detail::run_chunks(n_chunks, workers, [&](int c) {
        Rng rng = substream(seed, "bnn-chunk", static_cast<std::uint64_t>(c));
        const int begin = c * predictive::kChunkPasses;
        const int end = std::min(passes, begin + predictive::kChunkPasses);
        auto& acc = chunk_acc[static_cast<std::size_t>(c)];
        for (int t = begin; t < end; ++t) {
            const nncore::Network sample = sample_weights(net, rng);
            for (std::size_t i = 0; i < np; ++i) {
                const std::vector<double> raw = nncore::forward(sample, points[i]);
                double mu, sigma;
                if (net.spec.head == nncore::Head::gaussian) {
                    mu = raw[0];
                    sigma = nncore::decode_sigma(raw[1]);
                } else {
                    mu = raw[0];
                    sigma = 0.0;
                }
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

inline predictive::PredictiveDistribution bnn_predict(const BayesianNetwork& net,
                                                      std::span<const double> x, int passes,
                                                      std::uint64_t seed, double level = 0.95) {
    const std::vector<std::vector<double>> pts = {std::vector<double>(x.begin(), x.end())};
    return bnn_predict_batch(net, pts, passes, seed, level)[0];
}

}  // namespace fluxnet::bnnvi
