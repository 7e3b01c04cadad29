#pragma once

// Feedforward network core: dense layers, forward evaluation with optional
// per-layer input masks (used by dropout), reverse-mode gradients, losses,
// Adam, and a training loop with early stopping and learning-rate reduction
// on plateau.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/preprocess.hpp"
#include "fluxnet/rng.hpp"

namespace fluxnet::nncore {

// ---- activations and heads -------------------------------------------------

enum class Activation { relu, tanh, identity };
enum class Head { point, gaussian };
enum class Loss { mse, mae, gaussian_nll };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    throw ConfigError("unknown activation");
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw DataError("unknown activation: " + s);
}

inline std::string to_string(Head h) { return h == Head::point ? "point" : "gaussian"; }

inline Head head_from_string(const std::string& s) {
    if (s == "point") return Head::point;
    if (s == "gaussian") return Head::gaussian;
    throw DataError("unknown head: " + s);
}

inline std::string to_string(Loss l) {
    switch (l) {
        case Loss::mse: return "mse";
        case Loss::mae: return "mae";
        case Loss::gaussian_nll: return "gaussian_nll";
    }
    throw ConfigError("unknown loss");
}

inline Loss loss_from_string(const std::string& s) {
    if (s == "mse") return Loss::mse;
    if (s == "mae") return Loss::mae;
    if (s == "gaussian_nll") return Loss::gaussian_nll;
    throw DataError("unknown loss: " + s);
}

inline double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::tanh: return std::tanh(x);
        case Activation::identity: return x;
    }
    throw ConfigError("unknown activation");
}

// Derivative in terms of pre-activation and activation value. The relu
// subgradient at zero is zero.
inline double activation_grad(Activation a, double pre, double act) {
    switch (a) {
        case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: return 1.0 - act * act;
        case Activation::identity: return 1.0;
    }
    throw ConfigError("unknown activation");
}

inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double softplus_grad(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double softplus_inverse(double y) {
    if (!(y > 0.0)) throw ConfigError("softplus inverse needs a positive argument");
    if (y > 30.0) return y;
    return y + std::log1p(-std::exp(-y));
}

// Positivity floor for predicted standard deviations.
inline constexpr double kSigmaFloor = 1e-8;

inline double decode_sigma(double raw) { return softplus(raw) + kSigmaFloor; }

// ---- network structure -----------------------------------------------------

struct NetworkSpec {
    int input_dim = 2;
    int output_dim = 1;
    std::vector<int> hidden;
    std::vector<Activation> activations;  // one per hidden layer
    Head head = Head::point;

    int depth() const { return static_cast<int>(hidden.size()) + 1; }
    // The gaussian head emits a (value, scale) pair per output.
    int final_width() const { return head == Head::gaussian ? 2 * output_dim : output_dim; }

    void validate() const {
        if (input_dim < 1 || output_dim < 1) throw ConfigError("network dimensions must be at least 1");
        if (hidden.empty()) throw ConfigError("network needs at least one hidden layer");
        for (int w : hidden)
            if (w < 1) throw ConfigError("hidden widths must be at least 1");
        if (activations.size() != hidden.size())
            throw ConfigError("one activation per hidden layer required");
    }

    static NetworkSpec dense(int input_dim, int output_dim, std::vector<int> hidden,
                             Activation act = Activation::relu, Head head = Head::point) {
        NetworkSpec s;
        s.input_dim = input_dim;
        s.output_dim = output_dim;
        s.hidden = std::move(hidden);
        s.activations.assign(s.hidden.size(), act);
        s.head = head;
        s.validate();
        return s;
    }

    std::vector<int> layer_widths() const {
        std::vector<int> w;
        w.push_back(input_dim);
        w.insert(w.end(), hidden.begin(), hidden.end());
        w.push_back(final_width());
        return w;
    }
};

struct Layer {
    int in = 0, out = 0;
    std::vector<double> w;  // row-major, w[i*out + j] couples input i to unit j
    std::vector<double> b;
};

struct Network {
    NetworkSpec spec;
    std::vector<Layer> layers;

    void validate_shapes() const {
        spec.validate();
        const std::vector<int> widths = spec.layer_widths();
        if (layers.size() + 1 != widths.size()) throw ConfigError("layer count does not match spec");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const Layer& lay = layers[l];
            if (lay.in != widths[l] || lay.out != widths[l + 1])
                throw ConfigError("layer " + std::to_string(l) + " shape does not match spec");
            if (lay.w.size() != static_cast<std::size_t>(lay.in) * static_cast<std::size_t>(lay.out) ||
                lay.b.size() != static_cast<std::size_t>(lay.out))
                throw ConfigError("layer " + std::to_string(l) + " parameter sizes are inconsistent");
        }
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.w.size() + l.b.size();
        return n;
    }
};

// He-uniform fan-in limits for relu layers, Glorot-uniform otherwise. Biases
// start at zero.
inline Network make_network(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Network net;
    net.spec = spec;
    const std::vector<int> widths = spec.layer_widths();
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        Layer lay;
        lay.in = widths[l];
        lay.out = widths[l + 1];
        lay.w.resize(static_cast<std::size_t>(lay.in) * static_cast<std::size_t>(lay.out));
        lay.b.assign(static_cast<std::size_t>(lay.out), 0.0);
        const Activation act =
            l < spec.hidden.size() ? spec.activations[l] : Activation::identity;
        const double limit = act == Activation::relu
                                 ? std::sqrt(6.0 / lay.in)
                                 : std::sqrt(6.0 / (lay.in + lay.out));
        Rng rng = substream(seed, "layer", l);
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (double& w : lay.w) w = dist(rng);
        net.layers.push_back(std::move(lay));
    }
    return net;
}

// ---- forward ---------------------------------------------------------------

// Optional multiplicative transform on each layer's input: value fed to layer
// l is scales[l] * masks[l][i] * h[i]. Used for dropout masks and width
// scaling; null members mean no transform.
struct LayerTransform {
    const std::vector<std::vector<double>>* masks = nullptr;
    const std::vector<double>* scales = nullptr;
};

struct ForwardCache {
    std::vector<std::vector<double>> fed;  // transformed input of each layer
    std::vector<std::vector<double>> pre;  // affine output of each layer
    std::vector<std::vector<double>> act;  // nonlinearity output (output layer: raw)
};

namespace detail {

inline void ensure_finite(std::span<const double> v, std::size_t layer) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericError("non-finite activation at layer " + std::to_string(layer));
}

}  // namespace detail

inline std::vector<double> forward(const Network& net, std::span<const double> x,
                                   ForwardCache* cache = nullptr,
                                   const LayerTransform* tf = nullptr) {
    if (x.size() != static_cast<std::size_t>(net.spec.input_dim))
        throw ConfigError("input size does not match network input dimension");
    const std::size_t L = net.layers.size();
    if (cache) {
        cache->fed.resize(L);
        cache->pre.resize(L);
        cache->act.resize(L);
    }
    std::vector<double> cur(x.begin(), x.end());
    for (std::size_t l = 0; l < L; ++l) {
        const Layer& lay = net.layers[l];
        if (tf) {
            const double scale = tf->scales ? (*tf->scales)[l] : 1.0;
            const std::vector<double>* mask = tf->masks ? &(*tf->masks)[l] : nullptr;
            if (mask && mask->size() != cur.size())
                throw ConfigError("mask size does not match layer " + std::to_string(l) + " input");
            for (std::size_t i = 0; i < cur.size(); ++i) {
                double v = cur[i];
                if (mask) v *= (*mask)[i];
                v *= scale;
                cur[i] = v;
            }
        }
        if (cache) cache->fed[l] = cur;
        std::vector<double> pre(static_cast<std::size_t>(lay.out));
        for (std::size_t j = 0; j < pre.size(); ++j) pre[j] = lay.b[j];
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double xi = cur[i];
            if (xi == 0.0) continue;
            const double* wrow = lay.w.data() + i * static_cast<std::size_t>(lay.out);
            for (std::size_t j = 0; j < pre.size(); ++j) pre[j] += xi * wrow[j];
        }
        detail::ensure_finite(pre, l);
        if (l + 1 < L) {
            const Activation act = net.spec.activations[l];
            std::vector<double> out(pre.size());
            for (std::size_t j = 0; j < pre.size(); ++j) out[j] = apply_activation(act, pre[j]);
            if (cache) {
                cache->pre[l] = std::move(pre);
                cache->act[l] = out;
            }
            cur = std::move(out);
        } else {
            if (cache) {
                cache->pre[l] = pre;
                cache->act[l] = pre;
            }
            cur = std::move(pre);
        }
    }
    return cur;
}

// ---- losses ----------------------------------------------------------------

// Mean over samples of the squared error summed across output components.
inline double loss_mse(std::span<const double> pred, std::span<const double> target,
                       int output_dim = 1) {
    if (pred.size() != target.size() || pred.empty())
        throw ConfigError("loss needs equal-length non-empty prediction and target");
    if (output_dim < 1 || pred.size() % static_cast<std::size_t>(output_dim) != 0)
        throw ConfigError("loss length is not a multiple of the output dimension");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s / (static_cast<double>(pred.size()) / output_dim);
}

inline double loss_mae(std::span<const double> pred, std::span<const double> target,
                       int output_dim = 1) {
    if (pred.size() != target.size() || pred.empty())
        throw ConfigError("loss needs equal-length non-empty prediction and target");
    if (output_dim < 1 || pred.size() % static_cast<std::size_t>(output_dim) != 0)
        throw ConfigError("loss length is not a multiple of the output dimension");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
    return s / (static_cast<double>(pred.size()) / output_dim);
}

// lambda * sum over layers of (weight_scale * |W|^2 + |b|^2).
inline double l2_penalty(const Network& net, double lambda, double weight_scale = 1.0) {
    if (lambda < 0.0) throw ConfigError("penalty strength must be non-negative");
    double s = 0.0;
    for (const auto& lay : net.layers) {
        double ws = 0.0, bs = 0.0;
        for (double w : lay.w) ws += w * w;
        for (double b : lay.b) bs += b * b;
        s += weight_scale * ws + bs;
    }
    return lambda * s;
}

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5*ln(2*pi)

inline double gaussian_nll(double y, double mu, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian nll needs a positive scale");
    const double r = (y - mu) / sigma;
    return kHalfLog2Pi + std::log(sigma) + 0.5 * r * r;
}

// ---- per-sample loss gradients ---------------------------------------------

// Loss value of one sample given the raw network output; fills the gradient
// of the sample loss with respect to the raw output.
inline double sample_loss_grad(Loss loss, Head head, std::span<const double> raw,
                               std::span<const double> target, std::span<double> dout) {
    const std::size_t m = target.size();
    if (dout.size() != raw.size()) throw ConfigError("output gradient size mismatch");
    switch (loss) {
        case Loss::mse: {
            if (head != Head::point || raw.size() != m)
                throw ConfigError("mse requires a point head matching the target size");
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                const double d = raw[k] - target[k];
                s += d * d;
                dout[k] = 2.0 * d;
            }
            return s;
        }
        case Loss::mae: {
            if (head != Head::point || raw.size() != m)
                throw ConfigError("mae requires a point head matching the target size");
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                const double d = raw[k] - target[k];
                s += std::abs(d);
                dout[k] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            }
            return s;
        }
        case Loss::gaussian_nll: {
            if (head != Head::gaussian || raw.size() != 2 * m)
                throw ConfigError("gaussian nll requires a gaussian head with value and scale outputs");
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                const double mu = raw[k];
                const double sraw = raw[m + k];
                const double sigma = decode_sigma(sraw);
                const double r = target[k] - mu;
                s += kHalfLog2Pi + std::log(sigma) + 0.5 * r * r / (sigma * sigma);
                dout[k] = (mu - target[k]) / (sigma * sigma);
                dout[m + k] = (1.0 / sigma - r * r / (sigma * sigma * sigma)) * softplus_grad(sraw);
            }
            return s;
        }
    }
    throw ConfigError("unknown loss");
}

inline double sample_loss(Loss loss, Head head, std::span<const double> raw,
                          std::span<const double> target) {
    thread_local std::vector<double> scratch;
    scratch.assign(raw.size(), 0.0);
    return sample_loss_grad(loss, head, raw, target, scratch);
}

// ---- backward --------------------------------------------------------------

struct Gradients {
    std::vector<Layer> layers;

    static Gradients like(const Network& net) {
        Gradients g;
        g.layers.reserve(net.layers.size());
        for (const auto& lay : net.layers) {
            Layer gl;
            gl.in = lay.in;
            gl.out = lay.out;
            gl.w.assign(lay.w.size(), 0.0);
            gl.b.assign(lay.b.size(), 0.0);
            g.layers.push_back(std::move(gl));
        }
        return g;
    }

    void zero() {
        for (auto& l : layers) {
            std::fill(l.w.begin(), l.w.end(), 0.0);
            std::fill(l.b.begin(), l.b.end(), 0.0);
        }
    }

    void scale(double f) {
        for (auto& l : layers) {
            for (double& w : l.w) w *= f;
            for (double& b : l.b) b *= f;
        }
    }
};

// Accumulates (+=) the gradients of one sample into grads given the gradient
// of the sample loss with respect to the raw output. The cache and transform
// must come from the matching forward call.
inline void backward_sample(const Network& net, const ForwardCache& cache,
                            std::span<const double> dout, Gradients& grads,
                            const LayerTransform* tf = nullptr) {
    const std::size_t L = net.layers.size();
    std::vector<double> delta(dout.begin(), dout.end());
    for (std::size_t l = L; l-- > 0;) {
        const Layer& lay = net.layers[l];
        Layer& g = grads.layers[l];
        const std::vector<double>& fed = cache.fed[l];
        for (std::size_t j = 0; j < delta.size(); ++j) g.b[j] += delta[j];
        for (std::size_t i = 0; i < fed.size(); ++i) {
            const double xi = fed[i];
            if (xi == 0.0) continue;
            double* grow = g.w.data() + i * static_cast<std::size_t>(lay.out);
            for (std::size_t j = 0; j < delta.size(); ++j) grow[j] += xi * delta[j];
        }
        if (l == 0) break;
        std::vector<double> dprev(static_cast<std::size_t>(lay.in), 0.0);
        for (std::size_t i = 0; i < dprev.size(); ++i) {
            const double* wrow = lay.w.data() + i * static_cast<std::size_t>(lay.out);
            double s = 0.0;
            for (std::size_t j = 0; j < delta.size(); ++j) s += wrow[j] * delta[j];
            dprev[i] = s;
        }
        if (tf) {
            const double scale = tf->scales ? (*tf->scales)[l] : 1.0;
            const std::vector<double>* mask = tf->masks ? &(*tf->masks)[l] : nullptr;
            for (std::size_t i = 0; i < dprev.size(); ++i) {
                if (mask) dprev[i] *= (*mask)[i];
                dprev[i] *= scale;
            }
        }
        const Activation act = net.spec.activations[l - 1];
        delta.resize(dprev.size());
        for (std::size_t i = 0; i < dprev.size(); ++i)
            delta[i] = dprev[i] * activation_grad(act, cache.pre[l - 1][i], cache.act[l - 1][i]);
    }
}

// Adds the gradient of lambda*(weight_scale*|W|^2 + |b|^2) to grads.
inline void add_l2_gradient(const Network& net, double lambda, double weight_scale,
                            Gradients& grads) {
    if (lambda == 0.0) return;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& lay = net.layers[l];
        Layer& g = grads.layers[l];
        const double wf = 2.0 * lambda * weight_scale;
        const double bf = 2.0 * lambda;
        for (std::size_t i = 0; i < lay.w.size(); ++i) g.w[i] += wf * lay.w[i];
        for (std::size_t i = 0; i < lay.b.size(); ++i) g.b[i] += bf * lay.b[i];
    }
}

// Mean data loss over the batch plus the L2 penalty; grads receive the
// gradient of that objective.
inline double backward_batch(const Network& net, const std::vector<std::vector<double>>& xs,
                             const std::vector<std::vector<double>>& ys, Loss loss,
                             double lambda, Gradients& grads) {
    if (xs.empty() || xs.size() != ys.size())
        throw ConfigError("batch needs equal non-zero numbers of inputs and targets");
    grads.zero();
    ForwardCache cache;
    std::vector<double> dout(static_cast<std::size_t>(net.spec.final_width()));
    double data = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::vector<double> raw = forward(net, xs[i], &cache);
        data += sample_loss_grad(loss, net.spec.head, raw, ys[i], dout);
        backward_sample(net, cache, dout, grads);
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    grads.scale(inv);
    add_l2_gradient(net, lambda, 1.0, grads);
    return data * inv + l2_penalty(net, lambda);
}

// ---- Adam ------------------------------------------------------------------

using ParamRefs = std::vector<std::span<double>>;
using GradRefs = std::vector<std::span<const double>>;

inline ParamRefs param_refs(Network& net) {
    ParamRefs refs;
    for (auto& l : net.layers) {
        refs.emplace_back(l.w);
        refs.emplace_back(l.b);
    }
    return refs;
}

inline GradRefs grad_refs(const Gradients& g) {
    GradRefs refs;
    for (const auto& l : g.layers) {
        refs.emplace_back(l.w);
        refs.emplace_back(l.b);
    }
    return refs;
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long step_count = 0;

    static AdamState like(const ParamRefs& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), 0.0);
            s.v.emplace_back(p.size(), 0.0);
        }
        return s;
    }
};

inline void optimizer_step(AdamState& state, const ParamRefs& params, const GradRefs& grads,
                           double lr, const AdamConfig& cfg = {}) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ConfigError("optimizer state does not match parameters");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    ++state.step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
    for (std::size_t g = 0; g < params.size(); ++g) {
        if (params[g].size() != grads[g].size() || params[g].size() != state.m[g].size())
            throw ConfigError("optimizer group size mismatch");
        double* p = params[g].data();
        const double* dg = grads[g].data();
        double* m = state.m[g].data();
        double* v = state.v[g].data();
        for (std::size_t i = 0; i < params[g].size(); ++i) {
            const double gi = dg[i];
            if (!std::isfinite(gi)) throw NumericError("non-finite gradient in optimizer step");
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

// ---- training --------------------------------------------------------------

struct EarlyStopConfig {
    bool enabled = true;
    int patience = 20;
    double min_delta = 0.0;
};

struct PlateauConfig {
    bool enabled = true;
    double factor = 0.5;
    int patience = 10;
    double min_lr = 1e-6;
};

struct TrainConfig {
    Loss loss = Loss::mse;
    double weight_decay = 0.0;
    double learning_rate = 1e-3;
    int batch_size = 16;
    int max_epochs = 100;
    EarlyStopConfig early_stop;
    PlateauConfig plateau;
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (max_epochs < 0) throw ConfigError("epoch budget must be non-negative");
        if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
        if (early_stop.enabled && early_stop.patience < 1)
            throw ConfigError("early stopping patience must be at least 1");
        if (early_stop.min_delta < 0.0) throw ConfigError("early stopping min_delta must be non-negative");
        if (plateau.enabled) {
            if (!(plateau.factor > 0.0) || !(plateau.factor < 1.0))
                throw ConfigError("plateau factor must lie in (0,1)");
            if (plateau.patience < 1) throw ConfigError("plateau patience must be at least 1");
            if (!(plateau.min_lr > 0.0)) throw ConfigError("plateau min_lr must be positive");
        }
    }
};

enum class StopReason { max_epochs, early_stop };

inline std::string to_string(StopReason r) {
    return r == StopReason::max_epochs ? "max_epochs" : "early_stop";
}

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<double> learning_rate;
    StopReason stop_reason = StopReason::max_epochs;
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();

    int epochs() const { return static_cast<int>(val_loss.size()); }

    std::uint64_t digest() const {
        std::string s;
        for (std::size_t i = 0; i < val_loss.size(); ++i) {
            s += format_double(train_loss[i]);
            s += ',';
            s += format_double(val_loss[i]);
            s += ',';
            s += format_double(learning_rate[i]);
            s += ';';
        }
        s += to_string(stop_reason);
        s += ',';
        s += std::to_string(best_epoch);
        return fnv1a64(s);
    }
};

// Training aborted on non-finite losses; carries the history so far.
class TrainDivergence : public NumericError {
public:
    TrainDivergence(std::string msg, TrainHistory hist)
        : NumericError(std::move(msg)), history(std::move(hist)) {}
    TrainHistory history;
};

// Shared mini-batch loop. The model adapter supplies parameters, batch
// gradients, a validation metric, and snapshot/restore of its parameters:
//   std::size_t train_size();
//   ParamRefs params();
//   GradRefs grads();
//   double compute_batch(std::span<const std::size_t> idx, Rng& rng);
//   double validation_loss(Rng& rng);
//   void snapshot(); void restore();
// Returned parameters are the snapshot with the lowest recorded validation
// loss. Batch losses are reported per sample.
template <class Model>
TrainHistory train_loop(Model& model, const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t n = model.train_size();
    if (n == 0) throw DataError("empty training split");

    TrainHistory hist;
    double lr = cfg.learning_rate;
    AdamState adam = AdamState::like(model.params());
    double es_best = std::numeric_limits<double>::infinity();
    int es_wait = 0;
    double pl_best = std::numeric_limits<double>::infinity();
    int pl_wait = 0;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng shuffle_rng = substream(cfg.rng_seed, "shuffle", static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        Rng batch_rng = substream(cfg.rng_seed, "batch", static_cast<std::uint64_t>(epoch));

        double loss_sum = 0.0;
        const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t count = std::min(batch, n - start);
            double obj;
            try {
                obj = model.compute_batch(std::span<const std::size_t>(order).subspan(start, count),
                                          batch_rng);
            } catch (const NumericError& e) {
                throw TrainDivergence(std::string(e.what()) + " at epoch " + std::to_string(epoch),
                                      std::move(hist));
            }
            if (!std::isfinite(obj))
                throw TrainDivergence("non-finite training loss at epoch " + std::to_string(epoch),
                                      std::move(hist));
            loss_sum += obj * static_cast<double>(count);
            optimizer_step(adam, model.params(), model.grads(), lr);
        }

        Rng val_rng = substream(cfg.rng_seed, "validation", static_cast<std::uint64_t>(epoch));
        const double val = model.validation_loss(val_rng);
        hist.train_loss.push_back(loss_sum / static_cast<double>(n));
        hist.val_loss.push_back(val);
        hist.learning_rate.push_back(lr);
        if (!std::isfinite(val))
            throw TrainDivergence("non-finite validation loss at epoch " + std::to_string(epoch),
                                  std::move(hist));

        if (val < hist.best_val) {
            hist.best_val = val;
            hist.best_epoch = epoch;
            model.snapshot();
        }

        if (cfg.early_stop.enabled) {
            if (val < es_best - cfg.early_stop.min_delta) {
                es_best = val;
                es_wait = 0;
            } else if (++es_wait >= cfg.early_stop.patience) {
                hist.stop_reason = StopReason::early_stop;
                break;
            }
        }
        if (cfg.plateau.enabled) {
            if (val < pl_best) {
                pl_best = val;
                pl_wait = 0;
            } else if (++pl_wait >= cfg.plateau.patience) {
                lr = std::max(lr * cfg.plateau.factor, cfg.plateau.min_lr);
                pl_wait = 0;
            }
        }
    }
    if (hist.best_epoch >= 0) model.restore();
    return hist;
}

// ---- tabular data and the plain trainer ------------------------------------

struct TabularData {
    std::vector<std::vector<double>> xs;
    std::vector<std::vector<double>> ys;

    std::size_t size() const { return xs.size(); }

    void validate(int input_dim, int output_dim) const {
        if (xs.size() != ys.size()) throw DataError("inputs and targets differ in length");
        for (const auto& x : xs)
            if (x.size() != static_cast<std::size_t>(input_dim))
                throw DataError("input row size does not match network input dimension");
        for (const auto& y : ys)
            if (y.size() != static_cast<std::size_t>(output_dim))
                throw DataError("target row size does not match network output dimension");
    }

    static TabularData from(const preprocess::RegressionDataset& ds) {
        TabularData d;
        d.xs.reserve(ds.samples.size());
        d.ys.reserve(ds.samples.size());
        for (const auto& s : ds.samples) {
            d.xs.push_back({s.bank_mm, s.z_mm});
            d.ys.push_back({s.y});
        }
        return d;
    }
};

namespace detail {

class DnnAdapter {
public:
    DnnAdapter(Network& net, const TabularData& train, const TabularData& val,
               const TrainConfig& cfg)
        : net_(net), train_(train), val_(val), cfg_(cfg), grads_(Gradients::like(net)) {
        net.validate_shapes();
        train.validate(net.spec.input_dim, net.spec.output_dim);
        val.validate(net.spec.input_dim, net.spec.output_dim);
        if (val.size() == 0) throw DataError("empty validation split");
    }

    std::size_t train_size() const { return train_.size(); }
    ParamRefs params() { return param_refs(net_); }
    GradRefs grads() const { return grad_refs(grads_); }

    double compute_batch(std::span<const std::size_t> idx, Rng&) {
        grads_.zero();
        std::vector<double> dout(static_cast<std::size_t>(net_.spec.final_width()));
        double data = 0.0;
        for (std::size_t i : idx) {
            const std::vector<double> raw = forward(net_, train_.xs[i], &cache_);
            data += sample_loss_grad(cfg_.loss, net_.spec.head, raw, train_.ys[i], dout);
            backward_sample(net_, cache_, dout, grads_);
        }
        const double inv = 1.0 / static_cast<double>(idx.size());
        grads_.scale(inv);
        add_l2_gradient(net_, cfg_.weight_decay, 1.0, grads_);
        return data * inv + l2_penalty(net_, cfg_.weight_decay);
    }

    // Configured loss on the validation split, without the penalty term.
    double validation_loss(Rng&) {
        double s = 0.0;
        for (std::size_t i = 0; i < val_.size(); ++i) {
            const std::vector<double> raw = forward(net_, val_.xs[i]);
            s += sample_loss(cfg_.loss, net_.spec.head, raw, val_.ys[i]);
        }
        return s / static_cast<double>(val_.size());
    }

    void snapshot() { saved_ = net_.layers; }
    void restore() {
        if (!saved_.empty()) net_.layers = saved_;
    }

private:
    Network& net_;
    const TabularData& train_;
    const TabularData& val_;
    const TrainConfig& cfg_;
    Gradients grads_;
    ForwardCache cache_;
    std::vector<Layer> saved_;
};

}  // namespace detail

inline TrainHistory train(Network& net, const TabularData& train_split,
                          const TabularData& val_split, const TrainConfig& cfg) {
    detail::DnnAdapter adapter(net, train_split, val_split, cfg);
    return train_loop(adapter, cfg);
}

inline TrainHistory train(Network& net, const preprocess::RegressionDataset& train_split,
                          const preprocess::RegressionDataset& val_split, const TrainConfig& cfg) {
    const TabularData tr = TabularData::from(train_split);
    const TabularData va = TabularData::from(val_split);
    return train(net, tr, va, cfg);
}

}  // namespace fluxnet::nncore
