#pragma once

// Two-stage hyperparameter search: random architecture sampling at a fixed
// learning rate and batch size, then a deterministic grid refinement of the
// learning rate and batch size around the winning architecture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "fluxnet/errors.hpp"
#include "fluxnet/io_util.hpp"
#include "fluxnet/rng.hpp"

namespace fluxnet::hpo {

struct HyperParams {
    std::vector<int> hidden;
    double learning_rate = 1e-4;
    int batch_size = 16;

    std::string describe() const {
        std::string s = "[";
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(hidden[i]);
        }
        s += "] lr=" + format_double(learning_rate) + " batch=" + std::to_string(batch_size);
        return s;
    }
};

struct SearchSpace {
    int min_layers = 1, max_layers = 5;
    int min_units = 8, max_units = 256;
    bool pyramid = true;  // sort sampled widths into non-increasing order
    double lr_min = 1e-5, lr_max = 1e-2;
    std::vector<int> batch_sizes = {8, 16, 32, 64, 128};
    // Fixed during the architecture stage.
    double stage1_learning_rate = 1e-4;
    int stage1_batch_size = 16;

    void validate() const {
        if (min_layers < 1 || max_layers < min_layers)
            throw ConfigError("layer count range must satisfy 1 <= min <= max");
        if (min_units < 1 || max_units < min_units)
            throw ConfigError("unit range must satisfy 1 <= min <= max");
        if (!(lr_min > 0.0) || !(lr_max >= lr_min))
            throw ConfigError("learning rate range must satisfy 0 < min <= max");
        if (batch_sizes.empty()) throw ConfigError("search space needs batch size choices");
        for (int b : batch_sizes)
            if (b < 1) throw ConfigError("batch sizes must be at least 1");
        if (!(stage1_learning_rate > 0.0) || stage1_batch_size < 1)
            throw ConfigError("stage-1 learning rate and batch size must be positive");
    }
};

// Uniform layer count and widths, log-uniform learning rate.
inline HyperParams sample_params(const SearchSpace& space, Rng& rng) {
    space.validate();
    std::uniform_int_distribution<int> n_layers(space.min_layers, space.max_layers);
    std::uniform_int_distribution<int> units(space.min_units, space.max_units);
    HyperParams p;
    const int L = n_layers(rng);
    p.hidden.reserve(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) p.hidden.push_back(units(rng));
    if (space.pyramid) std::sort(p.hidden.begin(), p.hidden.end(), std::greater<int>());
    std::uniform_real_distribution<double> loglr(std::log(space.lr_min), std::log(space.lr_max));
    p.learning_rate = std::exp(loglr(rng));
    std::uniform_int_distribution<std::size_t> pick(0, space.batch_sizes.size() - 1);
    p.batch_size = space.batch_sizes[pick(rng)];
    return p;
}

struct Trial {
    HyperParams params;
    double objective = std::numeric_limits<double>::infinity();
    bool diverged = false;
    std::uint64_t seed = 0;  // training seed handed to the evaluator
    int draw_index = 0;
    std::string note;  // failure description for quarantined trials
};

// Maps hyperparameters to a validation objective (lower is better); the seed
// makes repeated evaluations reproducible.
using Evaluator = std::function<double(const HyperParams&, std::uint64_t seed)>;

class SearchError : public NumericError {
public:
    SearchError(std::string msg, std::vector<Trial> log)
        : NumericError(std::move(msg)), trials(std::move(log)) {}
    std::vector<Trial> trials;
};

namespace detail {

// Runs the evaluator on pre-drawn trials. Failed trials are quarantined with
// their message instead of aborting the search.
inline void evaluate_trials(std::vector<Trial>& trials, const Evaluator& evaluate, int workers) {
    auto run_one = [&](Trial& t) {
        try {
            t.objective = evaluate(t.params, t.seed);
            if (!std::isfinite(t.objective)) {
                t.diverged = true;
                t.note = "non-finite objective";
                t.objective = std::numeric_limits<double>::infinity();
            }
        } catch (const NumericError& e) {
            t.diverged = true;
            t.note = e.what();
            t.objective = std::numeric_limits<double>::infinity();
        }
    };
    workers = std::max(1, std::min<int>(workers, static_cast<int>(trials.size())));
    if (workers == 1) {
        for (auto& t : trials) run_one(t);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            for (std::size_t i = static_cast<std::size_t>(w); i < trials.size();
                 i += static_cast<std::size_t>(workers))
                run_one(trials[i]);
        });
    for (auto& t : pool) t.join();
}

}  // namespace detail

// Best non-diverged trial; ties resolved by draw order.
inline const Trial& best_trial(const std::vector<Trial>& trials) {
    const Trial* best = nullptr;
    for (const auto& t : trials) {
        if (t.diverged) continue;
        if (!best || t.objective < best->objective) best = &t;
    }
    if (!best) throw SearchError("all trials diverged", trials);
    return *best;
}

// Draws `budget` candidates up front from the master seed, then evaluates
// them. The trial list is identical for any worker count.
inline std::vector<Trial> random_search(const SearchSpace& space, int budget,
                                        const Evaluator& evaluate, std::uint64_t seed,
                                        int workers = 1) {
    space.validate();
    if (budget < 1) throw ConfigError("search budget must be at least 1");
    if (!evaluate) throw ConfigError("search needs an evaluator");
    Rng rng = substream(seed, "hpo-draw");
    std::vector<Trial> trials(static_cast<std::size_t>(budget));
    for (int i = 0; i < budget; ++i) {
        Trial& t = trials[static_cast<std::size_t>(i)];
        HyperParams p = sample_params(space, rng);
        p.learning_rate = space.stage1_learning_rate;
        p.batch_size = space.stage1_batch_size;
        t.params = std::move(p);
        t.draw_index = i;
        t.seed = derive_seed(seed, "hpo-trial", static_cast<std::uint64_t>(i));
    }
    detail::evaluate_trials(trials, evaluate, workers);
    return trials;
}

struct Grid {
    std::vector<std::vector<int>> architectures;
    std::vector<double> learning_rates;
    std::vector<int> batch_sizes;

    bool empty() const {
        return architectures.empty() || learning_rates.empty() || batch_sizes.empty();
    }
};

// Exhaustive evaluation in lexicographic (architecture, learning rate, batch
// size) order.
inline std::vector<Trial> grid_search(const Grid& grid, const Evaluator& evaluate,
                                      std::uint64_t seed, int workers = 1) {
    if (grid.empty()) throw ConfigError("refinement grid is empty");
    if (!evaluate) throw ConfigError("search needs an evaluator");
    std::vector<Trial> trials;
    int i = 0;
    for (const auto& arch : grid.architectures)
        for (double lr : grid.learning_rates)
            for (int batch : grid.batch_sizes) {
                if (arch.empty()) throw ConfigError("grid architecture has no layers");
                if (!(lr > 0.0) || batch < 1)
                    throw ConfigError("grid learning rates and batch sizes must be positive");
                Trial t;
                t.params = {arch, lr, batch};
                t.draw_index = i;
                t.seed = derive_seed(seed, "hpo-grid", static_cast<std::uint64_t>(i));
                trials.push_back(std::move(t));
                ++i;
            }
    detail::evaluate_trials(trials, evaluate, workers);
    return trials;
}

using GridBuilder = std::function<Grid(const Trial& stage1_best)>;

// Learning rates scaled around the stage-1 value and clamped to the space,
// all batch choices, winning architecture only.
inline Grid default_refinement_grid(const Trial& stage1_best, const SearchSpace& space) {
    Grid g;
    g.architectures = {stage1_best.params.hidden};
    static const double factors[] = {0.1, 0.3, 1.0, 3.0, 10.0};
    for (double f : factors) {
        const double lr = std::clamp(stage1_best.params.learning_rate * f, space.lr_min, space.lr_max);
        if (std::find(g.learning_rates.begin(), g.learning_rates.end(), lr) == g.learning_rates.end())
            g.learning_rates.push_back(lr);
    }
    std::sort(g.learning_rates.begin(), g.learning_rates.end());
    g.batch_sizes = space.batch_sizes;
    return g;
}

struct TwoStageResult {
    Trial best;
    std::vector<Trial> stage1, stage2;
};

inline TwoStageResult two_stage_search(const SearchSpace& space, int stage1_budget,
                                       const GridBuilder& build_grid, const Evaluator& evaluate,
                                       std::uint64_t seed, int workers = 1) {
    TwoStageResult result;
    result.stage1 = random_search(space, stage1_budget, evaluate, seed, workers);
    const Trial& s1 = best_trial(result.stage1);
    const Grid grid = build_grid ? build_grid(s1) : default_refinement_grid(s1, space);
    if (grid.empty()) {
        result.best = s1;
        return result;
    }
    result.stage2 = grid_search(grid, evaluate, derive_seed(seed, "hpo-stage2"), workers);
    result.best = best_trial(result.stage2);
    return result;
}

}  // namespace fluxnet::hpo
