#include <catch2/catch_amalgamated.hpp>

#include "fluxnet/mcd.hpp"

#include <cmath>
#include <random>

using namespace fluxnet;
using namespace fluxnet::mcd;
using namespace fluxnet::predictive;
using fluxnet::nncore::Activation;
using fluxnet::nncore::Head;
using fluxnet::nncore::Loss;
using fluxnet::nncore::NetworkSpec;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("normal quantile matches reference values") {
    CHECK(normal_quantile(0.5) == 0.0);
    CHECK_THAT(normal_quantile(0.975), WithinRel(1.959963984540054, 1e-12));
    CHECK_THAT(normal_quantile(0.025), WithinRel(-1.9599639845400545, 1e-12));
    CHECK_THAT(normal_quantile(0.9), WithinRel(1.2815515655446004, 1e-12));
    CHECK_THAT(normal_quantile(0.99), WithinRel(2.3263478740408408, 1e-12));
    CHECK_THAT(normal_quantile(1e-6), WithinRel(-4.753424308822899, 1e-11));
    CHECK_THAT(normal_quantile(0.3), WithinRel(-0.5244005127080409, 1e-12));
    CHECK_THROWS_AS(normal_quantile(0.0), ConfigError);
    CHECK_THROWS_AS(normal_quantile(1.0), ConfigError);

    for (double p : {0.01, 0.2, 0.5, 0.8, 0.999})
        CHECK_THAT(normal_cdf(normal_quantile(p)), WithinAbs(p, 1e-12));
}

TEST_CASE("moment accumulator reproduces direct statistics") {
    const std::vector<double> mus = {1.0, 2.0, 4.0, -1.0, 0.5};
    const std::vector<double> sigmas = {0.1, 0.2, 0.3, 0.4, 0.5};
    MomentAccumulator acc;
    for (std::size_t i = 0; i < mus.size(); ++i) acc.add(mus[i], sigmas[i]);

    double mean = 0.0;
    for (double m : mus) mean += m;
    mean /= 5.0;
    double ss = 0.0;
    for (double m : mus) ss += (m - mean) * (m - mean);
    const double epi_var = ss / 4.0;  // unbiased over passes
    double ale_var = 0.0;
    for (double s : sigmas) ale_var += s * s;
    ale_var /= 5.0;

    const PredictiveDistribution p = acc.finalize(0.95);
    CHECK_THAT(p.mean, WithinRel(mean, 1e-14));
    CHECK_THAT(p.epistemic_std, WithinRel(std::sqrt(epi_var), 1e-13));
    CHECK_THAT(p.aleatoric_std, WithinRel(std::sqrt(ale_var), 1e-13));
    CHECK_THAT(p.total_std, WithinRel(std::sqrt(epi_var + ale_var), 1e-13));
    CHECK_THAT(p.ci_high - p.mean, WithinRel(1.959963984540054 * p.total_std, 1e-12));
    CHECK_THAT(p.mean - p.ci_low, WithinRel(1.959963984540054 * p.total_std, 1e-12));
    CHECK(p.passes == 5);

    MomentAccumulator one;
    one.add(1.0, 0.0);
    CHECK_THROWS_AS(one.finalize(0.95), ConfigError);
}

TEST_CASE("chunked merge equals one-shot accumulation") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0.0, 1.0);
    MomentAccumulator whole, a, b, c;
    for (int i = 0; i < 1000; ++i) {
        const double mu = nd(rng), sg = std::abs(nd(rng));
        whole.add(mu, sg);
        (i < 300 ? a : i < 450 ? b : c).add(mu, sg);
    }
    MomentAccumulator merged = a;
    merged.merge(b);
    merged.merge(c);
    const auto x = whole.finalize(0.9);
    const auto y = merged.finalize(0.9);
    CHECK_THAT(y.mean, WithinRel(x.mean, 1e-13));
    CHECK_THAT(y.epistemic_std, WithinRel(x.epistemic_std, 1e-12));
    CHECK_THAT(y.aleatoric_std, WithinRel(x.aleatoric_std, 1e-13));
    CHECK(y.passes == x.passes);
}

TEST_CASE("dropout masks are seeded bernoulli draws") {
    Rng r1 = seeded_rng(3);
    Rng r2 = seeded_rng(3);
    const auto m1 = dropout_mask(1000, 0.8, r1);
    const auto m2 = dropout_mask(1000, 0.8, r2);
    CHECK(m1 == m2);

    double kept = 0.0;
    for (double m : m1) {
        CHECK((m == 0.0 || m == 1.0));
        kept += m;
    }
    CHECK(kept > 700.0);
    CHECK(kept < 900.0);

    Rng r3 = seeded_rng(4);
    const auto all = dropout_mask(64, 1.0, r3);
    for (double m : all) CHECK(m == 1.0);
    CHECK_THROWS_AS(dropout_mask(0, 0.5, r3), ConfigError);
    CHECK_THROWS_AS(dropout_mask(8, 0.0, r3), ConfigError);
}

TEST_CASE("dropout plan covers input and hidden layers") {
    NetworkSpec spec = NetworkSpec::dense(2, 1, {16, 9}, Activation::relu);
    spec.head = Head::gaussian;

    DropoutNetwork net = make_dropout_network(spec, 11, 0.25, true, DropoutScaling::none);
    Rng rng = seeded_rng(5);
    const DropoutPlan plan = draw_plan(net, rng);
    REQUIRE(plan.masks.size() == 3);  // input + two hidden; nothing after the head
    CHECK(plan.masks[0].size() == 2);
    CHECK(plan.masks[1].size() == 16);
    CHECK(plan.masks[2].size() == 9);
    CHECK(plan.scales == std::vector<double>{1.0, 1.0, 1.0});

    DropoutNetwork no_input = make_dropout_network(spec, 11, 0.25, false);
    Rng rng2 = seeded_rng(5);
    const DropoutPlan p2 = draw_plan(no_input, rng2);
    CHECK(p2.masks[0] == std::vector<double>{1.0, 1.0});

    DropoutNetwork inv = make_dropout_network(spec, 11, 0.25, true, DropoutScaling::inverted);
    Rng rng3 = seeded_rng(5);
    const DropoutPlan p3 = draw_plan(inv, rng3);
    for (const auto& mask : p3.masks)
        for (double m : mask) CHECK((m == 0.0 || std::abs(m - 1.0 / 0.75) < 1e-15));

    DropoutNetwork sw = make_dropout_network(spec, 11, 0.25, true, DropoutScaling::sqrt_width);
    Rng rng4 = seeded_rng(5);
    const DropoutPlan p4 = draw_plan(sw, rng4);
    CHECK(p4.scales[0] == 1.0);
    CHECK_THAT(p4.scales[1], WithinRel(std::sqrt(1.0 / 16.0), 1e-15));
    CHECK_THAT(p4.scales[2], WithinRel(std::sqrt(1.0 / 9.0), 1e-15));
}

TEST_CASE("keep probability one is bit-identical to the deterministic forward") {
    NetworkSpec spec = NetworkSpec::dense(2, 1, {32, 16}, Activation::relu);
    spec.head = Head::gaussian;
    DropoutNetwork net = make_dropout_network(spec, 21, 0.0);
    REQUIRE(net.keep_prob == 1.0);

    std::mt19937_64 xr(1);
    std::uniform_real_distribution<double> xd(-3.0, 3.0);
    Rng rng = seeded_rng(77);
    for (int i = 0; i < 50; ++i) {
        const std::vector<double> x = {xd(xr), xd(xr)};
        const auto stoch = forward_dropout(net, x, rng);
        const auto det = nncore::forward(net.base, x);
        REQUIRE(stoch.size() == det.size());
        for (std::size_t k = 0; k < det.size(); ++k) CHECK(stoch[k] == det[k]);
    }

    // The same holds through the Monte Carlo summary: zero epistemic spread.
    const auto p = mc_predict(net, std::vector<double>{0.5, -0.5}, 64, 9);
    CHECK(p.epistemic_std == 0.0);
    CHECK(p.mean == nncore::forward(net.base, std::vector<double>{0.5, -0.5})[0]);
}

TEST_CASE("masked loss uses the dropout-weighted penalty") {
    NetworkSpec spec = NetworkSpec::dense(1, 1, {4}, Activation::tanh);
    DropoutNetwork net = make_dropout_network(spec, 2, 0.0);
    const std::vector<std::vector<double>> xs = {{0.5}, {-0.5}};
    const std::vector<std::vector<double>> ys = {{1.0}, {0.0}};

    Rng rng = seeded_rng(1);
    const double lam = 0.05;
    const double got = mcd_loss(net, xs, ys, Loss::mse, lam, rng);
    double expect = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto out = nncore::forward(net.base, xs[i]);
        const double d = out[0] - ys[i][0];
        expect += d * d;
    }
    expect = expect / 2.0 + nncore::l2_penalty(net.base, lam, net.keep_prob);
    CHECK_THAT(got, WithinRel(expect, 1e-14));

    // With p < 1 the penalty scales weights by p but biases stay full.
    DropoutNetwork half = make_dropout_network(spec, 2, 0.5);
    Rng rng2 = seeded_rng(1);
    const double with_mask = mcd_loss(half, xs, ys, Loss::mse, lam, rng2);
    CHECK(std::isfinite(with_mask));
}

TEST_CASE("mc prediction is seed-deterministic and worker-independent") {
    NetworkSpec spec = NetworkSpec::dense(2, 1, {24, 12}, Activation::relu);
    spec.head = Head::gaussian;
    DropoutNetwork net = make_dropout_network(spec, 31, 0.2);

    const std::vector<std::vector<double>> pts = {{0.1, -0.4}, {1.0, 1.0}, {-2.0, 0.3}};
    const auto a = mc_predict_batch(net, pts, 2500, 42, 0.95, 1);
    const auto b = mc_predict_batch(net, pts, 2500, 42, 0.95, 1);
    const auto c = mc_predict_batch(net, pts, 2500, 42, 0.95, 3);
    const auto d = mc_predict_batch(net, pts, 2500, 43, 0.95, 1);

    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].mean == b[i].mean);
        CHECK(a[i].total_std == b[i].total_std);
        // Worker count changes scheduling only, never the result.
        CHECK(a[i].mean == c[i].mean);
        CHECK(a[i].epistemic_std == c[i].epistemic_std);
        CHECK(a[i].total_std == c[i].total_std);
        CHECK(a[i].passes == 2500);
        CHECK(a[i].ci_low < a[i].mean);
        CHECK(a[i].mean < a[i].ci_high);
        CHECK(a[i].epistemic_std > 0.0);
        CHECK(a[i].aleatoric_std > 0.0);
    }
    CHECK(a[0].mean != d[0].mean);

    // The single-point wrapper is the batch path.
    const auto single = mc_predict(net, pts[1], 2500, 42);
    CHECK(single.mean == a[1].mean);
    CHECK(single.total_std == a[1].total_std);

    CHECK_THROWS_AS(mc_predict_batch(net, pts, 1, 42), ConfigError);
    CHECK_THROWS_AS(mc_predict_batch(net, {}, 100, 42), ConfigError);
    CHECK_THROWS_AS(mc_predict_batch(net, {{1.0}}, 100, 42), ConfigError);
}

TEST_CASE("point head reports zero aleatoric spread") {
    const NetworkSpec spec = NetworkSpec::dense(2, 1, {8}, Activation::tanh);
    DropoutNetwork net = make_dropout_network(spec, 3, 0.3);
    const auto p = mc_predict(net, std::vector<double>{0.2, 0.8}, 512, 5);
    CHECK(p.aleatoric_std == 0.0);
    CHECK(p.epistemic_std > 0.0);
    CHECK(p.total_std == p.epistemic_std);
}

TEST_CASE("mcd training learns a noisy sine") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> xd(-1.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.05);
    nncore::TabularData train_data, val_data;
    for (int i = 0; i < 300; ++i) {
        const double a = xd(rng), b = xd(rng);
        train_data.xs.push_back({a, b});
        train_data.ys.push_back({std::sin(2.0 * a) * 0.5 + 0.3 * b + noise(rng)});
    }
    for (int i = 0; i < 80; ++i) {
        const double a = xd(rng), b = xd(rng);
        val_data.xs.push_back({a, b});
        val_data.ys.push_back({std::sin(2.0 * a) * 0.5 + 0.3 * b + noise(rng)});
    }

    NetworkSpec spec = NetworkSpec::dense(2, 1, {24, 12}, Activation::relu);
    spec.head = Head::gaussian;
    DropoutNetwork net = make_dropout_network(spec, 8, 0.1);

    nncore::TrainConfig cfg;
    cfg.loss = Loss::gaussian_nll;
    cfg.learning_rate = 5e-3;
    cfg.batch_size = 32;
    cfg.max_epochs = 40;
    cfg.early_stop.enabled = false;
    cfg.rng_seed = 4;

    const auto hist = train_mcd(net, train_data, val_data, cfg);
    REQUIRE(hist.epochs() == 40);
    CHECK(hist.val_loss.back() < hist.val_loss.front());

    DropoutNetwork net2 = make_dropout_network(spec, 8, 0.1);
    const auto hist2 = train_mcd(net2, train_data, val_data, cfg);
    CHECK(hist.val_loss == hist2.val_loss);
    CHECK(net.base.layers[0].w == net2.base.layers[0].w);

    // The fitted noise head is in the right range near the data.
    const auto p = mc_predict(net, std::vector<double>{0.0, 0.0}, 2048, 3);
    CHECK(p.aleatoric_std > 0.005);
    CHECK(p.aleatoric_std < 0.5);
}

TEST_CASE("denormalize maps summaries back to physical units") {
    PredictiveDistribution p;
    p.mean = 0.5;
    p.epistemic_std = 0.1;
    p.aleatoric_std = 0.2;
    p.total_std = std::sqrt(0.01 + 0.04);
    p.ci_low = 0.5 - p.total_std;
    p.ci_high = 0.5 + p.total_std;
    const preprocess::NormalizationState y{100.0, 40.0};
    const auto q = predictive::denormalize(p, y);
    CHECK_THAT(q.mean, WithinRel(120.0, 1e-14));
    CHECK_THAT(q.epistemic_std, WithinRel(4.0, 1e-14));
    CHECK_THAT(q.aleatoric_std, WithinRel(8.0, 1e-14));
    CHECK_THAT(q.total_std, WithinRel(40.0 * std::sqrt(0.05), 1e-14));
    CHECK_THAT(q.ci_high - q.ci_low, WithinRel(2.0 * q.total_std, 1e-12));
}
