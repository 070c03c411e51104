#include <cmath>
#include <random>

#include "doctest.h"
#include "fablink/predictor.hpp"
#include "synthetic.hpp"

using namespace fablink;
using namespace fablink::predictor;

namespace {

const std::vector<std::size_t> kDims = {14, 32, 16, 2};

Mlp random_mlp(std::mt19937_64& rng) {
    auto m = Mlp::xavier(kDims, rng());
    std::normal_distribution<double> g(0.0, 0.3);
    for (auto& l : m.layers()) {
        for (auto& b : l.b) b = g(rng);
    }
    return m;
}

Matrix random_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix m(rows, std::vector<double>(cols));
    for (auto& r : m) {
        for (auto& v : r) v = g(rng);
    }
    return m;
}

// Forward pass written out directly for the default dims.
std::vector<double> reference_forward(const Mlp& m, const std::vector<double>& x) {
    std::vector<double> a = x;
    for (std::size_t k = 0; k < m.layers().size(); ++k) {
        const auto& l = m.layers()[k];
        std::vector<double> z(l.out);
        for (std::size_t o = 0; o < l.out; ++o) {
            long double s = l.b[o];
            for (std::size_t i = 0; i < l.in; ++i) s += static_cast<long double>(l.w[o * l.in + i]) * a[i];
            z[o] = static_cast<double>(k + 1 < m.layers().size() ? std::tanh(s) : s);
        }
        a = z;
    }
    return a;
}

double max_gradient_rel_error(const Mlp& mlp, const Matrix& x, const Matrix& y) {
    const auto analytic = loss_and_grad(mlp, x, y).grad;
    auto p = mlp.parameters();
    Mlp probe = mlp;
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        probe.set_parameters(p);
        const double up = mse(probe, x, y);
        p[i] = keep - h;
        probe.set_parameters(p);
        const double down = mse(probe, x, y);
        p[i] = keep;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("zero network and bias passthrough") {
    Mlp m(kDims);
    std::mt19937_64 rng(1);
    const auto x = random_rows(rng, 1, 14)[0];
    CHECK(m.forward(x) == std::vector<double>{0.0, 0.0});
    m.layers().back().b = {1.0, 2.0};
    CHECK(m.forward(x) == std::vector<double>{1.0, 2.0});
    CHECK_THROWS_AS(m.forward(std::vector<double>(13)), ShapeError);
}

TEST_CASE("forward agrees with a direct evaluation") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
        const auto m = random_mlp(rng);
        const auto x = random_rows(rng, 1, 14)[0];
        const auto got = m.forward(x);
        const auto ref = reference_forward(m, x);
        CHECK(got[0] == doctest::Approx(ref[0]).epsilon(1e-12));
        CHECK(got[1] == doctest::Approx(ref[1]).epsilon(1e-12));
        CHECK(m.forward(x) == got);
    }
}

TEST_CASE("exact targets give zero loss and zero gradient") {
    std::mt19937_64 rng(3);
    const auto m = random_mlp(rng);
    const auto x = random_rows(rng, 6, 14);
    Matrix y;
    for (const auto& r : x) y.push_back(m.forward(r));
    const auto lg = loss_and_grad(m, x, y);
    CHECK(lg.mse == 0.0);
    for (double g : lg.grad) CHECK(g == 0.0);
}

TEST_CASE("backprop matches central finite differences") {
    std::mt19937_64 rng(4);
    for (int draw = 0; draw < 10; ++draw) {
        const auto m = random_mlp(rng);
        const auto x = random_rows(rng, 5, 14);
        const auto y = random_rows(rng, 5, 2);
        CHECK(max_gradient_rel_error(m, x, y) <= 1e-4);
    }
}

TEST_CASE("duplicating the batch leaves loss and gradient unchanged") {
    std::mt19937_64 rng(5);
    const auto m = random_mlp(rng);
    auto x = random_rows(rng, 7, 14);
    auto y = random_rows(rng, 7, 2);
    const auto single = loss_and_grad(m, x, y);
    const auto x2 = x, y2 = y;
    x.insert(x.end(), x2.begin(), x2.end());
    y.insert(y.end(), y2.begin(), y2.end());
    const auto doubled = loss_and_grad(m, x, y);
    CHECK(doubled.mse == doctest::Approx(single.mse).epsilon(1e-12));
    for (std::size_t i = 0; i < single.grad.size(); ++i) {
        CHECK(doubled.grad[i] == doctest::Approx(single.grad[i]).epsilon(1e-10).scale(1e-12));
    }
}

TEST_CASE("shape errors") {
    Mlp m(kDims);
    CHECK_THROWS_AS(loss_and_grad(m, {}, {}), ShapeError);
    CHECK_THROWS_AS(loss_and_grad(m, {std::vector<double>(14)}, {}), ShapeError);
    CHECK_THROWS_AS(loss_and_grad(m, {std::vector<double>(14)}, {std::vector<double>(3)}), ShapeError);
}

TEST_CASE("xavier init bounds and determinism") {
    const auto a = Mlp::xavier(kDims, 9), b = Mlp::xavier(kDims, 9);
    CHECK(a == b);
    CHECK_FALSE(a == Mlp::xavier(kDims, 10));
    for (const auto& l : a.layers()) {
        const double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
        for (double w : l.w) CHECK(std::abs(w) <= limit);
        for (double bias : l.b) CHECK(bias == 0.0);
    }
}

TEST_CASE("standardizer round trip and degenerate columns") {
    std::mt19937_64 rng(6);
    auto x = random_rows(rng, 30, 14);
    for (auto& r : x) r[3] = 7.0;
    auto y = random_rows(rng, 30, 2);
    for (auto& r : y) r[0] = r[0] * 1e4 + 3e5;
    const auto s = Standardizer::fit(x, y);
    CHECK(s.x_std[3] == 1.0);
    CHECK(s.x_mean[3] == 7.0);
    for (const auto& r : y) {
        const auto back = s.destandardize_y(s.standardize_y(r));
        CHECK(std::abs(back[0] - r[0]) <= 1e-12 * std::max(1.0, std::abs(r[0])));
        CHECK(std::abs(back[1] - r[1]) <= 1e-12 * std::max(1.0, std::abs(r[1])));
    }
}

TEST_CASE("r squared") {
    const std::vector<double> obs = {1, 2, 3, 4};
    CHECK(r_squared(obs, obs) == 1.0);
    const std::vector<double> mean(4, 2.5);
    CHECK(r_squared(obs, mean) == doctest::Approx(0.0));
}

TEST_CASE("training needs ten pairs") {
    const auto data = testing::nominal_dataset(5, 0.0, 1);
    CHECK_THROWS_AS(train(data, {}), DatasetTooSmall);
}

TEST_CASE("training fits the noise-free nominal model") {
    const auto data = testing::nominal_dataset(200, 0.0, 11);
    TrainConfig cfg;
    cfg.seed = 3;
    const auto art = train(data, cfg);
    MESSAGE("r2 energy " << art.metadata.r2_energy << " time " << art.metadata.r2_time << " loss "
                         << art.metadata.initial_train_loss << " -> " << art.metadata.final_train_loss);
    CHECK(art.metadata.r2_energy >= 0.99);
    CHECK(art.metadata.r2_time >= 0.99);
    CHECK(art.metadata.final_train_loss <= 0.1 * art.metadata.initial_train_loss);
    CHECK(art.metadata.train_size == 160);
    CHECK(art.metadata.validation_size == 40);

    SUBCASE("identical runs give identical models") {
        const auto again = train(data, cfg);
        CHECK(again.mlp == art.mlp);
        CHECK(again.standardizer == art.standardizer);
    }
    SUBCASE("save and load preserve predictions bit for bit") {
        const auto loaded = load_model(save_model(art));
        CHECK(loaded.mlp == art.mlp);
        CHECK(loaded.standardizer == art.standardizer);
        CHECK(loaded.metadata == art.metadata);
        std::mt19937_64 rng(8);
        for (int i = 0; i < 100; ++i) {
            const auto x = random_rows(rng, 1, 14)[0];
            CHECK(loaded.mlp.forward(x) == art.mlp.forward(x));
        }
        for (const auto& pair : data) {
            const auto a = predict(art, pair.features), b = predict(loaded, pair.features);
            CHECK(a.energy_wh == b.energy_wh);
            CHECK(a.production_time_s == b.production_time_s);
        }
    }
}

TEST_CASE("training with 2 percent noise") {
    const auto data = testing::nominal_dataset(200, 0.02, 12);
    const auto art = train(data, {});
    CHECK(art.metadata.r2_energy >= 0.90);
    CHECK(art.metadata.r2_time >= 0.90);
}

TEST_CASE("log1p target space trains and predicts in original units") {
    const auto data = testing::nominal_dataset(60, 0.0, 13);
    TrainConfig cfg;
    cfg.target_space = TargetSpace::log1p;
    cfg.epochs = 300;
    const auto art = train(data, cfg);
    const auto loaded = load_model(save_model(art));
    CHECK(loaded.target_space == TargetSpace::log1p);
    const auto p = predict(loaded, data[0].features);
    CHECK(p.production_time_s == doctest::Approx(data[0].production_time_s).epsilon(0.2));
}

TEST_CASE("prediction clamps and converts to co2") {
    ModelArtifact art;
    art.mlp = Mlp(kDims);
    art.standardizer.x_mean.assign(14, 0.0);
    art.standardizer.x_std.assign(14, 1.0);
    art.standardizer.y_mean = {2000.0, -5.0};
    art.standardizer.y_std = {1.0, 1.0};
    const brep::FeatureVector f;
    auto p = predict(art, f, 0.4);
    CHECK(p.energy_wh == 2000.0);
    CHECK(p.co2_kg.value() == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(p.production_time_s == 0.0);
    CHECK_FALSE(predict(art, f).co2_kg.has_value());
    CHECK_THROWS_AS(predict(art, f, std::nullopt, "f2"), SchemaMismatch);
    CHECK_THROWS_AS(predict(art, f, -1.0), std::invalid_argument);
}

TEST_CASE("predictions are never negative") {
    std::mt19937_64 rng(14);
    ModelArtifact art;
    art.mlp = random_mlp(rng);
    art.standardizer.x_mean.assign(14, 0.0);
    art.standardizer.x_std.assign(14, 1.0);
    art.standardizer.y_mean = {0.0, 0.0};
    art.standardizer.y_std = {100.0, 100.0};
    std::normal_distribution<double> g(0.0, 100.0);
    for (int i = 0; i < 500; ++i) {
        auto a = brep::FeatureVector{}.to_array();
        for (auto& v : a) v = g(rng);
        const auto p = predict(art, brep::FeatureVector::from_array(a), 0.5);
        CHECK(p.energy_wh >= 0.0);
        CHECK(p.production_time_s >= 0.0);
        CHECK(*p.co2_kg >= 0.0);
    }
}

TEST_CASE("malformed model files") {
    ModelArtifact art;
    art.mlp = Mlp::xavier(kDims, 1);
    art.standardizer.x_mean.assign(14, 0.0);
    art.standardizer.x_std.assign(14, 1.0);
    art.standardizer.y_mean = {0.0, 0.0};
    art.standardizer.y_std = {1.0, 1.0};
    const auto text = save_model(art);
    CHECK(load_model(text).mlp == art.mlp);
    CHECK_THROWS_AS(load_model(text.substr(0, text.size() / 2)), FormatError);
    CHECK_THROWS_AS(load_model(""), FormatError);

    auto doc = nlohmann::json::parse(text);
    auto wide = doc;
    for (auto& row : wide["layers"][0]["weights"]) row.push_back(0.0);
    CHECK_THROWS_AS(load_model(wide.dump()), FormatError);
    auto version = doc;
    version["schema_version"] = 2;
    CHECK_THROWS_AS(load_model(version.dump()), FormatError);
    auto dims = doc;
    dims["dims"] = {14, 32, 2};
    CHECK_THROWS_AS(load_model(dims.dump()), FormatError);
    auto bad_std = doc;
    bad_std["standardizer"]["x_std"][0] = 0.0;
    CHECK_THROWS_AS(load_model(bad_std.dump()), FormatError);
    auto missing = doc;
    missing.erase("metadata");
    CHECK_THROWS_AS(load_model(missing.dump()), FormatError);
}
