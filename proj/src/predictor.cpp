#include "fablink/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"

namespace fablink::predictor {

using nlohmann::json;

Mlp::Mlp(const std::vector<std::size_t>& dims) {
    if (dims.size() < 2) throw ShapeError("an MLP needs at least two layer sizes");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        if (dims[i] == 0 || dims[i + 1] == 0) throw ShapeError("layer sizes must be positive");
        Layer l;
        l.in = dims[i];
        l.out = dims[i + 1];
        l.w.assign(l.in * l.out, 0.0);
        l.b.assign(l.out, 0.0);
        layers_.push_back(std::move(l));
    }
}

Mlp Mlp::xavier(const std::vector<std::size_t>& dims, std::uint64_t seed) {
    Mlp m(dims);
    std::mt19937_64 rng(seed);
    for (auto& l : m.layers_) {
        const double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (auto& w : l.w) w = u(rng);
    }
    return m;
}

std::vector<std::size_t> Mlp::dims() const {
    std::vector<std::size_t> d;
    if (layers_.empty()) return d;
    d.push_back(layers_.front().in);
    for (const auto& l : layers_) d.push_back(l.out);
    return d;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.w.size() + l.b.size();
    return n;
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
    if (layers_.empty()) throw ShapeError("empty network");
    if (x.size() != input_size()) {
        throw ShapeError("input has " + std::to_string(x.size()) + " values, network expects " +
                         std::to_string(input_size()));
    }
    std::vector<double> a(x.begin(), x.end()), z;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
        const auto& l = layers_[k];
        z.assign(l.out, 0.0);
        for (std::size_t o = 0; o < l.out; ++o) {
            double s = l.b[o];
            const double* row = &l.w[o * l.in];
            for (std::size_t i = 0; i < l.in; ++i) s += row[i] * a[i];
            z[o] = k + 1 < layers_.size() ? std::tanh(s) : s;
        }
        a.swap(z);
    }
    return a;
}

std::vector<double> Mlp::parameters() const {
    std::vector<double> p;
    p.reserve(parameter_count());
    for (const auto& l : layers_) {
        p.insert(p.end(), l.w.begin(), l.w.end());
        p.insert(p.end(), l.b.begin(), l.b.end());
    }
    return p;
}

void Mlp::set_parameters(std::span<const double> p) {
    if (p.size() != parameter_count()) throw ShapeError("parameter vector has the wrong length");
    std::size_t k = 0;
    for (auto& l : layers_) {
        for (auto& w : l.w) w = p[k++];
        for (auto& b : l.b) b = p[k++];
    }
}

namespace {

void check_batch(const Mlp& mlp, const Matrix& x, const Matrix& y) {
    if (x.empty()) throw ShapeError("batch must not be empty");
    if (x.size() != y.size()) throw ShapeError("inputs and targets differ in batch size");
    for (std::size_t r = 0; r < x.size(); ++r) {
        if (x[r].size() != mlp.input_size() || y[r].size() != mlp.output_size()) {
            throw ShapeError("row " + std::to_string(r) + " does not match the network dimensions");
        }
    }
}

}  // namespace

LossGrad loss_and_grad(const Mlp& mlp, const Matrix& x, const Matrix& y) {
    check_batch(mlp, x, y);
    const auto& layers = mlp.layers();
    const std::size_t L = layers.size();
    LossGrad out;
    out.grad.assign(mlp.parameter_count(), 0.0);
    std::vector<std::size_t> offset(L);
    for (std::size_t k = 0, off = 0; k < L; ++k) {
        offset[k] = off;
        off += layers[k].w.size() + layers[k].b.size();
    }
    const double scale = 1.0 / static_cast<double>(x.size() * mlp.output_size());

    std::vector<std::vector<double>> acts(L + 1);
    std::vector<double> delta, prev_delta;
    for (std::size_t r = 0; r < x.size(); ++r) {
        acts[0] = x[r];
        for (std::size_t k = 0; k < L; ++k) {
            const auto& l = layers[k];
            auto& a = acts[k + 1];
            a.assign(l.out, 0.0);
            for (std::size_t o = 0; o < l.out; ++o) {
                double s = l.b[o];
                for (std::size_t i = 0; i < l.in; ++i) s += l.w[o * l.in + i] * acts[k][i];
                a[o] = k + 1 < L ? std::tanh(s) : s;
            }
        }
        const auto& yhat = acts[L];
        delta.assign(yhat.size(), 0.0);
        for (std::size_t o = 0; o < yhat.size(); ++o) {
            const double e = yhat[o] - y[r][o];
            out.mse += e * e * scale;
            delta[o] = 2.0 * e * scale;
        }
        for (std::size_t k = L; k-- > 0;) {
            const auto& l = layers[k];
            double* gw = &out.grad[offset[k]];
            double* gb = gw + l.w.size();
            const auto& a_in = acts[k];
            for (std::size_t o = 0; o < l.out; ++o) {
                gb[o] += delta[o];
                for (std::size_t i = 0; i < l.in; ++i) gw[o * l.in + i] += delta[o] * a_in[i];
            }
            if (k == 0) break;
            prev_delta.assign(l.in, 0.0);
            for (std::size_t o = 0; o < l.out; ++o) {
                for (std::size_t i = 0; i < l.in; ++i) prev_delta[i] += l.w[o * l.in + i] * delta[o];
            }
            // a_in came out of tanh: d tanh = 1 - a^2
            for (std::size_t i = 0; i < l.in; ++i) prev_delta[i] *= 1.0 - a_in[i] * a_in[i];
            delta.swap(prev_delta);
        }
    }
    return out;
}

double mse(const Mlp& mlp, const Matrix& x, const Matrix& y) {
    check_batch(mlp, x, y);
    double s = 0.0;
    for (std::size_t r = 0; r < x.size(); ++r) {
        const auto yhat = mlp.forward(x[r]);
        for (std::size_t o = 0; o < yhat.size(); ++o) s += (yhat[o] - y[r][o]) * (yhat[o] - y[r][o]);
    }
    return s / static_cast<double>(x.size() * mlp.output_size());
}

namespace {

void fit_columns(const Matrix& m, std::vector<double>& mean, std::vector<double>& stdev) {
    const std::size_t n = m.size(), d = m.front().size();
    mean.assign(d, 0.0);
    stdev.assign(d, 0.0);
    for (const auto& row : m) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    }
    for (auto& v : mean) v /= static_cast<double>(n);
    for (const auto& row : m) {
        for (std::size_t j = 0; j < d; ++j) stdev[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
    }
    for (auto& v : stdev) {
        v = n > 1 ? std::sqrt(v / static_cast<double>(n - 1)) : 0.0;
        if (!(v >= 1e-12)) v = 1.0;
    }
}

std::vector<double> affine(std::span<const double> v, const std::vector<double>& mean, const std::vector<double>& sd,
                           bool forward) {
    if (v.size() != mean.size()) throw ShapeError("vector length does not match the standardizer");
    std::vector<double> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) out[j] = forward ? (v[j] - mean[j]) / sd[j] : v[j] * sd[j] + mean[j];
    return out;
}

}  // namespace

Standardizer Standardizer::fit(const Matrix& x, const Matrix& y) {
    if (x.empty() || y.empty()) throw ShapeError("cannot fit a standardizer on no rows");
    Standardizer s;
    fit_columns(x, s.x_mean, s.x_std);
    fit_columns(y, s.y_mean, s.y_std);
    return s;
}

std::vector<double> Standardizer::standardize_x(std::span<const double> x) const {
    return affine(x, x_mean, x_std, true);
}
std::vector<double> Standardizer::standardize_y(std::span<const double> y) const {
    return affine(y, y_mean, y_std, true);
}
std::vector<double> Standardizer::destandardize_y(std::span<const double> y) const {
    return affine(y, y_mean, y_std, false);
}

void TrainConfig::validate() const {
    if (dims.size() < 2 || dims.front() != brep::FeatureVector::kSize || dims.back() != kTargets) {
        throw std::invalid_argument("dims must start at 14 inputs and end at 2 outputs");
    }
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
        throw std::invalid_argument("validation_fraction must be in (0, 1)");
    }
    if (!(learning_rate > 0.0) || !(epsilon > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("invalid optimizer settings");
    }
}

double r_squared(std::span<const double> observed, std::span<const double> predicted) {
    if (observed.size() != predicted.size() || observed.empty()) throw ShapeError("r_squared needs equal, non-empty");
    const double mean = std::accumulate(observed.begin(), observed.end(), 0.0) / static_cast<double>(observed.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        ss_res += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
        ss_tot += (observed[i] - mean) * (observed[i] - mean);
    }
    if (ss_tot <= 0.0) return 0.0;
    return 1.0 - ss_res / ss_tot;
}

namespace {

double to_space(double v, TargetSpace s) { return s == TargetSpace::log1p ? std::log1p(std::max(0.0, v)) : v; }
double from_space(double v, TargetSpace s) { return s == TargetSpace::log1p ? std::expm1(v) : v; }

std::vector<double> raw_predict(const ModelArtifact& m, const brep::FeatureVector& f) {
    const auto x = f.to_array();
    auto y = m.standardizer.destandardize_y(m.mlp.forward(m.standardizer.standardize_x(x)));
    for (auto& v : y) v = from_space(v, m.target_space);
    return y;
}

}  // namespace

ModelArtifact train(std::span<const store::TrainingPair> dataset, const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.size() < kMinDataset) {
        throw DatasetTooSmall("training needs at least " + std::to_string(kMinDataset) + " pairs, got " +
                              std::to_string(dataset.size()));
    }
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(dataset.size()))), 1,
        dataset.size() - 1);
    const std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    const std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

    auto raw_rows = [&](const std::vector<std::size_t>& idx, Matrix& x, Matrix& y) {
        for (auto i : idx) {
            const auto f = dataset[i].features.to_array();
            x.emplace_back(f.begin(), f.end());
            y.push_back({to_space(dataset[i].energy_wh, cfg.target_space),
                         to_space(dataset[i].production_time_s, cfg.target_space)});
        }
    };
    Matrix x_train, y_train, x_val, y_val;
    raw_rows(train_idx, x_train, y_train);
    raw_rows(val_idx, x_val, y_val);

    ModelArtifact art;
    art.target_space = cfg.target_space;
    art.standardizer = Standardizer::fit(x_train, y_train);
    for (auto& r : x_train) r = art.standardizer.standardize_x(r);
    for (auto& r : y_train) r = art.standardizer.standardize_y(r);
    Matrix xs_val = x_val, ys_val = y_val;
    for (auto& r : xs_val) r = art.standardizer.standardize_x(r);
    for (auto& r : ys_val) r = art.standardizer.standardize_y(r);

    art.mlp = Mlp::xavier(cfg.dims, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    auto params = art.mlp.parameters();
    std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0);
    art.metadata.initial_train_loss = mse(art.mlp, x_train, y_train);

    std::vector<std::size_t> batch_order(x_train.size());
    std::iota(batch_order.begin(), batch_order.end(), 0);
    std::uint64_t step = 0;
    Matrix bx, by;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(batch_order.begin(), batch_order.end(), rng);
        for (std::size_t start = 0; start < batch_order.size(); start += cfg.batch_size) {
            const auto end = std::min(batch_order.size(), start + cfg.batch_size);
            bx.clear();
            by.clear();
            for (auto k = start; k < end; ++k) {
                bx.push_back(x_train[batch_order[k]]);
                by.push_back(y_train[batch_order[k]]);
            }
            const auto lg = loss_and_grad(art.mlp, bx, by);
            if (!std::isfinite(lg.mse)) {
                throw NonFiniteLoss("loss became non-finite in epoch " + std::to_string(epoch + 1));
            }
            ++step;
            const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < params.size(); ++i) {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * lg.grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * lg.grad[i] * lg.grad[i];
                params[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
            }
            art.mlp.set_parameters(params);
        }
    }

    auto& md = art.metadata;
    md.seed = cfg.seed;
    md.epochs = cfg.epochs;
    md.dataset_size = dataset.size();
    md.train_size = train_idx.size();
    md.validation_size = val_idx.size();
    md.final_train_loss = mse(art.mlp, x_train, y_train);
    md.final_validation_loss = mse(art.mlp, xs_val, ys_val);
    if (!std::isfinite(md.final_train_loss) || !std::isfinite(md.final_validation_loss)) {
        throw NonFiniteLoss("final loss is non-finite");
    }
    std::vector<double> obs_e, obs_t, pred_e, pred_t;
    for (auto i : val_idx) {
        const auto y = raw_predict(art, dataset[i].features);
        obs_e.push_back(dataset[i].energy_wh);
        obs_t.push_back(dataset[i].production_time_s);
        pred_e.push_back(y[0]);
        pred_t.push_back(y[1]);
    }
    md.r2_energy = r_squared(obs_e, pred_e);
    md.r2_time = r_squared(obs_t, pred_t);
    md.created_ts_ms = store::now_ms();
    return art;
}

Prediction predict(const ModelArtifact& model, const brep::FeatureVector& features,
                   std::optional<double> emission_factor, std::string_view feature_schema) {
    if (feature_schema != model.feature_schema) {
        throw SchemaMismatch("model expects feature schema '" + model.feature_schema + "', got '" +
                             std::string(feature_schema) + "'");
    }
    const auto y = raw_predict(model, features);
    Prediction p;
    // NaN also maps to 0 here.
    p.energy_wh = y[0] > 0.0 ? y[0] : 0.0;
    p.production_time_s = y[1] > 0.0 ? y[1] : 0.0;
    if (emission_factor) {
        if (!(*emission_factor >= 0.0) || !std::isfinite(*emission_factor)) {
            throw std::invalid_argument("emission factor must be a finite value >= 0");
        }
        p.co2_kg = p.energy_wh / 1000.0 * *emission_factor;
    }
    return p;
}

std::string save_model(const ModelArtifact& a) {
    json layers = json::array();
    for (const auto& l : a.mlp.layers()) {
        json rows = json::array();
        for (std::size_t o = 0; o < l.out; ++o) {
            rows.push_back(std::vector<double>(l.w.begin() + static_cast<std::ptrdiff_t>(o * l.in),
                                               l.w.begin() + static_cast<std::ptrdiff_t>((o + 1) * l.in)));
        }
        layers.push_back({{"weights", rows}, {"biases", l.b}});
    }
    const auto& md = a.metadata;
    nlohmann::ordered_json j;
    j["schema_version"] = a.schema_version;
    j["feature_schema"] = a.feature_schema;
    j["dims"] = a.mlp.dims();
    j["activation"] = "tanh";
    j["target_space"] = a.target_space == TargetSpace::log1p ? "log1p" : "linear";
    j["targets"] = {"energy_wh", "production_time_s"};
    j["standardizer"] = {{"x_mean", a.standardizer.x_mean},
                         {"x_std", a.standardizer.x_std},
                         {"y_mean", a.standardizer.y_mean},
                         {"y_std", a.standardizer.y_std}};
    j["layers"] = layers;
    j["metadata"] = {{"seed", md.seed},
                     {"epochs", md.epochs},
                     {"dataset_size", md.dataset_size},
                     {"train_size", md.train_size},
                     {"validation_size", md.validation_size},
                     {"initial_train_loss", md.initial_train_loss},
                     {"final_train_loss", md.final_train_loss},
                     {"final_validation_loss", md.final_validation_loss},
                     {"r2_energy", md.r2_energy},
                     {"r2_time", md.r2_time},
                     {"created_ts_ms", md.created_ts_ms}};
    return j.dump(1) + "\n";
}

namespace {

std::vector<double> finite_vector(const json& j, std::size_t expected, const char* what) {
    if (!j.is_array() || j.size() != expected) {
        throw FormatError(std::string(what) + " must have " + std::to_string(expected) + " entries");
    }
    std::vector<double> v;
    for (const auto& e : j) {
        if (!e.is_number() || !std::isfinite(e.get<double>())) throw FormatError(std::string(what) + " is not finite");
        v.push_back(e.get<double>());
    }
    return v;
}

}  // namespace

ModelArtifact load_model(std::string_view bytes) {
    const json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FormatError("model file is not a JSON object");
    try {
        ModelArtifact a;
        a.schema_version = j.at("schema_version").get<int>();
        if (a.schema_version != kModelSchemaVersion) {
            throw FormatError("unsupported model schema_version " + std::to_string(a.schema_version));
        }
        a.feature_schema = j.at("feature_schema").get<std::string>();
        if (j.value("activation", "tanh") != "tanh") throw FormatError("unsupported activation");
        const auto space = j.value("target_space", "linear");
        if (space == "log1p") {
            a.target_space = TargetSpace::log1p;
        } else if (space != "linear") {
            throw FormatError("unknown target_space '" + space + "'");
        }
        const auto dims = j.at("dims").get<std::vector<std::size_t>>();
        if (dims.size() < 2 || dims.front() != brep::FeatureVector::kSize || dims.back() != kTargets) {
            throw FormatError("dims must start at 14 and end at 2");
        }
        a.mlp = Mlp(dims);
        const auto& layers = j.at("layers");
        if (!layers.is_array() || layers.size() != dims.size() - 1) throw FormatError("layer count does not match dims");
        for (std::size_t k = 0; k < layers.size(); ++k) {
            auto& l = a.mlp.layers()[k];
            const auto& rows = layers[k].at("weights");
            if (!rows.is_array() || rows.size() != l.out) {
                throw FormatError("layer " + std::to_string(k) + " weights need " + std::to_string(l.out) + " rows");
            }
            for (std::size_t o = 0; o < l.out; ++o) {
                const auto row = finite_vector(rows[o], l.in, "weight row");
                std::copy(row.begin(), row.end(), l.w.begin() + static_cast<std::ptrdiff_t>(o * l.in));
            }
            l.b = finite_vector(layers[k].at("biases"), l.out, "biases");
        }
        const auto& s = j.at("standardizer");
        a.standardizer.x_mean = finite_vector(s.at("x_mean"), dims.front(), "x_mean");
        a.standardizer.x_std = finite_vector(s.at("x_std"), dims.front(), "x_std");
        a.standardizer.y_mean = finite_vector(s.at("y_mean"), kTargets, "y_mean");
        a.standardizer.y_std = finite_vector(s.at("y_std"), kTargets, "y_std");
        for (double sd : a.standardizer.x_std) {
            if (!(sd > 0.0)) throw FormatError("standardizer std must be > 0");
        }
        for (double sd : a.standardizer.y_std) {
            if (!(sd > 0.0)) throw FormatError("standardizer std must be > 0");
        }
        const auto& md = j.at("metadata");
        a.metadata.seed = md.at("seed").get<std::uint64_t>();
        a.metadata.epochs = md.at("epochs").get<std::size_t>();
        a.metadata.dataset_size = md.at("dataset_size").get<std::size_t>();
        a.metadata.train_size = md.at("train_size").get<std::size_t>();
        a.metadata.validation_size = md.at("validation_size").get<std::size_t>();
        a.metadata.initial_train_loss = md.at("initial_train_loss").get<double>();
        a.metadata.final_train_loss = md.at("final_train_loss").get<double>();
        a.metadata.final_validation_loss = md.at("final_validation_loss").get<double>();
        a.metadata.r2_energy = md.at("r2_energy").get<double>();
        a.metadata.r2_time = md.at("r2_time").get<double>();
        a.metadata.created_ts_ms = md.at("created_ts_ms").get<std::int64_t>();
        return a;
    } catch (const json::exception& e) {
        throw FormatError(std::string("model file: ") + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(std::string("model file: ") + e.what());
    }
}

}  // namespace fablink::predictor
