// Feature -> (energy_wh, production_time_s) regression: a small tanh MLP
// trained with Adam, its standardizer, and the JSON model file.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fablink/brep.hpp"
#include "fablink/store.hpp"

namespace fablink::predictor {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};
class DatasetTooSmall : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class SchemaMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kModelSchemaVersion = 1;
inline constexpr std::size_t kTargets = 2;  // energy_wh, production_time_s
inline constexpr std::size_t kMinDataset = 10;

using Matrix = std::vector<std::vector<double>>;

struct Layer {
    std::size_t in = 0, out = 0;
    std::vector<double> w;  // out x in, row-major
    std::vector<double> b;  // out
    bool operator==(const Layer&) const = default;
};

class Mlp {
public:
    Mlp() = default;
    /// All parameters zero.
    explicit Mlp(const std::vector<std::size_t>& dims);
    /// Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases.
    static Mlp xavier(const std::vector<std::size_t>& dims, std::uint64_t seed);

    std::vector<std::size_t> dims() const;
    std::size_t input_size() const { return layers_.front().in; }
    std::size_t output_size() const { return layers_.back().out; }
    std::size_t parameter_count() const;

    /// tanh on hidden layers, linear output. Throws ShapeError.
    std::vector<double> forward(std::span<const double> x) const;

    /// Flat parameter view: layer 0 weights, layer 0 biases, layer 1 ...
    std::vector<double> parameters() const;
    void set_parameters(std::span<const double> p);

    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }
    bool operator==(const Mlp&) const = default;

private:
    std::vector<Layer> layers_;
};

struct LossGrad {
    double mse = 0.0;
    std::vector<double> grad;  // same order as Mlp::parameters()
};

/// Mean over rows and outputs of squared error, with its gradient.
LossGrad loss_and_grad(const Mlp& mlp, const Matrix& x, const Matrix& y);
double mse(const Mlp& mlp, const Matrix& x, const Matrix& y);

struct Standardizer {
    std::vector<double> x_mean, x_std, y_mean, y_std;

    /// Sample std; components below 1e-12 get std 1.
    static Standardizer fit(const Matrix& x, const Matrix& y);
    std::vector<double> standardize_x(std::span<const double> x) const;
    std::vector<double> standardize_y(std::span<const double> y) const;
    std::vector<double> destandardize_y(std::span<const double> y) const;
    bool operator==(const Standardizer&) const = default;
};

enum class TargetSpace { linear, log1p };

struct TrainConfig {
    std::vector<std::size_t> dims = {brep::FeatureVector::kSize, 32, 16, kTargets};
    std::size_t epochs = 500;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    double validation_fraction = 0.2;
    TargetSpace target_space = TargetSpace::linear;

    /// Throws std::invalid_argument.
    void validate() const;
};

struct TrainMetadata {
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    std::size_t dataset_size = 0;
    std::size_t train_size = 0;
    std::size_t validation_size = 0;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double final_validation_loss = 0.0;
    double r2_energy = 0.0;
    double r2_time = 0.0;
    std::int64_t created_ts_ms = 0;
    bool operator==(const TrainMetadata&) const = default;
};

struct ModelArtifact {
    int schema_version = kModelSchemaVersion;
    std::string feature_schema = brep::FeatureVector::kSchema;
    TargetSpace target_space = TargetSpace::linear;
    Standardizer standardizer;
    Mlp mlp;
    TrainMetadata metadata;
    bool operator==(const ModelArtifact&) const = default;
};

struct Prediction {
    double energy_wh = 0.0;
    double production_time_s = 0.0;
    std::optional<double> co2_kg;
};

/// Coefficient of determination; 0 when the observations have no spread.
double r_squared(std::span<const double> observed, std::span<const double> predicted);

/// Throws DatasetTooSmall, NonFiniteLoss.
ModelArtifact train(std::span<const store::TrainingPair> dataset, const TrainConfig& cfg);

/// Throws SchemaMismatch when `feature_schema` differs from the artifact's.
Prediction predict(const ModelArtifact& model, const brep::FeatureVector& features,
                   std::optional<double> emission_factor = std::nullopt,
                   std::string_view feature_schema = brep::FeatureVector::kSchema);

std::string save_model(const ModelArtifact& model);
/// Throws FormatError.
ModelArtifact load_model(std::string_view bytes);

}  // namespace fablink::predictor
