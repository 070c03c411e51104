// Training pairs from random plates, targets from the nominal process model.

#pragma once

#include <random>
#include <vector>

#include "fablink/brep.hpp"
#include "fablink/fixtures.hpp"
#include "fablink/store.hpp"
#include "fablink/telemetry.hpp"
#include "plate_gen.hpp"

namespace fablink::testing {

inline brep::FeatureVector plate_features(const fixtures::PlateSpec& spec) {
    return brep::extract_features(brep::build_brep(step::parse_step(fixtures::generate_plate_step(spec))));
}

/// Multiplicative Gaussian noise of `sigma` on both targets.
inline std::vector<store::TrainingPair> nominal_dataset(std::size_t n, double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const telemetry::MachineProfile profile;
    std::vector<store::TrainingPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto f = plate_features(random_plate(rng));
        const auto o = telemetry::nominal_outcome(profile, f);
        out.push_back({"P" + std::to_string(i), 0, f, o.energy_wh * (1.0 + sigma * gauss(rng)),
                       o.production_time_s * (1.0 + sigma * gauss(rng))});
    }
    return out;
}

}  // namespace fablink::testing
