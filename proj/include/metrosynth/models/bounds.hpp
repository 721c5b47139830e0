#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace metrosynth::models {

/// Analytic lower bounds on the MSE of the NV-center frequency estimate,
/// for the uniform (0,1) MHz prior. The constants are mu = 0.1619 (maximum
/// of x^2 e^(-2x) / (1 - e^(-2x))) and the prior Fisher information
/// I(omega) = 12 us^2.
struct BoundSpec {
    enum class Regime { MeasurementLimited, TimeLimited };
    Regime regime = Regime::MeasurementLimited;
    double t2_star = std::numeric_limits<double>::infinity();

    static constexpr double kMu = 0.1619;
    static constexpr double kPriorFisher = 12.0;
};

/// Evaluate the bound at a resource amount (number of measurements M or
/// total evolution time T, depending on the regime).
inline double dc_lower_bound(const BoundSpec& spec, double resources) {
    if (!(resources > 0.0)) throw std::invalid_argument("dc_lower_bound: resources must be positive");
    const bool coherent = std::isinf(spec.t2_star);
    if (spec.regime == BoundSpec::Regime::MeasurementLimited) {
        const double m = resources;
        const double bit_bound = std::exp2(-2.0 * (m + 1.0)) / 3.0;
        if (coherent) return bit_bound;
        const double fisher_bound =
            1.0 / (BoundSpec::kMu * m * spec.t2_star * spec.t2_star + BoundSpec::kPriorFisher);
        return std::max(fisher_bound, bit_bound);
    }
    const double t = resources;
    if (coherent) return 1.0 / (t * t + BoundSpec::kPriorFisher);
    return 1.0 / (0.5 * t * spec.t2_star + BoundSpec::kPriorFisher);
}

inline BoundSpec::Regime bound_regime_from_string(const std::string& s) {
    if (s == "measurements" || s == "meas") return BoundSpec::Regime::MeasurementLimited;
    if (s == "time") return BoundSpec::Regime::TimeLimited;
    throw std::invalid_argument("unknown bound regime: " + s);
}

} // namespace metrosynth::models
