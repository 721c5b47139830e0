#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "metrosynth/agents.hpp"
#include "metrosynth/autodiff.hpp"
#include "metrosynth/particle_filter.hpp"
#include "metrosynth/rng.hpp"

namespace metrosynth::models {

/// Ramsey DC magnetometry on an NV center. Binary outcome y = +/-1 with
/// p(y|omega, T2*, tau) = 1/2 + (y/2) e^(-tau/T2*) cos(omega tau); the
/// control is the free evolution time tau, the unknown is the precession
/// frequency omega (MHz), uniform prior on (0, 1) MHz by default.
class NvDcModel {
public:
    enum class Resource { Measurements, EvolutionTime };

    struct Sim {};  // projective measurements, no probe state to carry

    NvDcModel(double t2_star, Resource resource, double tau_min, double tau_max,
              double prior_lo = 0.0, double prior_hi = 1.0, bool log_scale_control = true)
        : t2_star_(t2_star), resource_(resource),
          control_{"Tau", tau_min, tau_max, log_scale_control},
          prior_lo_(prior_lo), prior_hi_(prior_hi) {
        if (!(tau_min > 0.0 && tau_max > tau_min))
            throw std::invalid_argument("NvDcModel: bad tau bounds");
        if (!(prior_hi > prior_lo)) throw std::invalid_argument("NvDcModel: bad prior interval");
        if (!(t2_star > 0.0)) throw std::invalid_argument("NvDcModel: T2* must be positive");
    }

    static double likelihood(int y, double tau, double omega, double t2_star) {
        const double decay = std::isinf(t2_star) ? 1.0 : std::exp(-tau / t2_star);
        return 0.5 + 0.5 * static_cast<double>(y) * decay * std::cos(omega * tau);
    }

    /// d log p / d omega at fixed (y, tau, T2*).
    static double score(int y, double tau, double omega, double t2_star) {
        const double p = likelihood(y, tau, omega, t2_star);
        if (p <= 0.0 || p >= 1.0)
            throw std::invalid_argument("NvDcModel::score: undefined at p in {0,1}");
        const double decay = std::isinf(t2_star) ? 1.0 : std::exp(-tau / t2_star);
        const double dp = -0.5 * static_cast<double>(y) * decay * tau * std::sin(omega * tau);
        return dp / p;
    }

    // ---- simulation interface -----------------------------------------

    std::vector<pf::AxisSpec> axes() const { return {{prior_lo_, prior_hi_, false, "Omega"}}; }
    std::vector<agents::ControlSpec> controls() const { return {control_}; }
    bool stateful() const { return false; }
    int feature_count() const { return 4; }
    double t2_star() const { return t2_star_; }
    Resource resource_mode() const { return resource_; }

    std::vector<double> sample_prior(Rng& rng) const {
        return {rng.uniform(prior_lo_, prior_hi_)};
    }

    Sim start(ad::Tape&, const std::vector<double>&, const pf::ParticleEnsemble&) const { return {}; }

    /// All outcomes with their probabilities under the true parameters.
    std::vector<std::pair<double, double>> outcome_distribution(const Sim&,
                                                                const std::vector<double>& controls,
                                                                const std::vector<double>& theta) const {
        const double p_plus = likelihood(+1, controls[0], theta[0], t2_star_);
        return {{+1.0, p_plus}, {-1.0, 1.0 - p_plus}};
    }

    double draw_outcome(Sim&, const std::vector<double>& controls,
                        const std::vector<double>& theta, Rng& rng) const {
        const double p_plus = likelihood(+1, controls[0], theta[0], t2_star_);
        return rng.uniform() < p_plus ? +1.0 : -1.0;
    }

    /// log p(y | tau(lambda), omega_true) as a node in the control.
    ad::Node true_log_likelihood(Sim&, ad::Tape& t, const std::vector<ad::Node>& controls,
                                 const std::vector<double>& theta, double y) const {
        return t.log(likelihood_node(t, controls[0], t.constant(theta[0]), y));
    }

    /// Per-particle likelihood vector p(y | tau, omega_j).
    ad::Node particle_likelihoods(Sim&, ad::Tape& t, const pf::ParticleEnsemble& e,
                                  const std::vector<ad::Node>& controls, double y) const {
        return likelihood_node(t, controls[0], e.axis(0), y);
    }

    double resource_increment(const std::vector<double>& controls, const std::vector<double>&) const {
        return resource_ == Resource::Measurements ? 1.0 : controls[0];
    }

    /// Summary of the posterior handed to the agent, every entry in [-1,1].
    /// Computed from ensemble values; this realizes the stop-gradient
    /// boundary at the agent input.
    std::vector<double> summary_features(const pf::ParticleEnsemble& e, const Sim&,
                                         double resource_frac, double step_frac) const {
        double m = 0.0;
        for (int j = 0; j < e.count(); ++j) m += e.weight(j) * e.particle(j, 0);
        double v = 0.0;
        for (int j = 0; j < e.count(); ++j) {
            const double dx = e.particle(j, 0) - m;
            v += e.weight(j) * dx * dx;
        }
        const double width = prior_hi_ - prior_lo_;
        const double mean_feat = 2.0 * (m - prior_lo_) / width - 1.0;
        const double std_feat = 4.0 * std::sqrt(std::max(0.0, v)) / width - 1.0;
        return {mean_feat, std_feat, 2.0 * resource_frac - 1.0, 2.0 * step_frac - 1.0};
    }

    /// d log p / d omega as a node in the control (analytic parameter score).
    std::vector<ad::Node> score_nodes(ad::Tape& t, const std::vector<ad::Node>& controls,
                                      const std::vector<double>& theta, double y) const {
        ad::Node tau = controls[0];
        ad::Node omega = t.constant(theta[0]);
        ad::Node p = likelihood_node(t, tau, omega, y);
        const double pv = p.scalar();
        if (pv <= 0.0 || pv >= 1.0)
            throw std::invalid_argument("NvDcModel::score_nodes: undefined at p in {0,1}");
        ad::Node phase = t.mul(omega, tau);
        ad::Node dp = t.mul(t.mul(decay_node(t, tau), t.mul(tau, t.sin(phase))),
                            t.constant(-0.5 * y));
        return {t.div(dp, p)};
    }

    ad::Node likelihood_node(ad::Tape& t, ad::Node tau, ad::Node omega, double y) const {
        ad::Node phase = t.mul(omega, tau);
        ad::Node osc = t.mul(t.cos(phase), decay_node(t, tau));
        return t.add(t.constant(0.5), t.mul(osc, t.constant(0.5 * y)));
    }

private:
    ad::Node decay_node(ad::Tape& t, ad::Node tau) const {
        if (std::isinf(t2_star_)) return t.constant(1.0);
        return t.exp(t.mul(tau, t.constant(-1.0 / t2_star_)));
    }

    double t2_star_;
    Resource resource_;
    agents::ControlSpec control_;
    double prior_lo_, prior_hi_;
};

} // namespace metrosynth::models
