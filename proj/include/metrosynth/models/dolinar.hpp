#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "metrosynth/agents.hpp"
#include "metrosynth/autodiff.hpp"
#include "metrosynth/particle_filter.hpp"
#include "metrosynth/rng.hpp"

namespace metrosynth::models {

/// Agnostic Dolinar receiver: a signal |s alpha> with unknown sign s and
/// unknown amplitude alpha is combined stage by stage with n reference
/// copies |alpha> on beam splitters of programmable angle theta, each
/// measured port photon-counted; after the n stages the residual port is
/// measured as well. Beam-splitter convention (orthogonal rotation):
///   measured     m  = r sin(theta) + alpha cos(theta)
///   pass-through r' = r cos(theta) - alpha sin(theta)
/// Photon counts are Poisson with mean |m|^2. The parameter axes are the
/// sign (discrete, the value of interest) and alpha (continuous nuisance).
class DolinarModel {
public:
    struct Sim {
        double true_residual_value = 0.0;
        ad::Node true_residual;          // depends on the controls
        pf::StateEnsemble states;        // fields[0]: per-particle residual amplitudes
        std::vector<ad::Node> control_history;
        int stage = 0;
    };

    DolinarModel(int n_references, double alpha_lo = 0.05, double alpha_hi = 1.50,
                 double theta_max = 3.14159265358979323846)
        : n_(n_references), alpha_lo_(alpha_lo), alpha_hi_(alpha_hi),
          control_{"Theta", 0.0, theta_max, false} {
        if (n_ < 1) throw std::invalid_argument("DolinarModel: need at least one reference state");
        if (!(alpha_hi_ > alpha_lo_ && alpha_lo_ > 0.0))
            throw std::invalid_argument("DolinarModel: bad alpha prior interval");
    }

    int stages() const { return n_ + 1; }  // n beam splitters plus the final port
    double alpha_lo() const { return alpha_lo_; }
    double alpha_hi() const { return alpha_hi_; }

    std::vector<pf::AxisSpec> axes() const {
        return {{-1.0, 1.0, true, "Sign"}, {alpha_lo_, alpha_hi_, false, "Alpha"}};
    }
    std::vector<agents::ControlSpec> controls() const { return {control_}; }
    bool stateful() const { return true; }
    int feature_count() const { return 5; }

    std::vector<double> sample_prior(Rng& rng) const {
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        return {sign, rng.uniform(alpha_lo_, alpha_hi_)};
    }

    Sim start(ad::Tape& t, const std::vector<double>& theta, const pf::ParticleEnsemble& e) const {
        Sim sim;
        sim.true_residual_value = theta[0] * theta[1];
        sim.true_residual = t.constant(sim.true_residual_value);
        sim.states.fields = {t.mul(e.axis(0), e.axis(1))};  // r_j = s_j alpha_j
        return sim;
    }

    double draw_outcome(Sim& sim, const std::vector<double>& controls,
                        const std::vector<double>& theta, Rng& rng) const {
        const double mu = measured_mean_true(sim, controls, theta);
        return static_cast<double>(rng.poisson(mu));
    }

    std::vector<std::pair<double, double>> outcome_distribution(const Sim& sim,
                                                                const std::vector<double>& controls,
                                                                const std::vector<double>& theta) const {
        const double mu = measured_mean_true(sim, controls, theta);
        // truncate at mean + 20 sqrt(mean) and fold the residual mass into the tail
        const int y_max = static_cast<int>(std::ceil(mu + 20.0 * std::sqrt(mu + 1.0)));
        std::vector<std::pair<double, double>> out;
        out.reserve(static_cast<std::size_t>(y_max) + 1);
        double p = std::exp(-mu);
        double cum = 0.0;
        for (int y = 0; y < y_max; ++y) {
            out.emplace_back(static_cast<double>(y), p);
            cum += p;
            p *= mu / static_cast<double>(y + 1);
        }
        out.emplace_back(static_cast<double>(y_max), std::max(0.0, 1.0 - cum));
        return out;
    }

    ad::Node true_log_likelihood(Sim& sim, ad::Tape& t, const std::vector<ad::Node>& controls,
                                 const std::vector<double>& theta, double y) const {
        ad::Node alpha = t.constant(theta[1]);
        ad::Node m;
        if (sim.stage < n_) {
            ad::Node th = controls[0];
            m = t.add(t.mul(sim.true_residual, t.sin(th)), t.mul(alpha, t.cos(th)));
            sim.true_residual = t.sub(t.mul(sim.true_residual, t.cos(th)), t.mul(alpha, t.sin(th)));
            sim.true_residual_value = sim.true_residual.scalar();
        } else {
            m = sim.true_residual;  // final port measures the leftover signal
        }
        ad::Node mu = t.mul(m, m);
        // guard exact zero mean: p(0|0) = 1, p(y>0|0) = 0 would be an impossible draw
        ad::Node p = t.poisson_pmf(mu, static_cast<std::uint64_t>(y));
        if (!(p.scalar() > 0.0))
            throw std::invalid_argument("DolinarModel: drawn outcome has zero probability");
        return t.log(p);
    }

    ad::Node particle_likelihoods(Sim& sim, ad::Tape& t, const pf::ParticleEnsemble& e,
                                  const std::vector<ad::Node>& controls, double y) const {
        pf::StateEnsemble& st = sim.states;
        ad::Node r = st.fields.at(0);
        ad::Node mu;
        if (sim.stage < n_) {
            ad::Node th = controls[0];
            ad::Node m = t.add(t.mul(r, t.sin(th)), t.mul(e.axis(1), t.cos(th)));
            st.fields[0] = t.sub(t.mul(r, t.cos(th)), t.mul(e.axis(1), t.sin(th)));
            mu = t.mul(m, m);
            sim.control_history.push_back(controls[0]);
        } else {
            mu = t.mul(r, r);
        }
        sim.stage += 1;
        return t.poisson_pmf(mu, static_cast<std::uint64_t>(y));
    }

    /// Rebuild the per-particle residuals from the stored controls after a
    /// resampling (state particle filter recomputed from the beginning).
    pf::StateEnsemble rebuild_states(const Sim& sim, ad::Tape& t,
                                     const pf::ParticleEnsemble& e) const {
        ad::Node r = t.mul(e.axis(0), e.axis(1));
        for (const ad::Node& th : sim.control_history)
            r = t.sub(t.mul(r, t.cos(th)), t.mul(e.axis(1), t.sin(th)));
        pf::StateEnsemble st;
        st.fields = {r};
        return st;
    }

    /// The signal amplitude is the costly resource; it is consumed in equal
    /// parts across the stages so that the total equals alpha.
    double resource_increment(const std::vector<double>&, const std::vector<double>& theta) const {
        return theta[1] / static_cast<double>(stages());
    }

    std::vector<double> summary_features(const pf::ParticleEnsemble& e, const Sim&,
                                         double resource_frac, double step_frac) const {
        double p_plus = 0.0, m_alpha = 0.0;
        for (int j = 0; j < e.count(); ++j) {
            if (e.particle(j, 0) > 0.0) p_plus += e.weight(j);
            m_alpha += e.weight(j) * e.particle(j, 1);
        }
        double v_alpha = 0.0;
        for (int j = 0; j < e.count(); ++j) {
            const double dx = e.particle(j, 1) - m_alpha;
            v_alpha += e.weight(j) * dx * dx;
        }
        const double width = alpha_hi_ - alpha_lo_;
        return {2.0 * p_plus - 1.0,
                2.0 * (m_alpha - alpha_lo_) / width - 1.0,
                4.0 * std::sqrt(std::max(0.0, v_alpha)) / width - 1.0,
                2.0 * resource_frac - 1.0,
                2.0 * step_frac - 1.0};
    }

private:
    double measured_mean_true(const Sim& sim, const std::vector<double>& controls,
                              const std::vector<double>& theta) const {
        const double r = sim.true_residual_value;
        if (sim.stage < n_) {
            const double th = controls[0];
            const double m = r * std::sin(th) + theta[1] * std::cos(th);
            return m * m;
        }
        return r * r;
    }

    int n_;
    double alpha_lo_, alpha_hi_;
    agents::ControlSpec control_;
};

} // namespace metrosynth::models
