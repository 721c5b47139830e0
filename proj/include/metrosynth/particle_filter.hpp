#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <vector>

#include "metrosynth/autodiff.hpp"
#include "metrosynth/rng.hpp"

namespace metrosynth::pf {

/// One dimension of the parameter space: admissible interval plus a marker
/// for discrete axes (e.g. the sign hypothesis of the Dolinar receiver).
struct AxisSpec {
    double lo = 0.0;
    double hi = 1.0;
    bool discrete = false;
    std::string name;
};

struct ResamplingConfig {
    double threshold = 0.5;       // r_t: resample when N_eff < r_t * N
    double soft_alpha = 0.5;      // alpha: posterior/uniform mixing of the draw law
    double perturb_beta = 0.98;   // beta: shrink factor of the Gaussian perturbation
    double keep_gamma = 0.99;     // gamma: fraction kept by the soft resampling
    double batch_fraction = 0.98; // f: batch fraction that must flag before resampling fires
    bool scibior_correction = true;
    bool perturbation = true;
    bool proposal = true;

    void validate() const {
        if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("ResamplingConfig: threshold outside [0,1]");
        if (!(soft_alpha >= 0.0 && soft_alpha <= 1.0)) throw std::invalid_argument("ResamplingConfig: soft_alpha outside [0,1]");
        if (!(perturb_beta > 0.0 && perturb_beta <= 1.0)) throw std::invalid_argument("ResamplingConfig: perturb_beta outside (0,1]");
        if (!(keep_gamma > 0.0 && keep_gamma <= 1.0)) throw std::invalid_argument("ResamplingConfig: keep_gamma outside (0,1]");
        if (!(batch_fraction > 0.0 && batch_fraction <= 1.0)) throw std::invalid_argument("ResamplingConfig: batch_fraction outside (0,1]");
    }
};

/// Weighted particle representation of the Bayesian posterior. Particle
/// coordinates are tape nodes (one N-vector per axis): initially constants,
/// after a resampling they are differentiable functions of the earlier
/// ensemble through the reparametrized perturbation and proposal.
class ParticleEnsemble {
public:
    ParticleEnsemble() = default;
    ParticleEnsemble(ad::Tape* tape, std::vector<AxisSpec> axes,
                     std::vector<ad::Node> axis_nodes, ad::Node weights, int n)
        : tape_(tape), axes_(std::move(axes)), axis_nodes_(std::move(axis_nodes)),
          weights_(weights), n_(n) {}

    ad::Tape& tape() const { return *tape_; }
    int count() const { return n_; }
    int dim() const { return static_cast<int>(axes_.size()); }
    const std::vector<AxisSpec>& axes() const { return axes_; }
    ad::Node axis(int a) const { return axis_nodes_.at(static_cast<std::size_t>(a)); }
    ad::Node weights() const { return weights_; }

    double particle(int j, int a) const { return axis(a).value()[j]; }
    double weight(int j) const { return weights_.value()[j]; }

private:
    ad::Tape* tape_ = nullptr;
    std::vector<AxisSpec> axes_;
    std::vector<ad::Node> axis_nodes_;
    ad::Node weights_;
    int n_ = 0;
};

/// Per-particle probe states (model-defined N-vector fields). After a
/// resampling the fields are rebuilt from the stored trajectory so that
/// state j corresponds to particle j.
struct StateEnsemble {
    std::vector<ad::Node> fields;
};

using StateRebuild = std::function<StateEnsemble(const ParticleEnsemble&)>;
using PriorSampler = std::function<std::vector<double>(Rng&)>;

inline ParticleEnsemble init_ensemble(ad::Tape& tape, const PriorSampler& prior,
                                      const std::vector<AxisSpec>& axes, int n, Rng& rng) {
    if (n < 2) throw std::invalid_argument("init_ensemble: need at least 2 particles");
    const int d = static_cast<int>(axes.size());
    std::vector<std::vector<double>> cols(static_cast<std::size_t>(d),
                                          std::vector<double>(static_cast<std::size_t>(n)));
    for (int j = 0; j < n; ++j) {
        const std::vector<double> draw = prior(rng);
        if (static_cast<int>(draw.size()) != d)
            throw std::invalid_argument("init_ensemble: prior sample dimension mismatch");
        for (int a = 0; a < d; ++a) cols[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)] = draw[static_cast<std::size_t>(a)];
    }
    std::vector<ad::Node> axis_nodes;
    axis_nodes.reserve(static_cast<std::size_t>(d));
    for (int a = 0; a < d; ++a)
        axis_nodes.push_back(tape.constant(Tensor::vector(std::move(cols[static_cast<std::size_t>(a)]))));
    ad::Node w = tape.constant(Tensor::vector(
        std::vector<double>(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n))));
    return ParticleEnsemble(&tape, axes, std::move(axis_nodes), w, n);
}

/// Bayes rule on the weights: w_j <- p_j w_j / sum_i p_i w_i.
inline ParticleEnsemble bayes_update(const ParticleEnsemble& e, ad::Node likelihoods) {
    const Tensor& p = likelihoods.value();
    if (p.rank() != 1 || p.rows() != e.count())
        throw std::invalid_argument("bayes_update: likelihood vector has wrong shape");
    double total = 0.0;
    for (int j = 0; j < p.rows(); ++j) {
        if (p[j] < 0.0) throw std::invalid_argument("bayes_update: negative likelihood");
        total += p[j];
    }
    if (!(total > 0.0))
        throw std::invalid_argument("bayes_update: all-zero likelihoods, outcome impossible under the model");
    ad::Tape& t = e.tape();
    ad::Node unnorm = t.mul(likelihoods, e.weights());
    ad::Node norm = t.div(unnorm, t.sum(unnorm));
    std::vector<ad::Node> axis_nodes;
    for (int a = 0; a < e.dim(); ++a) axis_nodes.push_back(e.axis(a));
    return ParticleEnsemble(&e.tape(), e.axes(), std::move(axis_nodes), norm, e.count());
}

inline ad::Node mean_axis(const ParticleEnsemble& e, int a) {
    return e.tape().sum(e.tape().mul(e.weights(), e.axis(a)));
}

inline std::vector<ad::Node> mean(const ParticleEnsemble& e) {
    std::vector<ad::Node> m;
    m.reserve(static_cast<std::size_t>(e.dim()));
    for (int a = 0; a < e.dim(); ++a) m.push_back(mean_axis(e, a));
    return m;
}

inline ad::Node covariance_entry(const ParticleEnsemble& e, int a, int b,
                                 ad::Node mean_a, ad::Node mean_b) {
    ad::Tape& t = e.tape();
    ad::Node da = t.sub(e.axis(a), mean_a);
    ad::Node db = (a == b) ? da : t.sub(e.axis(b), mean_b);
    return t.sum(t.mul(e.weights(), t.mul(da, db)));
}

/// Full d x d covariance matrix node (symmetric entries shared).
inline ad::Node covariance(const ParticleEnsemble& e) {
    const int d = e.dim();
    std::vector<ad::Node> means = mean(e);
    std::vector<std::vector<ad::Node>> rows(static_cast<std::size_t>(d),
                                            std::vector<ad::Node>(static_cast<std::size_t>(d)));
    for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) {
            ad::Node c = covariance_entry(e, a, b, means[static_cast<std::size_t>(a)], means[static_cast<std::size_t>(b)]);
            rows[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = c;
            rows[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = c;
        }
    return e.tape().pack_matrix(rows);
}

inline double effective_particles(const ParticleEnsemble& e) {
    const Tensor& w = e.weights().value();
    double s2 = 0.0;
    for (int j = 0; j < w.rows(); ++j) s2 += w[j] * w[j];
    return 1.0 / s2;
}

inline bool needs_resampling(const ParticleEnsemble& e, double threshold) {
    return effective_particles(e) < threshold * static_cast<double>(e.count());
}

/// Maximum a posteriori estimate over the discrete axes: weights of
/// particles sharing the same discrete values are merged, ties are broken
/// toward the value first seen at the lowest particle index. Continuous
/// axes report the conditional posterior mean within the winning subset
/// (the plain posterior mean when there is no discrete axis).
inline std::vector<double> argmax_estimator(const ParticleEnsemble& e) {
    const int d = e.dim();
    std::vector<int> disc;
    for (int a = 0; a < d; ++a)
        if (e.axes()[static_cast<std::size_t>(a)].discrete) disc.push_back(a);

    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    if (disc.empty()) {
        for (int a = 0; a < d; ++a) {
            double acc = 0.0;
            for (int j = 0; j < e.count(); ++j) acc += e.weight(j) * e.particle(j, a);
            out[static_cast<std::size_t>(a)] = acc;
        }
        return out;
    }

    struct Group {
        double mass = 0.0;
        int first_index = 0;
        std::vector<int> members;
    };
    std::map<std::vector<double>, Group> groups;
    for (int j = 0; j < e.count(); ++j) {
        std::vector<double> key;
        key.reserve(disc.size());
        for (int a : disc) key.push_back(e.particle(j, a));
        auto [it, inserted] = groups.emplace(std::move(key), Group{});
        if (inserted) it->second.first_index = j;
        it->second.mass += e.weight(j);
        it->second.members.push_back(j);
    }
    const Group* best = nullptr;
    const std::vector<double>* best_key = nullptr;
    for (const auto& [key, g] : groups) {
        if (!best || g.mass > best->mass + 1e-15 ||
            (std::fabs(g.mass - best->mass) <= 1e-15 && g.first_index < best->first_index)) {
            best = &g;
            best_key = &key;
        }
    }
    for (std::size_t i = 0; i < disc.size(); ++i) out[static_cast<std::size_t>(disc[i])] = (*best_key)[i];
    // conditional mean on the continuous axes
    double mass = 0.0;
    for (int j : best->members) mass += e.weight(j);
    for (int a = 0; a < d; ++a) {
        if (e.axes()[static_cast<std::size_t>(a)].discrete) continue;
        double acc = 0.0;
        for (int j : best->members) acc += e.weight(j) * e.particle(j, a);
        out[static_cast<std::size_t>(a)] = mass > 0.0 ? acc / mass : 0.0;
    }
    return out;
}

namespace detail {

inline std::vector<std::int32_t> draw_indices(const Tensor& q, int count, Rng& rng) {
    std::vector<double> cum(static_cast<std::size_t>(q.rows()));
    double acc = 0.0;
    for (int j = 0; j < q.rows(); ++j) {
        acc += q[j];
        cum[static_cast<std::size_t>(j)] = acc;
    }
    std::vector<std::int32_t> idx(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const double u = rng.uniform() * acc;
        const auto it = std::lower_bound(cum.begin(), cum.end(), u);
        idx[static_cast<std::size_t>(i)] =
            static_cast<std::int32_t>(std::min<std::ptrdiff_t>(it - cum.begin(), q.rows() - 1));
    }
    return idx;
}

inline ad::Node clamp_axis(ad::Tape& t, ad::Node x, double lo, double hi) {
    ad::Node low = t.maximum(x, t.constant(lo));
    return t.neg(t.maximum(t.neg(low), t.constant(-hi)));
}

} // namespace detail

/// Full resampling pipeline: soft draw from q_j = alpha w_j + (1-alpha)/N,
/// importance re-weighting (kept mass gamma), optional Scibior-Wood
/// surrogate weights, reparametrized Gaussian perturbation of the kept
/// particles, Gaussian proposal of the replacement particles, and state
/// rebuild for stateful models.
inline ParticleEnsemble resample(const ParticleEnsemble& e, ResamplingConfig cfg, Rng& rng,
                                 StateEnsemble* states = nullptr,
                                 const StateRebuild& rebuild = {}) {
    cfg.validate();
    ad::Tape& t = e.tape();
    const int n = e.count();
    const int d = e.dim();
    const int keep = cfg.proposal
                         ? std::max<int>(1, static_cast<int>(std::llround(cfg.keep_gamma * n)))
                         : n;
    const int propose = n - keep;

    // stage 1: soft weights and categorical draw
    ad::Node q = t.add(t.mul(e.weights(), t.constant(cfg.soft_alpha)),
                       t.constant((1.0 - cfg.soft_alpha) / static_cast<double>(n)));
    std::vector<std::int32_t> phi = detail::draw_indices(q.value(), keep, rng);

    // stage 2: importance correction, normalized so the kept mass is keep/n
    ad::Node w_phi = t.gather(e.weights(), phi);
    ad::Node q_phi = t.gather(q, phi);
    ad::Node raw = t.div(w_phi, q_phi);
    const double kept_mass = propose > 0 ? static_cast<double>(keep) / static_cast<double>(n) : 1.0;
    ad::Node new_w = t.mul(raw, t.div(t.constant(kept_mass), t.sum(raw)));

    // stage 3: forward-identical surrogate weights
    if (cfg.scibior_correction)
        new_w = t.mul(new_w, t.div(q_phi, t.stop_gradient(q_phi)));

    std::vector<ad::Node> new_axes;
    new_axes.reserve(static_cast<std::size_t>(d));
    for (int a = 0; a < d; ++a) new_axes.push_back(t.gather(e.axis(a), phi));

    std::vector<int> cont;
    for (int a = 0; a < d; ++a)
        if (!e.axes()[static_cast<std::size_t>(a)].discrete) cont.push_back(a);
    const int dc = static_cast<int>(cont.size());

    std::vector<ad::Node> means = mean(e);
    ad::Node cov_sqrt;  // shared by perturbation and proposal
    if (dc > 0 && (cfg.perturbation || propose > 0)) {
        std::vector<std::vector<ad::Node>> rows(static_cast<std::size_t>(dc),
                                                std::vector<ad::Node>(static_cast<std::size_t>(dc)));
        for (int a = 0; a < dc; ++a)
            for (int b = a; b < dc; ++b) {
                ad::Node c = covariance_entry(e, cont[static_cast<std::size_t>(a)], cont[static_cast<std::size_t>(b)],
                                              means[static_cast<std::size_t>(cont[static_cast<std::size_t>(a)])],
                                              means[static_cast<std::size_t>(cont[static_cast<std::size_t>(b)])]);
                rows[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = c;
                rows[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = c;
            }
        ad::Node sigma = t.pack_matrix(rows);
        // regularize a numerically singular covariance before the square root
        const Tensor sv = sigma.value();
        linalg::SymEig eig = linalg::sym_eig(sv);
        double max_eig = 0.0, min_eig = std::numeric_limits<double>::infinity();
        double trace = 0.0;
        for (double w : eig.values) {
            max_eig = std::max(max_eig, std::fabs(w));
            min_eig = std::min(min_eig, w);
            trace += w;
        }
        if (min_eig <= 1e-12 * max_eig) {
            const double eps = 1e-10 * trace / static_cast<double>(dc);
            if (eps > 0.0) {
                std::vector<double> ident(static_cast<std::size_t>(dc) * dc, 0.0);
                for (int a = 0; a < dc; ++a) ident[static_cast<std::size_t>(a) * dc + a] = eps;
                sigma = t.add(sigma, t.constant(Tensor::matrix(dc, dc, std::move(ident))));
            }
        }
        cov_sqrt = t.sym_sqrt(sigma);
    }

    // stage 4: reparametrized perturbation theta'' = beta theta' + (1-beta) mean + delta,
    // delta = sqrt(1-beta^2) * Sigma^(1/2) u with u ~ N(0, I)
    if (cfg.perturbation && dc > 0) {
        const double beta = cfg.perturb_beta;
        const double spread = std::sqrt(std::max(0.0, 1.0 - beta * beta));
        std::vector<ad::Node> u_draws(static_cast<std::size_t>(dc));
        for (int b = 0; b < dc; ++b) {
            std::vector<double> u(static_cast<std::size_t>(keep));
            for (double& x : u) x = rng.normal();
            u_draws[static_cast<std::size_t>(b)] = t.constant(Tensor::vector(std::move(u)));
        }
        for (int a = 0; a < dc; ++a) {
            const int axis_idx = cont[static_cast<std::size_t>(a)];
            ad::Node x = t.mul(new_axes[static_cast<std::size_t>(axis_idx)], t.constant(beta));
            x = t.add(x, t.mul(means[static_cast<std::size_t>(axis_idx)], t.constant(1.0 - beta)));
            for (int b = 0; b < dc; ++b) {
                ad::Node coeff = t.mul(t.pick(cov_sqrt, a, b), t.constant(spread));
                x = t.add(x, t.mul(u_draws[static_cast<std::size_t>(b)], coeff));
            }
            new_axes[static_cast<std::size_t>(axis_idx)] = x;
        }
    }

    // stage 5: proposal of (1-gamma) N fresh particles from N(mean, Sigma)
    if (propose > 0) {
        std::vector<ad::Node> v_draws(static_cast<std::size_t>(dc));
        for (int b = 0; b < dc; ++b) {
            std::vector<double> v(static_cast<std::size_t>(propose));
            for (double& x : v) x = rng.normal();
            v_draws[static_cast<std::size_t>(b)] = t.constant(Tensor::vector(std::move(v)));
        }
        for (int a = 0; a < d; ++a) {
            ad::Node extra;
            if (e.axes()[static_cast<std::size_t>(a)].discrete) {
                // discrete axes are excluded from the Gaussian proposal: draw
                // from the current posterior marginal instead
                std::vector<double> vals(static_cast<std::size_t>(propose));
                const Tensor& w = e.weights().value();
                std::vector<double> wv(w.data(), w.data() + w.rows());
                for (double& x : vals) x = e.particle(rng.categorical(wv), a);
                extra = t.constant(Tensor::vector(std::move(vals)));
            } else {
                int ca = 0;
                while (cont[static_cast<std::size_t>(ca)] != a) ++ca;
                // start from the mean broadcast over the proposal block
                ad::Node zeros = t.constant(Tensor::vector(std::vector<double>(static_cast<std::size_t>(propose), 0.0)));
                extra = t.add(zeros, means[static_cast<std::size_t>(a)]);
                for (int b = 0; b < dc; ++b)
                    extra = t.add(extra, t.mul(v_draws[static_cast<std::size_t>(b)], t.pick(cov_sqrt, ca, b)));
            }
            new_axes[static_cast<std::size_t>(a)] = t.concat(new_axes[static_cast<std::size_t>(a)], extra);
        }
        ad::Node prop_w = t.constant(Tensor::vector(
            std::vector<double>(static_cast<std::size_t>(propose), 1.0 / static_cast<double>(n))));
        new_w = t.concat(new_w, prop_w);
    }

    // particles stay inside the declared bounds of Theta
    for (int a = 0; a < d; ++a) {
        if (e.axes()[static_cast<std::size_t>(a)].discrete) continue;
        const AxisSpec& ax = e.axes()[static_cast<std::size_t>(a)];
        if (cfg.perturbation || propose > 0)
            new_axes[static_cast<std::size_t>(a)] =
                detail::clamp_axis(t, new_axes[static_cast<std::size_t>(a)], ax.lo, ax.hi);
    }

    ParticleEnsemble resampled(&e.tape(), e.axes(), std::move(new_axes), new_w, n);
    if (states && rebuild) *states = rebuild(resampled);
    return resampled;
}

} // namespace metrosynth::pf
