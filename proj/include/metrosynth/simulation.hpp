#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "metrosynth/agents.hpp"
#include "metrosynth/autodiff.hpp"
#include "metrosynth/parallel.hpp"
#include "metrosynth/particle_filter.hpp"
#include "metrosynth/rng.hpp"

namespace metrosynth::sim {

/// Per-estimation figure of merit.
struct PointwiseLoss {
    enum class Kind { Mse, Discrimination };
    Kind kind = Kind::Mse;
    Tensor g = Tensor::matrix(1, 1, {1.0});  // PSD weight matrix

    void validate(int dim) const {
        if (g.rank() != 2 || g.rows() != dim || g.cols() != dim)
            throw std::invalid_argument("PointwiseLoss: G must be " + std::to_string(dim) + "x" +
                                        std::to_string(dim));
        linalg::SymEig e = linalg::sym_eig(g);
        double mx = 0.0;
        for (double w : e.values) mx = std::max(mx, std::fabs(w));
        for (double w : e.values)
            if (w < -1e-12 * std::max(1.0, mx))
                throw std::invalid_argument("PointwiseLoss: G is not positive semidefinite");
    }

    /// tr[G (est - theta)(est - theta)^T] for the MSE; 1 - delta on the
    /// G-selected axes for the discrimination loss (a constant node: the
    /// gradient of a discrete comparison lives in the log-likelihood terms).
    ad::Node build(ad::Tape& t, const std::vector<ad::Node>& mean_nodes,
                   const std::vector<double>& map_estimate,
                   const std::vector<double>& theta) const {
        const int d = static_cast<int>(theta.size());
        if (kind == Kind::Mse) {
            ad::Node acc = t.constant(0.0);
            std::vector<ad::Node> diffs(static_cast<std::size_t>(d));
            std::vector<bool> have(static_cast<std::size_t>(d), false);
            for (int a = 0; a < d; ++a)
                for (int b = 0; b < d; ++b) {
                    const double gab = g.at(a, b);
                    if (gab == 0.0) continue;
                    if (!have[static_cast<std::size_t>(a)]) {
                        diffs[static_cast<std::size_t>(a)] = t.sub(mean_nodes[static_cast<std::size_t>(a)], t.constant(theta[static_cast<std::size_t>(a)]));
                        have[static_cast<std::size_t>(a)] = true;
                    }
                    if (!have[static_cast<std::size_t>(b)]) {
                        diffs[static_cast<std::size_t>(b)] = t.sub(mean_nodes[static_cast<std::size_t>(b)], t.constant(theta[static_cast<std::size_t>(b)]));
                        have[static_cast<std::size_t>(b)] = true;
                    }
                    acc = t.add(acc, t.mul(t.constant(gab),
                                           t.mul(diffs[static_cast<std::size_t>(a)], diffs[static_cast<std::size_t>(b)])));
                }
            return acc;
        }
        // discrimination
        for (int a = 0; a < d; ++a) {
            if (g.at(a, a) == 0.0) continue;
            if (std::fabs(map_estimate[static_cast<std::size_t>(a)] - theta[static_cast<std::size_t>(a)]) > 1e-12)
                return t.constant(1.0);
        }
        return t.constant(0.0);
    }
};

/// All run hyperparameters.
struct RunConfig {
    int particles = 480;       // N
    int batch_size = 128;      // B
    int max_steps = 20;        // M_max
    double max_resources = 20; // R_max
    double nu = 0.98;          // fraction of the batch that must terminate
    pf::ResamplingConfig resampling;
    PointwiseLoss pointwise;
    double learning_rate = 1e-2;  // alpha_0
    int update_steps = 100;       // I
    int accumulate = 1;           // gradient accumulation factor
    std::uint64_t seed = 0;
    double outcome_mixing = 0.0;  // importance sampling of the outcomes
    bool grad_clip_enabled = false;
    double grad_clip = 1e3;

    void validate() const {
        if (particles < 2) throw std::invalid_argument("RunConfig: need at least 2 particles");
        if (batch_size < 1) throw std::invalid_argument("RunConfig: batch_size must be >= 1");
        if (max_steps < 0) throw std::invalid_argument("RunConfig: negative max_steps");
        if (!(nu > 0.0 && nu <= 1.0)) throw std::invalid_argument("RunConfig: nu outside (0,1]");
        if (accumulate < 1) throw std::invalid_argument("RunConfig: accumulate must be >= 1");
        if (!(outcome_mixing >= 0.0 && outcome_mixing < 1.0))
            throw std::invalid_argument("RunConfig: outcome_mixing outside [0,1)");
        resampling.validate();
    }
};

struct StepRecord {
    std::vector<double> control_values;
    std::vector<ad::Node> control_nodes;
    double outcome = 0.0;
    double resource_increment = 0.0;
    double resource_total = 0.0;
    std::vector<double> estimator;         // MAP on discrete axes, posterior mean elsewhere
    std::vector<ad::Node> estimator_nodes; // posterior mean per axis
    ad::Node loss;                         // pointwise loss at this step
    double loss_value = 0.0;
    ad::Node loglik;                       // accumulated log-likelihood up to this step
    bool frozen = false;
};

/// One estimation run: the tape it was built on, the sampled true
/// parameters, and the per-step trail. After termination the trailing
/// steps are frozen copies of the last live one.
struct EpisodeRecord {
    std::unique_ptr<ad::Tape> tape;
    std::vector<double> theta_true;
    std::vector<StepRecord> steps;
    std::vector<double> prior_estimator;
    ad::Node prior_loss;  // loss of the prior-stage estimator (no measurements)
    double prior_loss_value = 0.0;
    bool terminated = false;
    int terminated_at = -1;
    double importance_ratio = 1.0;

    const StepRecord& final_step() const {
        if (steps.empty()) throw std::logic_error("EpisodeRecord: no steps");
        return steps.back();
    }

    ad::Node final_loss_node() const { return steps.empty() ? prior_loss : steps.back().loss; }
    double final_loss_value() const { return steps.empty() ? prior_loss_value : steps.back().loss_value; }
};

/// Summary of the posterior plus bookkeeping fractions handed to the agent,
/// materialized as constant nodes: this realizes the stop-gradient boundary
/// at the agent input (a stopped node and a fresh constant of the same value
/// propagate identical forward values and identical adjoints).
template <class Model>
std::vector<ad::Node> summary_input(ad::Tape& tape, const Model& model,
                                    const pf::ParticleEnsemble& ensemble,
                                    typename Model::Sim& sim, double resource_used,
                                    double resource_max, int step, int max_steps) {
    const double r_frac = resource_max > 0.0 ? std::min(1.0, resource_used / resource_max) : 0.0;
    const double t_frac = max_steps > 0 ? static_cast<double>(step) / static_cast<double>(max_steps) : 0.0;
    std::vector<double> feats = model.summary_features(ensemble, sim, r_frac, t_frac);
    std::vector<ad::Node> nodes;
    nodes.reserve(feats.size());
    for (double f : feats) nodes.push_back(tape.constant(f));
    return nodes;
}

namespace detail {

/// Live state of one episode while a batch advances in lockstep.
template <class Model>
struct Runner {
    EpisodeRecord record;
    pf::ParticleEnsemble ensemble;
    typename Model::Sim sim;
    Rng rng{0};
    double resources = 0.0;
    bool resample_flag = false;
    bool advanced_this_step = false;

    ad::Tape& tape() { return *record.tape; }
};

template <class Model, class Agent>
Runner<Model> start_runner(const Model& model, Agent& agent, const RunConfig& cfg, Rng rng,
                           bool recording) {
    (void)agent;
    Runner<Model> r;
    r.rng = rng;
    r.record.tape = std::make_unique<ad::Tape>(recording);
    r.record.theta_true = model.sample_prior(r.rng);
    r.ensemble = pf::init_ensemble(*r.record.tape,
                                   [&](Rng& g) { return model.sample_prior(g); },
                                   model.axes(), cfg.particles, r.rng);
    r.sim = model.start(*r.record.tape, r.record.theta_true, r.ensemble);

    std::vector<ad::Node> mean_nodes = pf::mean(r.ensemble);
    std::vector<double> est = pf::argmax_estimator(r.ensemble);
    const auto& axes = r.ensemble.axes();
    for (int a = 0; a < r.ensemble.dim(); ++a)
        if (!axes[static_cast<std::size_t>(a)].discrete)
            est[static_cast<std::size_t>(a)] = mean_nodes[static_cast<std::size_t>(a)].scalar();
    r.record.prior_estimator = est;
    r.record.prior_loss = cfg.pointwise.build(*r.record.tape, mean_nodes, est, r.record.theta_true);
    r.record.prior_loss_value = r.record.prior_loss.scalar();
    return r;
}

/// Control, outcome extraction, log-likelihood accumulation and Bayes rule.
template <class Model, class Agent>
void phase_measure(const Model& model, Agent& agent, const RunConfig& cfg, Runner<Model>& r,
                   int step) {
    ad::Tape& t = r.tape();
    agents::AgentContext ctx;
    ctx.tape = &t;
    ctx.ensemble = &r.ensemble;
    ctx.features = summary_input(t, model, r.ensemble, r.sim, r.resources, cfg.max_resources,
                                 step, cfg.max_steps);
    ctx.resource_used = r.resources;
    ctx.resource_max = cfg.max_resources;
    ctx.step = step;
    ctx.max_steps = cfg.max_steps;
    ctx.rng = &r.rng;

    StepRecord rec;
    rec.control_nodes = agent.act(ctx);
    rec.control_values.reserve(rec.control_nodes.size());
    for (const ad::Node& c : rec.control_nodes) {
        const double v = c.scalar();
        if (!std::isfinite(v))
            throw std::runtime_error("run_episode: non-finite control at step " + std::to_string(step));
        rec.control_values.push_back(v);
    }

    // outcome extraction, possibly under an importance-mixed law
    if (cfg.outcome_mixing > 0.0) {
        if constexpr (requires { model.outcome_distribution(r.sim, rec.control_values, r.record.theta_true); }) {
            auto dist = model.outcome_distribution(r.sim, rec.control_values, r.record.theta_true);
            const double w = cfg.outcome_mixing;
            const double unif = 1.0 / static_cast<double>(dist.size());
            std::vector<double> mixed(dist.size());
            for (std::size_t i = 0; i < dist.size(); ++i) mixed[i] = (1.0 - w) * dist[i].second + w * unif;
            const int pick = r.rng.categorical(mixed);
            rec.outcome = dist[static_cast<std::size_t>(pick)].first;
            if (!(mixed[static_cast<std::size_t>(pick)] > 0.0))
                throw std::runtime_error("outcome importance sampling: zero proposal probability");
            r.record.importance_ratio *= dist[static_cast<std::size_t>(pick)].second / mixed[static_cast<std::size_t>(pick)];
        } else {
            throw std::runtime_error("outcome importance sampling needs an enumerable outcome set");
        }
    } else {
        rec.outcome = model.draw_outcome(r.sim, rec.control_values, r.record.theta_true, r.rng);
    }

    ad::Node ll = model.true_log_likelihood(r.sim, t, rec.control_nodes, r.record.theta_true, rec.outcome);
    if (ctx.sample_logprob.valid()) ll = t.add(ll, ctx.sample_logprob);
    rec.loglik = r.record.steps.empty() || !r.record.steps.back().loglik.valid()
                     ? ll
                     : t.add(r.record.steps.back().loglik, ll);

    ad::Node lik = model.particle_likelihoods(r.sim, t, r.ensemble, rec.control_nodes, rec.outcome);
    const Tensor& lv = lik.value();
    for (int j = 0; j < lv.size(); ++j)
        if (lv.data()[j] < -1e-12 || lv.data()[j] > 1.0 + 1e-9)
            throw std::runtime_error("run_episode: model likelihood outside [0,1] at step " +
                                     std::to_string(step));
    r.ensemble = pf::bayes_update(r.ensemble, lik);
    r.resample_flag = pf::needs_resampling(r.ensemble, cfg.resampling.threshold);
    r.record.steps.push_back(std::move(rec));
    r.advanced_this_step = true;
}

template <class Model>
void do_resample(const Model& model, const RunConfig& cfg, Runner<Model>& r) {
    pf::StateRebuild rebuild;
    pf::StateEnsemble* states = nullptr;
    if constexpr (requires(typename Model::Sim& s) { s.states; }) {
        if (model.stateful()) {
            states = &r.sim.states;
            rebuild = [&](const pf::ParticleEnsemble& ne) {
                return model.rebuild_states(r.sim, r.tape(), ne);
            };
        }
    }
    r.ensemble = pf::resample(r.ensemble, cfg.resampling, r.rng, states, rebuild);
    r.resample_flag = false;
}

/// Estimator, pointwise loss, resources, termination.
template <class Model>
void phase_record(const Model& model, const RunConfig& cfg, Runner<Model>& r, int step) {
    StepRecord& rec = r.record.steps.back();
    rec.estimator_nodes = pf::mean(r.ensemble);
    rec.estimator = pf::argmax_estimator(r.ensemble);
    const auto& axes = r.ensemble.axes();
    for (int a = 0; a < r.ensemble.dim(); ++a)
        if (!axes[static_cast<std::size_t>(a)].discrete)
            rec.estimator[static_cast<std::size_t>(a)] = rec.estimator_nodes[static_cast<std::size_t>(a)].scalar();
    rec.loss = cfg.pointwise.build(r.tape(), rec.estimator_nodes, rec.estimator, r.record.theta_true);
    rec.loss_value = rec.loss.scalar();

    rec.resource_increment = model.resource_increment(rec.control_values, r.record.theta_true);
    r.resources += rec.resource_increment;
    rec.resource_total = r.resources;

    // the crossing measurement is executed, then the episode freezes
    if (r.resources >= cfg.max_resources || step + 1 >= cfg.max_steps) {
        r.record.terminated = true;
        r.record.terminated_at = step;
    }
    r.advanced_this_step = false;
}

inline void append_frozen(EpisodeRecord& record) {
    StepRecord copy = record.steps.back();
    copy.frozen = true;
    copy.resource_increment = 0.0;
    record.steps.push_back(std::move(copy));
}

} // namespace detail

/// One full estimation run (measurement loop of a single episode).
template <class Model, class Agent>
EpisodeRecord run_episode(const Model& model, Agent& agent, const RunConfig& cfg, Rng rng,
                          bool recording = true) {
    cfg.validate();
    auto r = detail::start_runner(model, agent, cfg, rng, recording);
    for (int t = 0; t < cfg.max_steps && !r.record.terminated; ++t) {
        detail::phase_measure(model, agent, cfg, r, t);
        if (r.resample_flag) detail::do_resample(model, cfg, r);
        detail::phase_record(model, cfg, r, t);
    }
    return std::move(r.record);
}

/// A batch of episodes advancing in lockstep. Independent child RNG streams
/// per episode, batch-synchronized resampling (all active episodes resample
/// when a fraction `f` of them flags), and the nu-fraction stopping rule;
/// terminated episodes contribute frozen steps until the loop halts.
template <class Model, class Agent>
std::vector<EpisodeRecord> run_batch(const Model& model, Agent& agent, const RunConfig& cfg,
                                     Rng master, bool recording = true) {
    cfg.validate();
    const int b = cfg.batch_size;
    std::vector<detail::Runner<Model>> runners;
    runners.reserve(static_cast<std::size_t>(b));
    for (int k = 0; k < b; ++k)
        runners.push_back(detail::start_runner(model, agent, cfg, master.child(static_cast<std::uint64_t>(k)), recording));

    const int need = static_cast<int>(std::ceil(cfg.nu * b));
    for (int t = 0; t < cfg.max_steps; ++t) {
        int done = 0;
        for (const auto& r : runners)
            if (r.record.terminated) ++done;
        if (done >= need) break;

        parallel_for(b, [&](int k) {
            auto& r = runners[static_cast<std::size_t>(k)];
            if (r.record.terminated) {
                detail::append_frozen(r.record);
            } else {
                detail::phase_measure(model, agent, cfg, r, t);
            }
        });

        int active = 0, flagged = 0;
        for (const auto& r : runners) {
            if (!r.advanced_this_step) continue;
            ++active;
            if (r.resample_flag) ++flagged;
        }
        const bool fire = active > 0 && flagged > 0 &&
                          static_cast<double>(flagged) >= cfg.resampling.batch_fraction * active;
        parallel_for(b, [&](int k) {
            auto& r = runners[static_cast<std::size_t>(k)];
            if (!r.advanced_this_step) return;
            if (fire) detail::do_resample(model, cfg, r);
            detail::phase_record(model, cfg, r, t);
        });
    }

    std::vector<EpisodeRecord> records;
    records.reserve(static_cast<std::size_t>(b));
    for (auto& r : runners) records.push_back(std::move(r.record));
    return records;
}

/// Realized number of lockstep iterations of a batch (the frozen copies
/// keep all records at the same length).
inline int realized_steps(const std::vector<EpisodeRecord>& records) {
    int m = 0;
    for (const auto& r : records) m = std::max(m, static_cast<int>(r.steps.size()));
    return m;
}

} // namespace metrosynth::sim
