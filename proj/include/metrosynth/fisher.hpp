#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "metrosynth/autodiff.hpp"
#include "metrosynth/linalg.hpp"
#include "metrosynth/simulation.hpp"
#include "metrosynth/training.hpp"

namespace metrosynth::fisher {

/// Per-episode parameter scores and the observed Fisher information
/// f_k = s_k s_k^T, with s_k the summed per-step score vector. The scores
/// stay differentiable with respect to the agent variables through the
/// recorded control nodes.
struct ScoreTrajectory {
    const sim::EpisodeRecord* record = nullptr;
    std::vector<std::vector<ad::Node>> step_scores;  // [step][axis]
    std::vector<ad::Node> total_score;               // d nodes
    std::vector<std::vector<ad::Node>> observed;     // d x d nodes, f_k
    double weight = 1.0;                             // importance ratio of the trajectory

    int dim() const { return static_cast<int>(total_score.size()); }

    double observed_value(int a, int b) const {
        return observed[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)].scalar();
    }
};

/// Central finite-difference parameter scores, as nodes in the controls.
/// Fallback for models without analytic scores (h = 1e-6 * axis scale).
template <class Model>
std::vector<ad::Node> fd_score_nodes(const Model& model, ad::Tape& t,
                                     const std::vector<ad::Node>& controls,
                                     const std::vector<double>& theta, double y,
                                     double h_rel = 1e-6) {
    std::vector<ad::Node> out;
    const auto axes = model.axes();
    for (std::size_t a = 0; a < theta.size(); ++a) {
        const double scale = std::max(1.0, std::fabs(axes[a].hi - axes[a].lo));
        const double h = h_rel * scale;
        std::vector<double> tp = theta, tm = theta;
        tp[a] += h;
        tm[a] -= h;
        typename Model::Sim sp{}, sm{};
        ad::Node lp = model.true_log_likelihood(sp, t, controls, tp, y);
        ad::Node lm = model.true_log_likelihood(sm, t, controls, tm, y);
        out.push_back(t.mul(t.sub(lp, lm), t.constant(1.0 / (2.0 * h))));
    }
    return out;
}

/// Build the score trajectory of one episode at the parameter point theta
/// (defaults to the episode's true parameters). Frozen steps carry no
/// measurement and contribute no score.
template <class Model>
ScoreTrajectory observed_fi(const sim::EpisodeRecord& record, const Model& model,
                            const std::vector<double>& theta) {
    ScoreTrajectory out;
    out.record = &record;
    out.weight = record.importance_ratio;
    ad::Tape& t = *record.tape;
    const int d = static_cast<int>(theta.size());

    for (const auto& step : record.steps) {
        if (step.frozen) continue;
        std::vector<ad::Node> s;
        if constexpr (requires { model.score_nodes(t, step.control_nodes, theta, step.outcome); }) {
            s = model.score_nodes(t, step.control_nodes, theta, step.outcome);
        } else {
            s = fd_score_nodes(model, t, step.control_nodes, theta, step.outcome);
        }
        if (static_cast<int>(s.size()) != d)
            throw std::invalid_argument("observed_fi: score dimension mismatch");
        out.step_scores.push_back(std::move(s));
    }

    out.total_score.resize(static_cast<std::size_t>(d));
    for (int a = 0; a < d; ++a) {
        ad::Node acc = t.constant(0.0);
        for (const auto& s : out.step_scores) acc = t.add(acc, s[static_cast<std::size_t>(a)]);
        out.total_score[static_cast<std::size_t>(a)] = acc;
    }
    out.observed.assign(static_cast<std::size_t>(d), std::vector<ad::Node>(static_cast<std::size_t>(d)));
    for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) {
            ad::Node f = t.mul(out.total_score[static_cast<std::size_t>(a)], out.total_score[static_cast<std::size_t>(b)]);
            out.observed[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = f;
            out.observed[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = f;
        }
    return out;
}

template <class Model>
ScoreTrajectory observed_fi(const sim::EpisodeRecord& record, const Model& model) {
    return observed_fi(record, model, record.theta_true);
}

/// Batch Fisher-information matrix estimate (importance-ratio weighted).
struct FisherEstimate {
    Tensor fhat;  // d x d

    double at(int a, int b) const { return fhat.at(a, b); }
};

inline FisherEstimate estimate(const std::vector<ScoreTrajectory>& batch) {
    if (batch.empty()) throw std::invalid_argument("fisher::estimate: empty batch");
    const int d = batch.front().dim();
    std::vector<double> acc(static_cast<std::size_t>(d) * d, 0.0);
    for (const auto& s : batch)
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b)
                acc[static_cast<std::size_t>(a) * d + b] += s.weight * s.observed_value(a, b);
    for (double& x : acc) x /= static_cast<double>(batch.size());
    return FisherEstimate{Tensor::matrix(d, d, std::move(acc))};
}

/// Plain estimator under an importance-mixed outcome law: the episodes must
/// have been generated with a positive outcome mixing weight; the ratios
/// p/p~ already sit in the records.
inline FisherEstimate importance_sampled_fi(const std::vector<ScoreTrajectory>& batch) {
    for (const auto& s : batch)
        if (!(s.weight > 0.0))
            throw std::invalid_argument("importance_sampled_fi: zero proposal probability on a trajectory");
    return estimate(batch);
}

/// Cramer-Rao objective tr(G Fhat^-1) (or its log) with the unbiased
/// surrogate gradient
///   -(1/B) tr{ sg(Fhat^-1 G Fhat^-1) sum_k [ df_k + sg(f_k) dlog p_k ] }.
inline train::BatchLoss cr_loss(const std::vector<ScoreTrajectory>& batch, const Tensor& g,
                                bool log_mode = false, bool loglik_terms = true) {
    if (batch.empty()) throw std::invalid_argument("cr_loss: empty batch");
    const int d = batch.front().dim();
    if (g.rank() != 2 || g.rows() != d || g.cols() != d)
        throw std::invalid_argument("cr_loss: G must be " + std::to_string(d) + "x" + std::to_string(d));

    const FisherEstimate fe = estimate(batch);
    const std::vector<double> f = fe.fhat.to_vector();
    if (linalg::condition_number_sym(f, d) > 1e12)
        throw std::invalid_argument("cr_loss: Fisher estimate is singular (condition number > 1e12)");
    std::vector<int> null_dirs;
    const std::vector<double> finv = linalg::sym_pinv(f, d, 1e-12, &null_dirs);
    if (!null_dirs.empty()) {
        // reject when G has support on the null space of Fhat
        linalg::SymEig eig = linalg::sym_eig(f, d);
        for (int k : null_dirs) {
            double quad = 0.0;
            for (int a = 0; a < d; ++a)
                for (int b = 0; b < d; ++b)
                    quad += eig.vectors[static_cast<std::size_t>(a) * d + k] * g.at(a, b) *
                            eig.vectors[static_cast<std::size_t>(b) * d + k];
            if (std::fabs(quad) > 1e-9)
                throw std::invalid_argument("cr_loss: G has support on the null space of the Fisher estimate");
        }
    }

    double tr_gfinv = 0.0;
    for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) tr_gfinv += g.at(a, b) * finv[static_cast<std::size_t>(b) * d + a];
    if (log_mode && !(tr_gfinv > 0.0))
        throw std::invalid_argument("cr_loss: log mode needs a positive objective");

    // A = Fhat^-1 G Fhat^-1 (constant coefficients of the surrogate)
    std::vector<double> a_mat(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int p = 0; p < d; ++p)
                for (int q = 0; q < d; ++q)
                    acc += finv[static_cast<std::size_t>(i) * d + p] * g.at(p, q) * finv[static_cast<std::size_t>(q) * d + j];
            a_mat[static_cast<std::size_t>(i) * d + j] = acc;
        }

    const double outer_scale = log_mode ? 1.0 / tr_gfinv : 1.0;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    train::BatchLoss out;
    out.value = log_mode ? std::log(tr_gfinv) : tr_gfinv;
    out.plain_value = out.value;
    for (const auto& s : batch) {
        ad::Tape& t = *s.record->tape;
        ad::Node fterm = t.constant(0.0);
        double fval = 0.0;
        for (int a = 0; a < d; ++a)
            for (int b = 0; b < d; ++b) {
                const double c = a_mat[static_cast<std::size_t>(a) * d + b];
                if (c == 0.0) continue;
                fterm = t.add(fterm, t.mul(s.observed[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)], t.constant(c)));
                fval += c * s.observed_value(b, a);
            }
        ad::Node psi = fterm;
        if (loglik_terms && !s.record->steps.empty() && s.record->steps.back().loglik.valid())
            psi = t.add(psi, t.mul(s.record->steps.back().loglik, t.constant(fval)));
        psi = t.mul(psi, t.constant(-inv_b * outer_scale * s.weight));
        // parts carry only gradient; the reported value is tr(G Fhat^-1)
        psi = t.sub(psi, t.constant(psi.scalar()));
        out.parts.push_back({s.record, psi, 1.0});
    }
    return out;
}

/// Average-Fisher objective tr(G * mean_k F(theta_k)^-1 ... ): identical
/// pooling of the observed information across prior draws before inversion.
inline train::BatchLoss averaged_fi_loss(const std::vector<ScoreTrajectory>& batch, const Tensor& g,
                                         bool log_mode = false, bool loglik_terms = true) {
    return cr_loss(batch, g, log_mode, loglik_terms);
}

/// Frequentist training loop: batches are scored, pooled into the CR
/// objective, and the agent is Adam-updated, mirroring train::train.
template <class Model, class Agent>
train::TrainResult train_cr(const Model& model, Agent& agent, const sim::RunConfig& cfg,
                            const Tensor& g, bool log_mode = false, bool loglik_terms = true) {
    sim::RunConfig run_cfg = cfg;
    run_cfg.pointwise.validate(static_cast<int>(model.axes().size()));

    train::TrainResult result;
    train::OptimizerState opt;
    opt.base_rate = cfg.learning_rate;
    Rng master(cfg.seed);
    auto& vars = agent.variables();

    for (int i = 1; i <= cfg.update_steps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng batch_rng = master.child(static_cast<std::uint64_t>(i));
        auto records = sim::run_batch(model, agent, run_cfg, batch_rng);
        std::vector<ScoreTrajectory> scores;
        scores.reserve(records.size());
        for (const auto& r : records) scores.push_back(observed_fi(r, model));
        train::BatchLoss loss = cr_loss(scores, g, log_mode, loglik_terms);
        if (!std::isfinite(loss.value))
            throw std::runtime_error("train_cr: non-finite loss at update step " + std::to_string(i));
        ad::GradientMap grads = loss.backward(vars);
        std::string diag;
        if (!train::adam_step(opt, grads, vars, &diag)) ++result.rejected_steps;
        const auto t1 = std::chrono::steady_clock::now();
        result.history.push_back({i, loss.plain_value, opt.rate_at(i),
                                  std::chrono::duration<double>(t1 - t0).count()});
    }
    return result;
}

} // namespace metrosynth::fisher
