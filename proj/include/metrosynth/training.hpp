#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "metrosynth/autodiff.hpp"
#include "metrosynth/parallel.hpp"
#include "metrosynth/simulation.hpp"

namespace metrosynth::train {

/// Training objective. Mse / Discrimination act on the final estimator
/// only; Cumulative, Logarithmic and InformationGain aggregate the per-step
/// losses, with the pointwise figure of merit chosen separately.
struct LossSpec {
    enum class Kind { Mse, Discrimination, Cumulative, Logarithmic, InformationGain };
    Kind kind = Kind::Cumulative;
    sim::PointwiseLoss pointwise;
    bool baseline = true;
    bool resource_limited = false;  // final-loss mean over the terminated episodes only
    bool loglik_terms = true;       // score (log-likelihood) corrections in the gradient
    std::function<double(const std::vector<double>&, int)> eta;  // cumulative normalization
    double ig_eps_scale = 1e-12;

    /// Pointwise loss the simulation hooks should record.
    sim::PointwiseLoss effective_pointwise() const {
        sim::PointwiseLoss p = pointwise;
        if (kind == Kind::Mse) p.kind = sim::PointwiseLoss::Kind::Mse;
        if (kind == Kind::Discrimination) p.kind = sim::PointwiseLoss::Kind::Discrimination;
        return p;
    }
};

/// A batch loss split into per-episode surrogate nodes (each living on its
/// episode's tape). `value` is the forward value of the surrogate
/// expression, `plain_value` the interpretable batch loss for logging.
class BatchLoss {
public:
    struct Part {
        const sim::EpisodeRecord* record = nullptr;
        ad::Node node;
        double scale = 1.0;
    };

    double value = 0.0;
    double plain_value = 0.0;
    std::vector<Part> parts;

    ad::GradientMap backward(const std::vector<ad::Variable>& vars) const {
        ad::GradientMap total;
        total.init(vars);
        std::vector<ad::GradientMap> partial(parts.size());
        parallel_for(static_cast<int>(parts.size()), [&](int i) {
            partial[static_cast<std::size_t>(i)] =
                parts[static_cast<std::size_t>(i)].record->tape->backward(parts[static_cast<std::size_t>(i)].node, vars);
        });
        for (std::size_t i = 0; i < parts.size(); ++i)
            total.add_scaled(partial[i], parts[i].scale);
        return total;
    }
};

/// Final-step loss with the policy-gradient correction:
/// (1/B') sum_k { l_k + sg[l_k - baseline] * log p(traj_k) }.
inline BatchLoss modified_batch_loss(const std::vector<sim::EpisodeRecord>& records,
                                     const LossSpec& spec) {
    std::vector<const sim::EpisodeRecord*> chosen;
    for (const auto& r : records)
        if (!spec.resource_limited || r.terminated) chosen.push_back(&r);
    if (chosen.empty())
        throw std::invalid_argument("modified_batch_loss: no terminated episodes in the batch");
    const double inv_b = 1.0 / static_cast<double>(chosen.size());

    double base = 0.0;
    if (spec.baseline) {
        for (const auto* r : chosen) base += r->final_loss_value();
        base *= inv_b;
    }

    BatchLoss out;
    for (const auto* r : chosen) {
        ad::Tape& t = *r->tape;
        ad::Node psi = r->final_loss_node();
        if (spec.loglik_terms && !r->steps.empty() && r->steps.back().loglik.valid()) {
            const double coeff = r->final_loss_value() - base;
            psi = t.add(psi, t.mul(r->steps.back().loglik, t.constant(coeff)));
        }
        out.parts.push_back({r, t.mul(psi, t.constant(inv_b)), 1.0});
        out.value += psi.scalar() * inv_b;
        out.plain_value += r->final_loss_value() * inv_b;
    }
    return out;
}

/// Cumulative loss over all steps and all episodes of the batch,
/// (1/(M'B)) sum_t sum_k l_kt / eta(theta_k, t), with the per-step score
/// pairing sg[l_kt] * log p(y_{k,<=t}); log-likelihood terms of future
/// outcomes are dropped.
inline BatchLoss cumulative_loss(const std::vector<sim::EpisodeRecord>& records,
                                 const LossSpec& spec) {
    if (records.empty()) throw std::invalid_argument("cumulative_loss: empty batch");
    const int m = sim::realized_steps(records);
    if (m == 0) throw std::invalid_argument("cumulative_loss: records have no steps");
    const double inv = 1.0 / (static_cast<double>(m) * static_cast<double>(records.size()));

    // normalized per-step loss values, for the baseline and the sg coefficients
    std::vector<std::vector<double>> lnorm(records.size(), std::vector<double>(static_cast<std::size_t>(m)));
    for (std::size_t k = 0; k < records.size(); ++k) {
        for (int t = 0; t < m; ++t) {
            double eta = 1.0;
            if (spec.eta) {
                eta = spec.eta(records[k].theta_true, t);
                if (eta == 0.0) throw std::invalid_argument("cumulative_loss: eta returned zero");
            }
            lnorm[k][static_cast<std::size_t>(t)] = records[k].steps[static_cast<std::size_t>(t)].loss_value / eta;
        }
    }
    std::vector<double> base(static_cast<std::size_t>(m), 0.0);
    if (spec.baseline) {
        for (int t = 0; t < m; ++t) {
            double acc = 0.0;
            for (std::size_t k = 0; k < records.size(); ++k) acc += lnorm[k][static_cast<std::size_t>(t)];
            base[static_cast<std::size_t>(t)] = acc / static_cast<double>(records.size());
        }
    }

    BatchLoss out;
    for (std::size_t k = 0; k < records.size(); ++k) {
        const sim::EpisodeRecord& r = records[k];
        ad::Tape& t = *r.tape;
        ad::Node psi = t.constant(0.0);
        for (int s = 0; s < m; ++s) {
            const sim::StepRecord& step = r.steps[static_cast<std::size_t>(s)];
            double eta = 1.0;
            if (spec.eta) eta = spec.eta(r.theta_true, s);
            ad::Node term = t.mul(step.loss, t.constant(1.0 / eta));
            if (spec.loglik_terms && step.loglik.valid()) {
                const double coeff = lnorm[k][static_cast<std::size_t>(s)] - base[static_cast<std::size_t>(s)];
                term = t.add(term, t.mul(step.loglik, t.constant(coeff)));
            }
            psi = t.add(psi, term);
            out.plain_value += lnorm[k][static_cast<std::size_t>(s)] * inv;
        }
        psi = t.mul(psi, t.constant(inv));
        out.value += psi.scalar();
        out.parts.push_back({&r, psi, 1.0});
    }
    return out;
}

/// Logarithmic loss (1/M') sum_t log[(1/B) sum_k l_kt]. The reported value
/// is the plain logarithmic loss; the gradient follows the surrogate ratio
/// form with the batch sums held constant in the denominators.
inline BatchLoss logarithmic_loss(const std::vector<sim::EpisodeRecord>& records,
                                  const LossSpec& spec) {
    if (records.empty()) throw std::invalid_argument("logarithmic_loss: empty batch");
    const int m = sim::realized_steps(records);
    if (m == 0) throw std::invalid_argument("logarithmic_loss: records have no steps");
    const double b = static_cast<double>(records.size());

    std::vector<double> sums(static_cast<std::size_t>(m), 0.0);
    for (const auto& r : records)
        for (int t = 0; t < m; ++t) sums[static_cast<std::size_t>(t)] += r.steps[static_cast<std::size_t>(t)].loss_value;
    for (int t = 0; t < m; ++t)
        if (!(sums[static_cast<std::size_t>(t)] > 0.0))
            throw std::invalid_argument("logarithmic_loss: zero batch-mean loss at step " + std::to_string(t));

    BatchLoss out;
    for (int t = 0; t < m; ++t) out.value += std::log(sums[static_cast<std::size_t>(t)] / b);
    out.value /= static_cast<double>(m);
    out.plain_value = out.value;

    for (const auto& r : records) {
        ad::Tape& t = *r.tape;
        ad::Node psi = t.constant(0.0);
        for (int s = 0; s < m; ++s) {
            const sim::StepRecord& step = r.steps[static_cast<std::size_t>(s)];
            const double c = 1.0 / (static_cast<double>(m) * sums[static_cast<std::size_t>(s)]);
            ad::Node term = step.loss;
            if (spec.loglik_terms && step.loglik.valid())
                term = t.add(term, t.mul(step.loglik, t.constant(step.loss_value)));
            psi = t.add(psi, t.mul(term, t.constant(c)));
        }
        // shift so the part contributes zero forward value (the reported
        // value is the plain logarithmic loss computed above)
        psi = t.sub(psi, t.constant(psi.scalar()));
        out.parts.push_back({&r, psi, 1.0});
    }
    return out;
}

/// Greedy information-gain objective: (1/M') sum_t log[ S_t / sg(S_(t-1) + eps) ]
/// with S_t the batch sum of the step-t losses and S_(-1) the prior-stage
/// one. Forward value telescopes to the total empirical information gain.
inline BatchLoss information_gain_loss(const std::vector<sim::EpisodeRecord>& records,
                                       const LossSpec& spec) {
    if (records.empty()) throw std::invalid_argument("information_gain_loss: empty batch");
    const int m = sim::realized_steps(records);
    if (m == 0) throw std::invalid_argument("information_gain_loss: records have no steps");

    double prior_sum = 0.0;
    for (const auto& r : records) prior_sum += r.prior_loss_value;
    std::vector<double> sums(static_cast<std::size_t>(m), 0.0);
    for (const auto& r : records)
        for (int t = 0; t < m; ++t) sums[static_cast<std::size_t>(t)] += r.steps[static_cast<std::size_t>(t)].loss_value;
    for (int t = 0; t < m; ++t)
        if (!(sums[static_cast<std::size_t>(t)] > 0.0))
            throw std::invalid_argument("information_gain_loss: zero batch loss at step " + std::to_string(t));
    const double eps = spec.ig_eps_scale * sums[0] / static_cast<double>(records.size());

    BatchLoss out;
    for (int t = 0; t < m; ++t) {
        const double prev = t == 0 ? prior_sum : sums[static_cast<std::size_t>(t - 1)];
        out.value += std::log(sums[static_cast<std::size_t>(t)] / (prev + eps));
    }
    out.value /= static_cast<double>(m);
    out.plain_value = out.value;

    for (const auto& r : records) {
        ad::Tape& t = *r.tape;
        ad::Node psi = t.constant(0.0);
        for (int s = 0; s < m; ++s) {
            const double c = 1.0 / (static_cast<double>(m) * sums[static_cast<std::size_t>(s)]);
            psi = t.add(psi, t.mul(r.steps[static_cast<std::size_t>(s)].loss, t.constant(c)));
        }
        psi = t.sub(psi, t.constant(psi.scalar()));
        out.parts.push_back({&r, psi, 1.0});
    }
    return out;
}

inline BatchLoss build_loss(const std::vector<sim::EpisodeRecord>& records, const LossSpec& spec) {
    switch (spec.kind) {
        case LossSpec::Kind::Mse:
        case LossSpec::Kind::Discrimination:
            return modified_batch_loss(records, spec);
        case LossSpec::Kind::Cumulative:
            return cumulative_loss(records, spec);
        case LossSpec::Kind::Logarithmic:
            return logarithmic_loss(records, spec);
        case LossSpec::Kind::InformationGain:
            return information_gain_loss(records, spec);
    }
    throw std::logic_error("build_loss: bad kind");
}

/// Adam with the externally prescribed schedule alpha_i = alpha_0 / sqrt(i).
struct OptimizerState {
    double base_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int step = 0;
    std::map<int, std::vector<double>> m;
    std::map<int, std::vector<double>> v;

    double rate_at(int i) const { return base_rate / std::sqrt(static_cast<double>(i)); }
};

/// One Adam update. A non-finite gradient rejects the step and leaves both
/// the variables and the optimizer state untouched.
inline bool adam_step(OptimizerState& opt, const ad::GradientMap& grads,
                      std::vector<ad::Variable>& vars, std::string* diagnostic = nullptr) {
    if (!grads.all_finite()) {
        if (diagnostic) *diagnostic = "non-finite gradient component; step rejected";
        return false;
    }
    const int i = opt.step + 1;
    const double alpha = opt.rate_at(i);
    const double bc1 = 1.0 - std::pow(opt.beta1, i);
    const double bc2 = 1.0 - std::pow(opt.beta2, i);
    for (auto& var : vars) {
        if (!grads.contains(var.id)) continue;
        const std::vector<double>& g = grads.raw(var.id);
        auto& m = opt.m[var.id];
        auto& v = opt.v[var.id];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        std::vector<double> value(var.value.data(), var.value.data() + var.value.size());
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            value[j] -= alpha * mhat / (std::sqrt(vhat) + opt.epsilon);
        }
        if (var.value.rank() == 0) var.value = Tensor::scalar(value[0]);
        else if (var.value.rank() == 1) var.value = Tensor::vector(std::move(value));
        else var.value = Tensor::matrix(var.value.rows(), var.value.cols(), std::move(value));
    }
    opt.step = i;
    return true;
}

struct HistoryRow {
    int step = 0;
    double loss = 0.0;
    double learning_rate = 0.0;
    double wall_seconds = 0.0;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    int rejected_steps = 0;
};

/// The outer training chain TS(1)..TS(I): simulate a batch, assemble the
/// surrogate loss, backpropagate, Adam-update. Gradient accumulation
/// averages several batch gradients per update.
template <class Model, class Agent>
TrainResult train(const Model& model, Agent& agent, const sim::RunConfig& cfg,
                  const LossSpec& spec) {
    sim::RunConfig run_cfg = cfg;
    run_cfg.pointwise = spec.effective_pointwise();
    run_cfg.pointwise.validate(static_cast<int>(model.axes().size()));

    TrainResult result;
    OptimizerState opt;
    opt.base_rate = cfg.learning_rate;
    Rng master(cfg.seed);
    auto& vars = agent.variables();

    for (int i = 1; i <= cfg.update_steps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        ad::GradientMap total;
        total.init(vars);
        double loss_acc = 0.0;
        for (int a = 0; a < cfg.accumulate; ++a) {
            Rng batch_rng = master.child(static_cast<std::uint64_t>(i)).child(static_cast<std::uint64_t>(a));
            auto records = sim::run_batch(model, agent, run_cfg, batch_rng);
            BatchLoss loss = build_loss(records, spec);
            if (!std::isfinite(loss.value))
                throw std::runtime_error("train: non-finite loss at update step " + std::to_string(i));
            total.add_scaled(loss.backward(vars), 1.0 / static_cast<double>(cfg.accumulate));
            loss_acc += loss.plain_value / static_cast<double>(cfg.accumulate);
        }
        if (cfg.grad_clip_enabled) {
            const double mx = total.max_abs();
            if (mx > cfg.grad_clip) total.scale(cfg.grad_clip / mx);
        }
        std::string diag;
        if (!adam_step(opt, total, vars, &diag)) ++result.rejected_steps;
        const auto t1 = std::chrono::steady_clock::now();
        result.history.push_back({i, loss_acc, opt.rate_at(i),
                                  std::chrono::duration<double>(t1 - t0).count()});
    }
    return result;
}

} // namespace metrosynth::train
