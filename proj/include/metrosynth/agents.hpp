#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "metrosynth/autodiff.hpp"
#include "metrosynth/particle_filter.hpp"
#include "metrosynth/rng.hpp"

namespace metrosynth::agents {

/// A continuous control with its admissible interval. `log_scale` squashes
/// onto the interval in log space, which suits time-like controls spanning
/// several orders of magnitude.
struct ControlSpec {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;
    bool log_scale = false;
};

/// Scaled sigmoid squash of a raw network output onto [lo, hi].
inline ad::Node squash(ad::Tape& t, ad::Node z, const ControlSpec& c) {
    ad::Node s = ad::sigmoid(z);
    if (c.log_scale) {
        if (!(c.lo > 0.0)) throw std::invalid_argument("squash: log-scale control needs lo > 0");
        const double llo = std::log(c.lo);
        const double lhi = std::log(c.hi);
        return t.exp(t.add(t.constant(llo), t.mul(s, t.constant(lhi - llo))));
    }
    return t.add(t.constant(c.lo), t.mul(s, t.constant(c.hi - c.lo)));
}

inline double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

/// Everything an agent may look at when choosing the next control. The
/// summary features have already passed the stop-gradient boundary.
struct AgentContext {
    ad::Tape* tape = nullptr;
    const pf::ParticleEnsemble* ensemble = nullptr;
    std::vector<ad::Node> features;
    double resource_used = 0.0;
    double resource_max = 1.0;
    int step = 0;
    int max_steps = 1;
    Rng* rng = nullptr;
    /// Log-probability of a stochastically sampled control (categorical
    /// agents); empty for deterministic agents.
    ad::Node sample_logprob;
};

enum class OutputKind { Interval, Categorical };

/// Output head shared by the trainable agents: either one squashed scalar
/// per control, or a softmax over a finite control set.
struct OutputMap {
    OutputKind kind = OutputKind::Interval;
    std::vector<ControlSpec> controls;  // Interval
    std::vector<double> choices;        // Categorical

    int width() const {
        return kind == OutputKind::Interval ? static_cast<int>(controls.size())
                                            : static_cast<int>(choices.size());
    }
};

namespace detail {

inline std::vector<ad::Node> apply_output_map(ad::Tape& t, const OutputMap& map,
                                              const std::vector<ad::Node>& raw,
                                              AgentContext& ctx) {
    if (map.kind == OutputKind::Interval) {
        std::vector<ad::Node> out;
        out.reserve(raw.size());
        for (std::size_t c = 0; c < raw.size(); ++c)
            out.push_back(squash(t, raw[c], map.controls[c]));
        return out;
    }
    // categorical: sample from the softmax and hand back the log-probability
    if (map.choices.empty()) throw std::invalid_argument("categorical control: empty choice set");
    if (!ctx.rng) throw std::invalid_argument("categorical control: missing rng");
    std::vector<double> logits(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) logits[i] = raw[i].scalar();
    const double shift = *std::max_element(logits.begin(), logits.end());
    std::vector<double> probs(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) probs[i] = std::exp(logits[i] - shift);
    const int pick = ctx.rng->categorical(probs);

    // log softmax(pick) as a node: z_i - shift - log sum exp(z - shift)
    ad::Node z_shift;
    {
        std::vector<ad::Node> shifted;
        shifted.reserve(raw.size());
        for (const auto& r : raw) shifted.push_back(t.sub(r, t.constant(shift)));
        ad::Node packed = t.pack_vector(shifted);
        ad::Node lse = t.log(t.sum(t.exp(packed)));
        z_shift = t.sub(t.sub(raw[static_cast<std::size_t>(pick)], t.constant(shift)), lse);
    }
    ctx.sample_logprob = z_shift;
    return {t.constant(map.choices[static_cast<std::size_t>(pick)])};
}

} // namespace detail

/// Neural-network policy: five tanh hidden layers of 64 units.
class MlpAgent {
public:
    static constexpr int kHiddenLayers = 5;
    static constexpr int kHiddenWidth = 64;

    MlpAgent(int input_dim, OutputMap map, Rng& init_rng)
        : input_dim_(input_dim), map_(std::move(map)) {
        if (input_dim <= 0) throw std::invalid_argument("MlpAgent: non-positive input dim");
        int in = input_dim;
        int id = 0;
        for (int l = 0; l <= kHiddenLayers; ++l) {
            const int out = (l == kHiddenLayers) ? map_.width() : kHiddenWidth;
            vars_.push_back(Variable_{id++, "w" + std::to_string(l), ad::glorot_normal(out, in, init_rng)});
            vars_.push_back(Variable_{id++, "b" + std::to_string(l),
                                      Tensor::vector(std::vector<double>(static_cast<std::size_t>(out), 0.0))});
            in = out;
        }
    }

    std::vector<ad::Node> act(AgentContext& ctx) {
        ad::Tape& t = *ctx.tape;
        if (static_cast<int>(ctx.features.size()) != input_dim_)
            throw std::invalid_argument("MlpAgent: expected " + std::to_string(input_dim_) +
                                        " features, got " + std::to_string(ctx.features.size()));
        ad::Node x = t.pack_vector(ctx.features);
        for (int l = 0; l <= kHiddenLayers; ++l) {
            ad::Node w = t.leaf(vars_[static_cast<std::size_t>(2 * l)]);
            ad::Node b = t.leaf(vars_[static_cast<std::size_t>(2 * l + 1)]);
            x = t.add(t.matmul(w, x), b);
            if (l < kHiddenLayers) x = t.tanh(x);
        }
        std::vector<ad::Node> raw;
        raw.reserve(static_cast<std::size_t>(map_.width()));
        for (int c = 0; c < map_.width(); ++c) raw.push_back(t.pick(x, c));
        return detail::apply_output_map(t, map_, raw, ctx);
    }

    bool trainable() const { return true; }
    std::vector<ad::Variable>& variables() { return vars_; }
    const std::vector<ad::Variable>& variables() const { return vars_; }
    int input_dim() const { return input_dim_; }
    const OutputMap& output_map() const { return map_; }

private:
    using Variable_ = ad::Variable;
    int input_dim_;
    OutputMap map_;
    std::vector<ad::Variable> vars_;
};

/// Non-adaptive policy: a trainable table of raw controls indexed by the
/// measurement step, squashed through the same output map as the network.
class StaticAgent {
public:
    StaticAgent(int max_steps, OutputMap map, double init_value = 0.0)
        : max_steps_(max_steps), map_(std::move(map)) {
        if (max_steps <= 0) throw std::invalid_argument("StaticAgent: non-positive step count");
        vars_.push_back(ad::Variable{
            0, "table",
            Tensor::matrix(max_steps, map_.width(),
                           std::vector<double>(static_cast<std::size_t>(max_steps) * map_.width(), init_value))});
    }

    std::vector<ad::Node> act(AgentContext& ctx) {
        if (ctx.step < 0 || ctx.step >= max_steps_)
            throw std::invalid_argument("StaticAgent: step " + std::to_string(ctx.step) + " out of range");
        ad::Tape& t = *ctx.tape;
        ad::Node table = t.leaf(vars_[0]);
        std::vector<ad::Node> raw;
        raw.reserve(static_cast<std::size_t>(map_.width()));
        for (int c = 0; c < map_.width(); ++c) raw.push_back(t.pick(table, ctx.step, c));
        return detail::apply_output_map(t, map_, raw, ctx);
    }

    bool trainable() const { return true; }
    std::vector<ad::Variable>& variables() { return vars_; }
    const std::vector<ad::Variable>& variables() const { return vars_; }
    int max_steps() const { return max_steps_; }
    const OutputMap& output_map() const { return map_; }

private:
    int max_steps_;
    OutputMap map_;
    std::vector<ad::Variable> vars_;
};

/// Table agent without any squashing; the stored entries are the controls.
/// Used where the control is identified with the trainable variable itself
/// (frequentist toy setups and oracle tests).
class DirectTableAgent {
public:
    DirectTableAgent(int max_steps, int control_dim, std::vector<double> init)
        : max_steps_(max_steps), control_dim_(control_dim) {
        if (static_cast<int>(init.size()) != max_steps * control_dim)
            throw std::invalid_argument("DirectTableAgent: init size mismatch");
        vars_.push_back(ad::Variable{0, "table", Tensor::matrix(max_steps, control_dim, std::move(init))});
    }

    std::vector<ad::Node> act(AgentContext& ctx) {
        ad::Tape& t = *ctx.tape;
        ad::Node table = t.leaf(vars_[0]);
        std::vector<ad::Node> out;
        for (int c = 0; c < control_dim_; ++c) out.push_back(t.pick(table, ctx.step, c));
        return out;
    }

    bool trainable() const { return true; }
    std::vector<ad::Variable>& variables() { return vars_; }
    const std::vector<ad::Variable>& variables() const { return vars_; }

private:
    int max_steps_;
    int control_dim_;
    std::vector<ad::Variable> vars_;
};

/// Particle Guess Heuristic: tau = 1 / (||theta_1 - theta_2|| + eps) with
/// theta_1, theta_2 drawn from the posterior.
class PghAgent {
public:
    explicit PghAgent(ControlSpec control, double epsilon = 1e-5)
        : control_(std::move(control)), epsilon_(epsilon) {}

    std::vector<ad::Node> act(AgentContext& ctx) {
        const pf::ParticleEnsemble& e = *ctx.ensemble;
        const Tensor& w = e.weights().value();
        std::vector<double> wv(w.data(), w.data() + w.rows());
        const int j1 = ctx.rng->categorical(wv);
        const int j2 = ctx.rng->categorical(wv);
        double dist2 = 0.0;
        for (int a = 0; a < e.dim(); ++a) {
            const double diff = e.particle(j1, a) - e.particle(j2, a);
            dist2 += diff * diff;
        }
        const double tau = 1.0 / (std::sqrt(dist2) + epsilon_);
        return {ctx.tape->constant(clamp(tau, control_.lo, control_.hi))};
    }

    bool trainable() const { return false; }
    std::vector<ad::Variable>& variables() { return no_vars_; }

private:
    ControlSpec control_;
    double epsilon_;
    std::vector<ad::Variable> no_vars_;
};

/// sigma^-1 and sigma^-1 & T^-1 heuristics:
/// tau = [ tr(Sigma)^(1/2) + 1/T2* ]^-1, with T2* = infinity giving the
/// plain inverse posterior standard deviation.
class SigmaInverseAgent {
public:
    SigmaInverseAgent(ControlSpec control, double t2_star, double tau_max)
        : control_(std::move(control)), t2_star_(t2_star), tau_max_(tau_max) {}

    std::vector<ad::Node> act(AgentContext& ctx) {
        const pf::ParticleEnsemble& e = *ctx.ensemble;
        double trace = 0.0;
        for (int a = 0; a < e.dim(); ++a) {
            if (e.axes()[static_cast<std::size_t>(a)].discrete) continue;
            double m = 0.0;
            for (int j = 0; j < e.count(); ++j) m += e.weight(j) * e.particle(j, a);
            double v = 0.0;
            for (int j = 0; j < e.count(); ++j) {
                const double dx = e.particle(j, a) - m;
                v += e.weight(j) * dx * dx;
            }
            trace += v;
        }
        const double inv_t2 = std::isinf(t2_star_) ? 0.0 : 1.0 / t2_star_;
        const double denom = std::sqrt(trace) + inv_t2;
        const double tau = denom > 0.0 ? 1.0 / denom : tau_max_;
        return {ctx.tape->constant(clamp(std::min(tau, tau_max_), control_.lo, control_.hi))};
    }

    bool trainable() const { return false; }
    std::vector<ad::Variable>& variables() { return no_vars_; }

private:
    ControlSpec control_;
    double t2_star_;
    double tau_max_;
    std::vector<ad::Variable> no_vars_;
};

/// Fixed control sequence (same value every step).
class ConstantAgent {
public:
    explicit ConstantAgent(std::vector<double> values) : values_(std::move(values)) {}

    std::vector<ad::Node> act(AgentContext& ctx) {
        std::vector<ad::Node> out;
        out.reserve(values_.size());
        for (double v : values_) out.push_back(ctx.tape->constant(v));
        return out;
    }

    bool trainable() const { return false; }
    std::vector<ad::Variable>& variables() { return no_vars_; }

private:
    std::vector<double> values_;
    std::vector<ad::Variable> no_vars_;
};

} // namespace metrosynth::agents
