#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "metrosynth/linalg.hpp"
#include "metrosynth/rng.hpp"
#include "metrosynth/tensor.hpp"

namespace metrosynth::ad {

/// Trainable tensor bound to a stable identifier. The value is swapped
/// wholesale by the optimizer between update steps; tapes snapshot the
/// shared buffer, so concurrent episodes read a consistent value for free.
struct Variable {
    int id = -1;
    std::string name;
    Tensor value;
};

/// Adjoints keyed by variable id, shaped like their variables.
class GradientMap {
public:
    void init(const std::vector<Variable>& vars) {
        items_.clear();
        for (const auto& v : vars)
            items_.emplace(v.id, Slot{v.value.rank(), v.value.rows(), v.value.cols(),
                                      std::vector<double>(static_cast<std::size_t>(v.value.size()), 0.0)});
    }

    bool contains(int var_id) const { return items_.count(var_id) != 0; }

    void accumulate(int var_id, const double* g, std::size_t n, double scale = 1.0) {
        auto it = items_.find(var_id);
        if (it == items_.end()) return;
        auto& d = it->second.data;
        if (d.size() != n) throw std::invalid_argument("GradientMap: shape mismatch");
        for (std::size_t i = 0; i < n; ++i) d[i] += scale * g[i];
    }

    void add_scaled(const GradientMap& other, double scale) {
        for (const auto& [id, slot] : other.items_) {
            auto it = items_.find(id);
            if (it == items_.end()) {
                Slot copy = slot;
                for (double& x : copy.data) x *= scale;
                items_.emplace(id, std::move(copy));
            } else {
                accumulate(id, slot.data.data(), slot.data.size(), scale);
            }
        }
    }

    void scale(double s) {
        for (auto& [id, slot] : items_)
            for (double& x : slot.data) x *= s;
    }

    Tensor tensor(int var_id) const {
        const Slot& s = items_.at(var_id);
        if (s.rank == 0) return Tensor::scalar(s.data[0]);
        if (s.rank == 1) return Tensor::vector(s.data);
        return Tensor::matrix(s.rows, s.cols, s.data);
    }

    const std::vector<double>& raw(int var_id) const { return items_.at(var_id).data; }

    bool all_finite() const {
        for (const auto& [id, slot] : items_)
            for (double x : slot.data)
                if (!std::isfinite(x)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (const auto& [id, slot] : items_)
            for (double x : slot.data) m = std::max(m, std::fabs(x));
        return m;
    }

    std::size_t size() const { return items_.size(); }

private:
    struct Slot {
        int rank = 0, rows = 1, cols = 1;
        std::vector<double> data;
    };
    std::map<int, Slot> items_;
};

class Tape;

/// Lightweight handle into a tape.
class Node {
public:
    Node() = default;
    bool valid() const { return tape_ != nullptr; }
    const Tensor& value() const;
    double scalar() const { return value().scalar_value(); }
    Tape* tape() const { return tape_; }
    int index() const { return idx_; }

private:
    friend class Tape;
    Node(Tape* t, int i) : tape_(t), idx_(i) {}
    Tape* tape_ = nullptr;
    int idx_ = -1;
};

enum class Op : std::uint8_t {
    Constant, Leaf,
    Add, Sub, Mul, Div, Neg, Matmul,
    Tanh, Exp, Log, Sqrt, Cos, Sin,
    Sum, Max, StopGrad,
    Gather, Concat, Pick, Pack, SymSqrt, PoissonPmf,
};

namespace detail {

inline double log_factorial(std::uint64_t k) {
    static const std::vector<double> table = [] {
        std::vector<double> t(257, 0.0);
        double acc = 0.0;
        for (std::uint64_t i = 1; i < t.size(); ++i) {
            acc += std::log(static_cast<double>(i));
            t[i] = acc;
        }
        return t;
    }();
    if (k < table.size()) return table[k];
    // Stirling fallback, outside the photon-count regime used in practice
    const double n = static_cast<double>(k);
    return n * std::log(n) - n + 0.5 * std::log(2.0 * 3.141592653589793 * n);
}

inline double poisson_pmf_value(double mu, std::uint64_t y) {
    if (mu < 0.0) throw std::invalid_argument("poisson_pmf: negative mean");
    if (mu == 0.0) return y == 0 ? 1.0 : 0.0;
    return std::exp(-mu + static_cast<double>(y) * std::log(mu) - log_factorial(y));
}

inline double poisson_pmf_dmu(double p, double mu, std::uint64_t y) {
    if (mu > 0.0) return p * (static_cast<double>(y) / mu - 1.0);
    if (y == 0) return -1.0;
    if (y == 1) return 1.0;
    return 0.0;
}

} // namespace detail

/// Reverse-mode tape over rank <= 2 tensors. Entries are appended in
/// topological order; backward walks them in reverse index order, which makes
/// adjoint accumulation deterministic for a fixed graph. A tape belongs to a
/// single episode and is freed with it.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return entries_.size(); }

    // ---- graph construction -------------------------------------------

    Node constant(Tensor v) { return push(Entry{std::move(v), Op::Constant}); }
    Node constant(double v) { return constant(Tensor::scalar(v)); }

    Node leaf(const Variable& var) {
        auto it = leaf_cache_.find(var.id);
        if (it != leaf_cache_.end()) return Node(this, it->second);
        Entry e{var.value, Op::Leaf};
        e.var = var.id;
        Node n = push(std::move(e));
        leaf_cache_.emplace(var.id, n.index());
        return n;
    }

    Node add(Node a, Node b) { return binary(Op::Add, a, b); }
    Node sub(Node a, Node b) { return binary(Op::Sub, a, b); }
    Node mul(Node a, Node b) { return binary(Op::Mul, a, b); }
    Node div(Node a, Node b) { return binary(Op::Div, a, b); }
    Node maximum(Node a, Node b) { return binary(Op::Max, a, b); }

    Node neg(Node a) {
        const Tensor& x = val(a);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (int i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = -x.data()[i];
        return push(Entry{like(x, std::move(out)), Op::Neg, a.index()});
    }

    Node tanh(Node a) { return unary(Op::Tanh, a, [](double v) { return std::tanh(v); }); }
    Node exp(Node a) { return unary(Op::Exp, a, [](double v) { return std::exp(v); }); }
    Node cos(Node a) { return unary(Op::Cos, a, [](double v) { return std::cos(v); }); }
    Node sin(Node a) { return unary(Op::Sin, a, [](double v) { return std::sin(v); }); }

    Node log(Node a) {
        for (int i = 0; i < val(a).size(); ++i)
            if (!(val(a).data()[i] > 0.0))
                throw std::invalid_argument("log: non-positive input rejected");
        return unary(Op::Log, a, [](double v) { return std::log(v); });
    }

    Node sqrt(Node a) {
        for (int i = 0; i < val(a).size(); ++i)
            if (!(val(a).data()[i] > 0.0))
                throw std::invalid_argument("sqrt: non-positive input rejected");
        return unary(Op::Sqrt, a, [](double v) { return std::sqrt(v); });
    }

    Node matmul(Node a, Node b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rank() != 2)
            throw std::invalid_argument("matmul: left operand must be a matrix, got " + A.shape_str());
        if (B.rank() == 2) {
            if (A.cols() != B.rows())
                throw std::invalid_argument("matmul: inner dimensions " + A.shape_str() + " vs " + B.shape_str());
            std::vector<double> out(static_cast<std::size_t>(A.rows()) * B.cols(), 0.0);
            for (int i = 0; i < A.rows(); ++i)
                for (int k = 0; k < A.cols(); ++k) {
                    const double aik = A.at(i, k);
                    for (int j = 0; j < B.cols(); ++j) out[static_cast<std::size_t>(i) * B.cols() + j] += aik * B.at(k, j);
                }
            return push(Entry{Tensor::matrix(A.rows(), B.cols(), std::move(out)), Op::Matmul, a.index(), b.index()});
        }
        if (B.rank() == 1) {
            if (A.cols() != B.rows())
                throw std::invalid_argument("matmul: inner dimensions " + A.shape_str() + " vs " + B.shape_str());
            std::vector<double> out(static_cast<std::size_t>(A.rows()), 0.0);
            for (int i = 0; i < A.rows(); ++i) {
                double acc = 0.0;
                for (int k = 0; k < A.cols(); ++k) acc += A.at(i, k) * B[k];
                out[static_cast<std::size_t>(i)] = acc;
            }
            return push(Entry{Tensor::vector(std::move(out)), Op::Matmul, a.index(), b.index()});
        }
        throw std::invalid_argument("matmul: right operand must be matrix or vector");
    }

    Node sum(Node a) {
        const Tensor& x = val(a);
        double acc = 0.0;
        for (int i = 0; i < x.size(); ++i) acc += x.data()[i];
        return push(Entry{Tensor::scalar(acc), Op::Sum, a.index()});
    }

    Node stop_gradient(Node a) {
        return push(Entry{val(a), Op::StopGrad, a.index()});
    }

    Node gather(Node a, std::vector<std::int32_t> indices) {
        const Tensor& x = val(a);
        if (x.rank() != 1) throw std::invalid_argument("gather: expected vector");
        std::vector<double> out(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] < 0 || indices[i] >= x.rows())
                throw std::invalid_argument("gather: index out of range");
            out[i] = x[indices[i]];
        }
        Entry e{Tensor::vector(std::move(out)), Op::Gather, a.index()};
        if (recording_) {
            auto aux = std::make_shared<Aux>();
            aux->indices = std::move(indices);
            e.aux = std::move(aux);
        }
        return push(std::move(e));
    }

    Node concat(Node a, Node b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        if (x.rank() != 1 || y.rank() != 1) throw std::invalid_argument("concat: expected vectors");
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(x.size() + y.size()));
        out.insert(out.end(), x.data(), x.data() + x.size());
        out.insert(out.end(), y.data(), y.data() + y.size());
        return push(Entry{Tensor::vector(std::move(out)), Op::Concat, a.index(), b.index()});
    }

    Node pick(Node a, int i, int j = 0) {
        const Tensor& x = val(a);
        double v;
        if (x.rank() == 1) {
            if (i < 0 || i >= x.rows() || j != 0) throw std::invalid_argument("pick: index out of range");
            v = x[i];
        } else if (x.rank() == 2) {
            if (i < 0 || i >= x.rows() || j < 0 || j >= x.cols())
                throw std::invalid_argument("pick: index out of range");
            v = x.at(i, j);
        } else {
            throw std::invalid_argument("pick: expected vector or matrix");
        }
        Entry e{Tensor::scalar(v), Op::Pick, a.index()};
        if (recording_) {
            auto aux = std::make_shared<Aux>();
            aux->i = i;
            aux->j = j;
            e.aux = std::move(aux);
        }
        return push(std::move(e));
    }

    Node pack_vector(const std::vector<Node>& parts) {
        if (parts.empty()) throw std::invalid_argument("pack_vector: empty");
        std::vector<double> out(parts.size());
        for (std::size_t i = 0; i < parts.size(); ++i) out[i] = val(parts[i]).scalar_value();
        Entry e{Tensor::vector(std::move(out)), Op::Pack};
        if (recording_) {
            auto aux = std::make_shared<Aux>();
            for (const Node& n : parts) aux->parents.push_back(check(n));
            e.aux = std::move(aux);
        }
        return push(std::move(e));
    }

    Node pack_matrix(const std::vector<std::vector<Node>>& rows) {
        if (rows.empty() || rows[0].empty()) throw std::invalid_argument("pack_matrix: empty");
        const int r = static_cast<int>(rows.size());
        const int c = static_cast<int>(rows[0].size());
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(r) * c);
        auto aux = std::make_shared<Aux>();
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c) throw std::invalid_argument("pack_matrix: ragged rows");
            for (const Node& n : row) {
                out.push_back(val(n).scalar_value());
                aux->parents.push_back(check(n));
            }
        }
        Entry e{Tensor::matrix(r, c, std::move(out)), Op::Pack};
        if (recording_) e.aux = std::move(aux);
        return push(std::move(e));
    }

    /// Symmetric PSD matrix square root (negative eigenvalues clamped to
    /// zero). Backward solves dSigma = dS*S + S*dS in the eigenbasis.
    Node sym_sqrt(Node a) {
        const Tensor& x = val(a);
        if (x.rank() != 2 || x.rows() != x.cols())
            throw std::invalid_argument("sym_sqrt: expected square matrix");
        const int d = x.rows();
        auto aux = std::make_shared<Aux>();
        linalg::SymEig eig;
        std::vector<double> s = linalg::psd_sqrt(x.to_vector(), d, &eig);
        aux->eig_values = std::move(eig.values);
        aux->eig_vectors = std::move(eig.vectors);
        Entry e{Tensor::matrix(d, d, std::move(s)), Op::SymSqrt, a.index()};
        if (recording_) e.aux = std::move(aux);
        return push(std::move(e));
    }

    /// Elementwise Poisson probability mass e^-mu mu^y / y! as a function of
    /// the mean, for a fixed observed count y.
    Node poisson_pmf(Node mu, std::uint64_t y) {
        const Tensor& m = val(mu);
        std::vector<double> out(static_cast<std::size_t>(m.size()));
        for (int i = 0; i < m.size(); ++i) out[static_cast<std::size_t>(i)] = detail::poisson_pmf_value(m.data()[i], y);
        Entry e{like(m, std::move(out)), Op::PoissonPmf, mu.index()};
        e.count = y;
        return push(std::move(e));
    }

    // ---- access ---------------------------------------------------------

    const Tensor& value_of(const Node& n) const { return entries_[static_cast<std::size_t>(check(n))].value; }

    /// Reverse sweep from a scalar loss. Adjoints of `vars` are collected
    /// into the gradient map; `watch` optionally captures adjoints of
    /// intermediate nodes (test instrumentation).
    GradientMap backward(Node loss, const std::vector<Variable>& vars,
                         const std::vector<Node>& watch = {},
                         std::vector<Tensor>* watch_adjoints = nullptr) const {
        if (val(loss).rank() != 0)
            throw std::invalid_argument("backward: loss must be scalar, got " + val(loss).shape_str());
        if (!recording_)
            throw std::logic_error("backward: tape was not recording");
        GradientMap gm;
        gm.init(vars);

        const int top = check(loss);
        std::vector<std::vector<double>> adj(static_cast<std::size_t>(top) + 1);
        adj[static_cast<std::size_t>(top)] = {1.0};
        if (watch_adjoints) watch_adjoints->assign(watch.size(), Tensor());

        for (int i = top; i >= 0; --i) {
            auto& g = adj[static_cast<std::size_t>(i)];
            if (g.empty()) continue;
            if (watch_adjoints) {
                for (std::size_t w = 0; w < watch.size(); ++w) {
                    if (watch[w].index() == i && watch[w].tape() == this) {
                        const Tensor& shape = entries_[static_cast<std::size_t>(i)].value;
                        if (shape.rank() == 0) (*watch_adjoints)[w] = Tensor::scalar(g[0]);
                        else if (shape.rank() == 1) (*watch_adjoints)[w] = Tensor::vector(g);
                        else (*watch_adjoints)[w] = Tensor::matrix(shape.rows(), shape.cols(), g);
                    }
                }
            }
            propagate(i, g, adj, gm);
            g.clear();
            g.shrink_to_fit();
        }
        return gm;
    }

private:
    struct Aux {
        std::vector<std::int32_t> parents;   // Pack
        std::vector<std::int32_t> indices;   // Gather
        int i = 0, j = 0;                    // Pick
        std::vector<double> eig_values;      // SymSqrt (sqrt-clamped eigenvalues)
        std::vector<double> eig_vectors;     // SymSqrt
    };

    struct Entry {
        Tensor value;
        Op op = Op::Constant;
        std::int32_t a = -1;
        std::int32_t b = -1;
        std::int32_t var = -1;
        std::uint64_t count = 0;             // PoissonPmf outcome
        std::shared_ptr<const Aux> aux;
    };

    static Tensor like(const Tensor& src, std::vector<double> data) {
        if (src.rank() == 0) return Tensor::scalar(data[0]);
        if (src.rank() == 1) return Tensor::vector(std::move(data));
        return Tensor::matrix(src.rows(), src.cols(), std::move(data));
    }

    int check(const Node& n) const {
        if (n.tape() != this || n.index() < 0 || n.index() >= static_cast<int>(entries_.size()))
            throw std::invalid_argument("node does not belong to this tape");
        return n.index();
    }

    const Tensor& val(const Node& n) const { return entries_[static_cast<std::size_t>(check(n))].value; }

    Node push(Entry e) {
        if (!recording_ && e.op != Op::Leaf) {
            // keep only the value so forward results are identical while the
            // graph is dropped
            e.op = Op::Constant;
            e.a = e.b = -1;
            e.aux.reset();
        }
        entries_.push_back(std::move(e));
        return Node(this, static_cast<int>(entries_.size()) - 1);
    }

    template <class F>
    Node unary(Op op, Node a, F&& f) {
        const Tensor& x = val(a);
        std::vector<double> out(static_cast<std::size_t>(x.size()));
        for (int i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = f(x.data()[i]);
        return push(Entry{like(x, std::move(out)), op, a.index()});
    }

    Node binary(Op op, Node a, Node b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        const bool xs = x.rank() == 0;
        const bool ys = y.rank() == 0;
        if (!xs && !ys && !x.same_shape(y))
            throw std::invalid_argument("elementwise op: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
        const Tensor& shape = xs ? y : x;
        std::vector<double> out(static_cast<std::size_t>(shape.size()));
        for (int i = 0; i < shape.size(); ++i) {
            const double u = xs ? x.data()[0] : x.data()[i];
            const double v = ys ? y.data()[0] : y.data()[i];
            double r = 0.0;
            switch (op) {
                case Op::Add: r = u + v; break;
                case Op::Sub: r = u - v; break;
                case Op::Mul: r = u * v; break;
                case Op::Div: r = u / v; break;
                case Op::Max: r = u >= v ? u : v; break;
                default: throw std::logic_error("binary: bad op");
            }
            out[static_cast<std::size_t>(i)] = r;
        }
        return push(Entry{like(shape, std::move(out)), op, a.index(), b.index()});
    }

    // Accumulate `contrib` (shaped like the output of entry `parent`,
    // possibly needing reduction when the parent is scalar) into adj[parent].
    void accum(int parent, const double* contrib, int n,
               std::vector<std::vector<double>>& adj) const {
        if (parent < 0) return;
        const Entry& pe = entries_[static_cast<std::size_t>(parent)];
        auto& slot = adj[static_cast<std::size_t>(parent)];
        if (slot.empty()) slot.assign(static_cast<std::size_t>(pe.value.size()), 0.0);
        if (pe.value.size() == n) {
            for (int i = 0; i < n; ++i) slot[static_cast<std::size_t>(i)] += contrib[i];
        } else if (pe.value.size() == 1) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += contrib[i];
            slot[0] += acc;
        } else {
            throw std::logic_error("backward: inconsistent adjoint shape");
        }
    }

    void propagate(int idx, const std::vector<double>& g,
                   std::vector<std::vector<double>>& adj, GradientMap& gm) const {
        const Entry& e = entries_[static_cast<std::size_t>(idx)];
        const int n = e.value.size();
        std::vector<double> buf;
        auto pval = [&](int p) -> const Tensor& { return entries_[static_cast<std::size_t>(p)].value; };
        auto elem = [](const Tensor& t, int i) { return t.rank() == 0 ? t.data()[0] : t.data()[i]; };

        switch (e.op) {
            case Op::Constant:
            case Op::StopGrad:
                return;
            case Op::Leaf:
                if (e.var >= 0) gm.accumulate(e.var, g.data(), g.size());
                return;
            case Op::Add:
                accum(e.a, g.data(), n, adj);
                accum(e.b, g.data(), n, adj);
                return;
            case Op::Sub: {
                accum(e.a, g.data(), n, adj);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = -g[static_cast<std::size_t>(i)];
                accum(e.b, buf.data(), n, adj);
                return;
            }
            case Op::Mul: {
                const Tensor& A = pval(e.a);
                const Tensor& B = pval(e.b);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] * elem(B, i);
                accum(e.a, buf.data(), n, adj);
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] * elem(A, i);
                accum(e.b, buf.data(), n, adj);
                return;
            }
            case Op::Div: {
                const Tensor& A = pval(e.a);
                const Tensor& B = pval(e.b);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] / elem(B, i);
                accum(e.a, buf.data(), n, adj);
                for (int i = 0; i < n; ++i) {
                    const double b = elem(B, i);
                    buf[static_cast<std::size_t>(i)] = -g[static_cast<std::size_t>(i)] * elem(A, i) / (b * b);
                }
                accum(e.b, buf.data(), n, adj);
                return;
            }
            case Op::Max: {
                const Tensor& A = pval(e.a);
                const Tensor& B = pval(e.b);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i)
                    buf[static_cast<std::size_t>(i)] = elem(A, i) >= elem(B, i) ? g[static_cast<std::size_t>(i)] : 0.0;
                accum(e.a, buf.data(), n, adj);
                for (int i = 0; i < n; ++i)
                    buf[static_cast<std::size_t>(i)] = elem(A, i) >= elem(B, i) ? 0.0 : g[static_cast<std::size_t>(i)];
                accum(e.b, buf.data(), n, adj);
                return;
            }
            case Op::Neg: {
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = -g[static_cast<std::size_t>(i)];
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Matmul: {
                const Tensor& A = pval(e.a);
                const Tensor& B = pval(e.b);
                if (B.rank() == 2) {
                    std::vector<double> da(static_cast<std::size_t>(A.rows()) * A.cols(), 0.0);
                    std::vector<double> db(static_cast<std::size_t>(B.rows()) * B.cols(), 0.0);
                    for (int i = 0; i < A.rows(); ++i)
                        for (int j = 0; j < B.cols(); ++j) {
                            const double gij = g[static_cast<std::size_t>(i) * B.cols() + j];
                            if (gij == 0.0) continue;
                            for (int k = 0; k < A.cols(); ++k) {
                                da[static_cast<std::size_t>(i) * A.cols() + k] += gij * B.at(k, j);
                                db[static_cast<std::size_t>(k) * B.cols() + j] += gij * A.at(i, k);
                            }
                        }
                    accum(e.a, da.data(), static_cast<int>(da.size()), adj);
                    accum(e.b, db.data(), static_cast<int>(db.size()), adj);
                } else {
                    std::vector<double> da(static_cast<std::size_t>(A.rows()) * A.cols(), 0.0);
                    std::vector<double> db(static_cast<std::size_t>(B.rows()), 0.0);
                    for (int i = 0; i < A.rows(); ++i) {
                        const double gi = g[static_cast<std::size_t>(i)];
                        if (gi == 0.0) continue;
                        for (int k = 0; k < A.cols(); ++k) {
                            da[static_cast<std::size_t>(i) * A.cols() + k] += gi * B[k];
                            db[static_cast<std::size_t>(k)] += gi * A.at(i, k);
                        }
                    }
                    accum(e.a, da.data(), static_cast<int>(da.size()), adj);
                    accum(e.b, db.data(), static_cast<int>(db.size()), adj);
                }
                return;
            }
            case Op::Tanh: {
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) {
                    const double y = e.value.data()[i];
                    buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] * (1.0 - y * y);
                }
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Exp: {
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] * e.value.data()[i];
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Log: {
                const Tensor& A = pval(e.a);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] / A.data()[i];
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Sqrt: {
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i)
                    buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] / (2.0 * e.value.data()[i]);
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Cos: {
                const Tensor& A = pval(e.a);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i)
                    buf[static_cast<std::size_t>(i)] = -g[static_cast<std::size_t>(i)] * std::sin(A.data()[i]);
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Sin: {
                const Tensor& A = pval(e.a);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i)
                    buf[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i)] * std::cos(A.data()[i]);
                accum(e.a, buf.data(), n, adj);
                return;
            }
            case Op::Sum: {
                const Tensor& A = pval(e.a);
                buf.assign(static_cast<std::size_t>(A.size()), g[0]);
                accum(e.a, buf.data(), A.size(), adj);
                return;
            }
            case Op::Gather: {
                const Tensor& A = pval(e.a);
                buf.assign(static_cast<std::size_t>(A.size()), 0.0);
                for (std::size_t i = 0; i < e.aux->indices.size(); ++i)
                    buf[static_cast<std::size_t>(e.aux->indices[i])] += g[i];
                accum(e.a, buf.data(), A.size(), adj);
                return;
            }
            case Op::Concat: {
                const Tensor& A = pval(e.a);
                const Tensor& B = pval(e.b);
                accum(e.a, g.data(), A.size(), adj);
                accum(e.b, g.data() + A.size(), B.size(), adj);
                return;
            }
            case Op::Pick: {
                const Tensor& A = pval(e.a);
                buf.assign(static_cast<std::size_t>(A.size()), 0.0);
                const int flat = A.rank() == 1 ? e.aux->i : e.aux->i * A.cols() + e.aux->j;
                buf[static_cast<std::size_t>(flat)] = g[0];
                accum(e.a, buf.data(), A.size(), adj);
                return;
            }
            case Op::Pack: {
                for (std::size_t i = 0; i < e.aux->parents.size(); ++i) {
                    const double gi = g[i];
                    accum(e.aux->parents[i], &gi, 1, adj);
                }
                return;
            }
            case Op::SymSqrt: {
                const int d = e.value.rows();
                const auto& s = e.aux->eig_values;   // sqrt eigenvalues, clamped
                const auto& U = e.aux->eig_vectors;  // columns
                // W = U^T sym(g) U ; divide by (s_i + s_j) ; back to original basis
                std::vector<double> gs(static_cast<std::size_t>(d) * d);
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < d; ++j)
                        gs[static_cast<std::size_t>(i) * d + j] =
                            0.5 * (g[static_cast<std::size_t>(i) * d + j] + g[static_cast<std::size_t>(j) * d + i]);
                std::vector<double> w(static_cast<std::size_t>(d) * d, 0.0);
                for (int i = 0; i < d; ++i)
                    for (int j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (int p = 0; p < d; ++p)
                            for (int q = 0; q < d; ++q)
                                acc += U[static_cast<std::size_t>(p) * d + i] * gs[static_cast<std::size_t>(p) * d + q] *
                                       U[static_cast<std::size_t>(q) * d + j];
                        const double den = s[static_cast<std::size_t>(i)] + s[static_cast<std::size_t>(j)];
                        w[static_cast<std::size_t>(i) * d + j] = den > 1e-300 ? acc / den : 0.0;
                    }
                buf.assign(static_cast<std::size_t>(d) * d, 0.0);
                for (int p = 0; p < d; ++p)
                    for (int q = 0; q < d; ++q) {
                        double acc = 0.0;
                        for (int i = 0; i < d; ++i)
                            for (int j = 0; j < d; ++j)
                                acc += U[static_cast<std::size_t>(p) * d + i] * w[static_cast<std::size_t>(i) * d + j] *
                                       U[static_cast<std::size_t>(q) * d + j];
                        buf[static_cast<std::size_t>(p) * d + q] = acc;
                    }
                accum(e.a, buf.data(), d * d, adj);
                return;
            }
            case Op::PoissonPmf: {
                const Tensor& A = pval(e.a);
                buf.resize(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i)
                    buf[static_cast<std::size_t>(i)] =
                        g[static_cast<std::size_t>(i)] *
                        detail::poisson_pmf_dmu(e.value.data()[i], A.data()[i], e.count);
                accum(e.a, buf.data(), n, adj);
                return;
            }
        }
    }

    bool recording_;
    std::vector<Entry> entries_;
    std::unordered_map<int, int> leaf_cache_;
};

inline const Tensor& Node::value() const {
    if (!valid()) throw std::logic_error("Node::value: empty node");
    return tape_->value_of(*this);
}

// ---- expression helpers ----------------------------------------------

inline Node operator+(Node a, Node b) { return a.tape()->add(a, b); }
inline Node operator-(Node a, Node b) { return a.tape()->sub(a, b); }
inline Node operator*(Node a, Node b) { return a.tape()->mul(a, b); }
inline Node operator/(Node a, Node b) { return a.tape()->div(a, b); }
inline Node operator-(Node a) { return a.tape()->neg(a); }
inline Node operator+(Node a, double b) { return a + a.tape()->constant(b); }
inline Node operator+(double a, Node b) { return b.tape()->constant(a) + b; }
inline Node operator-(Node a, double b) { return a - a.tape()->constant(b); }
inline Node operator-(double a, Node b) { return b.tape()->constant(a) - b; }
inline Node operator*(Node a, double b) { return a * a.tape()->constant(b); }
inline Node operator*(double a, Node b) { return b.tape()->constant(a) * b; }
inline Node operator/(Node a, double b) { return a / a.tape()->constant(b); }
inline Node operator/(double a, Node b) { return b.tape()->constant(a) / b; }

inline Node tanh(Node a) { return a.tape()->tanh(a); }
inline Node exp(Node a) { return a.tape()->exp(a); }
inline Node log(Node a) { return a.tape()->log(a); }
inline Node sqrt(Node a) { return a.tape()->sqrt(a); }
inline Node cos(Node a) { return a.tape()->cos(a); }
inline Node sin(Node a) { return a.tape()->sin(a); }
inline Node sum(Node a) { return a.tape()->sum(a); }
inline Node stop_gradient(Node a) { return a.tape()->stop_gradient(a); }

/// Logistic squash built from tanh: 1 / (1 + e^-z).
inline Node sigmoid(Node z) { return 0.5 * (tanh(z * 0.5) + 1.0); }

/// Glorot (Xavier) normal initialization: i.i.d. N(0, 2/(rows+cols)).
inline Tensor glorot_normal(int rows, int cols, Rng& rng) {
    if (rows <= 0 || cols <= 0)
        throw std::invalid_argument("glorot_normal: non-positive dimensions");
    const double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::matrix(rows, cols, std::move(v));
}

} // namespace metrosynth::ad
