#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "metrosynth/tensor.hpp"

namespace metrosynth::linalg {

/// Eigendecomposition A = V diag(w) V^T of a small symmetric matrix via
/// cyclic Jacobi rotations. Row-major storage, V columns are eigenvectors.
struct SymEig {
    std::vector<double> values;   // d
    std::vector<double> vectors;  // d x d, column j is the j-th eigenvector
};

inline SymEig sym_eig(const std::vector<double>& a_in, int d) {
    if (d <= 0 || static_cast<int>(a_in.size()) != d * d)
        throw std::invalid_argument("sym_eig: bad dimensions");
    std::vector<double> a(a_in);
    // symmetrize to be safe against round-off asymmetry
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = a[j * d + i] = m;
        }
    std::vector<double> v(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) v[i * d + i] = 1.0;

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
        if (off < 1e-30) break;
        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a[p * d + p];
                const double aqq = a[q * d + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = a[k * d + p];
                    const double akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = a[p * d + k];
                    const double aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < d; ++k) {
                    const double vkp = v[k * d + p];
                    const double vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    SymEig out;
    out.values.resize(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) out.values[i] = a[i * d + i];
    out.vectors = std::move(v);
    return out;
}

inline SymEig sym_eig(const Tensor& a) {
    if (a.rank() != 2 || a.rows() != a.cols())
        throw std::invalid_argument("sym_eig: expected square matrix, got " + a.shape_str());
    return sym_eig(a.to_vector(), a.rows());
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
inline std::vector<double> psd_sqrt(const std::vector<double>& a, int d,
                                    SymEig* eig_out = nullptr) {
    SymEig e = sym_eig(a, d);
    for (double& w : e.values) w = w > 0.0 ? std::sqrt(w) : 0.0;
    std::vector<double> s(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k)
                acc += e.vectors[i * d + k] * e.values[k] * e.vectors[j * d + k];
            s[i * d + j] = acc;
        }
    if (eig_out) *eig_out = std::move(e);
    return s;
}

/// Pseudo-inverse of a symmetric matrix; eigenvalues below
/// `rel_cutoff * max|eig|` are treated as null directions.
inline std::vector<double> sym_pinv(const std::vector<double>& a, int d,
                                    double rel_cutoff, std::vector<int>* null_dirs = nullptr) {
    SymEig e = sym_eig(a, d);
    double mx = 0.0;
    for (double w : e.values) mx = std::max(mx, std::fabs(w));
    const double cut = mx * rel_cutoff;
    std::vector<double> inv_w(e.values.size(), 0.0);
    for (std::size_t k = 0; k < e.values.size(); ++k) {
        if (std::fabs(e.values[k]) > cut && e.values[k] != 0.0)
            inv_w[k] = 1.0 / e.values[k];
        else if (null_dirs)
            null_dirs->push_back(static_cast<int>(k));
    }
    std::vector<double> out(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k)
                acc += e.vectors[i * d + k] * inv_w[k] * e.vectors[j * d + k];
            out[i * d + j] = acc;
        }
    return out;
}

inline double condition_number_sym(const std::vector<double>& a, int d) {
    SymEig e = sym_eig(a, d);
    double mx = 0.0;
    double mn = std::numeric_limits<double>::infinity();
    for (double w : e.values) {
        mx = std::max(mx, std::fabs(w));
        mn = std::min(mn, std::fabs(w));
    }
    if (mn == 0.0) return std::numeric_limits<double>::infinity();
    return mx / mn;
}

} // namespace metrosynth::linalg
