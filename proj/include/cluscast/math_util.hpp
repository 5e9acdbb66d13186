#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace cluscast {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Numerically stable log(sum(exp(x))).
inline double log_sum_exp(const Eigen::VectorXd& x) {
    const double m = x.maxCoeff();
    if (!std::isfinite(m)) return m;  // all -inf (or a nan) propagates
    return m + std::log((x.array() - m).exp().sum());
}

/// Column-wise softmax of a logits matrix.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd out(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double m = logits.col(c).maxCoeff();
        Eigen::ArrayXd e = (logits.col(c).array() - m).exp();
        out.col(c) = e / e.sum();
    }
    return out;
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    return softmax_columns(logits);
}

/// |sum - 1| and negativity check against the stated tolerances.
inline bool is_simplex(const Eigen::VectorXd& p, double tol = 1e-9) {
    if (p.size() == 0) return false;
    if ((p.array() < 0.0).any()) return false;
    return std::abs(p.sum() - 1.0) < tol;
}

inline Eigen::VectorXd uniform_simplex(Eigen::Index k) {
    return Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
}

/// splitmix64 step; used to derive independent per-row seeds from a master seed.
/// row_seed = splitmix64(master ^ (index + 1)).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(master ^ (index + 1));
}

/// Draws an index from a discrete distribution by CDF inversion.
inline int sample_categorical(const Eigen::VectorXd& probs, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double u = uni(rng);
    double acc = 0.0;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u <= acc) return static_cast<int>(k);
    }
    return static_cast<int>(probs.size()) - 1;  // guard against fp shortfall
}

inline Eigen::VectorXd standard_normal_vector(Eigen::Index n, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = gauss(rng);
    return v;
}

/// KL(q || p) for discrete distributions on the same support.
/// Entries of q that are exactly zero contribute nothing.
inline double kl_divergence(const Eigen::VectorXd& q, const Eigen::VectorXd& p) {
    double kl = 0.0;
    for (Eigen::Index k = 0; k < q.size(); ++k) {
        if (q[k] > 0.0) kl += q[k] * (std::log(q[k]) - std::log(p[k]));
    }
    return kl;
}

}  // namespace cluscast
