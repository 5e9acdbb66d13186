#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cluscast/cluster_types.hpp"
#include "cluscast/errors.hpp"
#include "cluscast/forecast_result.hpp"
#include "cluscast/json_io.hpp"
#include "cluscast/kmeans.hpp"
#include "cluscast/math_util.hpp"
#include "cluscast/time_series.hpp"

namespace cluscast::dgm2 {

/// LSTM-style recurrent cell parameters. The 4H rows of wx/wh stack the
/// input, forget, candidate, and output gates in that order.
struct LstmCell {
    Eigen::MatrixXd wx;  // 4H x input_dim
    Eigen::MatrixXd wh;  // 4H x H
    Eigen::VectorXd b;   // 4H

    int hidden() const { return static_cast<int>(wh.cols()); }
    int input_dim() const { return static_cast<int>(wx.cols()); }

    static LstmCell zeros(int input_dim, int hidden) {
        return {Eigen::MatrixXd::Zero(4 * hidden, input_dim),
                Eigen::MatrixXd::Zero(4 * hidden, hidden), Eigen::VectorXd::Zero(4 * hidden)};
    }
};

/// One-hidden-layer perceptron with tanh nonlinearity (H -> H -> K logits).
struct Readout {
    Eigen::MatrixXd w1;  // H x H
    Eigen::VectorXd b1;  // H
    Eigen::MatrixXd w2;  // K x H
    Eigen::VectorXd b2;  // K

    static Readout zeros(int hidden, int out) {
        return {Eigen::MatrixXd::Zero(hidden, hidden), Eigen::VectorXd::Zero(hidden),
                Eigen::MatrixXd::Zero(out, hidden), Eigen::VectorXd::Zero(out)};
    }
};

/// Gaussian mixture emission: component means, shared diagonal variance
/// (learned in log space), and base probabilities p(mu) kept as logits.
struct MixtureParams {
    Eigen::MatrixXd mu;           // d x K component means
    Eigen::VectorXd log_var;      // d, log of the shared diagonal variance
    Eigen::VectorXd base_logits;  // K, p(mu) = softmax(base_logits)

    Eigen::VectorXd base_probs() const { return softmax(base_logits); }
    Eigen::VectorXd variance() const { return log_var.array().exp(); }
};

struct Dgm2Model {
    int n_clusters = 0;
    int n_dims = 0;
    int hidden = 0;
    double gamma = 0.5;
    LstmCell inference_cell;   // consumes x_t
    Readout inference_read;    // q_t = softmax(MLP(h~_t))
    LstmCell transition_cell;  // consumes the (soft) previous assignment
    Readout transition_read;   // p_t = softmax(MLP(h_t))
    MixtureParams mixture;
    std::uint64_t seed = 0;  // run seed, kept for serialization

    void check() const {
        if (gamma < 0.0 || gamma > 1.0) throw InvalidGamma("Dgm2Model: gamma outside [0,1]");
        if (mixture.mu.rows() != n_dims || mixture.mu.cols() != n_clusters ||
            mixture.log_var.size() != n_dims || mixture.base_logits.size() != n_clusters)
            throw Error("Dgm2Model: mixture shapes inconsistent with (d, K)");
        if (inference_cell.input_dim() != n_dims || inference_cell.hidden() != hidden ||
            transition_cell.input_dim() != n_clusters || transition_cell.hidden() != hidden)
            throw Error("Dgm2Model: cell shapes inconsistent");
        if (inference_read.w2.rows() != n_clusters || transition_read.w2.rows() != n_clusters)
            throw Error("Dgm2Model: readout output width != K");
        if (!mixture.log_var.allFinite()) throw Error("Dgm2Model: non-finite emission variance");
    }
};

struct Dgm2Config {
    int hidden = 16;
    double learning_rate = 1e-2;
    int batch_size = 32;
    int epochs = 200;
    double gamma = 0.5;
    int kl_warmup_epochs = 20;  // KL weight ramps 0 -> 1 over this many epochs
    std::uint64_t seed = 0;
};

struct TrainReport {
    std::vector<double> loss_trace;  // negative mean ELBO per epoch
    int n_epochs = 0;
    double wall_clock_seconds = 0.0;
};

/// Eq.-style convex blend psi = (1 - gamma) * p_trans + gamma * base, written
/// so that the gamma = 0 and gamma = 1 endpoints and the affine-in-gamma
/// identity hold exactly in floating point (scalar form, clamped at zero).
inline Eigen::VectorXd dynamic_mixture_adjust(const Eigen::VectorXd& p_trans,
                                              const Eigen::VectorXd& base, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0))
        throw InvalidGamma("dynamic_mixture_adjust: gamma = " + std::to_string(gamma));
    if (p_trans.size() != base.size())
        throw DimensionMismatch("dynamic_mixture_adjust: length mismatch");
    if (gamma == 1.0) return base;
    Eigen::VectorXd psi(p_trans.size());
    for (Eigen::Index k = 0; k < psi.size(); ++k) {
        const double v = p_trans[k] + gamma * (base[k] - p_trans[k]);
        psi[k] = v < 0.0 ? 0.0 : v;
    }
    return psi;
}

namespace detail {

inline Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& z) {
    return 1.0 / (1.0 + (-z).exp());
}

/// Batched LSTM step; columns are batch items.
struct LstmStepCache {
    Eigen::MatrixXd i, f, g, o;  // gate activations, H x B
    Eigen::MatrixXd c, h, tanh_c;
};

inline LstmStepCache lstm_forward(const LstmCell& cell, const Eigen::MatrixXd& x,
                                  const Eigen::MatrixXd& h_prev, const Eigen::MatrixXd& c_prev) {
    const int h = cell.hidden();
    Eigen::MatrixXd pre = cell.wx * x + cell.wh * h_prev;
    pre.colwise() += cell.b;
    LstmStepCache cache;
    cache.i = sigmoid(pre.topRows(h).array());
    cache.f = sigmoid(pre.middleRows(h, h).array());
    cache.g = pre.middleRows(2 * h, h).array().tanh();
    cache.o = sigmoid(pre.bottomRows(h).array());
    cache.c = cache.f.cwiseProduct(c_prev) + cache.i.cwiseProduct(cache.g);
    cache.tanh_c = cache.c.array().tanh();
    cache.h = cache.o.cwiseProduct(cache.tanh_c);
    return cache;
}

/// Reverse of lstm_forward. Accumulates parameter gradients into `grad` and
/// returns gradients for the step inputs.
struct LstmBackResult {
    Eigen::MatrixXd dx, dh_prev, dc_prev;
};

inline LstmBackResult lstm_backward(const LstmCell& cell, LstmCell& grad,
                                    const LstmStepCache& cache, const Eigen::MatrixXd& x,
                                    const Eigen::MatrixXd& h_prev, const Eigen::MatrixXd& c_prev,
                                    const Eigen::MatrixXd& dh, const Eigen::MatrixXd& dc) {
    const int h = cell.hidden();
    const Eigen::ArrayXXd do_ = dh.array() * cache.tanh_c.array();
    const Eigen::ArrayXXd dct =
        dh.array() * cache.o.array() * (1.0 - cache.tanh_c.array().square()) + dc.array();
    const Eigen::ArrayXXd di = dct * cache.g.array();
    const Eigen::ArrayXXd df = dct * c_prev.array();
    const Eigen::ArrayXXd dg = dct * cache.i.array();

    Eigen::MatrixXd dpre(4 * h, dh.cols());
    dpre.topRows(h) = di * cache.i.array() * (1.0 - cache.i.array());
    dpre.middleRows(h, h) = df * cache.f.array() * (1.0 - cache.f.array());
    dpre.middleRows(2 * h, h) = dg * (1.0 - cache.g.array().square());
    dpre.bottomRows(h) = do_ * cache.o.array() * (1.0 - cache.o.array());

    grad.wx += dpre * x.transpose();
    grad.wh += dpre * h_prev.transpose();
    grad.b += dpre.rowwise().sum();

    LstmBackResult out;
    out.dx = cell.wx.transpose() * dpre;
    out.dh_prev = cell.wh.transpose() * dpre;
    out.dc_prev = (dct * cache.f.array()).matrix();
    return out;
}

struct ReadoutCache {
    Eigen::MatrixXd a;      // tanh hidden, H x B
    Eigen::MatrixXd probs;  // softmax output, K x B
};

inline ReadoutCache readout_forward(const Readout& read, const Eigen::MatrixXd& h) {
    ReadoutCache cache;
    Eigen::MatrixXd pre = read.w1 * h;
    pre.colwise() += read.b1;
    cache.a = pre.array().tanh();
    Eigen::MatrixXd logits = read.w2 * cache.a;
    logits.colwise() += read.b2;
    cache.probs = softmax_columns(logits);
    return cache;
}

/// Column-wise softmax backward: dlogits = p .* (dp - colsum(p .* dp)).
inline Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd& probs,
                                        const Eigen::MatrixXd& dprobs) {
    Eigen::MatrixXd out(probs.rows(), probs.cols());
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        const double inner = probs.col(c).dot(dprobs.col(c));
        out.col(c) = probs.col(c).cwiseProduct(dprobs.col(c) -
                                               Eigen::VectorXd::Constant(probs.rows(), inner));
    }
    return out;
}

inline Eigen::MatrixXd readout_backward(const Readout& read, Readout& grad,
                                        const ReadoutCache& cache, const Eigen::MatrixXd& h,
                                        const Eigen::MatrixXd& dlogits) {
    grad.w2 += dlogits * cache.a.transpose();
    grad.b2 += dlogits.rowwise().sum();
    const Eigen::MatrixXd dpre =
        (read.w2.transpose() * dlogits).array() * (1.0 - cache.a.array().square());
    grad.w1 += dpre * h.transpose();
    grad.b1 += dpre.rowwise().sum();
    return read.w1.transpose() * dpre;
}

/// Deterministic parameter ordering shared by flatten/update/serialization.
template <typename ModelT, typename F>
inline void visit_params(ModelT& model, F&& f) {
    f(model.inference_cell.wx);
    f(model.inference_cell.wh);
    f(model.inference_cell.b);
    f(model.inference_read.w1);
    f(model.inference_read.b1);
    f(model.inference_read.w2);
    f(model.inference_read.b2);
    f(model.transition_cell.wx);
    f(model.transition_cell.wh);
    f(model.transition_cell.b);
    f(model.transition_read.w1);
    f(model.transition_read.b1);
    f(model.transition_read.w2);
    f(model.transition_read.b2);
    f(model.mixture.mu);
    f(model.mixture.log_var);
    f(model.mixture.base_logits);
}

inline Dgm2Model zeros_like(const Dgm2Model& model) {
    Dgm2Model z = model;
    visit_params(z, [](auto& p) { p.setZero(); });
    return z;
}

}  // namespace detail

inline Eigen::Index param_count(const Dgm2Model& model) {
    Eigen::Index n = 0;
    detail::visit_params(const_cast<Dgm2Model&>(model), [&](auto& p) { n += p.size(); });
    return n;
}

inline Eigen::VectorXd flatten_params(const Dgm2Model& model) {
    Eigen::VectorXd flat(param_count(model));
    Eigen::Index at = 0;
    detail::visit_params(const_cast<Dgm2Model&>(model), [&](auto& p) {
        flat.segment(at, p.size()) = Eigen::Map<const Eigen::VectorXd>(p.data(), p.size());
        at += p.size();
    });
    return flat;
}

inline void set_params(Dgm2Model& model, const Eigen::VectorXd& flat) {
    if (flat.size() != param_count(model))
        throw DimensionMismatch("set_params: flat vector has wrong length");
    Eigen::Index at = 0;
    detail::visit_params(model, [&](auto& p) {
        Eigen::Map<Eigen::VectorXd>(p.data(), p.size()) = flat.segment(at, p.size());
        at += p.size();
    });
}

/// Recurrent state passed through the step-level API.
struct LstmState {
    Eigen::VectorXd h, c;

    static LstmState initial(int hidden) {
        return {Eigen::VectorXd::Zero(hidden), Eigen::VectorXd::Zero(hidden)};
    }
};

/// One transition step: advance the cell on the previous (soft) assignment,
/// then read out p(z_t | z_{1:t-1}) = softmax(MLP(h_t)).
inline std::pair<Eigen::VectorXd, LstmState> transition_step(const Dgm2Model& model,
                                                             const Eigen::VectorXd& z_prev_probs,
                                                             const LstmState& state) {
    const auto cache =
        detail::lstm_forward(model.transition_cell, z_prev_probs, state.h, state.c);
    const auto read = detail::readout_forward(model.transition_read, cache.h);
    return {read.probs.col(0), LstmState{cache.h.col(0), cache.c.col(0)}};
}

/// One inference step: advance the cell on the observation x_t, then read out
/// q(z_t | x_{1:t}) = softmax(MLP(h~_t)).
inline std::pair<Eigen::VectorXd, LstmState> inference_step(const Dgm2Model& model,
                                                            const Eigen::VectorXd& x_t,
                                                            const LstmState& state) {
    const auto cache = detail::lstm_forward(model.inference_cell, x_t, state.h, state.c);
    const auto read = detail::readout_forward(model.inference_read, cache.h);
    return {read.probs.col(0), LstmState{cache.h.col(0), cache.c.col(0)}};
}

enum class EmissionMode { Hard, Soft };

/// Emission parameters for a given assignment distribution: hard mode picks
/// the argmax component's mean, soft mode mixes the means; the variance is
/// the shared diagonal in both modes.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> emission_params(
    const Dgm2Model& model, const Eigen::VectorXd& z_probs,
    EmissionMode mode = EmissionMode::Soft) {
    Eigen::VectorXd mean;
    if (mode == EmissionMode::Hard) {
        int best = 0;
        z_probs.maxCoeff(&best);
        mean = model.mixture.mu.col(best);
    } else {
        mean = model.mixture.mu * z_probs;
    }
    return {mean, model.mixture.variance()};
}

namespace detail {

/// Per-component Gaussian log-densities of a batch of observations:
/// entry (k, b) is log N(x_b | mu_k, diag sigma^2). K x B.
inline Eigen::MatrixXd component_loglik(const Dgm2Model& model, const Eigen::MatrixXd& x) {
    const Eigen::VectorXd var = model.mixture.variance();
    const double norm = -0.5 * static_cast<double>(model.n_dims) * kLog2Pi -
                        0.5 * model.mixture.log_var.sum();
    Eigen::MatrixXd out(model.n_clusters, x.cols());
    for (int c = 0; c < model.n_clusters; ++c) {
        const Eigen::ArrayXXd resid = x.array().colwise() - model.mixture.mu.col(c).array();
        out.row(c) = Eigen::RowVectorXd::Constant(x.cols(), norm) -
                     0.5 * (resid.square().colwise() / var.array()).colwise().sum().matrix();
    }
    return out;
}

/// Forward pass over a batch of complete series (columns = individuals),
/// caching everything the reverse pass needs. x[t] is d x B for step t.
struct BatchCache {
    int n_time = 0, batch = 0;
    std::vector<Eigen::MatrixXd> x;
    std::vector<LstmStepCache> inf_cells, tr_cells;
    std::vector<ReadoutCache> inf_reads, tr_reads;  // probs: q_t and p_t
    std::vector<Eigen::MatrixXd> tr_in;             // transition input at each step
    std::vector<Eigen::MatrixXd> psi;               // blended probabilities, K x B
    double loglik_sum = 0.0, kl_sum = 0.0;          // summed over the batch
    double elbo_sum = 0.0;                          // loglik_sum - kl_sum
};

inline BatchCache forward_batch(const Dgm2Model& model, std::vector<Eigen::MatrixXd> x) {
    const int t_len = static_cast<int>(x.size());
    const auto batch = x.empty() ? 0 : x[0].cols();
    const int k = model.n_clusters, h = model.hidden;
    const Eigen::VectorXd base = model.mixture.base_probs();

    BatchCache cache;
    cache.n_time = t_len;
    cache.batch = static_cast<int>(batch);
    cache.x = std::move(x);
    cache.inf_cells.reserve(static_cast<std::size_t>(t_len));
    cache.tr_cells.reserve(static_cast<std::size_t>(t_len));

    Eigen::MatrixXd inf_h = Eigen::MatrixXd::Zero(h, batch);
    Eigen::MatrixXd inf_c = inf_h, tr_h = inf_h, tr_c = inf_h;
    Eigen::MatrixXd s_prev = Eigen::MatrixXd::Constant(k, batch, 1.0 / k);

    for (int t = 0; t < t_len; ++t) {
        // Inference chain on x_t.
        cache.inf_cells.push_back(lstm_forward(model.inference_cell, cache.x[static_cast<std::size_t>(t)], inf_h, inf_c));
        inf_h = cache.inf_cells.back().h;
        inf_c = cache.inf_cells.back().c;
        cache.inf_reads.push_back(readout_forward(model.inference_read, inf_h));
        const Eigen::MatrixXd& q = cache.inf_reads.back().probs;

        // Transition chain on the previous soft assignment.
        cache.tr_in.push_back(s_prev);
        cache.tr_cells.push_back(lstm_forward(model.transition_cell, s_prev, tr_h, tr_c));
        tr_h = cache.tr_cells.back().h;
        tr_c = cache.tr_cells.back().c;
        cache.tr_reads.push_back(readout_forward(model.transition_read, tr_h));
        const Eigen::MatrixXd& p = cache.tr_reads.back().probs;

        Eigen::MatrixXd psi = (1.0 - model.gamma) * p;
        psi.colwise() += model.gamma * base;
        cache.psi.push_back(psi);

        // Emission log-likelihood under the dynamic mixture, the exact
        // marginal of "draw z-tilde from psi, then x from its component":
        // log sum_k psi_k N(x | mu_k, diag sigma^2), plus KL(q || psi),
        // both summed over the batch.
        const Eigen::MatrixXd comp_ll =
            component_loglik(model, cache.x[static_cast<std::size_t>(t)]);
        const Eigen::ArrayXXd a = comp_ll.array() + psi.array().log();
        const Eigen::Array<double, 1, Eigen::Dynamic> amax = a.colwise().maxCoeff();
        const double loglik =
            (amax + (a.rowwise() - amax).exp().colwise().sum().log()).sum();
        const double kl = (q.array() * (q.array().log() - psi.array().log())).sum();
        cache.loglik_sum += loglik;
        cache.kl_sum += kl;
        cache.elbo_sum += loglik - kl;

        s_prev = q;
    }
    if (!std::isfinite(cache.elbo_sum))
        throw NonFiniteLoss("dgm2: non-finite ELBO during forward pass");
    return cache;
}

/// Reverse pass of forward_batch; returns parameter gradients of
/// loglik_sum - kl_scale * kl_sum. kl_scale = 1 differentiates the true
/// bound; training ramps it from 0 (KL warm-up) to keep the inference
/// network from collapsing onto the prior before the likelihood has shaped it.
inline Dgm2Model backward_batch(const Dgm2Model& model, const BatchCache& cache,
                                double kl_scale = 1.0) {
    Dgm2Model grads = zeros_like(model);
    const int t_len = cache.n_time, k = model.n_clusters, h = model.hidden;
    const auto batch = static_cast<Eigen::Index>(cache.batch);
    const Eigen::VectorXd base = model.mixture.base_probs();
    const Eigen::VectorXd var = model.mixture.variance();

    Eigen::MatrixXd dh_tr = Eigen::MatrixXd::Zero(h, batch), dc_tr = dh_tr;
    Eigen::MatrixXd dh_inf = dh_tr, dc_inf = dh_tr;
    Eigen::MatrixXd dq_from_next = Eigen::MatrixXd::Zero(k, batch);
    Eigen::VectorXd dbase = Eigen::VectorXd::Zero(k);

    const Eigen::MatrixXd zero_h = Eigen::MatrixXd::Zero(h, batch);

    for (int t = t_len - 1; t >= 0; --t) {
        const auto ti = static_cast<std::size_t>(t);
        const Eigen::MatrixXd& q = cache.inf_reads[ti].probs;
        const Eigen::MatrixXd& p = cache.tr_reads[ti].probs;
        const Eigen::MatrixXd& psi = cache.psi[ti];

        // Emission term: loglik = sum_b log sum_k psi_kb N(x_b | mu_k, v).
        // Gradients route through the posterior responsibilities
        // r_kb = psi_kb N_kb / sum_c psi_cb N_cb.
        const Eigen::MatrixXd comp_ll = component_loglik(model, cache.x[ti]);
        const Eigen::ArrayXXd a = comp_ll.array() + psi.array().log();
        const Eigen::ArrayXXd shifted = (a.rowwise() - a.colwise().maxCoeff()).exp();
        const Eigen::ArrayXXd resp = shifted.rowwise() / shifted.colwise().sum();
        Eigen::MatrixXd dpsi = (resp / psi.array()).matrix();
        for (int c = 0; c < k; ++c) {
            const Eigen::ArrayXXd resid =
                cache.x[ti].array().colwise() - model.mixture.mu.col(c).array();
            const Eigen::ArrayXXd scaled = resid.colwise() / var.array();
            grads.mixture.mu.col(c) += scaled.matrix() * resp.row(c).matrix().transpose();
            grads.mixture.log_var +=
                ((0.5 * (resid.square().colwise() / var.array() - 1.0)).rowwise() *
                 resp.row(c))
                    .rowwise()
                    .sum()
                    .matrix();
        }

        // KL term, d(-KL)/dq and d(-KL)/dpsi.
        dpsi.array() += kl_scale * q.array() / psi.array();
        Eigen::MatrixXd dq =
            -kl_scale * (q.array().log() + 1.0 - psi.array().log()).matrix() + dq_from_next;

        // psi = (1 - gamma) p + gamma base.
        const Eigen::MatrixXd dp = (1.0 - model.gamma) * dpsi;
        dbase += model.gamma * dpsi.rowwise().sum();

        // Transition readout and cell.
        const Eigen::MatrixXd dlogits_p = softmax_backward(p, dp);
        const Eigen::MatrixXd dh_read = readout_backward(
            model.transition_read, grads.transition_read, cache.tr_reads[ti],
            cache.tr_cells[ti].h, dlogits_p);
        const Eigen::MatrixXd& tr_h_prev = t > 0 ? cache.tr_cells[ti - 1].h : zero_h;
        const Eigen::MatrixXd& tr_c_prev = t > 0 ? cache.tr_cells[ti - 1].c : zero_h;
        auto back_tr =
            lstm_backward(model.transition_cell, grads.transition_cell, cache.tr_cells[ti],
                          cache.tr_in[ti], tr_h_prev, tr_c_prev, dh_tr + dh_read, dc_tr);
        dh_tr = std::move(back_tr.dh_prev);
        dc_tr = std::move(back_tr.dc_prev);
        // The transition input at step t is q_{t-1} (uniform constant at t=0).
        dq_from_next = t > 0 ? std::move(back_tr.dx) : Eigen::MatrixXd::Zero(k, batch);

        // Inference readout and cell.
        const Eigen::MatrixXd dlogits_q = softmax_backward(q, dq);
        const Eigen::MatrixXd dh_readq = readout_backward(
            model.inference_read, grads.inference_read, cache.inf_reads[ti],
            cache.inf_cells[ti].h, dlogits_q);
        const Eigen::MatrixXd& inf_h_prev = t > 0 ? cache.inf_cells[ti - 1].h : zero_h;
        const Eigen::MatrixXd& inf_c_prev = t > 0 ? cache.inf_cells[ti - 1].c : zero_h;
        auto back_inf =
            lstm_backward(model.inference_cell, grads.inference_cell, cache.inf_cells[ti],
                          cache.x[ti], inf_h_prev, inf_c_prev, dh_inf + dh_readq, dc_inf);
        dh_inf = std::move(back_inf.dh_prev);
        dc_inf = std::move(back_inf.dc_prev);
    }

    // base = softmax(base_logits), shared across steps and batch items.
    const double inner = base.dot(dbase);
    grads.mixture.base_logits +=
        base.cwiseProduct(dbase - Eigen::VectorXd::Constant(k, inner));
    return grads;
}

inline std::vector<Eigen::MatrixXd> slice_batch(const TimeSeriesSet& data,
                                                const std::vector<int>& members) {
    std::vector<Eigen::MatrixXd> x(static_cast<std::size_t>(data.n_time()),
                                   Eigen::MatrixXd(data.n_dims, static_cast<Eigen::Index>(members.size())));
    for (std::size_t b = 0; b < members.size(); ++b)
        for (int t = 0; t < data.n_time(); ++t)
            x[static_cast<std::size_t>(t)].col(static_cast<Eigen::Index>(b)) =
                data.values[static_cast<std::size_t>(members[b])].col(t);
    return x;
}

}  // namespace detail

/// Evidence lower bound of one complete series (d x T):
/// sum_t [ log sum_k psi_tk N(x_t | mu_k, diag sigma^2) - KL(q_t || psi_t) ],
/// the dynamic-mixture emission log-likelihood minus the inference-prior
/// divergence.
inline double elbo(const Dgm2Model& model, const Eigen::MatrixXd& series) {
    if (series.rows() != model.n_dims)
        throw DimensionMismatch("elbo: series has wrong dimension count");
    if (!series.allFinite()) throw NonFiniteLoss("elbo: non-finite input");
    std::vector<Eigen::MatrixXd> x(static_cast<std::size_t>(series.cols()));
    for (Eigen::Index t = 0; t < series.cols(); ++t) x[static_cast<std::size_t>(t)] = series.col(t);
    return detail::forward_batch(model, std::move(x)).elbo_sum;
}

/// elbo plus its gradient with respect to every parameter (flattened in
/// visit_params order); the backbone of the finite-difference checks.
inline std::pair<double, Eigen::VectorXd> elbo_with_grad(const Dgm2Model& model,
                                                         const Eigen::MatrixXd& series) {
    if (series.rows() != model.n_dims)
        throw DimensionMismatch("elbo_with_grad: series has wrong dimension count");
    std::vector<Eigen::MatrixXd> x(static_cast<std::size_t>(series.cols()));
    for (Eigen::Index t = 0; t < series.cols(); ++t) x[static_cast<std::size_t>(t)] = series.col(t);
    const auto cache = detail::forward_batch(model, std::move(x));
    const auto grads = detail::backward_batch(model, cache);
    return {cache.elbo_sum, flatten_params(grads)};
}

/// Seeded initialization: component means from k-means on the pooled time
/// slices, emission log-variance from the within-cluster residuals of that
/// k-means (the pooled variance would fold in the between-component spread
/// and start the likelihood far too flat), uniform base mixture, weight
/// matrices uniform in [-0.1, 0.1], biases zero.
inline Dgm2Model init_model(const TimeSeriesSet& data, int n_clusters, const Dgm2Config& config) {
    const int d = data.n_dims, k = n_clusters, h = config.hidden;
    Dgm2Model model;
    model.n_clusters = k;
    model.n_dims = d;
    model.hidden = h;
    model.gamma = config.gamma;
    model.seed = config.seed;

    Eigen::MatrixXd slices(d, static_cast<Eigen::Index>(data.n_individuals()) * data.n_time());
    Eigen::Index at = 0;
    for (const auto& v : data.values)
        for (Eigen::Index t = 0; t < v.cols(); ++t) slices.col(at++) = v.col(t);
    const auto km = kmeans(slices, k, derive_seed(config.seed, 0));
    model.mixture.mu = km.centers;

    Eigen::VectorXd dim_var = Eigen::VectorXd::Zero(d);
    for (Eigen::Index s = 0; s < slices.cols(); ++s) {
        const int c = km.labels[static_cast<std::size_t>(s)];
        dim_var += (slices.col(s) - km.centers.col(c)).array().square().matrix();
    }
    dim_var /= static_cast<double>(slices.cols());
    model.mixture.log_var = dim_var.cwiseMax(1e-8).array().log();
    model.mixture.base_logits = Eigen::VectorXd::Zero(k);

    model.inference_cell = LstmCell::zeros(d, h);
    model.inference_read = Readout::zeros(h, k);
    model.transition_cell = LstmCell::zeros(k, h);
    model.transition_read = Readout::zeros(h, k);

    std::mt19937_64 rng(derive_seed(config.seed, 1));
    std::uniform_real_distribution<double> uni(-0.1, 0.1);
    auto fill = [&](Eigen::MatrixXd& w) {
        for (Eigen::Index c = 0; c < w.cols(); ++c)
            for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = uni(rng);
    };
    fill(model.inference_cell.wx);
    fill(model.inference_cell.wh);
    fill(model.inference_read.w1);
    fill(model.inference_read.w2);
    fill(model.transition_cell.wx);
    fill(model.transition_cell.wh);
    fill(model.transition_read.w1);
    fill(model.transition_read.w2);
    return model;
}

/// Mini-batch Adam ascent on the mean per-individual ELBO.
inline std::pair<Dgm2Model, TrainReport> train(const TimeSeriesSet& data, int n_clusters,
                                               const Dgm2Config& config = {}) {
    const auto t_start = std::chrono::steady_clock::now();
    if (data.n_individuals() == 0) throw EmptyInput("dgm2::train: no individuals");
    if (!data.fully_observed())
        throw IncompleteSeries("dgm2::train requires a complete grid (no masked entries)");
    data.check();
    if (n_clusters < 1) throw Error("dgm2::train: K must be >= 1");

    Dgm2Model model = init_model(data, n_clusters, config);
    const Eigen::Index n_params = param_count(model);

    Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(n_params);
    Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(n_params);
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    long step = 0;

    std::vector<int> order(static_cast<std::size_t>(data.n_individuals()));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, 2));

    TrainReport report;
    const int m_count = data.n_individuals();
    const int batch_size = std::max(1, std::min(config.batch_size, m_count));

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        // KL warm-up: let the likelihood organize the latent trajectories
        // before the full bound regularizes q toward psi.
        const double kl_scale =
            config.kl_warmup_epochs > 0
                ? std::min(1.0, static_cast<double>(epoch) /
                               static_cast<double>(config.kl_warmup_epochs))
                : 1.0;
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_elbo = 0.0;
        for (int start = 0; start < m_count; start += batch_size) {
            const int count = std::min(batch_size, m_count - start);
            const std::vector<int> members(order.begin() + start, order.begin() + start + count);
            const auto cache = detail::forward_batch(model, detail::slice_batch(data, members));
            const auto grads = detail::backward_batch(model, cache, kl_scale);
            epoch_elbo += cache.elbo_sum;

            const Eigen::VectorXd g = flatten_params(grads) / static_cast<double>(count);
            ++step;
            adam_m = beta1 * adam_m + (1.0 - beta1) * g;
            adam_v = (beta2 * adam_v.array() + (1.0 - beta2) * g.array().square()).matrix();
            const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            const Eigen::VectorXd delta =
                (config.learning_rate * (adam_m / corr1).array() /
                 ((adam_v / corr2).array().sqrt() + adam_eps))
                    .matrix();
            set_params(model, flatten_params(model) + delta);
        }
        const double loss = -epoch_elbo / static_cast<double>(m_count);
        if (!std::isfinite(loss)) throw NonFiniteLoss("dgm2::train: non-finite epoch loss");
        report.loss_trace.push_back(loss);
    }
    report.n_epochs = config.epochs;
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(model), std::move(report)};
}

enum class ForecastMode { Soft, Sample };

/// Rolls the generative model forward after encoding the history with the
/// inference chain. Soft mode propagates expectations deterministically;
/// sample mode averages seeded ancestral rollouts (hard one-hot cell inputs).
inline ForecastResult forecast(const Dgm2Model& model, const Eigen::MatrixXd& history,
                               int horizon, ForecastMode mode = ForecastMode::Soft,
                               int n_samples = 100, std::uint64_t seed = 0) {
    if (history.rows() != model.n_dims)
        throw DimensionMismatch("forecast: history has wrong dimension count");
    if (horizon < 0) throw Error("forecast: horizon must be >= 0");
    const int k = model.n_clusters, d = model.n_dims;
    const auto t_hist = history.cols();

    // Deterministic soft encoding of the history (shared by both modes).
    LstmState inf_state = LstmState::initial(model.hidden);
    LstmState tr_state = LstmState::initial(model.hidden);
    Eigen::VectorXd s_prev = uniform_simplex(k);
    Eigen::MatrixXd history_q(k, t_hist);
    Eigen::VectorXd q = uniform_simplex(k);
    for (Eigen::Index t = 0; t < t_hist; ++t) {
        auto [q_t, inf_next] = inference_step(model, history.col(t), inf_state);
        inf_state = inf_next;
        auto [p_t, tr_next] = transition_step(model, s_prev, tr_state);
        tr_state = tr_next;
        (void)p_t;
        history_q.col(t) = q_t;
        s_prev = q_t;
        q = q_t;
    }

    ForecastResult out;
    out.history_cluster_probs = history_q;
    out.mean.resize(d, horizon);
    out.variance.resize(d, horizon);
    out.lower95.resize(d, horizon);
    out.upper95.resize(d, horizon);
    out.cluster_probs.resize(k, horizon);
    if (horizon == 0) {
        out.target_grid = TimeGrid();
        return out;
    }
    out.target_grid = TimeGrid::range(static_cast<int>(t_hist), horizon);

    const Eigen::VectorXd base = model.mixture.base_probs();
    const Eigen::VectorXd var = model.mixture.variance();

    if (mode == ForecastMode::Soft) {
        LstmState state = tr_state;
        Eigen::VectorXd input = t_hist > 0 ? q : s_prev;
        for (int j = 0; j < horizon; ++j) {
            auto [p, next] = transition_step(model, input, state);
            state = next;
            const Eigen::VectorXd psi = dynamic_mixture_adjust(p, base, model.gamma);
            const Eigen::VectorXd mean = model.mixture.mu * psi;
            out.mean.col(j) = mean;
            for (int jd = 0; jd < d; ++jd) {
                double second = var[jd];
                for (int c = 0; c < k; ++c)
                    second += psi[c] * model.mixture.mu(jd, c) * model.mixture.mu(jd, c);
                out.variance(jd, j) = std::max(second - mean[jd] * mean[jd], 0.0);
            }
            out.cluster_probs.col(j) = psi;
            input = psi;
        }
    } else {
        if (n_samples < 1) throw Error("forecast: n_samples must be >= 1 in sample mode");
        std::mt19937_64 rng(seed);
        Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(d, horizon);
        Eigen::MatrixXd sum_sq = Eigen::MatrixXd::Zero(d, horizon);
        Eigen::MatrixXd psi_sum = Eigen::MatrixXd::Zero(k, horizon);
        for (int s = 0; s < n_samples; ++s) {
            LstmState state = tr_state;
            Eigen::VectorXd input = t_hist > 0 ? q : s_prev;
            for (int j = 0; j < horizon; ++j) {
                auto [p, next] = transition_step(model, input, state);
                state = next;
                const Eigen::VectorXd psi = dynamic_mixture_adjust(p, base, model.gamma);
                const int z = sample_categorical(p, rng);
                const int z_tilde = sample_categorical(psi, rng);
                const Eigen::VectorXd noise = standard_normal_vector(d, rng);
                const Eigen::VectorXd x = model.mixture.mu.col(z_tilde) +
                                          (var.array().sqrt() * noise.array()).matrix();
                sum.col(j) += x;
                sum_sq.col(j) += x.cwiseProduct(x);
                psi_sum.col(j) += psi;
                input = Eigen::VectorXd::Zero(k);
                input[z] = 1.0;
            }
        }
        out.mean = sum / static_cast<double>(n_samples);
        if (n_samples > 1) {
            out.variance = ((sum_sq - sum.cwiseProduct(out.mean)) /
                            static_cast<double>(n_samples - 1))
                               .cwiseMax(0.0);
        } else {
            out.variance.setZero();
        }
        out.cluster_probs = psi_sum / static_cast<double>(n_samples);
    }

    out.lower95 = out.mean - 1.96 * out.variance.cwiseSqrt();
    out.upper95 = out.mean + 1.96 * out.variance.cwiseSqrt();
    return out;
}

/// Per-timestep hard labels (argmax of q_t, first maximum wins) with the
/// probability vectors they came from.
inline ClusterTrajectory cluster_trajectory(const Dgm2Model& model,
                                            const Eigen::MatrixXd& series) {
    if (series.rows() != model.n_dims)
        throw DimensionMismatch("cluster_trajectory: series has wrong dimension count");
    ClusterTrajectory traj;
    LstmState state = LstmState::initial(model.hidden);
    for (Eigen::Index t = 0; t < series.cols(); ++t) {
        auto [q, next] = inference_step(model, series.col(t), state);
        state = next;
        int best = 0;
        q.maxCoeff(&best);
        traj.labels.push_back(best + 1);
        traj.probs.push_back(q);
    }
    return traj;
}

inline void save(const Dgm2Model& model, const std::string& path) {
    using nlohmann::json;
    json j;
    j["model"] = "dgm2";
    j["k"] = model.n_clusters;
    j["d"] = model.n_dims;
    j["hidden"] = model.hidden;
    j["gamma"] = model.gamma;
    j["seed"] = model.seed;
    auto cell_json = [](const LstmCell& c) {
        return json{{"wx", json_io::from_matrix(c.wx)},
                    {"wh", json_io::from_matrix(c.wh)},
                    {"b", json_io::from_vector(c.b)}};
    };
    auto read_json = [](const Readout& r) {
        return json{{"w1", json_io::from_matrix(r.w1)},
                    {"b1", json_io::from_vector(r.b1)},
                    {"w2", json_io::from_matrix(r.w2)},
                    {"b2", json_io::from_vector(r.b2)}};
    };
    j["inference_cell"] = cell_json(model.inference_cell);
    j["inference_read"] = read_json(model.inference_read);
    j["transition_cell"] = cell_json(model.transition_cell);
    j["transition_read"] = read_json(model.transition_read);
    j["mu"] = json_io::from_matrix(model.mixture.mu);
    j["log_var"] = json_io::from_vector(model.mixture.log_var);
    j["base_logits"] = json_io::from_vector(model.mixture.base_logits);
    json_io::save_file(path, j);
}

inline Dgm2Model load(const std::string& path) {
    const auto j = json_io::load_file(path);
    if (j.value("model", "") != std::string("dgm2"))
        throw Error("load: '" + path + "' is not a dgm2 model file");
    Dgm2Model model;
    model.n_clusters = j.at("k").get<int>();
    model.n_dims = j.at("d").get<int>();
    model.hidden = j.at("hidden").get<int>();
    model.gamma = j.at("gamma").get<double>();
    model.seed = j.at("seed").get<std::uint64_t>();
    auto cell_from = [](const nlohmann::json& c) {
        return LstmCell{json_io::to_matrix(c.at("wx")), json_io::to_matrix(c.at("wh")),
                        json_io::to_vector(c.at("b"))};
    };
    auto read_from = [](const nlohmann::json& r) {
        return Readout{json_io::to_matrix(r.at("w1")), json_io::to_vector(r.at("b1")),
                       json_io::to_matrix(r.at("w2")), json_io::to_vector(r.at("b2"))};
    };
    model.inference_cell = cell_from(j.at("inference_cell"));
    model.inference_read = read_from(j.at("inference_read"));
    model.transition_cell = cell_from(j.at("transition_cell"));
    model.transition_read = read_from(j.at("transition_read"));
    model.mixture.mu = json_io::to_matrix(j.at("mu"));
    model.mixture.log_var = json_io::to_vector(j.at("log_var"));
    model.mixture.base_logits = json_io::to_vector(j.at("base_logits"));
    model.check();
    return model;
}

}  // namespace cluscast::dgm2
