#include "mrad/metric_ft.hpp"

#include "mrad/error.hpp"
#include "mrad/losses.hpp"
#include "mrad/membank.hpp"
#include "mrad/parallel.hpp"
#include "mrad/random.hpp"
#include "mrad/retrieval.hpp"

#include <cmath>
#include <numeric>

namespace mrad::ft {

namespace {

using retrieval::DropoutMask;

// One retrieval head (cls or seg) with its keys projected for the current weights.
struct Head {
    const MatrixD& raw_keys;
    MatrixD keys; // raw_keys * W_k
    const MatrixF& values;
    const MatrixD& wq;
    double rho;
    MatrixD dkeys; // accumulated d(loss)/d(keys), N x d
};

struct HeadForward {
    MatrixD queries;   // normalized, un-projected
    MatrixD projected; // queries * W_q
    MatrixD weights;   // softmax weights, m x N
    std::vector<double> p_anom;
};

HeadForward head_forward(const Head& head, MatrixD queries, double tau)
{
    HeadForward f;
    const DropoutMask mask = retrieval::top_similarity_mask(queries, head.raw_keys, head.rho);
    f.projected = retrieval::project_rows(queries, head.wq);
    f.queries = std::move(queries);
    f.weights = retrieval::softmax_weights(f.projected, head.keys, tau, &mask);
    f.p_anom.resize(f.weights.rows());
    for (std::size_t i = 0; i < f.weights.rows(); ++i) {
        double p = 0.0;
        const auto w = f.weights.row(i);
        for (std::size_t j = 0; j < w.size(); ++j)
            p += w[j] * head.values(j, 1);
        f.p_anom[i] = p;
    }
    return f;
}

// Backpropagates dL/dp_anom through the softmax and the projections.
// Accumulates dL/dW_q into dwq and dL/d(keys) into head.dkeys.
void head_backward(Head& head, const HeadForward& f, std::span<const double> dp, double tau, MatrixD& dwq)
{
    const std::size_t m = f.weights.rows();
    const std::size_t n = f.weights.cols();
    const std::size_t d = head.keys.cols();

    // dS_ij = P_ij * dp_i * (V_j,anom - p_i), already divided by tau.
    MatrixD ds(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        if (dp[i] == 0.0)
            continue;
        for (std::size_t j = 0; j < n; ++j)
            ds(i, j) = f.weights(i, j) * dp[i] * (head.values(j, 1) - f.p_anom[i]) / tau;
    }

    // dA = dS * B
    MatrixD da(m, d);
    parallel_for(m, [&](std::size_t i) {
        auto out = da.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double s = ds(i, j);
            if (s == 0.0)
                continue;
            const auto b = head.keys.row(j);
            for (std::size_t k = 0; k < d; ++k)
                out[k] += s * b[k];
        }
    }, n * d);

    // dB += dS^T * A
    parallel_for(n, [&](std::size_t j) {
        auto out = head.dkeys.row(j);
        for (std::size_t i = 0; i < m; ++i) {
            const double s = ds(i, j);
            if (s == 0.0)
                continue;
            const auto a = f.projected.row(i);
            for (std::size_t k = 0; k < d; ++k)
                out[k] += s * a[k];
        }
    }, m * d);

    // dW_q += Q^T * dA
    parallel_for(d, [&](std::size_t a) {
        auto out = dwq.row(a);
        for (std::size_t i = 0; i < m; ++i) {
            const double q = f.queries(i, a);
            if (q == 0.0)
                continue;
            const auto g = da.row(i);
            for (std::size_t b = 0; b < d; ++b)
                out[b] += q * g[b];
        }
    }, m * d);
}

// dW_k = K^T * dB
MatrixD key_weight_grad(const Head& head)
{
    const std::size_t d = head.keys.cols();
    MatrixD g(d, d);
    parallel_for(d, [&](std::size_t a) {
        auto out = g.row(a);
        for (std::size_t j = 0; j < head.raw_keys.rows(); ++j) {
            const double k = head.raw_keys(j, a);
            const auto db = head.dkeys.row(j);
            for (std::size_t b = 0; b < d; ++b)
                out[b] += k * db[b];
        }
    }, head.raw_keys.rows() * d);
    return g;
}

MatrixD widen(const MatrixF& m)
{
    MatrixD out(m.rows(), m.cols());
    std::copy(m.data().begin(), m.data().end(), out.data().begin());
    return out;
}

StepResult run_batch(const std::vector<const ImageRecord*>& batch, const PatchGrid& grid, const MemoryBank& bank,
                     const MetricWeights& weights, const RetrievalParams& params, bool want_grads)
{
    if (batch.empty())
        throw_validation("training batch is empty");
    params.validate();
    weights.validate();
    const std::size_t d = bank.d;
    if (weights.dim() != d)
        throw_validation("metric weights do not match the bank dimension");

    const MatrixD raw_cls = widen(bank.k_cls);
    const MatrixD raw_pat = widen(bank.k_pat);
    Head cls{raw_cls, retrieval::project_rows(raw_cls, weights.wk_cls), bank.v_cls, weights.wq_cls, params.rho_cls, {}};
    Head seg{raw_pat, retrieval::project_rows(raw_pat, weights.wk_seg), bank.v_pat, weights.wq_seg, params.rho_seg, {}};
    if (want_grads) {
        cls.dkeys = MatrixD(cls.keys.rows(), d);
        seg.dkeys = MatrixD(seg.keys.rows(), d);
    }

    StepResult result;
    MatrixD dwq_cls(d, d), dwq_seg(d, d);
    const double scale = 1.0 / static_cast<double>(batch.size());

    for (const ImageRecord* record : batch) {
        validate_record(*record, grid, d);
        MatrixD q_cls(1, d);
        const auto cls_q = normalized(std::span<const float>(record->cls_feature));
        std::copy(cls_q.begin(), cls_q.end(), q_cls.row(0).begin());
        const HeadForward fc = head_forward(cls, std::move(q_cls), params.tau);

        const double p_cls = fc.p_anom[0];
        result.loss.bce += scale * bce_loss(p_cls, record->label);
        if (want_grads) {
            const double dp = scale * bce_grad(p_cls, record->label);
            head_backward(cls, fc, std::span<const double>(&dp, 1), params.tau, dwq_cls);
        }

        const auto labels = membank::patch_labels(*record, grid);
        if (!labels)
            continue;
        const HeadForward fs = head_forward(seg, retrieval::normalized_rows(record->patch_features), params.tau);
        const LossGrad dice = dice_loss_grad(fs.p_anom, *labels);
        const LossGrad focal = focal_loss_grad(fs.p_anom, *labels);
        result.loss.dice += scale * dice.value;
        result.loss.focal += scale * focal.value;
        if (want_grads) {
            std::vector<double> dp(fs.p_anom.size());
            for (std::size_t u = 0; u < dp.size(); ++u)
                dp[u] = scale * (dice.grad[u] + focal.grad[u]);
            head_backward(seg, fs, dp, params.tau, dwq_seg);
        }
    }
    result.loss.total = result.loss.bce + result.loss.dice + result.loss.focal;

    if (want_grads) {
        result.grads.wq_cls = std::move(dwq_cls);
        result.grads.wk_cls = key_weight_grad(cls);
        result.grads.wq_seg = std::move(dwq_seg);
        result.grads.wk_seg = key_weight_grad(seg);
    }
    return result;
}

double frobenius(const MatrixD& m)
{
    double s = 0.0;
    for (double x : m.data())
        s += x * x;
    return std::sqrt(s);
}

struct AdamState {
    MatrixD m;
    MatrixD v;
};

void adam_update(MatrixD& w, const MatrixD& g, AdamState& st, const TrainConfig& cfg, std::size_t t)
{
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    auto& wd = w.data();
    const auto& gd = g.data();
    auto& md = st.m.data();
    auto& vd = st.v.data();
    for (std::size_t i = 0; i < wd.size(); ++i) {
        md[i] = cfg.adam_beta1 * md[i] + (1.0 - cfg.adam_beta1) * gd[i];
        vd[i] = cfg.adam_beta2 * vd[i] + (1.0 - cfg.adam_beta2) * gd[i] * gd[i];
        const double m_hat = md[i] / c1;
        const double v_hat = vd[i] / c2;
        wd[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
}

} // namespace

void TrainConfig::validate() const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw_validation("learning rate must be positive");
    if (batch_size == 0)
        throw_validation("batch size must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
        throw_validation("invalid Adam hyperparameters");
}

StepResult forward_backward(const std::vector<const ImageRecord*>& batch, const PatchGrid& grid,
                            const MemoryBank& bank, const MetricWeights& weights, const RetrievalParams& params)
{
    return run_batch(batch, grid, bank, weights, params, true);
}

LossBreakdown batch_loss(const std::vector<const ImageRecord*>& batch, const PatchGrid& grid, const MemoryBank& bank,
                         const MetricWeights& weights, const RetrievalParams& params)
{
    return run_batch(batch, grid, bank, weights, params, false).loss;
}

MetricWeights train(const std::vector<ImageRecord>& aux, const PatchGrid& grid, const MemoryBank& bank,
                    const TrainConfig& config, const RetrievalParams& params, const StepCallback& on_step)
{
    config.validate();
    params.validate();
    bank.validate();
    if (aux.empty())
        throw_validation("training needs at least one auxiliary image");

    const std::size_t d = bank.d;
    MetricWeights w = MetricWeights::identity(d);
    const auto zeros = [d] { return AdamState{MatrixD(d, d), MatrixD(d, d)}; };
    AdamState s_qc = zeros(), s_kc = zeros(), s_qs = zeros(), s_ks = zeros();

    Rng rng(config.seed);
    std::vector<std::size_t> order(aux.size());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(order, rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<const ImageRecord*> batch;
            for (std::size_t i = start; i < end; ++i)
                batch.push_back(&aux[order[i]]);

            const StepResult r = forward_backward(batch, grid, bank, w, params);
            ++step;
            adam_update(w.wq_cls, r.grads.wq_cls, s_qc, config, step);
            adam_update(w.wk_cls, r.grads.wk_cls, s_kc, config, step);
            adam_update(w.wq_seg, r.grads.wq_seg, s_qs, config, step);
            adam_update(w.wk_seg, r.grads.wk_seg, s_ks, config, step);
            for (const MatrixD* m : {&w.wq_cls, &w.wk_cls, &w.wq_seg, &w.wk_seg})
                for (double x : m->data())
                    if (!std::isfinite(x))
                        throw_numerical("training produced non-finite weights at step " + std::to_string(step));

            if (on_step) {
                StepLog log;
                log.step = step;
                log.epoch = epoch;
                log.batch_images = batch.size();
                log.loss = r.loss;
                log.grad_norm_wq_cls = frobenius(r.grads.wq_cls);
                log.grad_norm_wk_cls = frobenius(r.grads.wk_cls);
                log.grad_norm_wq_seg = frobenius(r.grads.wq_seg);
                log.grad_norm_wk_seg = frobenius(r.grads.wk_seg);
                on_step(log);
            }
        }
    }

    for (MatrixD* m : {&w.wq_cls, &w.wk_cls, &w.wq_seg, &w.wk_seg})
        for (double& x : m->data())
            x = static_cast<double>(static_cast<float>(x));
    return w;
}

} // namespace mrad::ft
