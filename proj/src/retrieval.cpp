#include "mrad/retrieval.hpp"

#include "mrad/error.hpp"
#include "mrad/membank.hpp"
#include "mrad/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mrad::retrieval {

namespace {

// Writes the softmax weights of one query row into `w` (size N).
void softmax_row(std::span<const double> q, const MatrixD& keys, double tau, const std::vector<std::uint32_t>* masked,
                 std::span<double> w)
{
    const std::size_t n = keys.rows();
    constexpr double kMasked = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
        w[j] = dot(q, keys.row(j)) / tau;
    if (masked)
        for (std::uint32_t j : *masked)
            w[j] = kMasked;

    double max_logit = kMasked;
    for (std::size_t j = 0; j < n; ++j) {
        if (std::isnan(w[j]) || w[j] == std::numeric_limits<double>::infinity())
            throw_numerical("non-finite retrieval logit");
        max_logit = std::max(max_logit, w[j]);
    }
    if (max_logit == kMasked)
        throw_numerical("every memory entry is masked for a query");

    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        w[j] = w[j] == kMasked ? 0.0 : std::exp(w[j] - max_logit);
        z += w[j];
    }
    for (std::size_t j = 0; j < n; ++j)
        w[j] /= z;
}

void check_shapes(const MatrixD& queries, const MatrixD& keys, double tau)
{
    if (queries.cols() != keys.cols())
        throw_validation("query dimension " + std::to_string(queries.cols()) + " does not match key dimension "
                         + std::to_string(keys.cols()));
    if (keys.rows() == 0)
        throw_validation("memory has no entries");
    if (!(tau > 0.0))
        throw_validation("tau must be positive");
}

void check_mask(const DropoutMask* mask, std::size_t queries)
{
    if (mask && mask->masked.size() != queries)
        throw_validation("dropout mask does not cover every query");
}

MatrixD widen(const MatrixF& m)
{
    MatrixD out(m.rows(), m.cols());
    std::copy(m.data().begin(), m.data().end(), out.data().begin());
    return out;
}

} // namespace

std::vector<double> RetrievalOutput::seg_anomaly() const
{
    std::vector<double> out(y_seg.rows());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = y_seg(i, 1);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        s += a[k] * b[k];
    return s;
}

std::size_t masked_count(double rho, std::size_t n)
{
    return static_cast<std::size_t>(std::floor(rho * static_cast<double>(n) + 1e-9));
}

DropoutMask top_similarity_mask(const MatrixD& queries, const MatrixD& keys, double rho)
{
    if (!(rho >= 0.0 && rho < 1.0))
        throw_validation("rho must lie in [0, 1)");
    const std::size_t n = keys.rows();
    const std::size_t k = masked_count(rho, n);
    if (k >= n)
        throw_validation("rho masks every memory entry (floor(rho*N) = N)");
    DropoutMask mask;
    mask.masked.resize(queries.rows());
    if (k == 0)
        return mask;
    parallel_for(queries.rows(), [&](std::size_t i) {
        std::vector<double> sim(n);
        for (std::size_t j = 0; j < n; ++j)
            sim[j] = dot(queries.row(i), keys.row(j));
        std::vector<std::uint32_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                          [&](std::uint32_t a, std::uint32_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); });
        idx.resize(k);
        mask.masked[i] = std::move(idx);
    }, n * keys.cols());
    return mask;
}

MatrixD softmax_weights(const MatrixD& queries, const MatrixD& keys, double tau, const DropoutMask* mask)
{
    check_shapes(queries, keys, tau);
    check_mask(mask, queries.rows());
    MatrixD w(queries.rows(), keys.rows());
    parallel_for(queries.rows(), [&](std::size_t i) {
        softmax_row(queries.row(i), keys, tau, mask ? &mask->masked[i] : nullptr, w.row(i));
    }, keys.rows() * keys.cols());
    return w;
}

MatrixD masked_softmax_retrieve(const MatrixD& queries, const MatrixD& keys, const MatrixF& values, double tau,
                                const DropoutMask* mask)
{
    check_shapes(queries, keys, tau);
    check_mask(mask, queries.rows());
    if (values.rows() != keys.rows() || values.cols() != 2)
        throw_validation("value matrix must be N x 2");
    MatrixD out(queries.rows(), 2);
    parallel_for(queries.rows(), [&](std::size_t i) {
        std::vector<double> w(keys.rows());
        softmax_row(queries.row(i), keys, tau, mask ? &mask->masked[i] : nullptr, w);
        double y0 = 0.0, y1 = 0.0;
        for (std::size_t j = 0; j < w.size(); ++j) {
            y0 += w[j] * values(j, 0);
            y1 += w[j] * values(j, 1);
        }
        out(i, 0) = y0;
        out(i, 1) = y1;
    }, keys.rows() * keys.cols());
    return out;
}

std::vector<double> project(std::span<const double> row, const MatrixD& w)
{
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t k = 0; k < row.size(); ++k) {
        const double x = row[k];
        const auto wk = w.row(k);
        for (std::size_t j = 0; j < out.size(); ++j)
            out[j] += x * wk[j];
    }
    return out;
}

MatrixD project_rows(const MatrixD& rows, const MatrixD& w)
{
    if (rows.cols() != w.rows())
        throw_validation("projection dimension mismatch");
    MatrixD out(rows.rows(), w.cols());
    parallel_for(rows.rows(), [&](std::size_t i) {
        const auto p = project(rows.row(i), w);
        std::copy(p.begin(), p.end(), out.row(i).begin());
    }, w.rows() * w.cols());
    return out;
}

MatrixD normalized_rows(const MatrixF& rows)
{
    MatrixD out(rows.rows(), rows.cols());
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        const auto n = normalized(rows.row(i));
        std::copy(n.begin(), n.end(), out.row(i).begin());
    }
    return out;
}

Retriever::Retriever(const MemoryBank& bank, const RetrievalParams& params)
    : bank_(&bank), params_(params)
{
    params_.validate();
    bank.validate();
    raw_cls_ = widen(bank.k_cls);
    raw_pat_ = widen(bank.k_pat);
    keys_cls_ = raw_cls_;
    keys_pat_ = raw_pat_;
}

Retriever::Retriever(const MemoryBank& bank, const RetrievalParams& params, const MetricWeights& weights)
    : Retriever(bank, params)
{
    weights.validate();
    if (weights.dim() != bank.d)
        throw_validation("metric weights are " + std::to_string(weights.dim()) + "-dimensional, bank is "
                         + std::to_string(bank.d) + "-dimensional");
    weights_ = &weights;
    keys_cls_ = project_rows(raw_cls_, weights.wk_cls);
    keys_pat_ = project_rows(raw_pat_, weights.wk_seg);
}

RetrievalOutput Retriever::retrieve(const ImageRecord& record, bool training) const
{
    const std::size_t d = bank_->d;
    if (record.cls_feature.size() != d || record.patch_features.cols() != d)
        throw_validation("record '" + record.id + "' has feature dimension " + std::to_string(record.cls_feature.size())
                         + ", bank expects " + std::to_string(d));
    if (training && !weights_)
        throw_validation("training-mode retrieval needs metric weights");

    MatrixD q_cls(1, d);
    const auto cls = normalized(std::span<const float>(record.cls_feature));
    std::copy(cls.begin(), cls.end(), q_cls.row(0).begin());
    MatrixD q_pat = normalized_rows(record.patch_features);

    DropoutMask mask_cls, mask_pat;
    if (training) {
        mask_cls = top_similarity_mask(q_cls, raw_cls_, params_.rho_cls);
        mask_pat = top_similarity_mask(q_pat, raw_pat_, params_.rho_seg);
    }
    if (weights_) {
        q_cls = project_rows(q_cls, weights_->wq_cls);
        q_pat = project_rows(q_pat, weights_->wq_seg);
    }

    RetrievalOutput out;
    const MatrixD y_cls = masked_softmax_retrieve(q_cls, keys_cls_, bank_->v_cls, params_.tau,
                                                  training ? &mask_cls : nullptr);
    out.y_cls = {y_cls(0, 0), y_cls(0, 1)};
    out.y_seg = masked_softmax_retrieve(q_pat, keys_pat_, bank_->v_pat, params_.tau, training ? &mask_pat : nullptr);
    return out;
}

RetrievalOutput retrieve_tf(const ImageRecord& record, const MemoryBank& bank, const RetrievalParams& params)
{
    return Retriever(bank, params).retrieve(record);
}

RetrievalOutput retrieve_ft(const ImageRecord& record, const MemoryBank& bank, const MetricWeights& weights,
                            const RetrievalParams& params, bool training)
{
    return Retriever(bank, params, weights).retrieve(record, training);
}

DatasetStats dataset_statistics(const std::vector<ImageRecord>& queries, const PatchGrid& grid,
                                const MemoryBank& bank, const RetrievalParams& params, const MetricWeights* weights)
{
    const Retriever retriever = weights ? Retriever(bank, params, *weights) : Retriever(bank, params);
    double sum_a = 0.0, sum_n = 0.0;
    DatasetStats stats;
    for (const auto& record : queries) {
        const auto labels = membank::patch_labels(record, grid);
        if (!labels)
            continue;
        if (labels->size() != record.patch_features.rows())
            throw_validation("record '" + record.id + "' does not match the patch grid");
        const RetrievalOutput out = retriever.retrieve(record);
        for (std::size_t u = 0; u < labels->size(); ++u) {
            if ((*labels)[u]) {
                sum_a += out.y_seg(u, 1);
                ++stats.anomalous_queries;
            } else {
                sum_n += out.y_seg(u, 1);
                ++stats.normal_queries;
            }
        }
    }
    if (stats.anomalous_queries > 0) {
        stats.aq_ak = sum_a / static_cast<double>(stats.anomalous_queries);
        stats.aq_nk = 1.0 - *stats.aq_ak;
    }
    if (stats.normal_queries > 0) {
        stats.nq_ak = sum_n / static_cast<double>(stats.normal_queries);
        stats.nq_nk = 1.0 - *stats.nq_ak;
    }
    if (stats.aq_ak && stats.nq_ak) {
        stats.margin_a = *stats.aq_ak - *stats.nq_ak;
        stats.margin_n = *stats.nq_nk - *stats.aq_nk;
    }
    return stats;
}

} // namespace mrad::retrieval
