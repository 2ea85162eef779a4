#pragma once

#include "mrad/types.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace mrad::retrieval {

struct RetrievalOutput {
    std::array<double, 2> y_cls{};
    MatrixD y_seg; // u x 2

    // Anomaly channel of every patch, grid row-major.
    std::vector<double> seg_anomaly() const;
};

// Per query, the memory indices whose logits are forced to -inf.
struct DropoutMask {
    std::vector<std::vector<std::uint32_t>> masked;
};

double dot(std::span<const double> a, std::span<const double> b);

// floor(rho * n), guarded against representation error in rho.
std::size_t masked_count(double rho, std::size_t n);

// For each query row, masks the floor(rho*N) keys with the highest raw
// similarity Q_i . K_j. Ties go to the lower memory index.
DropoutMask top_similarity_mask(const MatrixD& queries, const MatrixD& keys, double rho);

// Softmax attention of queries over keys, returning the row-stochastic weight
// matrix (m x N). Logits are (Q_i . K_j) / tau; masked entries get weight 0.
MatrixD softmax_weights(const MatrixD& queries, const MatrixD& keys, double tau, const DropoutMask* mask = nullptr);

// softmax_weights(...) times V, computed one row at a time.
MatrixD masked_softmax_retrieve(const MatrixD& queries, const MatrixD& keys, const MatrixF& values, double tau,
                                const DropoutMask* mask = nullptr);

// row * W for a row vector and a square matrix.
std::vector<double> project(std::span<const double> row, const MatrixD& w);
MatrixD project_rows(const MatrixD& rows, const MatrixD& w);

// l2-normalized copies of the rows, in double.
MatrixD normalized_rows(const MatrixF& rows);

// Bank prepared for repeated queries: keys widened to double and, when
// weights are given, projected once through W_k of each head.
class Retriever {
public:
    Retriever(const MemoryBank& bank, const RetrievalParams& params);
    Retriever(const MemoryBank& bank, const RetrievalParams& params, const MetricWeights& weights);

    // training=true applies the top-rho similarity dropout; it requires weights.
    RetrievalOutput retrieve(const ImageRecord& record, bool training = false) const;

    const MemoryBank& bank() const noexcept { return *bank_; }
    const RetrievalParams& params() const noexcept { return params_; }

private:
    const MemoryBank* bank_;
    RetrievalParams params_;
    const MetricWeights* weights_ = nullptr;
    MatrixD raw_cls_, raw_pat_;   // normalized keys, un-projected
    MatrixD keys_cls_, keys_pat_; // keys used for logits
};

RetrievalOutput retrieve_tf(const ImageRecord& record, const MemoryBank& bank, const RetrievalParams& params);

RetrievalOutput retrieve_ft(const ImageRecord& record, const MemoryBank& bank, const MetricWeights& weights,
                            const RetrievalParams& params, bool training);

// Mean anomaly-channel retrieval score over anomalous and normal query
// patches. Patch labels come from membank::patch_labels; anomalous images
// without a mask are skipped.
DatasetStats dataset_statistics(const std::vector<ImageRecord>& queries, const PatchGrid& grid,
                                const MemoryBank& bank, const RetrievalParams& params,
                                const MetricWeights* weights = nullptr);

} // namespace mrad::retrieval
