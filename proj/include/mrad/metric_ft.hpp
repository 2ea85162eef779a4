#pragma once

#include "mrad/types.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace mrad::ft {

struct LossBreakdown {
    double bce = 0.0;
    double dice = 0.0;
    double focal = 0.0;
    double total = 0.0;
};

struct TrainConfig {
    double learning_rate = 5e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

// Same layout as MetricWeights: one d x d gradient per map.
using Gradients = MetricWeights;

struct StepResult {
    LossBreakdown loss;
    Gradients grads;
};

// Batch-mean loss BCE(Y_cls, y) + Dice(Y_seg, M) + Focal(Y_seg, M) and its
// gradient with respect to all four maps. Similarity dropout is taken from the
// un-projected similarities and held constant. Segmentation terms use the
// patch-resolution labels; anomalous images without a mask add the BCE term
// only. Every term is divided by the batch size.
StepResult forward_backward(const std::vector<const ImageRecord*>& batch, const PatchGrid& grid,
                            const MemoryBank& bank, const MetricWeights& weights, const RetrievalParams& params);

// Loss only; the finite-difference oracle uses this.
LossBreakdown batch_loss(const std::vector<const ImageRecord*>& batch, const PatchGrid& grid, const MemoryBank& bank,
                         const MetricWeights& weights, const RetrievalParams& params);

struct StepLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::size_t batch_images = 0;
    LossBreakdown loss;
    double grad_norm_wq_cls = 0.0;
    double grad_norm_wk_cls = 0.0;
    double grad_norm_wq_seg = 0.0;
    double grad_norm_wk_seg = 0.0;
};

using StepCallback = std::function<void(const StepLog&)>;

// Adam over all four maps starting from identity. The image order is
// reshuffled each epoch from the seed; the last partial batch is kept. The
// result is rounded to f32 so it equals what save_weights persists.
MetricWeights train(const std::vector<ImageRecord>& aux, const PatchGrid& grid, const MemoryBank& bank,
                    const TrainConfig& config, const RetrievalParams& params, const StepCallback& on_step = {});

} // namespace mrad::ft
