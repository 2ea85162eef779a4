#pragma once

#include "mrad/types.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mrad::eval {

// Tie-corrected rank statistic; equals P(score_pos > score_neg) + 0.5 P(tie).
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Precision summed over descending threshold groups, weighted by the recall
// gained in each group. Equal scores form one group.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

// AUROC over all pixels of all images, pooled in sequence order.
double pixel_auroc(const std::vector<AnomalyMap>& maps, const std::vector<Bitmap>& masks);

inline constexpr double kProFprCap = 0.3;
inline constexpr std::size_t kProThresholds = 200;

// 8-connected components of a mask; each region is a list of pixel indices.
std::vector<std::vector<std::size_t>> connected_regions(const Bitmap& mask);

// Per-region overlap. Regions are 8-connected components of each mask. The
// thresholds are `thresholds` nearest-rank quantiles of the pooled scores,
// swept from the maximum down; a pixel is positive when score >= threshold.
// For each threshold the mean per-region coverage is paired with the global
// false positive rate. The curve is held constant from its lowest-FPR point
// back to FPR 0, integrated by trapezoids up to fpr_cap (linearly interpolated
// at the cap) and divided by fpr_cap.
double pro(const std::vector<AnomalyMap>& maps, const std::vector<Bitmap>& masks, double fpr_cap = kProFprCap,
           std::size_t thresholds = kProThresholds);

// Integrates an (fpr, overlap) curve sorted by fpr under the convention above.
double integrate_pro_curve(const std::vector<std::pair<double, double>>& curve, double fpr_cap);

struct CategoryMetrics {
    std::optional<double> image_auroc;
    std::optional<double> image_ap;
    std::optional<double> pixel_auroc;
    std::optional<double> pro;
    std::size_t images = 0;
    std::size_t anomalous_images = 0;
    std::size_t pixel_images = 0;
};

struct EvalReport {
    std::map<std::string, CategoryMetrics> per_category;
    CategoryMetrics average; // arithmetic means over categories where defined
};

struct EvalItem {
    std::string category;
    double score = 0.0;
    std::uint8_t label = 0;
    const AnomalyMap* map = nullptr;  // may be null
    const Bitmap* mask = nullptr;     // null: excluded from pixel metrics
};

// Metrics that are undefined for a category (single class, no regions) are
// left empty and do not enter the averages.
EvalReport evaluate(const std::vector<EvalItem>& items, double fpr_cap = kProFprCap,
                    std::size_t thresholds = kProThresholds);

} // namespace mrad::eval
