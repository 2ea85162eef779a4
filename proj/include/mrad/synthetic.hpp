#pragma once

#include "mrad/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mrad::synthetic {

// Generative model for a retrieval task with a known answer.
//
// Every category c has a random unit "normal" direction n_c. All categories
// share one unit anomaly direction a. A patch with anomalous pixel fraction f
// gets the feature n_c + f * shift * a + noise, with isotropic Gaussian
// noise of per-component standard deviation `noise`. Class tokens use the
// same scheme with shift_cls, applied when the image is anomalous. Defects
// are axis-aligned rectangles in pixel space.
struct TaskConfig {
    std::size_t d = 16;
    std::uint32_t grid_h = 8;
    std::uint32_t grid_w = 8;
    std::uint32_t image_h = 32;
    std::uint32_t image_w = 32;
    double shift = 1.2;
    double shift_cls = 1.2;
    double noise = 0.12;
    std::uint32_t defect_min_cells = 2; // defect side length, in patch cells
    std::uint32_t defect_max_cells = 3;
    std::uint64_t seed = 0;
};

struct Split {
    std::vector<ImageRecord> records;
    std::vector<std::string> categories; // parallel to records
};

class Task {
public:
    explicit Task(const TaskConfig& config);

    const TaskConfig& config() const noexcept { return config_; }
    PatchGrid grid() const;

    // Images of categories [first_category, first_category + n_categories),
    // `per_category` each, roughly `anomaly_fraction` of them anomalous. Every
    // anomalous image carries a mask; normal images carry one when
    // `normal_masks` is set.
    Split generate(std::size_t first_category, std::size_t n_categories, std::size_t per_category,
                   double anomaly_fraction, std::uint64_t seed, const std::string& id_prefix,
                   bool normal_masks = false) const;

    // Error of the best per-patch decision between a fully normal and a fully
    // anomalous patch of a known category: Phi(-shift / (2 noise)).
    double patch_bayes_error() const;

private:
    std::vector<double> category_direction(std::size_t category) const;

    TaskConfig config_;
    std::vector<double> anomaly_direction_;
};

} // namespace mrad::synthetic
