#pragma once

#include "mrad/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mrad::membank {

// Per-patch binary labels on the grid, row-major (grid_h * grid_w entries).
using PatchLabels = std::vector<std::uint8_t>;

// Cell (r, c) covers pixel rows [round(r*H/gh), round((r+1)*H/gh)) and the
// analogous columns. A cell is anomalous iff at least half its pixels are.
PatchLabels downsample_mask(const Bitmap& mask, const PatchGrid& grid);

// Patch labels of a record for building and training: normal images are all
// zero (with or without a mask), anomalous images use their downsampled mask,
// anomalous images without a mask have no patch labels.
std::optional<PatchLabels> patch_labels(const ImageRecord& record, const PatchGrid& grid);

struct RegionPrototypes {
    std::optional<std::vector<double>> mu_norm;
    std::optional<std::vector<double>> mu_anom;
};

// Renormalized means of the patch features outside / inside the region.
// Rows of `patch_features` are normalized before averaging.
RegionPrototypes region_prototypes(const MatrixF& patch_features, const PatchLabels& labels);

struct BuildResult {
    MemoryBank bank;
    // Set when either level lacks a normal or an anomalous entry. Retrieval
    // against such a bank still runs but cannot discriminate.
    std::optional<std::string> warning;
};

BuildResult build_bank(const std::vector<ImageRecord>& records, const PatchGrid& grid,
                       std::string source_tag = {});

// Uniformly samples n patch-level entries without replacement. The image
// level is left untouched. Deterministic for a fixed seed.
MemoryBank subsample_bank(const MemoryBank& bank, std::size_t n, std::uint64_t seed);

} // namespace mrad::membank
