#pragma once

#include "mrad/types.hpp"

#include <array>
#include <cstdint>
#include <span>

namespace mrad::scoring {

// Bilinear upsampling of a grid_h x grid_w field (row-major) to h x w. Grid
// sample (r, c) sits at the centre of its cell, i.e. at output pixel
// ((r + 0.5) * h / grid_h - 0.5, ...); pixels beyond the outermost centres
// take the border value. Output is clamped to [0, 1].
AnomalyMap upsample_map(std::span<const double> grid_values, std::uint32_t grid_h, std::uint32_t grid_w,
                        std::uint32_t height, std::uint32_t width);

// Separable Gaussian blur with edge clamping. sigma <= 0 is a no-op.
AnomalyMap smooth_map(const AnomalyMap& map, double sigma);

// max(1, round(fraction * pixels)).
std::size_t topk_count(double fraction, std::size_t pixels);

// Mean of the k largest map values.
double topk_mean(const AnomalyMap& map, std::size_t k);

// Anomaly channel of y_cls plus the top-k mean of the map.
double image_score(const std::array<double, 2>& y_cls, const AnomalyMap& map, const RetrievalParams& params);

// Top-k mean alone, for running without the image-level memory.
double image_score_pixel_only(const AnomalyMap& map, const RetrievalParams& params);

} // namespace mrad::scoring
