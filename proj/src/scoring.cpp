#include "mrad/scoring.hpp"

#include "mrad/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace mrad::scoring {

namespace {

struct Tap {
    std::uint32_t lo;
    std::uint32_t hi;
    double frac; // weight of hi
};

// Source taps for each output coordinate along one axis.
std::vector<Tap> axis_taps(std::uint32_t cells, std::uint32_t out)
{
    std::vector<Tap> taps(out);
    const double scale = static_cast<double>(cells) / out;
    for (std::uint32_t x = 0; x < out; ++x) {
        double s = (x + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(cells - 1));
        const auto lo = static_cast<std::uint32_t>(std::floor(s));
        const std::uint32_t hi = std::min(lo + 1, cells - 1);
        taps[x] = {lo, hi, s - lo};
    }
    return taps;
}

std::vector<double> gaussian_kernel(double sigma)
{
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k)
        v /= sum;
    return k;
}

} // namespace

AnomalyMap upsample_map(std::span<const double> grid_values, std::uint32_t grid_h, std::uint32_t grid_w,
                        std::uint32_t height, std::uint32_t width)
{
    if (height == 0 || width == 0)
        throw_validation("upsampling target must be non-empty");
    if (grid_h == 0 || grid_w == 0 || grid_values.size() != std::size_t{grid_h} * grid_w)
        throw_validation("grid values do not match the grid shape");

    const auto rows = axis_taps(grid_h, height);
    const auto cols = axis_taps(grid_w, width);
    const auto g = [&](std::uint32_t r, std::uint32_t c) { return grid_values[std::size_t{r} * grid_w + c]; };

    AnomalyMap map(height, width);
    for (std::uint32_t y = 0; y < height; ++y) {
        const Tap& ty = rows[y];
        for (std::uint32_t x = 0; x < width; ++x) {
            const Tap& tx = cols[x];
            const double top = g(ty.lo, tx.lo) * (1.0 - tx.frac) + g(ty.lo, tx.hi) * tx.frac;
            const double bottom = g(ty.hi, tx.lo) * (1.0 - tx.frac) + g(ty.hi, tx.hi) * tx.frac;
            const double v = top * (1.0 - ty.frac) + bottom * ty.frac;
            map.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return map;
}

AnomalyMap smooth_map(const AnomalyMap& map, double sigma)
{
    if (!(sigma > 0.0))
        return map;
    const auto kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const int h = static_cast<int>(map.height), w = static_cast<int>(map.width);

    std::vector<double> tmp(map.scores.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i)
                s += kernel[i + radius] * map.at(y, std::clamp(x + i, 0, w - 1));
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    AnomalyMap out(map.height, map.width);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i)
                s += kernel[i + radius] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
            out.at(y, x) = static_cast<float>(std::clamp(s, 0.0, 1.0));
        }
    return out;
}

std::size_t topk_count(double fraction, std::size_t pixels)
{
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pixels))));
}

double topk_mean(const AnomalyMap& map, std::size_t k)
{
    const std::size_t n = map.scores.size();
    if (k < 1 || k > n)
        throw_validation("top-k count " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    std::vector<float> v = map.scores;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
    // Sort the selected block so the sum does not depend on nth_element's layout.
    std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), std::greater<>());
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        sum += v[i];
    return sum / static_cast<double>(k);
}

double image_score(const std::array<double, 2>& y_cls, const AnomalyMap& map, const RetrievalParams& params)
{
    return y_cls[1] + image_score_pixel_only(map, params);
}

double image_score_pixel_only(const AnomalyMap& map, const RetrievalParams& params)
{
    return topk_mean(map, topk_count(params.topk_fraction, map.scores.size()));
}

} // namespace mrad::scoring
