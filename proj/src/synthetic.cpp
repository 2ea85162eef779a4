#include "mrad/synthetic.hpp"

#include "mrad/error.hpp"
#include "mrad/random.hpp"

#include <algorithm>
#include <cmath>

namespace mrad::synthetic {

namespace {

// Box-Muller on top of the raw engine, so draws are reproducible across
// standard library implementations.
class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : rng_(seed) {}

    double operator()()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
        const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
    std::uint64_t index(std::uint64_t bound) { return uniform_index(rng_, bound); }

private:
    Rng rng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::vector<double> random_unit(std::size_t d, Gaussian& g)
{
    std::vector<double> v(d);
    for (double& x : v)
        x = g();
    return normalized(std::span<const double>(v));
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b)
{
    // splitmix64 finalizer over a combined key
    std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace

Task::Task(const TaskConfig& config) : config_(config)
{
    grid().validate();
    if (config_.d < 2)
        throw_validation("synthetic task needs d >= 2");
    if (config_.defect_min_cells < 1 || config_.defect_min_cells > config_.defect_max_cells
        || config_.defect_max_cells > std::min(config_.grid_h, config_.grid_w))
        throw_validation("invalid defect size range");
    Gaussian g(mix(config_.seed, 0xA11));
    anomaly_direction_ = random_unit(config_.d, g);
}

PatchGrid Task::grid() const
{
    return {config_.grid_h, config_.grid_w, config_.image_h, config_.image_w};
}

std::vector<double> Task::category_direction(std::size_t category) const
{
    Gaussian g(mix(config_.seed, 0xC000 + category));
    return random_unit(config_.d, g);
}

double Task::patch_bayes_error() const
{
    return 0.5 * std::erfc(config_.shift / (2.0 * config_.noise) / std::sqrt(2.0));
}

Split Task::generate(std::size_t first_category, std::size_t n_categories, std::size_t per_category,
                     double anomaly_fraction, std::uint64_t seed, const std::string& id_prefix,
                     bool normal_masks) const
{
    const std::size_t d = config_.d;
    const PatchGrid grid = this->grid();
    const double cell_h = static_cast<double>(grid.image_h) / grid.grid_h;
    const double cell_w = static_cast<double>(grid.image_w) / grid.grid_w;
    Gaussian g(mix(config_.seed, mix(seed, 0x5EED)));

    const auto feature = [&](const std::vector<double>& base, double strength, std::span<float> out) {
        for (std::size_t k = 0; k < d; ++k)
            out[k] = static_cast<float>(base[k] + strength * anomaly_direction_[k] + config_.noise * g());
    };

    Split split;
    for (std::size_t c = first_category; c < first_category + n_categories; ++c) {
        const std::vector<double> base = category_direction(c);
        const std::string category = "cat" + std::to_string(c);
        for (std::size_t i = 0; i < per_category; ++i) {
            ImageRecord r;
            r.id = id_prefix + category + "_" + std::to_string(i);
            r.label = g.uniform() < anomaly_fraction ? 1 : 0;
            Bitmap mask(grid.image_h, grid.image_w);
            if (r.label) {
                const auto span_cells = [&] {
                    return config_.defect_min_cells
                           + static_cast<std::uint32_t>(g.index(config_.defect_max_cells - config_.defect_min_cells + 1));
                };
                const auto h = static_cast<std::uint32_t>(std::lround(span_cells() * cell_h));
                const auto w = static_cast<std::uint32_t>(std::lround(span_cells() * cell_w));
                const auto y0 = static_cast<std::uint32_t>(g.index(grid.image_h - h + 1));
                const auto x0 = static_cast<std::uint32_t>(g.index(grid.image_w - w + 1));
                for (std::uint32_t y = y0; y < y0 + h; ++y)
                    for (std::uint32_t x = x0; x < x0 + w; ++x)
                        mask.at(y, x) = 1;
            }

            r.cls_feature.resize(d);
            feature(base, r.label ? config_.shift_cls : 0.0, r.cls_feature);
            r.patch_features = MatrixF(grid.patches(), d);
            for (std::uint32_t gr = 0; gr < grid.grid_h; ++gr)
                for (std::uint32_t gc = 0; gc < grid.grid_w; ++gc) {
                    // anomalous pixel fraction of the cell
                    const auto y0 = static_cast<std::uint32_t>(std::lround(gr * cell_h));
                    const auto y1 = static_cast<std::uint32_t>(std::lround((gr + 1) * cell_h));
                    const auto x0 = static_cast<std::uint32_t>(std::lround(gc * cell_w));
                    const auto x1 = static_cast<std::uint32_t>(std::lround((gc + 1) * cell_w));
                    std::size_t hits = 0;
                    for (std::uint32_t y = y0; y < y1; ++y)
                        for (std::uint32_t x = x0; x < x1; ++x)
                            hits += mask.at(y, x);
                    const double frac = static_cast<double>(hits) / static_cast<double>((y1 - y0) * (x1 - x0));
                    feature(base, frac * config_.shift, r.patch_features.row(std::size_t{gr} * grid.grid_w + gc));
                }
            if (r.label || normal_masks)
                r.mask = std::move(mask);
            split.records.push_back(std::move(r));
            split.categories.push_back(category);
        }
    }
    return split;
}

} // namespace mrad::synthetic
