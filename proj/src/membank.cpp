#include "mrad/membank.hpp"

#include "mrad/error.hpp"
#include "mrad/parallel.hpp"
#include "mrad/random.hpp"

#include <cmath>
#include <numeric>

namespace mrad::membank {

namespace {

std::uint32_t boundary(std::uint32_t index, std::uint32_t extent, std::uint32_t cells)
{
    return static_cast<std::uint32_t>(std::lround(static_cast<double>(index) * extent / cells));
}

std::vector<double> finish_mean(std::vector<double> sum, std::size_t count, const char* which)
{
    double sq = 0.0;
    for (double& x : sum) {
        x /= static_cast<double>(count);
        sq += x * x;
    }
    const double norm = std::sqrt(sq);
    if (!(norm >= 1e-12))
        throw_numerical(std::string("degenerate ") + which + " prototype: mean feature has near-zero norm");
    for (double& x : sum)
        x /= norm;
    return sum;
}

void append_row(MatrixF& m, std::span<const double> row)
{
    auto& data = m.data();
    for (double x : row)
        data.push_back(static_cast<float>(x));
}

} // namespace

PatchLabels downsample_mask(const Bitmap& mask, const PatchGrid& grid)
{
    grid.validate();
    if (mask.height != grid.image_h || mask.width != grid.image_w)
        throw_validation("mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width) + ", grid expects "
                         + std::to_string(grid.image_h) + "x" + std::to_string(grid.image_w));
    PatchLabels labels(grid.patches(), 0);
    for (std::uint32_t r = 0; r < grid.grid_h; ++r) {
        const std::uint32_t y0 = boundary(r, grid.image_h, grid.grid_h);
        const std::uint32_t y1 = boundary(r + 1, grid.image_h, grid.grid_h);
        for (std::uint32_t c = 0; c < grid.grid_w; ++c) {
            const std::uint32_t x0 = boundary(c, grid.image_w, grid.grid_w);
            const std::uint32_t x1 = boundary(c + 1, grid.image_w, grid.grid_w);
            std::size_t anomalous = 0;
            for (std::uint32_t y = y0; y < y1; ++y)
                for (std::uint32_t x = x0; x < x1; ++x)
                    anomalous += mask.at(y, x) != 0;
            const std::size_t total = std::size_t{y1 - y0} * (x1 - x0);
            labels[std::size_t{r} * grid.grid_w + c] = total > 0 && 2 * anomalous >= total;
        }
    }
    return labels;
}

std::optional<PatchLabels> patch_labels(const ImageRecord& record, const PatchGrid& grid)
{
    if (record.label == 0)
        return PatchLabels(grid.patches(), 0);
    if (!record.mask)
        return std::nullopt;
    return downsample_mask(*record.mask, grid);
}

RegionPrototypes region_prototypes(const MatrixF& patch_features, const PatchLabels& labels)
{
    if (patch_features.rows() != labels.size())
        throw_validation("patch feature count does not match label count");
    const std::size_t d = patch_features.cols();
    std::vector<double> sum_norm(d, 0.0), sum_anom(d, 0.0);
    std::size_t n_norm = 0, n_anom = 0;
    for (std::size_t u = 0; u < labels.size(); ++u) {
        const std::vector<double> f = normalized(patch_features.row(u));
        auto& sum = labels[u] ? sum_anom : sum_norm;
        for (std::size_t k = 0; k < d; ++k)
            sum[k] += f[k];
        ++(labels[u] ? n_anom : n_norm);
    }
    RegionPrototypes out;
    if (n_norm > 0)
        out.mu_norm = finish_mean(std::move(sum_norm), n_norm, "normal");
    if (n_anom > 0)
        out.mu_anom = finish_mean(std::move(sum_anom), n_anom, "anomalous");
    return out;
}

BuildResult build_bank(const std::vector<ImageRecord>& records, const PatchGrid& grid, std::string source_tag)
{
    if (records.empty())
        throw_validation("cannot build a memory bank from an empty record sequence");
    grid.validate();
    const std::size_t d = records.front().cls_feature.size();
    for (const auto& r : records)
        validate_record(r, grid, d);

    struct PerImage {
        std::vector<double> cls;
        RegionPrototypes protos;
    };
    std::vector<PerImage> per_image(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        const ImageRecord& r = records[i];
        per_image[i].cls = normalized(std::span<const float>(r.cls_feature));
        if (auto labels = patch_labels(r, grid))
            per_image[i].protos = region_prototypes(r.patch_features, *labels);
    }, grid.patches() * records.front().cls_feature.size());

    MemoryBank bank;
    bank.d = d;
    bank.source_tag = std::move(source_tag);
    std::vector<float> v_cls, v_pat;
    for (std::size_t i = 0; i < records.size(); ++i) {
        append_row(bank.k_cls, per_image[i].cls);
        const OneHot& cls_value = records[i].label ? kAnomalous : kNormal;
        v_cls.insert(v_cls.end(), cls_value.begin(), cls_value.end());
        if (const auto& mu = per_image[i].protos.mu_norm) {
            append_row(bank.k_pat, *mu);
            v_pat.insert(v_pat.end(), kNormal.begin(), kNormal.end());
        }
        if (const auto& mu = per_image[i].protos.mu_anom) {
            append_row(bank.k_pat, *mu);
            v_pat.insert(v_pat.end(), kAnomalous.begin(), kAnomalous.end());
        }
    }
    const auto reshape = [](std::vector<float>& flat, std::size_t cols) {
        MatrixF m(flat.size() / cols, cols);
        m.data() = std::move(flat);
        return m;
    };
    bank.k_cls = reshape(bank.k_cls.data(), d);
    bank.k_pat = reshape(bank.k_pat.data(), d);
    bank.v_cls = reshape(v_cls, 2);
    bank.v_pat = reshape(v_pat, 2);

    BuildResult result;
    if (bank.k_pat.rows() == 0)
        throw_validation("no image contributed a patch-level entry (anomalous images without masks only)");
    if (!bank.has_both_classes())
        result.warning = "memory bank lacks a normal or an anomalous entry at one level; "
                         "retrieval cannot discriminate";
    bank.validate();
    result.bank = std::move(bank);
    return result;
}

MemoryBank subsample_bank(const MemoryBank& bank, std::size_t n, std::uint64_t seed)
{
    const std::size_t total = bank.patch_entries();
    if (n < 1 || n > total)
        throw_validation("subsample size " + std::to_string(n) + " outside [1, " + std::to_string(total) + "]");
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    // Partial Fisher-Yates: the first n slots end up as a uniform sample.
    for (std::size_t i = 0; i < n; ++i)
        std::swap(order[i], order[i + uniform_index(rng, total - i)]);

    MemoryBank out = bank;
    out.k_pat = MatrixF(n, bank.d);
    out.v_pat = MatrixF(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        const auto src_k = bank.k_pat.row(order[i]);
        std::copy(src_k.begin(), src_k.end(), out.k_pat.row(i).begin());
        const auto src_v = bank.v_pat.row(order[i]);
        std::copy(src_v.begin(), src_v.end(), out.v_pat.row(i).begin());
    }
    return out;
}

} // namespace mrad::membank
