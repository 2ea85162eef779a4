#include "mrad/types.hpp"

#include "mrad/error.hpp"

#include <algorithm>
#include <cmath>

namespace mrad {

namespace {

template <typename T>
std::vector<double> normalized_impl(std::span<const T> v)
{
    double sq = 0.0;
    for (T x : v)
        sq += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-12) || !std::isfinite(norm))
        throw_numerical("cannot normalize a zero or non-finite vector");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<double>(v[i]) / norm;
    return out;
}

bool is_one_hot(std::span<const float> row)
{
    return (row[0] == 1.0f && row[1] == 0.0f) || (row[0] == 0.0f && row[1] == 1.0f);
}

void check_unit_rows(const MatrixF& k, const char* name)
{
    for (std::size_t r = 0; r < k.rows(); ++r) {
        double sq = 0.0;
        for (float x : k.row(r))
            sq += static_cast<double>(x) * x;
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-5)
            throw_validation(std::string(name) + " row " + std::to_string(r) + " is not unit norm");
    }
}

void check_square(const MatrixD& m, std::size_t d, const char* name)
{
    if (m.rows() != d || m.cols() != d)
        throw_validation(std::string(name) + " must be " + std::to_string(d) + "x" + std::to_string(d));
    for (double x : m.data())
        if (!std::isfinite(x))
            throw_validation(std::string(name) + " has non-finite entries");
}

} // namespace

std::vector<double> normalized(std::span<const float> v) { return normalized_impl(v); }
std::vector<double> normalized(std::span<const double> v) { return normalized_impl(v); }

void PatchGrid::validate() const
{
    if (grid_h == 0 || grid_w == 0 || image_h == 0 || image_w == 0)
        throw_validation("patch grid extents must be positive");
    if (image_h < grid_h || image_w < grid_w)
        throw_validation("image must be at least as large as the patch grid");
}

bool Bitmap::any() const
{
    return std::any_of(pixels.begin(), pixels.end(), [](std::uint8_t p) { return p != 0; });
}

void validate_record(const ImageRecord& record, const PatchGrid& grid, std::size_t d)
{
    const auto where = [&] { return "record '" + record.id + "': "; };
    if (record.id.size() > 65535)
        throw_validation("record id longer than 65535 bytes");
    if (record.label > 1)
        throw_validation(where() + "label must be 0 or 1");
    if (record.cls_feature.size() != d)
        throw_validation(where() + "class feature has dimension " + std::to_string(record.cls_feature.size())
                         + ", expected " + std::to_string(d));
    if (record.patch_features.rows() != grid.patches() || record.patch_features.cols() != d)
        throw_validation(where() + "patch features do not match grid " + std::to_string(grid.grid_h) + "x"
                         + std::to_string(grid.grid_w) + " and d=" + std::to_string(d));
    const auto finite = [](float x) { return std::isfinite(x); };
    if (!std::all_of(record.cls_feature.begin(), record.cls_feature.end(), finite)
        || !std::all_of(record.patch_features.data().begin(), record.patch_features.data().end(), finite))
        throw_validation(where() + "non-finite feature values");
    if (record.mask) {
        if (record.mask->height != grid.image_h || record.mask->width != grid.image_w
            || record.mask->pixels.size() != grid.pixels())
            throw_validation(where() + "mask size does not match image size");
        if (record.mask->any() && record.label != 1)
            throw_validation(where() + "mask has anomalous pixels but label is normal");
    }
}

bool MemoryBank::has_both_classes() const
{
    const auto both = [](const MatrixF& v) {
        bool normal = false, anomalous = false;
        for (std::size_t r = 0; r < v.rows(); ++r)
            (v(r, 1) == 1.0f ? anomalous : normal) = true;
        return normal && anomalous;
    };
    return both(v_cls) && both(v_pat);
}

void MemoryBank::validate() const
{
    if (d == 0)
        throw_validation("memory bank dimension must be positive");
    if (k_cls.rows() == 0 || k_pat.rows() == 0)
        throw_validation("memory bank needs at least one entry at each level");
    if (k_cls.cols() != d || k_pat.cols() != d)
        throw_validation("memory bank key width does not match d");
    if (v_cls.rows() != k_cls.rows() || v_pat.rows() != k_pat.rows() || v_cls.cols() != 2 || v_pat.cols() != 2)
        throw_validation("memory bank value matrices do not match keys");
    check_unit_rows(k_cls, "K_cls");
    check_unit_rows(k_pat, "K_pat");
    for (const MatrixF* v : {&v_cls, &v_pat})
        for (std::size_t r = 0; r < v->rows(); ++r)
            if (!is_one_hot(v->row(r)))
                throw_validation("memory bank value row " + std::to_string(r) + " is not one-hot");
}

MetricWeights MetricWeights::identity(std::size_t d)
{
    return {MatrixD::identity(d), MatrixD::identity(d), MatrixD::identity(d), MatrixD::identity(d)};
}

void MetricWeights::validate() const
{
    const std::size_t d = dim();
    if (d == 0)
        throw_validation("metric weights are empty");
    check_square(wq_cls, d, "Wq_cls");
    check_square(wk_cls, d, "Wk_cls");
    check_square(wq_seg, d, "Wq_seg");
    check_square(wk_seg, d, "Wk_seg");
}

void RetrievalParams::validate() const
{
    if (!(tau > 0.0) || !std::isfinite(tau))
        throw_validation("tau must be positive");
    if (!(rho_cls >= 0.0 && rho_cls < 1.0) || !(rho_seg >= 0.0 && rho_seg < 1.0))
        throw_validation("rho must lie in [0, 1)");
    if (!(topk_fraction > 0.0 && topk_fraction <= 1.0))
        throw_validation("top-k fraction must lie in (0, 1]");
}

} // namespace mrad
