#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mrad {

// Dense row-major matrix. Features are stored as float, every reduction
// over them is carried out in double.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill)
    {
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    static Matrix identity(std::size_t n)
    {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            m(i, i) = T{1};
        return m;
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// Two-channel label: channel 0 = normal, channel 1 = anomalous.
using OneHot = std::array<float, 2>;
inline constexpr OneHot kNormal{1.0f, 0.0f};
inline constexpr OneHot kAnomalous{0.0f, 1.0f};

struct PatchGrid {
    std::uint32_t grid_h = 0;
    std::uint32_t grid_w = 0;
    std::uint32_t image_h = 0;
    std::uint32_t image_w = 0;

    std::size_t patches() const noexcept { return std::size_t{grid_h} * grid_w; }
    std::size_t pixels() const noexcept { return std::size_t{image_h} * image_w; }

    // Throws a validation error unless every extent is positive and the image
    // is at least as large as the grid.
    void validate() const;

    bool operator==(const PatchGrid&) const = default;
};

// Binary image, one byte per pixel (0 or 1). Bit packing happens only on disk.
struct Bitmap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> pixels;

    Bitmap() = default;
    Bitmap(std::uint32_t h, std::uint32_t w, std::uint8_t fill = 0)
        : height(h), width(w), pixels(std::size_t{h} * w, fill)
    {
    }

    std::uint8_t at(std::uint32_t r, std::uint32_t c) const { return pixels[std::size_t{r} * width + c]; }
    std::uint8_t& at(std::uint32_t r, std::uint32_t c) { return pixels[std::size_t{r} * width + c]; }
    bool any() const;

    bool operator==(const Bitmap&) const = default;
};

struct ImageRecord {
    std::string id;
    std::uint8_t label = 0; // 0 normal, 1 anomalous
    std::vector<float> cls_feature;
    MatrixF patch_features; // u x d, row-major grid order
    std::optional<Bitmap> mask;

    bool operator==(const ImageRecord&) const = default;
};

// Checks dimensions against (grid, d), finiteness and the label/mask invariant.
void validate_record(const ImageRecord& record, const PatchGrid& grid, std::size_t d);

struct MemoryBank {
    MatrixF k_cls; // N_c x d, unit rows
    MatrixF v_cls; // N_c x 2, one-hot rows
    MatrixF k_pat; // N_p x d
    MatrixF v_pat; // N_p x 2
    std::size_t d = 0;
    std::string source_tag;

    std::size_t image_entries() const noexcept { return k_cls.rows(); }
    std::size_t patch_entries() const noexcept { return k_pat.rows(); }

    // True when both levels hold at least one normal and one anomalous entry.
    bool has_both_classes() const;

    // Shape, unit-norm keys (1e-5) and one-hot values.
    void validate() const;

    bool operator==(const MemoryBank&) const = default;
};

// Linear maps inserted on the query and key side of each retrieval head.
// Kept in double for training; persisted as f32.
struct MetricWeights {
    MatrixD wq_cls;
    MatrixD wk_cls;
    MatrixD wq_seg;
    MatrixD wk_seg;

    static MetricWeights identity(std::size_t d);
    std::size_t dim() const noexcept { return wq_cls.rows(); }
    void validate() const;

    bool operator==(const MetricWeights&) const = default;
};

struct RetrievalParams {
    double tau = 1.0;
    double rho_cls = 0.05;
    double rho_seg = 0.20;
    double topk_fraction = 0.01;

    void validate() const;
};

struct AnomalyMap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<float> scores;

    AnomalyMap() = default;
    AnomalyMap(std::uint32_t h, std::uint32_t w, float fill = 0.0f)
        : height(h), width(w), scores(std::size_t{h} * w, fill)
    {
    }

    float at(std::uint32_t r, std::uint32_t c) const { return scores[std::size_t{r} * width + c]; }
    float& at(std::uint32_t r, std::uint32_t c) { return scores[std::size_t{r} * width + c]; }

    bool operator==(const AnomalyMap&) const = default;
};

// Dataset-level retrieval statistics. Anything computed over an empty query
// set is absent rather than zero.
struct DatasetStats {
    std::optional<double> aq_ak;
    std::optional<double> nq_ak;
    std::optional<double> aq_nk;
    std::optional<double> nq_nk;
    std::optional<double> margin_a; // AqAk - NqAk
    std::optional<double> margin_n; // NqNk - AqNk
    std::size_t anomalous_queries = 0;
    std::size_t normal_queries = 0;
};

// l2-normalizes into double. Throws a numerical error for a (near) zero vector.
std::vector<double> normalized(std::span<const float> v);
std::vector<double> normalized(std::span<const double> v);

} // namespace mrad
