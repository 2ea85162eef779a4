#include "mrad/io.hpp"

#include "mrad/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mrad::io {

namespace {

static_assert(std::endian::native == std::endian::little, "pack I/O assumes a little-endian host");

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void f32(float v) { raw(&v, 4); }

    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string file)
        : bytes_(bytes), file_(std::move(file))
    {
    }

    void set_context(std::string ctx) { context_ = std::move(ctx); }

    void require(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n)
            throw_validation(file_ + ": truncated file" + (context_.empty() ? "" : " in " + context_));
    }

    void raw(void* p, std::size_t n)
    {
        require(n);
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    std::uint16_t u16() { std::uint16_t v; raw(&v, 2); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }

    void floats(float* dst, std::size_t n) { raw(dst, n * sizeof(float)); }

    std::string string(std::size_t n)
    {
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    void expect_magic(const char (&magic)[8], const char* kind)
    {
        char got[8];
        if (bytes_.size() < 8 || (raw(got, 8), std::memcmp(got, magic, 8) != 0))
            throw_validation(file_ + ": bad magic, not " + std::string(kind));
    }

    void expect_end()
    {
        if (pos_ != bytes_.size())
            throw_validation(file_ + ": " + std::to_string(bytes_.size() - pos_)
                             + " trailing bytes disagree with declared sizes");
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::string& bytes_;
    std::string file_;
    std::string context_;
    std::size_t pos_ = 0;
};

std::size_t mask_row_bytes(std::uint32_t width) { return (std::size_t{width} + 7) / 8; }

void put_mask(ByteWriter& w, const Bitmap& mask)
{
    const std::size_t row_bytes = mask_row_bytes(mask.width);
    std::vector<std::uint8_t> row(row_bytes);
    for (std::uint32_t r = 0; r < mask.height; ++r) {
        std::fill(row.begin(), row.end(), 0);
        for (std::uint32_t c = 0; c < mask.width; ++c)
            if (mask.at(r, c))
                row[c / 8] |= static_cast<std::uint8_t>(0x80u >> (c % 8));
        w.raw(row.data(), row_bytes);
    }
}

Bitmap get_mask(ByteReader& in, std::uint32_t h, std::uint32_t w)
{
    in.require(mask_row_bytes(w) * h);
    Bitmap mask(h, w);
    std::vector<std::uint8_t> row(mask_row_bytes(w));
    for (std::uint32_t r = 0; r < h; ++r) {
        in.raw(row.data(), row.size());
        for (std::uint32_t c = 0; c < w; ++c)
            mask.at(r, c) = (row[c / 8] >> (7 - c % 8)) & 1u;
    }
    return mask;
}

void put_matrix(ByteWriter& w, const MatrixF& m)
{
    w.raw(m.data().data(), m.data().size() * sizeof(float));
}

MatrixF get_matrix(ByteReader& in, std::size_t rows, std::size_t cols)
{
    in.require(rows * cols * sizeof(float));
    MatrixF m(rows, cols);
    in.floats(m.data().data(), rows * cols);
    return m;
}

std::uint32_t checked_u32(std::size_t v, const char* what)
{
    if (v > 0xFFFFFFFFu)
        throw_validation(std::string(what) + " does not fit in u32");
    return static_cast<std::uint32_t>(v);
}

} // namespace

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw_io("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad())
        throw_io("error reading " + path.string());
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes)
{
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw_io("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw_io("error writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw_io("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_feature_pack(const std::vector<ImageRecord>& records, const PatchGrid& grid, std::size_t d,
                        const std::filesystem::path& path)
{
    grid.validate();
    if (d == 0)
        throw_validation("feature dimension must be positive");
    for (const auto& r : records)
        validate_record(r, grid, d);

    ByteWriter w;
    w.raw(kPackMagic, 8);
    w.u32(kPackVersion);
    w.u32(checked_u32(d, "d"));
    w.u32(grid.grid_h);
    w.u32(grid.grid_w);
    w.u32(grid.image_h);
    w.u32(grid.image_w);
    w.u32(checked_u32(records.size(), "record count"));
    for (const auto& r : records) {
        w.u16(static_cast<std::uint16_t>(r.id.size()));
        w.raw(r.id.data(), r.id.size());
        w.u8(r.label);
        w.u8(r.mask ? 1 : 0);
        for (float x : r.cls_feature)
            w.f32(x);
        put_matrix(w, r.patch_features);
        if (r.mask)
            put_mask(w, *r.mask);
    }
    write_file(path, w.take());
}

FeaturePack read_feature_pack(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    ByteReader in(bytes, path.string());
    in.expect_magic(kPackMagic, "a feature pack");
    in.set_context("header");
    const std::uint32_t version = in.u32();
    if (version != kPackVersion)
        throw_validation(path.string() + ": unsupported pack version " + std::to_string(version));

    FeaturePack pack;
    pack.d = in.u32();
    pack.grid.grid_h = in.u32();
    pack.grid.grid_w = in.u32();
    pack.grid.image_h = in.u32();
    pack.grid.image_w = in.u32();
    const std::uint32_t count = in.u32();
    pack.grid.validate();
    if (pack.d == 0)
        throw_validation(path.string() + ": feature dimension is zero");

    // A corrupt count must not drive the allocation.
    const std::size_t min_record = 2 + 2 + 4 * pack.d * (1 + pack.grid.patches());
    pack.records.reserve(std::min<std::size_t>(count, in.remaining() / min_record + 1));
    for (std::uint32_t i = 0; i < count; ++i) {
        in.set_context("record " + std::to_string(i));
        ImageRecord r;
        r.id = in.string(in.u16());
        r.label = in.u8();
        const std::uint8_t has_mask = in.u8();
        if (has_mask > 1)
            throw_validation(path.string() + ": record " + std::to_string(i) + " has invalid mask flag");
        r.cls_feature.resize(pack.d);
        in.floats(r.cls_feature.data(), pack.d);
        r.patch_features = get_matrix(in, pack.grid.patches(), pack.d);
        if (has_mask)
            r.mask = get_mask(in, pack.grid.image_h, pack.grid.image_w);
        validate_record(r, pack.grid, pack.d);
        pack.records.push_back(std::move(r));
    }
    in.expect_end();
    return pack;
}

void save_bank(const MemoryBank& bank, const std::filesystem::path& path)
{
    bank.validate();
    if (bank.source_tag.size() > 65535)
        throw_validation("bank source tag longer than 65535 bytes");
    ByteWriter w;
    w.raw(kBankMagic, 8);
    w.u32(checked_u32(bank.d, "d"));
    w.u32(checked_u32(bank.image_entries(), "N_c"));
    w.u32(checked_u32(bank.patch_entries(), "N_p"));
    w.u16(static_cast<std::uint16_t>(bank.source_tag.size()));
    w.raw(bank.source_tag.data(), bank.source_tag.size());
    put_matrix(w, bank.k_cls);
    put_matrix(w, bank.v_cls);
    put_matrix(w, bank.k_pat);
    put_matrix(w, bank.v_pat);
    write_file(path, w.take());
}

MemoryBank load_bank(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    ByteReader in(bytes, path.string());
    in.expect_magic(kBankMagic, "a memory bank");
    in.set_context("header");
    MemoryBank bank;
    bank.d = in.u32();
    const std::uint32_t n_c = in.u32();
    const std::uint32_t n_p = in.u32();
    bank.source_tag = in.string(in.u16());
    const std::size_t payload = 4 * (std::size_t{n_c} + n_p) * (bank.d + 2);
    if (in.remaining() != payload)
        throw_validation(path.string() + ": declared sizes need " + std::to_string(payload)
                         + " payload bytes, file has " + std::to_string(in.remaining()));
    in.set_context("payload");
    bank.k_cls = get_matrix(in, n_c, bank.d);
    bank.v_cls = get_matrix(in, n_c, 2);
    bank.k_pat = get_matrix(in, n_p, bank.d);
    bank.v_pat = get_matrix(in, n_p, 2);
    in.expect_end();
    bank.validate();
    return bank;
}

void save_weights(const MetricWeights& weights, const std::filesystem::path& path)
{
    weights.validate();
    ByteWriter w;
    w.raw(kWeightsMagic, 8);
    w.u32(checked_u32(weights.dim(), "d"));
    for (const MatrixD* m : {&weights.wq_cls, &weights.wk_cls, &weights.wq_seg, &weights.wk_seg})
        for (double x : m->data())
            w.f32(static_cast<float>(x));
    write_file(path, w.take());
}

MetricWeights load_weights(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    ByteReader in(bytes, path.string());
    in.expect_magic(kWeightsMagic, "a metric weights file");
    in.set_context("header");
    const std::uint32_t d = in.u32();
    const std::size_t payload = 4 * 4 * std::size_t{d} * d;
    if (d == 0 || in.remaining() != payload)
        throw_validation(path.string() + ": declared dimension disagrees with file length");
    in.set_context("payload");
    MetricWeights w;
    for (MatrixD* m : {&w.wq_cls, &w.wk_cls, &w.wq_seg, &w.wk_seg}) {
        const MatrixF f = get_matrix(in, d, d);
        *m = MatrixD(d, d);
        for (std::size_t i = 0; i < f.data().size(); ++i)
            m->data()[i] = f.data()[i];
    }
    in.expect_end();
    w.validate();
    return w;
}

void save_map(const AnomalyMap& map, const std::filesystem::path& path)
{
    if (map.scores.size() != std::size_t{map.height} * map.width)
        throw_validation("anomaly map size mismatch");
    ByteWriter w;
    w.u32(map.height);
    w.u32(map.width);
    w.raw(map.scores.data(), map.scores.size() * sizeof(float));
    write_file(path, w.take());
}

AnomalyMap load_map(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    ByteReader in(bytes, path.string());
    in.set_context("header");
    const std::uint32_t h = in.u32();
    const std::uint32_t w = in.u32();
    if (in.remaining() != 4 * std::size_t{h} * w)
        throw_validation(path.string() + ": map size disagrees with file length");
    AnomalyMap map(h, w);
    in.floats(map.scores.data(), map.scores.size());
    return map;
}

} // namespace mrad::io
