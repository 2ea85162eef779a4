#pragma once

#include "mrad/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mrad::io {

// Feature pack (.fpk), little-endian:
//   magic "MRADFP01"
//   u32 version, d, grid_h, grid_w, image_h, image_w, record count
//   per record:
//     u16 id length, id bytes (UTF-8)
//     u8 label, u8 mask present
//     d x f32 class feature
//     u*d x f32 patch features (grid row-major)
//     mask bits, row-major, MSB first, each row padded to a byte boundary
inline constexpr char kPackMagic[8] = {'M', 'R', 'A', 'D', 'F', 'P', '0', '1'};
inline constexpr char kBankMagic[8] = {'M', 'R', 'A', 'D', 'B', 'K', '0', '1'};
inline constexpr char kWeightsMagic[8] = {'M', 'R', 'A', 'D', 'W', 'T', '0', '1'};
inline constexpr std::uint32_t kPackVersion = 1;

struct FeaturePack {
    std::vector<ImageRecord> records;
    PatchGrid grid;
    std::size_t d = 0;
};

void write_feature_pack(const std::vector<ImageRecord>& records, const PatchGrid& grid, std::size_t d,
                        const std::filesystem::path& path);
FeaturePack read_feature_pack(const std::filesystem::path& path);

// Memory bank (.mrb): magic, u32 d, u32 N_c, u32 N_p, u16 tag length, tag
// bytes, then K_cls, V_cls, K_pat, V_pat as f32.
void save_bank(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_bank(const std::filesystem::path& path);

// Metric weights (.mrw): magic, u32 d, then Wq_cls, Wk_cls, Wq_seg, Wk_seg as
// d*d f32 each. Saving rounds to f32, so load(save(w)) == w whenever w is
// f32-representable (identity, anything loaded, anything returned by train).
void save_weights(const MetricWeights& weights, const std::filesystem::path& path);
MetricWeights load_weights(const std::filesystem::path& path);

// Anomaly map (.amap): u32 H, u32 W, then H*W f32 row-major.
void save_map(const AnomalyMap& map, const std::filesystem::path& path);
AnomalyMap load_map(const std::filesystem::path& path);

// Whole-file helpers. write_file goes through a temp file and a rename.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

} // namespace mrad::io
