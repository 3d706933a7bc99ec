#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "s4nd/tensor.hpp"

namespace s4nd {

inline constexpr char kCheckpointMagic[8] = {'S', '4', 'N', 'D', 'C', 'K', 'P', 'T'};
inline constexpr unsigned char kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Tensor<double> value;
};

// Layout, all integers little-endian:
//   "S4NDCKPT" | u8 version | u32 record count |
//   per record: u32 name length | name bytes | u32 rank | u64 extents[rank] |
//               f64 payload[product(extents)]
// The file is written to "<path>.partial" and renamed into place.
void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointRecord> records);
std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);

const CheckpointRecord* find_record(std::span<const CheckpointRecord> records, const std::string& name);

}  // namespace s4nd
