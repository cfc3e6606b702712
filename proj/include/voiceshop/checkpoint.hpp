#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "voiceshop/tensor.hpp"

namespace vs::num {

// Binary parameter container:
//   "VSCK" | u32 version | { u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[numel] }*
// All integers and values little-endian; entries run to end of file.
inline constexpr char kCheckpointMagic[4] = {'V', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

void save_checkpoint(const std::filesystem::path& path, const ParamList& params);
std::map<std::string, StoredTensor> read_checkpoint(const std::filesystem::path& path);

// Copies stored values into the given parameters by name; every parameter must
// be present with an identical shape (ContractError otherwise).
void load_checkpoint(const std::filesystem::path& path, const ParamList& params);

}  // namespace vs::num
