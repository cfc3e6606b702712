#include "voiceshop/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "voiceshop/errors.hpp"

namespace vs::num {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamList& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
}

std::map<std::string, StoredTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ContractError("not a checkpoint (bad magic): " + path.string());
  std::uint32_t version = 0;
  if (!get(is, version) || version != kCheckpointVersion)
    throw ContractError("unsupported checkpoint version " + std::to_string(version));
  std::map<std::string, StoredTensor> out;
  std::uint32_t name_len = 0;
  while (get(is, name_len)) {
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), name_len) || !get(is, rank)) throw ContractError("truncated checkpoint entry");
    StoredTensor st;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint64_t d = 0;
      if (!get(is, d)) throw ContractError("truncated checkpoint shape");
      st.shape.push_back(d);
    }
    st.values.resize(shape_numel(st.shape));
    if (!is.read(reinterpret_cast<char*>(st.values.data()), static_cast<std::streamsize>(st.values.size() * sizeof(double))))
      throw ContractError("truncated checkpoint values for " + name);
    out.emplace(std::move(name), std::move(st));
  }
  return out;
}

void load_checkpoint(const std::filesystem::path& path, const ParamList& params) {
  auto stored = read_checkpoint(path);
  for (const auto& [name, t] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ContractError("checkpoint " + path.string() + " lacks parameter " + name);
    if (it->second.shape != t.shape())
      throw ContractError("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape) +
                          ", expected " + shape_str(t.shape()));
    t.node()->value = it->second.values;
  }
}

}  // namespace vs::num
