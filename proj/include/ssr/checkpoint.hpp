// Binary parameter container.
//
// Layout: magic "SSRCKPT1", then a payload of
//   u32 entry_count,
//   per entry: u32 name_len, name bytes (UTF-8), u32 rank, u32 extents[rank],
//              row-major float32 values (little-endian),
// then u32 CRC-32 (IEEE) of the payload. Round-trips are bit-exact.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ssr/autodiff.hpp"

namespace ssr {

std::uint32_t crc32_ieee(const unsigned char* data, std::size_t len);

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Mat<float>*>>& entries);

std::map<std::string, Mat<float>> load_checkpoint(const std::string& path);

// Fills existing named parameters (shape-checked) from a checkpoint file.
void load_checkpoint_into(const std::string& path, const std::vector<NamedParam<float>>& entries);

// Convenience over a model's params() list.
template <class Model>
void save_model(const std::string& path, Model& model) {
  std::vector<std::pair<std::string, const Mat<float>*>> entries;
  for (auto& [name, mat] : model.params()) entries.emplace_back(name, mat);
  save_checkpoint(path, entries);
}

template <class Model>
void load_model(const std::string& path, Model& model) {
  load_checkpoint_into(path, model.params());
}

}  // namespace ssr
