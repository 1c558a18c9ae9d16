#pragma once

// Weight container: a JSON manifest followed by a raw blob of little-endian
// float32 arrays, row major, concatenated. Layout on disk:
//
//   bytes 0..7   magic "DYMNWTS1"
//   bytes 8..15  manifest length (u64, little endian)
//   manifest     UTF-8 JSON: {"arrays":[{name,shape,dtype,byte_offset,
//                byte_length,crc32}...], "meta":{...}}
//   blob         array data, offsets relative to blob start
//
// Per-array CRC32 checksums are verified on load; offsets must not overlap.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dymn/params.hpp"
#include "dymn/tensor.hpp"

namespace dymn {

struct ContainerArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Container {
  std::vector<ContainerArray> arrays;
  std::map<std::string, std::string> meta;

  const ContainerArray* find(const std::string& name) const;
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);  // throws IoError on corruption

Container store_to_container(const ParamStore<float>& store);
void container_to_store(const Container& c, ParamStore<float>& store);

}  // namespace dymn
