#include "dymn/serialize.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace dymn {

namespace {

constexpr char kMagic[8] = {'D', 'Y', 'M', 'N', 'W', 'T', 'S', '1'};

std::uint32_t crc_of(const std::vector<float>& v) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(v.data()), static_cast<uInt>(v.size() * 4)));
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

const ContainerArray* Container::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

void save_container(const std::string& path, const Container& c) {
  nlohmann::json manifest;
  manifest["format"] = "dymn-weights";
  manifest["version"] = 1;
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : c.arrays) {
    if (numel(a.shape) != static_cast<std::int64_t>(a.data.size()))
      throw IoError("container array '" + a.name + "' shape/data mismatch");
    nlohmann::json e;
    e["name"] = a.name;
    e["shape"] = a.shape;
    e["dtype"] = "f32";
    e["byte_offset"] = offset;
    e["byte_length"] = a.data.size() * 4;
    e["crc32"] = crc_of(a.data);
    arrays.push_back(e);
    offset += a.data.size() * 4;
  }
  manifest["arrays"] = arrays;
  manifest["meta"] = c.meta;

  const std::string text = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 8);
  write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : c.arrays)
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * 4));
  if (!os) throw IoError("write failed: " + path);
}

Container load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not a dymn weight container: " + path);
  const std::uint64_t mlen = read_u64_le(is);
  std::string text(mlen, '\0');
  is.read(text.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw IoError("truncated manifest: " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw IoError(std::string("bad manifest JSON: ") + e.what());
  }

  std::vector<char> blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Container c;
  if (manifest.contains("meta"))
    for (auto& [k, v] : manifest["meta"].items()) c.meta[k] = v.get<std::string>();

  std::uint64_t prev_end = 0;
  for (const auto& e : manifest["arrays"]) {
    ContainerArray a;
    a.name = e["name"].get<std::string>();
    a.shape = e["shape"].get<Shape>();
    const std::string dtype = e["dtype"].get<std::string>();
    if (dtype != "f32") throw IoError("unsupported dtype '" + dtype + "' in " + a.name);
    const std::uint64_t off = e["byte_offset"].get<std::uint64_t>();
    const std::uint64_t len = e["byte_length"].get<std::uint64_t>();
    if (off < prev_end) throw IoError("overlapping array offsets at " + a.name);
    prev_end = off + len;
    if (len != static_cast<std::uint64_t>(numel(a.shape)) * 4)
      throw IoError("byte_length inconsistent with shape at " + a.name);
    if (off + len > blob.size()) throw IoError("array extends past end of blob: " + a.name);
    a.data.resize(len / 4);
    std::memcpy(a.data.data(), blob.data() + off, len);
    const std::uint32_t want = e["crc32"].get<std::uint32_t>();
    if (crc_of(a.data) != want)
      throw IoError("checksum mismatch for array '" + a.name + "' in " + path);
    c.arrays.push_back(std::move(a));
  }
  return c;
}

Container store_to_container(const ParamStore<float>& store) {
  Container c;
  for (const auto& [name, e] : store) {
    ContainerArray a;
    a.name = name;
    a.shape = e.value.shape;
    a.data = e.value.data;
    c.arrays.push_back(std::move(a));
  }
  return c;
}

void container_to_store(const Container& c, ParamStore<float>& store) {
  std::size_t matched = 0;
  for (auto& [name, e] : store) {
    const ContainerArray* a = c.find(name);
    if (!a) throw IoError("container is missing parameter '" + name + "'");
    if (a->shape != e.value.shape)
      throw IoError("shape mismatch for '" + name + "': container " + shape_str(a->shape) +
                    " vs model " + shape_str(e.value.shape));
    e.value.data = a->data;
    ++matched;
  }
  if (matched != c.arrays.size())
    throw IoError("container has " + std::to_string(c.arrays.size()) +
                  " arrays but model expects " + std::to_string(matched));
}

}  // namespace dymn
