#include "emtal/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace emtal {

static_assert(std::endian::native == std::endian::little, "little-endian hosts only");

namespace {

std::uint64_t round8(std::uint64_t n) { return (n + 7) & ~std::uint64_t{7}; }

DType parse_dtype(const Json& j) {
  if (!j.is_string()) throw CorruptionError("dtype must be a string");
  const auto s = j.get<std::string>();
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw CorruptionError("unknown dtype '" + s + "'");
}

}  // namespace

std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

std::size_t dtype_width(DType d) { return d == DType::f32 ? 4 : 8; }

std::int64_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

void Archive::add(const std::string& name, Tensor t) {
  if (name.empty()) throw UsageError("tensor name must be nonempty");
  if (name == kMetaKey) throw UsageError("tensor name '__meta__' is reserved");
  if (static_cast<std::int64_t>(t.values.size()) != t.numel())
    throw DimensionError("tensor '" + name + "': shape does not match value count");
  if (!tensors.emplace(name, std::move(t)).second)
    throw UsageError("duplicate tensor name '" + name + "'");
}

const Tensor& Archive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CorruptionError("archive is missing tensor '" + name + "'");
  return it->second;
}

std::string encode_archive(const Archive& archive) {
  if (!archive.meta.is_object()) throw UsageError("archive meta must be a JSON object");
  Json header = Json::object();
  std::uint64_t cursor = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (name.empty() || name == kMetaKey) throw UsageError("invalid tensor name '" + name + "'");
    if (static_cast<std::int64_t>(t.values.size()) != t.numel())
      throw DimensionError("tensor '" + name + "': shape does not match value count");
    const std::uint64_t nbytes = t.values.size() * dtype_width(t.dtype);
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"offset", cursor},
                    {"nbytes", nbytes}};
    cursor = round8(cursor + nbytes);
  }
  header[std::string(kMetaKey)] = archive.meta;

  std::string header_text = header.dump();
  header_text.resize(round8(header_text.size()), ' ');
  const std::uint64_t header_len = header_text.size();

  std::string out;
  out.reserve(16 + header_len + cursor);
  out.append(kArchiveMagic);
  char len_bytes[8];
  std::memcpy(len_bytes, &header_len, 8);
  out.append(len_bytes, 8);
  out.append(header_text);

  const std::size_t data_start = out.size();
  out.resize(data_start + cursor, '\0');
  for (const auto& [name, t] : archive.tensors) {
    const auto offset = header[name]["offset"].get<std::uint64_t>();
    char* dst = out.data() + data_start + offset;
    if (t.dtype == DType::f32) {
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        const auto v = static_cast<float>(t.values[i]);
        std::memcpy(dst + 4 * i, &v, 4);
      }
    } else {
      std::memcpy(dst, t.values.data(), 8 * t.values.size());
    }
  }
  return out;
}

Archive decode_archive(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != kArchiveMagic)
    throw FormatError("not an EMTAL archive (bad magic)");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (header_len % 8 != 0) throw CorruptionError("header length is not 8-byte aligned");
  if (header_len > bytes.size() - 16) throw CorruptionError("header extends past end of file");

  Json header;
  try {
    header = Json::parse(bytes.substr(16, header_len));
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string("archive header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("archive header must be a JSON object");

  const std::string_view data = bytes.substr(16 + header_len);
  Archive archive;
  struct Range {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;

  for (const auto& [name, entry] : header.items()) {
    if (name == kMetaKey) {
      if (!entry.is_object()) throw CorruptionError("archive meta must be an object");
      archive.meta = entry;
      continue;
    }
    if (!entry.is_object()) throw CorruptionError("entry '" + name + "' must be an object");
    Tensor t;
    std::uint64_t offset = 0, nbytes = 0;
    try {
      t.dtype = parse_dtype(entry.at("dtype"));
      for (const auto& d : entry.at("shape")) {
        const auto dim = d.get<std::int64_t>();
        if (dim < 0) throw CorruptionError("negative dimension in '" + name + "'");
        t.shape.push_back(dim);
      }
      offset = entry.at("offset").get<std::uint64_t>();
      nbytes = entry.at("nbytes").get<std::uint64_t>();
    } catch (const Json::exception& e) {
      throw CorruptionError("malformed entry '" + name + "': " + e.what());
    }
    if (offset % 8 != 0) throw CorruptionError("tensor '" + name + "' is not 8-byte aligned");
    const auto width = dtype_width(t.dtype);
    if (static_cast<std::uint64_t>(t.numel()) * width != nbytes)
      throw CorruptionError("tensor '" + name + "': shape and byte length disagree");
    if (offset > data.size() || nbytes > data.size() - offset)
      throw CorruptionError("tensor '" + name + "' lies outside the data section");

    t.values.resize(static_cast<std::size_t>(t.numel()));
    const char* src = data.data() + offset;
    if (t.dtype == DType::f32) {
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        float v;
        std::memcpy(&v, src + 4 * i, 4);
        t.values[i] = v;
      }
    } else {
      std::memcpy(t.values.data(), src, nbytes);
    }
    ranges.push_back({offset, offset + nbytes, name});
    archive.tensors.emplace(name, std::move(t));
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const Range& a, const Range& b) { return a.begin < b.begin; });
  std::uint64_t data_end = 0;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (i > 0 && ranges[i].begin < ranges[i - 1].end)
      throw CorruptionError("tensors '" + ranges[i - 1].name + "' and '" + ranges[i].name +
                            "' overlap");
    data_end = std::max(data_end, ranges[i].end);
  }
  if (round8(data_end) != data.size())
    throw CorruptionError("data section length " + std::to_string(data.size()) +
                          " does not match header (expected " +
                          std::to_string(round8(data_end)) + ")");
  return archive;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed for '" + path.string() + "'");
  return std::move(ss).str();
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  write_file_atomic(path, encode_archive(archive));
}

Archive read_archive(const std::filesystem::path& path) { return decode_archive(read_file(path)); }

}  // namespace emtal
