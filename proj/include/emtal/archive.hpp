#pragma once

// Checkpoint container:
//
//   magic       8 bytes  "EMTALv01"
//   header_len  u64 little-endian, multiple of 8
//   header      UTF-8 JSON, space padded to header_len bytes:
//                 { "<tensor>": {"dtype": "f32"|"f64", "shape": [..],
//                                "offset": <bytes into data>, "nbytes": <bytes>},
//                   ...,
//                   "__meta__": { ... } }
//   data        little-endian row-major scalars, every tensor 8-byte aligned,
//               section length rounded up to a multiple of 8

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "emtal/errors.hpp"
#include "emtal/linalg.hpp"

namespace emtal {

using Json = nlohmann::json;

inline constexpr std::string_view kArchiveMagic = "EMTALv01";
inline constexpr std::string_view kMetaKey = "__meta__";

enum class DType { f32, f64 };

std::string_view dtype_name(DType d);
std::size_t dtype_width(DType d);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// A named array as stored on disk. Values are held in double, which
/// represents every f32 exactly, so reading back is bit-exact.
struct Tensor {
  DType dtype = DType::f64;
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  std::int64_t numel() const;
  bool operator==(const Tensor&) const = default;
};

struct Archive {
  std::map<std::string, Tensor> tensors;
  Json meta = Json::object();

  /// Throws UsageError on an empty, reserved, or already present name.
  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return tensors.count(name) > 0; }
  /// Throws CorruptionError when the tensor is absent.
  const Tensor& at(const std::string& name) const;
};

std::string encode_archive(const Archive& archive);
Archive decode_archive(std::string_view bytes);

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

template <typename Derived>
Tensor to_tensor(const Eigen::MatrixBase<Derived>& m,
                 DType dtype = dtype_of<typename Derived::Scalar>()) {
  Tensor t;
  t.dtype = dtype;
  if (m.cols() == 1 && Derived::ColsAtCompileTime == 1) {
    t.shape = {static_cast<std::int64_t>(m.rows())};
  } else {
    t.shape = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  }
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) {
      const double v = static_cast<double>(m(r, c));
      t.values.push_back(dtype == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v);
    }
  return t;
}

template <typename T>
Mat<T> to_matrix(const Tensor& t) {
  if (t.shape.size() != 2) throw CorruptionError("expected a rank-2 tensor");
  Mat<T> m(t.shape[0], t.shape[1]);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.values[i]);
  return m;
}

template <typename T>
Vec<T> to_vector(const Tensor& t) {
  if (t.shape.size() != 1) throw CorruptionError("expected a rank-1 tensor");
  Vec<T> v(t.shape[0]);
  for (Index i = 0; i < v.size(); ++i) v(i) = static_cast<T>(t.values[i]);
  return v;
}

}  // namespace emtal
