#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "emtal/model.hpp"

namespace testing {

// Fresh per-process scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("emtal_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename T>
emtal::Mat<T> random_mat(emtal::Index r, emtal::Index c, std::uint64_t seed, double sd = 1.0) {
  emtal::Rng rng(seed);
  return emtal::gaussian_matrix<T>(r, c, sd, rng);
}

}  // namespace testing
