#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "percgan/refnet.hpp"

namespace percgan::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("percgan_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// K=2 toy trunk: conv3(3->8) relu conv3(8->8) relu maxpool conv3(8->8) relu.
inline ArchDescriptor toy_arch() {
  return ArchDescriptor::parse(
      "source toy2\n"
      "conv 3 8 kernel=3 stride=1\nrelu\n"
      "conv 8 8 kernel=3 stride=1\nrelu\n"
      "maxpool kernel=2 stride=2\n"
      "conv 8 8 kernel=3 stride=1\nrelu\n");
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

}  // namespace percgan::testing
