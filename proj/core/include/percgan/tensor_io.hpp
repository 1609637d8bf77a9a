#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

namespace percgan {

/// Name-keyed tensor container stored in the safetensors layout:
/// an 8-byte little-endian header length, a JSON header, then raw
/// little-endian tensor bytes. Keys are written in sorted order so equal
/// contents always produce equal files.
struct TensorFile {
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);

/// Throws LoadError on truncated, malformed or unsupported content.
TensorFile read_tensor_file(const std::filesystem::path& path);

/// Hex SHA-256 of the raw bytes of a tensor (contiguous, CPU).
std::string tensor_digest(const torch::Tensor& t);

/// Hex SHA-256 of an arbitrary string.
std::string sha256_hex(std::string_view data);

}  // namespace percgan
