#include "percgan/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "percgan/errors.hpp"

namespace percgan {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32:
      return "F32";
    case torch::kFloat64:
      return "F64";
    case torch::kInt64:
      return "I64";
    case torch::kInt32:
      return "I32";
    case torch::kUInt8:
      return "U8";
    default:
      throw IoError("unsupported tensor dtype for serialization: " + std::string(c10::toString(t)));
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "F32") return torch::kFloat32;
  if (name == "F64") return torch::kFloat64;
  if (name == "I64") return torch::kInt64;
  if (name == "I32") return torch::kInt32;
  if (name == "U8") return torch::kUInt8;
  throw LoadError("unsupported dtype in tensor file: " + name);
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  nlohmann::ordered_json header;
  if (!file.metadata.empty()) {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : file.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::vector<torch::Tensor> payload;
  std::size_t offset = 0;
  for (const auto& [name, tensor] : file.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto bytes = static_cast<std::size_t>(t.numel()) * t.element_size();
    header[name] = {{"dtype", dtype_name(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
    payload.push_back(std::move(t));
  }
  std::string header_text = header.dump();
  // Pad so the data section starts 8-byte aligned.
  while (header_text.size() % 8 != 0) header_text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& t : payload) {
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open tensor file: " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw LoadError("truncated tensor file header: " + path.string());
  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size - sizeof(header_len)) {
    throw LoadError("corrupt tensor file (header length " + std::to_string(header_len) + "): " + path.string());
  }
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt tensor file header in " + path.string() + ": " + e.what());
  }
  const std::uint64_t data_start = sizeof(header_len) + header_len;
  const std::uint64_t data_size = file_size - data_start;

  TensorFile result;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) result.metadata[k] = v.get<std::string>();
      continue;
    }
    try {
      const auto dtype = dtype_from_name(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::array<std::uint64_t, 2>>();
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      const auto bytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
      if (offsets[1] < offsets[0] || offsets[1] - offsets[0] != bytes || offsets[1] > data_size) {
        throw LoadError("corrupt tensor file: bad offsets for '" + name + "' in " + path.string());
      }
      in.seekg(static_cast<std::streamoff>(data_start + offsets[0]));
      in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
      if (!in) throw LoadError("corrupt tensor file: short read for '" + name + "' in " + path.string());
      result.tensors.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("corrupt tensor file entry '" + name + "' in " + path.string() + ": " + e.what());
    }
  }
  return result;
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    static constexpr char kDigits[] = "0123456789abcdef";
    hex << kDigits[digest[i] >> 4] << kDigits[digest[i] & 0xF];
  }
  return hex.str();
}

std::string tensor_digest(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU).contiguous();
  return sha256_hex(std::string_view(static_cast<const char*>(c.data_ptr()),
                                     static_cast<std::size_t>(c.numel()) * c.element_size()));
}

}  // namespace percgan
