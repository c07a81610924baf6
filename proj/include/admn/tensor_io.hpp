#pragma once

// "ADMT" tensor files: magic "ADMT", version byte 0x01, u8 ndim, ndim
// little-endian u32 dims, then the row-major little-endian f64 payload.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "admn/autodiff.hpp"

namespace admn {

inline constexpr char kTensorMagic[4] = {'A', 'D', 'M', 'T'};
inline constexpr unsigned char kTensorVersion = 0x01;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes);

struct NamedTensor {
  std::string name;
  Tensor tensor;
  std::string role;
};

// Checkpoint directory: one "<name>.admt" per tensor plus manifest.txt with
// lines "name shape role".
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& dir);
// Copies checkpoint values into matching tensors (by name); every target must be present.
void restore_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor>& targets);

// FNV-1a over the raw bytes of each tensor's values, in order.
std::uint64_t parameter_hash(const std::vector<NamedTensor>& tensors);

}  // namespace admn
