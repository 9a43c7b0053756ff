#pragma once

// Binary checkpoint. All integers and payloads are little-endian.
//
//   magic      8 bytes  "TTTCKPT\0"
//   version    u32      1
//   digest     u64      FNV-1a of the config blob
//   config     u64 length + UTF-8 JSON
//   step       u64
//   count      u64      number of tensors
//   tensor     u32 name length, name, u8 dtype (1 = f32, 2 = f64),
//              u8 rank, u64 dims[rank], row-major payload
//   checksum   u64      FNV-1a of every preceding byte

#include "ttt/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ttt {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'T', 'T', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <typename S>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::F32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::F64;
}

template <typename S>
struct NamedTensor {
  std::string name;
  Mat<S> value;
};

template <typename S>
struct Checkpoint {
  std::string config_json;
  std::uint64_t step = 0;
  std::vector<NamedTensor<S>> tensors;

  /// Throws CheckpointError if absent.
  const Mat<S>& get(const std::string& name) const;
};

template <typename S>
std::string encode_checkpoint(const Checkpoint<S>& ckpt);

/// Throws CheckpointError on a bad magic, version, digest, dtype or checksum
/// and on truncation.
template <typename S>
Checkpoint<S> decode_checkpoint(const std::string& bytes);

template <typename S>
void save_checkpoint(const std::string& path, const Checkpoint<S>& ckpt);

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path);

/// Header fields without decoding the tensors.
struct CheckpointInfo {
  std::string config_json;
  std::uint64_t step = 0;
  DType dtype = DType::F64;  // of the first tensor
};

CheckpointInfo peek_checkpoint(const std::string& path);

}  // namespace ttt
