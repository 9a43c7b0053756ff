#include "ttt/checkpoint.hpp"

#include "ttt/config.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ttt {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::string& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
  }

  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, static_cast<size_t>(n));
    pos_ += static_cast<size_t>(n);
    return s;
  }

  size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  const std::string& bytes_;
  size_t pos_ = 0;
};

std::string dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

// Shared by decode and peek: magic, version, digest and config.
std::string read_header(Reader& r, std::uint64_t& step) {
  const std::string magic = r.bytes(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto digest = r.get<std::uint64_t>("config digest");
  const auto len = r.get<std::uint64_t>("config length");
  std::string config = r.bytes(len, "config");
  if (fnv1a64(config) != digest) throw CheckpointError("config digest mismatch");
  step = r.get<std::uint64_t>("step");
  return config;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

template <typename S>
const Mat<S>& Checkpoint<S>::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

template <typename S>
std::string encode_checkpoint(const Checkpoint<S>& ckpt) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, fnv1a64(ckpt.config_json));
  put<std::uint64_t>(out, ckpt.config_json.size());
  out += ckpt.config_json;
  put<std::uint64_t>(out, ckpt.step);
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<S>()));
    put<std::uint8_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    for (Index i = 0; i < t.value.size(); ++i) put<S>(out, t.value.data()[i]);
  }
  put<std::uint64_t>(out, fnv1a64(out.data(), out.size()));
  return out;
}

template <typename S>
Checkpoint<S> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  Checkpoint<S> ckpt;
  ckpt.config_json = read_header(r, ckpt.step);
  const auto count = r.get<std::uint64_t>("tensor count");
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor<S> t;
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    t.name = r.bytes(name_len, "tensor name");
    const auto dtype = static_cast<DType>(r.get<std::uint8_t>("dtype"));
    if (dtype != DType::F32 && dtype != DType::F64) throw CheckpointError("tensor " + t.name + ": unknown dtype");
    if (dtype != dtype_of<S>()) {
      throw CheckpointError("tensor " + t.name + " is stored as " + dtype_name(dtype) + ", expected " +
                            dtype_name(dtype_of<S>()));
    }
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank < 1 || rank > 2) throw CheckpointError("tensor " + t.name + ": unsupported rank " + std::to_string(rank));
    const auto rows = r.get<std::uint64_t>("dims");
    const auto cols = rank == 2 ? r.get<std::uint64_t>("dims") : std::uint64_t{1};
    if (rows > (1ULL << 40) || cols > (1ULL << 40) || rows * cols > (bytes.size() / sizeof(S))) {
      throw CheckpointError("tensor " + t.name + ": implausible shape or truncated payload");
    }
    t.value.resize(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = r.get<S>("tensor payload");
    ckpt.tensors.push_back(std::move(t));
  }
  const size_t body = r.pos();
  const auto checksum = r.get<std::uint64_t>("checksum");
  if (checksum != fnv1a64(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch (corrupted file)");
  if (r.pos() != bytes.size()) throw CheckpointError("trailing bytes after checkpoint");
  return ckpt;
}

template <typename S>
void save_checkpoint(const std::string& path, const Checkpoint<S>& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  // Write to a sibling file first so an interrupted save never clobbers the
  // previous checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into '" + path + "'");
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  return decode_checkpoint<S>(read_file(path));
}

CheckpointInfo peek_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  Reader r(bytes);
  CheckpointInfo info;
  info.config_json = read_header(r, info.step);
  if (r.get<std::uint64_t>("tensor count") > 0) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    r.bytes(name_len, "tensor name");
    info.dtype = static_cast<DType>(r.get<std::uint8_t>("dtype"));
  }
  return info;
}

template struct Checkpoint<double>;
template struct Checkpoint<float>;
template std::string encode_checkpoint<double>(const Checkpoint<double>&);
template std::string encode_checkpoint<float>(const Checkpoint<float>&);
template Checkpoint<double> decode_checkpoint<double>(const std::string&);
template Checkpoint<float> decode_checkpoint<float>(const std::string&);
template void save_checkpoint<double>(const std::string&, const Checkpoint<double>&);
template void save_checkpoint<float>(const std::string&, const Checkpoint<float>&);
template Checkpoint<double> load_checkpoint<double>(const std::string&);
template Checkpoint<float> load_checkpoint<float>(const std::string&);

}  // namespace ttt
