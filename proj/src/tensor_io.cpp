#include "admn/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "admn/errors.hpp"

namespace admn {

namespace {

static_assert(sizeof(double) == 8);

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("truncated tensor stream");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  const auto& shape = t.shape();
  if (shape.size() > 255) throw FormatError("tensor has too many dimensions for the ADMT format");
  out.write(kTensorMagic, 4);
  out.put(static_cast<char>(kTensorVersion));
  out.put(static_cast<char>(shape.size()));
  for (auto d : shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_le<double>(out, v);
  if (!out) throw FormatError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("truncated tensor header");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const int version = in.get();
  if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const int ndim = in.get();
  if (ndim <= 0) throw FormatError("tensor must have at least one dimension");
  Shape shape(static_cast<std::size_t>(ndim));
  for (auto& d : shape) {
    d = get_le<std::uint32_t>(in);
    if (d == 0) throw FormatError("zero-sized tensor dimension");
  }
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = get_le<double>(in);
  return Tensor::from_data(std::move(shape), data);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor(in);
}

std::string encode_tensor(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

Tensor decode_tensor(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw FormatError("cannot write checkpoint manifest in " + dir.string());
  for (const auto& nt : tensors) {
    save_tensor(dir / (nt.name + ".admt"), nt.tensor);
    manifest << nt.name << ' ' << shape_string(nt.tensor.shape()) << ' ' << (nt.role.empty() ? "-" : nt.role)
             << '\n';
  }
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw FormatError("missing checkpoint manifest in " + dir.string());
  std::vector<NamedTensor> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    NamedTensor nt;
    std::string shape;
    if (!(ls >> nt.name >> shape >> nt.role)) throw FormatError("malformed manifest line: " + line);
    nt.tensor = load_tensor(dir / (nt.name + ".admt"));
    if (shape_string(nt.tensor.shape()) != shape) {
      throw FormatError("manifest shape mismatch for " + nt.name);
    }
    out.push_back(std::move(nt));
  }
  return out;
}

void restore_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor>& targets) {
  std::map<std::string, Tensor> loaded;
  for (auto& nt : load_checkpoint(dir)) loaded.emplace(nt.name, nt.tensor);
  for (const auto& target : targets) {
    auto it = loaded.find(target.name);
    if (it == loaded.end()) throw FormatError("checkpoint " + dir.string() + " lacks tensor " + target.name);
    if (it->second.shape() != target.tensor.shape()) {
      throw FormatError("checkpoint tensor " + target.name + " has shape " + shape_string(it->second.shape()) +
                        ", expected " + shape_string(target.tensor.shape()));
    }
    Tensor t = target.tensor;
    t.mutable_value() = it->second.value();
  }
}

std::uint64_t parameter_hash(const std::vector<NamedTensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& nt : tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(nt.tensor.data().data());
    const std::size_t n = nt.tensor.size() * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace admn
