#include "expnet/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

#include "binary_io.hpp"
#include "expnet/errors.hpp"

namespace expnet {

namespace detail {

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path);
}

}  // namespace detail

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) w.u64(d);
    for (double v : tensor.data()) w.f64(v);
  }
  return w.buffer();
}

std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto version_offset = r.offset();
  if (auto v = r.u32("version"); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_offset);
  }
  const auto count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("name length");
    std::string name(r.bytes(name_len, "tensor name"));
    const auto rank = r.u32("rank");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64("dimension");
      numel *= d;
    }
    if (numel > r.remaining() / 8) r.fail("tensor '" + name + "' data exceeds file size");
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("tensor data");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (!r.at_end()) r.fail("trailing bytes after last tensor");
  return out;
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  detail::write_file_bytes(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace expnet
