#include "trace/tnsr_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "trace/errors.hpp"

namespace trace {

namespace {

static_assert(std::endian::native == std::endian::little,
              "TNSR I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void write_tnsr(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&rank), 4);
  for (int i = 0; i < t.rank(); ++i) {
    const std::uint32_t d = static_cast<std::uint32_t>(t.dim(i));
    out.write(reinterpret_cast<const char*>(&d), 4);
  }
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw FormatError("short write to " + path.string());
}

Tensor read_tnsr(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad TNSR magic bytes");
  }
  std::uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (!in || rank == 0 || rank > kMaxRank) {
    throw FormatError(path.string() + ": invalid TNSR rank " + std::to_string(rank));
  }
  std::vector<int> shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    in.read(reinterpret_cast<char*>(&d), 4);
    if (!in || d == 0 || d > (1u << 24)) {
      throw FormatError(path.string() + ": invalid TNSR dimension");
    }
    shape[i] = static_cast<int>(d);
    numel *= d;
  }
  std::vector<float> data(numel);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * sizeof(float)));
  if (!in || static_cast<std::size_t>(in.gcount()) != numel * sizeof(float)) {
    throw FormatError(path.string() + ": truncated TNSR payload");
  }
  // Trailing bytes mean the header lied about the shape.
  char extra;
  if (in.read(&extra, 1)) throw FormatError(path.string() + ": trailing bytes after TNSR payload");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace trace
