#include "s4nd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace s4nd {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointRecord> records) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.push_back(static_cast<char>(kCheckpointVersion));
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<std::uint32_t>(r.value.rank()));
    for (Index d : r.value.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (double v : r.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  std::filesystem::path partial = path;
  partial += ".partial";
  {
    std::ofstream f(partial, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + partial.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("failed writing " + partial.string());
  }
  std::filesystem::rename(partial, path);
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint " + path.string());
  Reader in(std::string(std::istreambuf_iterator<char>(f), {}));
  if (in.text(sizeof(kCheckpointMagic), "magic") != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = in.uint(1, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.uint(4, "record count");
  std::vector<CheckpointRecord> records;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto name_len = in.uint(4, "name length");
    std::string name = in.text(name_len, "name");
    const auto rank = in.uint(4, "rank");
    if (rank == 0 || rank > 8) throw FormatError("record " + name + " has invalid rank " + std::to_string(rank));
    Shape shape;
    Index volume = 1;
    for (std::uint64_t a = 0; a < rank; ++a) {
      const auto extent = in.uint(8, "extent");
      if (extent == 0 || extent > (std::uint64_t{1} << 40)) throw FormatError("record " + name + " has invalid extent");
      shape.push_back(static_cast<Index>(extent));
      volume *= static_cast<Index>(extent);
    }
    if (static_cast<std::uint64_t>(volume) > in.remaining() / 8) throw FormatError("checkpoint truncated in record " + name);
    std::vector<double> values(static_cast<std::size_t>(volume));
    for (auto& v : values) v = std::bit_cast<double>(in.uint(8, "payload"));
    records.push_back({std::move(name), Tensor<double>(std::move(shape), std::move(values))});
  }
  if (!in.done()) throw FormatError("trailing bytes after the last checkpoint record");
  return records;
}

const CheckpointRecord* find_record(std::span<const CheckpointRecord> records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace s4nd
