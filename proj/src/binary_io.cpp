#include "protofed/binary_io.hpp"

#include <fstream>
#include <iterator>

namespace protofed::bin {

void Writer::tensor(const std::string& name, const Tensor& t) {
  str(name);
  uint(static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) uint(static_cast<std::uint64_t>(e));
  for (double v : t.data()) f64(v);
}

void Reader::need(std::size_t n, const char* what) {
  if (data_.size() - pos_ < n) {
    throw FormatError(std::string("truncated input while reading ") + what, pos_);
  }
}

void Reader::expect(const void* magic, std::size_t n, const char* what) {
  need(n, what);
  if (std::memcmp(data_.data() + pos_, magic, n) != 0) {
    throw FormatError(std::string("bad ") + what, pos_);
  }
  pos_ += n;
}

std::string Reader::str() {
  auto n = uint<std::uint16_t>();
  need(n, "string");
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::pair<std::string, Tensor> Reader::tensor() {
  std::string name = str();
  const std::size_t rank_at = pos_;
  auto rank = uint<std::uint32_t>();
  if (rank == 0 || rank > 8) throw FormatError("invalid tensor rank " + std::to_string(rank), rank_at);
  Shape shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::size_t at = pos_;
    auto e = uint<std::uint64_t>();
    if (e == 0 || e > (std::uint64_t{1} << 32)) {
      throw FormatError("invalid tensor extent " + std::to_string(e), at);
    }
    shape.push_back(static_cast<std::size_t>(e));
    count *= static_cast<std::size_t>(e);
  }
  need(count * 8, "tensor elements");
  std::vector<double> values(count);
  for (auto& v : values) v = f64();
  return {std::move(name), Tensor(std::move(shape), std::move(values))};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace protofed::bin
