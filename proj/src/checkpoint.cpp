#include "ssr/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ssr/adam.hpp"

namespace ssr {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'R', 'C', 'K', 'P', 'T', '1'};

const std::array<std::uint32_t, 256>& crc_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  std::uint32_t u32() {
    if (at_ + 4 > data_.size()) fail("truncated");
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(data_[at_ + k]);
    at_ += 4;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) {
    if (at_ + n > data_.size()) fail("truncated");
    std::string s = data_.substr(at_, n);
    at_ += n;
    return s;
  }

  std::size_t at() const { return at_; }
  [[noreturn]] void fail(const std::string& why) {
    throw std::runtime_error("checkpoint " + path_ + ": " + why);
  }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t at_ = 0;
};

}  // namespace

std::uint32_t crc32_ieee(const unsigned char* data, std::size_t len) {
  std::uint32_t c = 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i) c = crc_table()[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Mat<float>*>>& entries) {
  std::string payload;
  put_u32(payload, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, mat] : entries) {
    put_u32(payload, static_cast<std::uint32_t>(name.size()));
    payload.append(name);
    put_u32(payload, 2);
    put_u32(payload, static_cast<std::uint32_t>(mat->rows()));
    put_u32(payload, static_cast<std::uint32_t>(mat->cols()));
    for (Eigen::Index r = 0; r < mat->rows(); ++r)
      for (Eigen::Index c = 0; c < mat->cols(); ++c) put_f32(payload, (*mat)(r, c));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint " + path + ": cannot open for writing");
  out.write(kMagic, sizeof(kMagic));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  std::string crc;
  put_u32(crc, crc32_ieee(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()));
  out.write(crc.data(), 4);
  if (!out) throw std::runtime_error("checkpoint " + path + ": write failed");
}

std::map<std::string, Mat<float>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint " + path + ": cannot open");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < sizeof(kMagic) + 8 || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  const std::string payload = data.substr(sizeof(kMagic), data.size() - sizeof(kMagic) - 4);
  Reader tail(data, path);
  (void)tail.bytes(data.size() - 4);
  const std::uint32_t stored_crc = tail.u32();
  const std::uint32_t actual_crc =
      crc32_ieee(reinterpret_cast<const unsigned char*>(payload.data()), payload.size());
  if (stored_crc != actual_crc) throw std::runtime_error("checkpoint " + path + ": checksum mismatch");

  Reader r(payload, path);
  std::map<std::string, Mat<float>> out;
  const std::uint32_t count = r.u32();
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    const std::uint32_t rank = r.u32();
    if (rank < 1 || rank > 3) r.fail("entry '" + name + "': unsupported rank");
    std::vector<std::uint32_t> extents(rank);
    std::size_t total = 1;
    for (auto& ext : extents) {
      ext = r.u32();
      total *= ext;
    }
    Eigen::Index rows = 1, cols = static_cast<Eigen::Index>(total);
    if (rank == 2) {
      rows = static_cast<Eigen::Index>(extents[0]);
      cols = static_cast<Eigen::Index>(extents[1]);
    } else if (rank == 3) {
      rows = static_cast<Eigen::Index>(extents[0]);
      cols = static_cast<Eigen::Index>(extents[1] * extents[2]);
    }
    Mat<float> m(rows, cols);
    for (Eigen::Index rr = 0; rr < rows; ++rr)
      for (Eigen::Index cc = 0; cc < cols; ++cc) m(rr, cc) = r.f32();
    if (out.count(name)) r.fail("duplicate entry '" + name + "'");
    out.emplace(name, std::move(m));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, const std::vector<NamedParam<float>>& entries) {
  auto loaded = load_checkpoint(path);
  for (const auto& [name, mat] : entries) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw std::runtime_error("checkpoint " + path + ": missing entry '" + name + "'");
    if (it->second.rows() != mat->rows() || it->second.cols() != mat->cols())
      throw std::runtime_error("checkpoint " + path + ": entry '" + name + "' shape mismatch");
    *mat = it->second;
  }
}

}  // namespace ssr
