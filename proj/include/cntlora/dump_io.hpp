#pragma once

// Binary container shared by activation dumps ("CNTA") and weight files
// ("CNTW"). Little-endian throughout:
//
//   magic[4] | version u32 | point_count u32
//   per point: id_len u16 | id bytes | batch_count u32
//     per batch: rows u64 | cols u64 | rows*cols f64, row-major
//
// Weight files carry exactly one matrix per id.

#include <algorithm>
#include <array>
#include <iterator>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cntlora/capture.hpp"
#include "cntlora/error.hpp"
#include "cntlora/matrix.hpp"

namespace cntlora {

inline constexpr std::string_view kActivationMagic = "CNTA";
inline constexpr std::string_view kWeightMagic = "CNTW";
inline constexpr std::uint32_t kDumpVersion = 1;

struct NamedMatrices {
  std::string id;
  std::vector<Matrix> matrices;
};

namespace detail {

class LeWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> buf_;
};

class LeReader {
 public:
  LeReader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw Error(ErrorCode::TruncatedFile, path_ + ": unexpected end of file at byte " + std::to_string(pos_));
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_records(std::string_view magic, const std::vector<NamedMatrices>& records) {
  detail::LeWriter w;
  w.bytes(magic);
  w.u32(kDumpVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    if (rec.id.size() > 0xffff) throw Error(ErrorCode::BadConfig, "point id longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(rec.id.size()));
    w.bytes(rec.id);
    w.u32(static_cast<std::uint32_t>(rec.matrices.size()));
    for (const auto& m : rec.matrices) {
      w.u64(m.rows());
      w.u64(m.cols());
      for (double v : m.data()) w.f64(v);
    }
  }
  return w.buffer();
}

inline std::vector<NamedMatrices> decode_records(std::string_view magic, std::vector<char> bytes,
                                                 const std::string& path = "<memory>") {
  detail::LeReader r(std::move(bytes), path);
  if (r.remaining() < 4) throw Error(ErrorCode::TruncatedFile, path + ": shorter than the file header");
  const std::string got = r.bytes(4);
  if (got != magic) {
    throw Error(ErrorCode::BadMagic, path + ": expected magic '" + std::string(magic) + "', found '" + got + "'");
  }
  const std::uint32_t version = r.u32();
  if (version != kDumpVersion) {
    throw Error(ErrorCode::VersionMismatch, path + ": version " + std::to_string(version) + ", expected " +
                                                std::to_string(kDumpVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedMatrices> out;
  for (std::uint32_t p = 0; p < count; ++p) {
    NamedMatrices rec;
    rec.id = r.bytes(r.u16());
    const std::uint32_t n = r.u32();
    for (std::uint32_t b = 0; b < n; ++b) {
      const std::uint64_t rows = r.u64();
      const std::uint64_t cols = r.u64();
      if (cols != 0 && rows > r.remaining() / 8 / cols) {
        throw Error(ErrorCode::TruncatedFile, path + ": matrix payload exceeds file size");
      }
      std::vector<double> data(rows * cols);
      for (auto& v : data) v = r.f64();
      rec.matrices.emplace_back(rows, cols, std::move(data));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::Io, "cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorCode::Io, "write failed for '" + path + "'");
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Groups batches by point id (first-appearance order). Within a point the
/// batch_index values must be 0..n-1 in list order; the index is implied by
/// position on disk.
inline std::vector<NamedMatrices> group_batches(const std::vector<ActivationBatch>& batches) {
  std::vector<NamedMatrices> records;
  for (const auto& b : batches) {
    auto it = std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.id == b.point_id; });
    if (it == records.end()) {
      records.push_back({b.point_id, {}});
      it = std::prev(records.end());
    }
    if (b.batch_index != it->matrices.size()) {
      throw Error(ErrorCode::BadConfig, "batch_index for '" + b.point_id + "' is not contiguous from 0");
    }
    it->matrices.push_back(b.X);
  }
  return records;
}

inline void write_dump(const std::string& path, const std::vector<ActivationBatch>& batches) {
  write_file(path, encode_records(kActivationMagic, group_batches(batches)));
}

inline std::vector<ActivationBatch> read_dump(const std::string& path) {
  std::vector<ActivationBatch> out;
  for (auto& rec : decode_records(kActivationMagic, read_file(path), path)) {
    for (std::size_t j = 0; j < rec.matrices.size(); ++j) out.push_back({rec.id, std::move(rec.matrices[j]), j});
  }
  return out;
}

inline void write_weights(const std::string& path, const std::vector<std::pair<std::string, Matrix>>& weights) {
  std::vector<NamedMatrices> records;
  for (const auto& [id, m] : weights) records.push_back({id, {m}});
  write_file(path, encode_records(kWeightMagic, records));
}

inline std::vector<std::pair<std::string, Matrix>> read_weights(const std::string& path) {
  std::vector<std::pair<std::string, Matrix>> out;
  for (auto& rec : decode_records(kWeightMagic, read_file(path), path)) {
    if (rec.matrices.size() != 1) {
      throw Error(ErrorCode::BadConfig, path + ": weight entry '" + rec.id + "' must hold exactly one matrix");
    }
    out.emplace_back(std::move(rec.id), std::move(rec.matrices.front()));
  }
  return out;
}

}  // namespace cntlora
