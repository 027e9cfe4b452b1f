#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dagnas/rng.hpp"
#include "dagnas/supergraph.hpp"

namespace dagnas {

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& source, std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Little-endian binary encoder.
class BinaryWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v);
  void f64(double v);
  void str(const std::string& s);
  void floats(const std::vector<float>& v);

  const std::vector<unsigned char>& bytes() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class BinaryReader {
 public:
  BinaryReader(std::vector<unsigned char> bytes, std::string source);

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32();
  double f64();
  std::string str();
  std::vector<float> floats();

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }
  void expect_end() const;
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n) const;

  std::vector<unsigned char> buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

void write_rng(BinaryWriter& w, const Rng& rng);
Rng read_rng(BinaryReader& r);

// Every entry (key, kind, shape, values, velocity), the step counter and the
// initialization stream.
void write_bank(BinaryWriter& w, const ParameterBank& bank);
ParameterBank read_bank(BinaryReader& r);

// Container: 8-byte magic, format version, payload kind, payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::vector<unsigned char> wrap_checkpoint(const std::string& kind, const std::vector<unsigned char>& payload);
BinaryReader open_checkpoint(const std::string& path, const std::string& kind);

// Writes through a temporary file and renames, so a crash never leaves a
// half-written checkpoint behind.
void write_file_atomic(const std::string& path, const std::vector<unsigned char>& bytes);

}  // namespace dagnas
