#include "dagnas/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dagnas {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'G', 'N', 'A', 'S', 'C', 'K'};

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path, 0, "cannot open checkpoint");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

CheckpointError::CheckpointError(const std::string& source, std::size_t offset, const std::string& what)
    : std::runtime_error(source + ": byte offset " + std::to_string(offset) + ": " + what), offset_(offset) {}

void BinaryWriter::u32(std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<unsigned char>(v >> s));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) buf_.push_back(static_cast<unsigned char>(v >> s));
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(const std::string& s) {
  u64(s.size());
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void BinaryWriter::floats(const std::vector<float>& v) {
  u64(v.size());
  for (float x : v) f32(x);
}

BinaryReader::BinaryReader(std::vector<unsigned char> bytes, std::string source)
    : buf_(std::move(bytes)), source_(std::move(source)) {}

void BinaryReader::fail(const std::string& what) const { throw CheckpointError(source_, pos_, what); }

void BinaryReader::need(std::size_t n) const {
  if (buf_.size() - pos_ < n) fail("truncated: need " + std::to_string(n) + " more bytes");
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return buf_[pos_++];
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }
double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::str() {
  const std::uint64_t n = u64();
  need(n);
  std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

std::vector<float> BinaryReader::floats() {
  const std::uint64_t n = u64();
  if (n > (buf_.size() - pos_) / 4) fail("float array of " + std::to_string(n) + " elements exceeds the file");
  std::vector<float> v(n);
  for (auto& x : v) x = f32();
  return v;
}

void BinaryReader::expect_end() const {
  if (!at_end()) fail(std::to_string(buf_.size() - pos_) + " unexpected trailing bytes");
}

void write_rng(BinaryWriter& w, const Rng& rng) { w.str(rng_state(rng)); }

Rng read_rng(BinaryReader& r) {
  const std::size_t at = r.offset();
  const std::string state = r.str();
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw CheckpointError("rng state", at, "malformed generator state");
  return rng;
}

void write_bank(BinaryWriter& w, const ParameterBank& bank) {
  w.u64(bank.step_count());
  write_rng(w, bank.init_rng());
  w.u64(bank.size());
  for (const auto& [key, p] : bank.entries()) {
    w.str(key);
    w.u8(static_cast<std::uint8_t>(p.kind));
    const auto& shape = p.value().shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    w.floats(p.value().storage());
    w.floats(p.velocity.storage());
  }
}

ParameterBank read_bank(BinaryReader& r) {
  ParameterBank bank;
  bank.set_step_count(r.u64());
  bank.init_rng() = read_rng(r);
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string key = r.str();
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(ParamKind::Statistic)) r.fail("unknown parameter kind in entry " + key);
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank) + " in entry " + key);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
    auto values = r.floats();
    auto velocity = r.floats();
    if (values.size() != shape_size(shape) || velocity.size() != values.size()) {
      r.fail("entry " + key + " holds " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    bank.restore_entry(key, static_cast<ParamKind>(kind), Tensor<float>(shape, std::move(values)),
                       Tensor<float>(shape, std::move(velocity)));
  }
  return bank;
}

std::vector<unsigned char> wrap_checkpoint(const std::string& kind, const std::vector<unsigned char>& payload) {
  BinaryWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.str(kind);
  std::vector<unsigned char> out = w.bytes();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

BinaryReader open_checkpoint(const std::string& path, const std::string& kind) {
  BinaryReader r(slurp(path), path);
  for (char c : kMagic) {
    if (r.u8() != static_cast<std::uint8_t>(c)) {
      throw CheckpointError(path, 0, "not a checkpoint file (bad magic)");
    }
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  const std::string got = r.str();
  if (got != kind) r.fail("checkpoint holds a '" + got + "' payload, expected '" + kind + "'");
  return r;
}

void write_file_atomic(const std::string& path, const std::vector<unsigned char>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp + ": cannot create file");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace dagnas
