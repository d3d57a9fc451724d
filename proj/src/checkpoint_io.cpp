#include "onda/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace onda {

namespace {

constexpr char kMagic[] = "ONDA";
constexpr char kVersion = '1';
constexpr char kBankTag[] = "PBNK";

std::string arch_string(const ArchConfig& a) {
  std::ostringstream os;
  os << "in=" << a.in_channels << " hidden=" << a.hidden_channels << " K=" << a.feature_dim << " C=" << a.num_classes
     << " " << a.height << "x" << a.width << " k=" << a.kernel_size;
  return os.str();
}

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void uint(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u32(std::uint64_t v) { uint(v, 4); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void array(const Eigen::ArrayXd& a) {
    for (Index i = 0; i < a.size(); ++i) f64(a[i]);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}

  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint truncated");
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  double f64() { return std::bit_cast<double>(uint(8)); }
  void array(Eigen::ArrayXd& a) {
    for (Index i = 0; i < a.size(); ++i) a[i] = f64();
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const Tensor& t) {
  w.u32(static_cast<std::uint64_t>(t.rank()));
  for (Index d : t.shape()) w.u32(static_cast<std::uint64_t>(d));
  w.array(t.data());
}

void read_tensor(Reader& r, Tensor& into) {
  const std::uint32_t rank = r.u32();
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(r.u32()));
  if (shape != into.shape()) {
    throw FormatError("checkpoint tensor shape " + shape_string(shape) + " does not match " + shape_string(into.shape()));
  }
  r.array(into.data());
}

}  // namespace

IncompatibleCheckpoint::IncompatibleCheckpoint(const ArchConfig& expected, const ArchConfig& found)
    : FormatError("incompatible checkpoint: expected " + arch_string(expected) + ", file has " + arch_string(found)),
      expected_(expected),
      found_(found) {}

std::string encode_checkpoint(const ModelCheckpoint& model, const PrototypeBank* bank) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u8(static_cast<std::uint8_t>(kVersion));
  w.u8(static_cast<std::uint8_t>(model.role));
  const ArchConfig& a = model.arch;
  for (Index v : {a.in_channels, a.hidden_channels, a.feature_dim, a.num_classes, a.height, a.width, a.kernel_size}) {
    w.u32(static_cast<std::uint64_t>(v));
  }
  const auto params = model.parameters();
  w.u32(params.size());
  for (const Tensor* t : params) write_tensor(w, *t);
  for (const ConvBlock& b : model.blocks) {
    w.array(b.bn.running_mean);
    w.array(b.bn.running_var);
    w.f64(b.bn.momentum);
    w.f64(b.bn.eps);
  }
  w.u8(bank ? 1 : 0);
  if (bank) {
    w.bytes(kBankTag, 4);
    w.u32(static_cast<std::uint64_t>(bank->num_classes()));
    w.u32(static_cast<std::uint64_t>(bank->feature_dim()));
    for (Index c = 0; c < bank->num_classes(); ++c) {
      for (Index k = 0; k < bank->feature_dim(); ++k) w.f64(bank->eta(c, k));
    }
    for (Index k = 0; k < bank->feature_dim(); ++k) w.f64(bank->sigma2[k]);
    for (bool seen : bank->class_seen) w.u8(seen ? 1 : 0);
    w.f64(bank->lambda);
    w.u8(bank->norm == ProtoNorm::L1 ? 1 : 0);
  }
  w.u64(fnv1a(w.str().data(), w.str().size()));
  return std::move(w.str());
}

CheckpointFile decode_checkpoint(const std::string& bytes, const ArchConfig* expected) {
  if (bytes.size() < 5 || bytes.compare(0, 4, kMagic) != 0) throw FormatError("not an ONDA checkpoint (bad magic)");
  if (bytes[4] != kVersion) throw FormatError(std::string("unsupported checkpoint version '") + bytes[4] + "'");
  if (bytes.size() < 13) throw FormatError("checkpoint truncated");
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes, bytes.size());
  tail.bytes(body);
  if (tail.uint(8) != fnv1a(bytes.data(), body)) throw FormatError("checkpoint checksum mismatch");

  Reader r(bytes, body);
  r.bytes(5);
  const std::uint8_t role = r.u8();
  if (role > 3) throw FormatError("checkpoint role out of range");
  ArchConfig a;
  for (Index* v : {&a.in_channels, &a.hidden_channels, &a.feature_dim, &a.num_classes, &a.height, &a.width,
                   &a.kernel_size}) {
    *v = static_cast<Index>(r.u32());
  }
  if (expected && !(*expected == a)) throw IncompatibleCheckpoint(*expected, a);
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint arch header invalid: ") + e.what());
  }

  CheckpointFile out;
  out.model = init_model(a, 0);
  out.model.role = static_cast<ModelRole>(role);
  auto params = out.model.parameters();
  if (r.u32() != params.size()) throw FormatError("checkpoint tensor count mismatch");
  for (Tensor* t : params) read_tensor(r, *t);
  for (ConvBlock& b : out.model.blocks) {
    r.array(b.bn.running_mean);
    r.array(b.bn.running_var);
    b.bn.momentum = r.f64();
    b.bn.eps = r.f64();
  }
  if (r.u8() == 1) {
    if (r.bytes(4) != std::string(kBankTag, 4)) throw FormatError("checkpoint bank section tag missing");
    PrototypeBank bank;
    const Index c = r.u32(), k = r.u32();
    bank.eta.resize(c, k);
    for (Index i = 0; i < c; ++i) {
      for (Index j = 0; j < k; ++j) bank.eta(i, j) = r.f64();
    }
    bank.sigma2.resize(k);
    for (Index j = 0; j < k; ++j) bank.sigma2[j] = r.f64();
    for (Index i = 0; i < c; ++i) bank.class_seen.push_back(r.u8() != 0);
    bank.lambda = r.f64();
    bank.norm = r.u8() == 1 ? ProtoNorm::L1 : ProtoNorm::L2;
    out.bank = std::move(bank);
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return out;
}

void save_checkpoint(const std::string& path, const ModelCheckpoint& model, const PrototypeBank* bank) {
  const std::string bytes = encode_checkpoint(model, bank);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointFile load_checkpoint(const std::string& path, const ArchConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), expected);
}

}  // namespace onda
