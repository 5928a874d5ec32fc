#include "deepctr/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

namespace deepctr {

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("checkpoint: no tensor named '" + name + "'");
}

void Checkpoint::put(std::string name, Tensor t) {
  for (auto& [n, old] : tensors) {
    if (n == name) {
      old = std::move(t);
      return;
    }
  }
  tensors.emplace_back(std::move(name), std::move(t));
}

namespace {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& m) const { throw FormatError(source_ + ": " + m); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated checkpoint while reading ") + what);
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string checkpoint_bytes(const Checkpoint& c) {
  std::string out = "DCTR";
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = c.meta.dump();
  put_le<std::uint64_t>(out, meta.size());
  out += meta;
  put_le<std::uint64_t>(out, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.values()) put_le<double>(out, v);
  }
  return out;
}

Checkpoint checkpoint_parse(std::string_view bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.take(4, "magic") != "DCTR") r.fail("bad magic (not a checkpoint)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  const auto meta_len = r.get<std::uint64_t>("header length");
  const auto meta = r.take(meta_len, "header");
  try {
    c.meta = json::parse(meta);
  } catch (const json::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name length");
    std::string name(r.take(name_len, "name"));
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>("dims");
      n *= d;
    }
    if (n > bytes.size()) r.fail("tensor '" + name + "' larger than the file");
    Tensor t(shape);
    for (auto& v : t.values()) v = r.get<double>("values");
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");
  return c;
}

void checkpoint_save(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = checkpoint_bytes(c);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_parse(bytes, path.string());
}

void store_state(Checkpoint& c, std::span<const ParamRef> params, std::span<const BufferRef> buffers,
                 const std::string& prefix, bool with_momentum) {
  for (const auto& p : params) {
    c.put(prefix + p.name, *p.value);
    if (with_momentum) c.put(prefix + p.name + "@momentum", *p.momentum);
  }
  for (const auto& b : buffers) c.put(prefix + b.name, *b.value);
}

namespace {

void copy_checked(const Tensor& src, Tensor& dst, const std::string& name) {
  if (src.shape() != dst.shape()) {
    throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_string(src.shape()) + ", network expects " +
                      shape_string(dst.shape()));
  }
  dst = src;
}

}  // namespace

void restore_state(const Checkpoint& c, std::span<const ParamRef> params, std::span<const BufferRef> buffers,
                   const std::string& prefix, bool require_momentum) {
  for (const auto& p : params) {
    copy_checked(c.tensor(prefix + p.name), *p.value, p.name);
    const std::string m = prefix + p.name + "@momentum";
    if (c.has(m))
      copy_checked(c.tensor(m), *p.momentum, m);
    else if (require_momentum)
      throw FormatError("checkpoint: no momentum buffer for '" + p.name + "'");
    else
      p.momentum->fill(0.0);
  }
  for (const auto& b : buffers) copy_checked(c.tensor(prefix + b.name), *b.value, b.name);
}

}  // namespace deepctr
