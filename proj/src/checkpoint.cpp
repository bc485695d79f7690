#include "fbdebias/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fbdebias/error.hpp"

namespace fbd {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'B', 'D', 'M'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ofstream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail(ErrorCode::Io, "cannot open checkpoint '" + path.string() + "'");
  }

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail(ErrorCode::Parse, path_.string() + ": truncated checkpoint");
  }

  template <class T>
  T get() {
    T v{};
    bytes(&v, sizeof(T));
    return v;
  }

  std::string string() {
    const auto n = get<std::uint32_t>();
    if (n > (1u << 28)) fail(ErrorCode::Parse, path_.string() + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, ckpt.kind);
  put_string(out, ckpt.meta.dump());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const Tensor& t = ckpt.params.values[i];
    put_string(out, ckpt.params.names[i]);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) fail(ErrorCode::Io, "write failed for checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) fail(ErrorCode::Version, path.string() + ": not a model checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(ErrorCode::Version, path.string() + ": checkpoint version " + std::to_string(version) + " unsupported");
  Checkpoint ckpt;
  ckpt.kind = r.string();
  try {
    ckpt.meta = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Parse, path.string() + ": bad checkpoint metadata: " + e.what());
  }
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::Parse, path.string() + ": implausible tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor t(shape);
    r.bytes(t.data(), t.size() * sizeof(double));
    ckpt.params.add(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace fbd
