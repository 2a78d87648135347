#include "picanet/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace picanet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

void put_u16(std::string& buf, std::uint16_t v) { buf.append(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::string& buf, std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

struct Reader {
  const std::string& buf;
  std::size_t at = 0;
  std::string context;  // record name for error messages

  void need(std::size_t n) {
    if (at + n > buf.size())
      throw std::runtime_error("checkpoint truncated in record " +
                               (context.empty() ? "header" : context));
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v;
    std::memcpy(&v, buf.data() + at, 2);
    at += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + at, 4);
    at += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[at++]);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg) {
  std::string buf;
  buf.append("PICA", 4);
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<std::uint32_t>(reg.entries().size()));
  for (const auto& e : reg.entries()) {
    if (e.name.size() > 0xffff)
      throw std::invalid_argument("checkpoint: name too long: " + e.name);
    put_u16(buf, static_cast<std::uint16_t>(e.name.size()));
    buf.append(e.name);
    buf.push_back(static_cast<char>(dtype_code<T>()));
    buf.push_back(static_cast<char>(e.tensor.rank()));
    for (int d = 0; d < e.tensor.rank(); ++d)
      put_u32(buf, static_cast<std::uint32_t>(e.tensor.dim(d)));
    buf.append(reinterpret_cast<const char*>(e.tensor.data()), e.tensor.numel() * sizeof(T));
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + tmp);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg) {
  std::string buf;
  {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    buf = ss.str();
  }
  Reader r{buf};
  if (r.bytes(4) != "PICA") throw std::runtime_error("not a checkpoint file: " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    r.context = "#" + std::to_string(i);
    const std::uint16_t name_len = r.u16();
    const std::string name = r.bytes(name_len);
    r.context = name;
    if (!seen.insert(name).second)
      throw std::runtime_error("checkpoint has duplicate record " + name);
    const std::uint8_t dtype = r.u8();
    const std::uint8_t rank = r.u8();
    std::vector<int> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = static_cast<int>(r.u32());
      numel *= static_cast<std::size_t>(d);
    }
    if (!reg.contains(name))
      throw std::runtime_error("checkpoint record " + name + " has no matching parameter");
    Tensor<T>& t = reg.at(name);
    if (dtype != dtype_code<T>())
      throw std::runtime_error("checkpoint record " + name + " has a different dtype");
    if (rank != t.rank() || numel != t.numel())
      throw std::runtime_error("checkpoint record " + name + " has a different shape");
    for (int d = 0; d < t.rank(); ++d)
      if (dims[static_cast<std::size_t>(d)] != t.dim(d))
        throw std::runtime_error("checkpoint record " + name + " has a different shape");
    const std::string raw = r.bytes(numel * sizeof(T));
    std::memcpy(t.data(), raw.data(), raw.size());
  }
  r.context.clear();
  if (r.at != buf.size()) throw std::runtime_error("checkpoint has trailing bytes");
  if (seen.size() != reg.entries().size())
    throw std::runtime_error("checkpoint is missing parameters (" + std::to_string(seen.size()) +
                             " of " + std::to_string(reg.entries().size()) + ")");
}

template void save_checkpoint(const std::string&, const ParamRegistry<float>&);
template void save_checkpoint(const std::string&, const ParamRegistry<double>&);
template void load_checkpoint(const std::string&, ParamRegistry<float>&);
template void load_checkpoint(const std::string&, ParamRegistry<double>&);

}  // namespace picanet
