#include "rerank/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "rerank/rng.hpp"

namespace rerank {

namespace {

constexpr char kMagic[4] = {'R', 'K', 'P', '1'};

void write_u32(std::ostream& os, uint32_t x) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(x >> (8 * i));
  os.write(b, 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const nlohmann::json& hyper) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["hyper"] = hyper;
  nlohmann::json plist = nlohmann::json::array();
  for (int i = 0; i < params.count(); ++i) {
    plist.push_back({{"name", params.names()[i]}, {"shape", params.tensor(i).shape}});
  }
  header["params"] = plist;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, static_cast<uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (int i = 0; i < params.count(); ++i) {
    const Tensor& t = params.tensor(i);
    for (double d : t.v) {
      const float f = static_cast<float>(d);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      write_u32(os, bits);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const uint32_t hlen = read_u32(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw std::runtime_error("checkpoint: truncated header in '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");

  LoadedCheckpoint out;
  out.hyper = header.at("hyper");
  for (const auto& p : header.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const std::vector<int> shape = p.at("shape").get<std::vector<int>>();
    Tensor& t = out.params.create_const(name, shape, 0.0);
    for (double& d : t.v) {
      const uint32_t bits = read_u32(is);
      float f;
      std::memcpy(&f, &bits, 4);
      d = static_cast<double>(f);
    }
  }
  char extra;
  if (is.read(&extra, 1))
    throw std::runtime_error("checkpoint: trailing bytes in '" + path + "'");
  return out;
}

uint64_t checkpoint_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = fnv1a(std::string_view(buf, static_cast<size_t>(is.gcount())), h);
    if (!is) break;
  }
  return h;
}

}  // namespace rerank
