// SPDX-License-Identifier: Apache-2.0
#include "xfus/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace xfus {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'X', 'F', 'U', 'S'};
constexpr std::size_t kAlign = 64;

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::size_t scalar_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

ordered_json manifest_to_json(const Manifest& m) {
  ordered_json j;
  j["role"] = to_string(m.role);
  if (m.domain) j["domain"] = *m.domain;
  j["base_fingerprint"] = fingerprint_hex(m.base_fingerprint);
  j["training_config_digest"] = fingerprint_hex(m.training_config_digest);
  if (m.lora_rank) j["lora_rank"] = *m.lora_rank;
  if (m.lora_alpha) j["lora_alpha"] = *m.lora_alpha;
  if (m.merge) {
    ordered_json mj;
    mj["method"] = m.merge->method;
    mj["density"] = m.merge->density;
    mj["eta"] = m.merge->eta;
    ordered_json srcs = ordered_json::array();
    for (const auto& s : m.merge->sources) {
      srcs.push_back({{"role", s.role}, {"fingerprint", s.fingerprint}});
    }
    mj["sources"] = std::move(srcs);
    j["merge"] = std::move(mj);
  }
  return j;
}

Manifest manifest_from_json(const ordered_json& j) {
  Manifest m;
  m.role = role_from_string(j.at("role").get<std::string>());
  if (j.contains("domain")) m.domain = j.at("domain").get<std::string>();
  m.base_fingerprint = fingerprint_from_hex(j.at("base_fingerprint").get<std::string>());
  m.training_config_digest =
      fingerprint_from_hex(j.at("training_config_digest").get<std::string>());
  if (j.contains("lora_rank")) m.lora_rank = j.at("lora_rank").get<int>();
  if (j.contains("lora_alpha")) m.lora_alpha = j.at("lora_alpha").get<double>();
  if (j.contains("merge")) {
    const auto& mj = j.at("merge");
    MergeInfo info;
    info.method = mj.at("method").get<std::string>();
    info.density = mj.at("density").get<double>();
    info.eta = mj.at("eta").get<double>();
    for (const auto& s : mj.at("sources")) {
      info.sources.push_back(
          {s.at("role").get<std::string>(), s.at("fingerprint").get<std::string>()});
    }
    m.merge = std::move(info);
  }
  return m;
}

void validate_manifest(const Manifest& m) {
  if (m.role == Role::dsa_expert && !m.domain) {
    fail(ErrorKind::BadHeader, "dsa_expert manifest requires a domain");
  }
  if (m.role == Role::base && m.domain) {
    fail(ErrorKind::BadHeader, "base manifest must not carry a domain");
  }
}

/// Bounds-checked little-endian reader over an in-memory file image.
class Cursor {
 public:
  Cursor(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return size_; }

  void need(std::size_t n) {
    if (size_ - pos_ < n) fail(ErrorKind::Truncated, "unexpected end of archive");
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  const unsigned char* at(std::size_t offset) const { return data_ + offset; }

 private:
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

const char* to_string(Role r) {
  switch (r) {
    case Role::base: return "base";
    case Role::dsa_expert: return "dsa_expert";
    case Role::rl_expert: return "rl_expert";
    case Role::merged: return "merged";
  }
  return "base";
}

Role role_from_string(std::string_view s) {
  if (s == "base") return Role::base;
  if (s == "dsa_expert") return Role::dsa_expert;
  if (s == "rl_expert") return Role::rl_expert;
  if (s == "merged") return Role::merged;
  fail(ErrorKind::BadHeader, "unknown role '" + std::string(s) + "'");
}

std::string fingerprint_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

std::uint64_t fingerprint_from_hex(std::string_view s) {
  if (s.size() != 16) fail(ErrorKind::BadHeader, "fingerprint must be 16 hex digits");
  std::uint64_t v = 0;
  for (char c : s) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else fail(ErrorKind::BadHeader, "fingerprint must be lowercase hex");
    v = (v << 4) | static_cast<std::uint64_t>(d);
  }
  return v;
}

void write_archive(const NamedTensorMap& map, const Manifest& manifest,
                   const std::filesystem::path& path) {
  if (map.empty()) fail(ErrorKind::EmptyCheckpoint, "refusing to write an empty checkpoint");
  validate_manifest(manifest);
  for (const auto& [name, t] : map) {
    if (name.empty() || name.find('\0') != std::string::npos) {
      fail(ErrorKind::InvalidArgument, "tensor name empty or contains NUL");
    }
    if (name.size() > std::numeric_limits<std::uint32_t>::max()) {
      fail(ErrorKind::InvalidArgument, "tensor name too long");
    }
  }

  const std::string mjson = manifest_to_json(manifest).dump();

  std::vector<unsigned char> head;
  head.insert(head.end(), kMagic, kMagic + 4);
  put_u32(head, kArchiveVersion);
  put_u32(head, static_cast<std::uint32_t>(map.size()));
  put_u32(head, static_cast<std::uint32_t>(mjson.size()));
  head.insert(head.end(), mjson.begin(), mjson.end());

  std::size_t index_bytes = 0;
  for (const auto& [name, t] : map) {
    index_bytes += 4 + name.size() + 1 + 1 + 8 * t.rank() + 8 + 8;
  }
  const std::size_t data_start = align_up(head.size() + index_bytes);

  std::size_t offset = data_start;
  for (const auto& [name, t] : map) {
    put_u32(head, static_cast<std::uint32_t>(name.size()));
    head.insert(head.end(), name.begin(), name.end());
    head.push_back(static_cast<unsigned char>(t.dtype()));
    head.push_back(static_cast<unsigned char>(t.rank()));
    for (auto e : t.shape()) put_u64(head, e);
    const std::size_t len = t.numel() * scalar_size(t.dtype());
    put_u64(head, offset);
    put_u64(head, len);
    offset += len;
  }
  head.resize(data_start, 0);

  for (const auto& [name, t] : map) {
    if (t.dtype() == DType::f32) {
      for (double v : t.data()) {
        float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(head, bits);
      }
    } else {
      for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(head, bits);
      }
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(head.data()),
            static_cast<std::streamsize>(head.size()));
  out.flush();
  if (!out) fail(ErrorKind::Io, "short write to '" + path.string() + "'");
}

std::pair<NamedTensorMap, Manifest> read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::Io, "read failure on '" + path.string() + "'");

  Cursor c(buf.data(), buf.size());
  if (buf.size() < 4) fail(ErrorKind::Truncated, "file shorter than magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    fail(ErrorKind::BadMagic, "not an XFUS archive: '" + path.string() + "'");
  }
  c.bytes(4);
  const std::uint32_t version = c.u32();
  if (version != kArchiveVersion) {
    fail(ErrorKind::BadVersion, "archive version " + std::to_string(version) +
                                    ", expected " + std::to_string(kArchiveVersion));
  }
  const std::uint32_t count = c.u32();
  if (count == 0) fail(ErrorKind::EmptyCheckpoint, "archive holds no tensors");
  const std::uint32_t mlen = c.u32();
  const std::string mjson = c.bytes(mlen);
  ordered_json mj = ordered_json::parse(mjson, nullptr, false);
  if (mj.is_discarded()) fail(ErrorKind::BadHeader, "manifest is not valid JSON");
  Manifest manifest;
  try {
    manifest = manifest_from_json(mj);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::BadHeader, std::string("manifest: ") + e.what());
  }
  validate_manifest(manifest);

  struct Rec {
    std::string name;
    DType dtype;
    std::vector<std::size_t> shape;
    std::uint64_t offset;
    std::uint64_t length;
  };
  std::vector<Rec> recs;
  recs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Rec r;
    const std::uint32_t nlen = c.u32();
    if (nlen == 0) fail(ErrorKind::BadHeader, "empty tensor name in index");
    r.name = c.bytes(nlen);
    if (r.name.find('\0') != std::string::npos) {
      fail(ErrorKind::BadHeader, "tensor name contains NUL");
    }
    const std::uint8_t dt = c.u8();
    if (dt > 1) fail(ErrorKind::BadHeader, "unknown dtype code " + std::to_string(dt));
    r.dtype = static_cast<DType>(dt);
    const std::uint8_t rank = c.u8();
    if (rank > 8) fail(ErrorKind::BadHeader, "rank " + std::to_string(rank) + " exceeds 8");
    std::uint64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint64_t e = c.u64();
      if (e != 0 && numel > std::numeric_limits<std::uint64_t>::max() / e) {
        fail(ErrorKind::BadHeader, "extent overflow");
      }
      numel *= e;
      r.shape.push_back(static_cast<std::size_t>(e));
    }
    r.offset = c.u64();
    r.length = c.u64();
    if (r.length != numel * scalar_size(r.dtype)) {
      fail(ErrorKind::BadHeader, "byte length disagrees with shape for '" + r.name + "'");
    }
    recs.push_back(std::move(r));
  }

  const std::size_t data_start = align_up(c.pos());
  std::uint64_t prev_end = data_start;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (i > 0 && recs[i].name <= recs[i - 1].name) {
      fail(ErrorKind::BadHeader, "index not sorted by name");
    }
    if (recs[i].offset < prev_end) {
      fail(ErrorKind::OverlappingExtents,
           "tensor '" + recs[i].name + "' overlaps the preceding region");
    }
    prev_end = recs[i].offset + recs[i].length;
    if (prev_end > buf.size()) {
      fail(ErrorKind::Truncated, "data for '" + recs[i].name + "' extends past end of file");
    }
  }

  NamedTensorMap map;
  for (const auto& r : recs) {
    std::size_t n = r.length / scalar_size(r.dtype);
    std::vector<double> data(n);
    const unsigned char* p = c.at(r.offset);
    if (r.dtype == DType::f32) {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[4 * i + k]) << (8 * k);
        float f;
        std::memcpy(&f, &bits, 4);
        data[i] = static_cast<double>(f);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(p[8 * i + k]) << (8 * k);
        double d;
        std::memcpy(&d, &bits, 8);
        data[i] = d;
      }
    }
    map.set(r.name, Tensor::from_data(r.shape, std::move(data), r.dtype));
  }
  return {std::move(map), std::move(manifest)};
}

}  // namespace xfus
