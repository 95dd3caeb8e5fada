#pragma once

// Binary snapshot container.
//
//   "EVPB" | u32 version | u32 section count
//   per section: tag[4] | u64 payload bytes | payload | u64 FNV-1a of payload
//   payload: u32 entry count | manifest (u32 name length, name, u32 ndim,
//            u64 extents...) for every entry | little-endian doubles of every
//            entry in manifest order
//
// Sections: ENCW (frozen encoder weights), MPPS (live prompt-side state),
// HIST (frozen adapter history). All integers are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "evoprompt/encoder.hpp"
#include "evoprompt/errors.hpp"
#include "evoprompt/mpp.hpp"

namespace evoprompt {

inline constexpr std::array<char, 4> kSnapshotMagic = {'E', 'V', 'P', 'B'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Section {
  std::string tag;  // exactly four characters
  std::vector<NamedTensor> entries;

  const Tensor* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e.value;
    }
    return nullptr;
  }

  std::map<std::string, Tensor> as_map() const {
    std::map<std::string, Tensor> m;
    for (const auto& e : entries) m.emplace(e.name, e.value);
    return m;
  }
};

struct Snapshot {
  std::vector<Section> sections;

  const Section* find(const std::string& tag) const {
    for (const auto& s : sections) {
      if (s.tag == tag) return &s;
    }
    return nullptr;
  }
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos, std::size_t end) : bytes_(bytes), pos_(pos), end_(end) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(b)])) << (8 * b);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw InputError("snapshot: truncated data");
  }
  const std::string& bytes_;
  std::size_t pos_, end_;
};

}  // namespace detail

inline std::string encode_snapshot(const Snapshot& snap) {
  std::string out(kSnapshotMagic.begin(), kSnapshotMagic.end());
  detail::put_u32(out, kSnapshotVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(snap.sections.size()));
  for (const Section& s : snap.sections) {
    if (s.tag.size() != 4) throw InputError("snapshot: section tags are four characters");
    std::string payload;
    detail::put_u32(payload, static_cast<std::uint32_t>(s.entries.size()));
    for (const auto& e : s.entries) {
      detail::put_u32(payload, static_cast<std::uint32_t>(e.name.size()));
      payload += e.name;
      detail::put_u32(payload, static_cast<std::uint32_t>(e.value.shape().size()));
      for (std::size_t x : e.value.shape()) detail::put_u64(payload, x);
    }
    for (const auto& e : s.entries) {
      for (double v : e.value.values()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
    out += s.tag;
    detail::put_u64(out, payload.size());
    out += payload;
    detail::put_u64(out, detail::fnv1a(payload));
  }
  return out;
}

inline Snapshot decode_snapshot(const std::string& bytes) {
  detail::Reader r(bytes, 0, bytes.size());
  if (r.raw(4) != std::string(kSnapshotMagic.begin(), kSnapshotMagic.end())) {
    throw InputError("snapshot: bad magic");
  }
  if (const auto v = r.uint(4); v != kSnapshotVersion) {
    throw InputError("snapshot: unsupported version " + std::to_string(v));
  }
  const auto count = r.uint(4);
  Snapshot snap;
  for (std::uint64_t k = 0; k < count; ++k) {
    Section s;
    s.tag = r.raw(4);
    const auto len = r.uint(8);
    if (len > r.remaining()) throw InputError("snapshot: truncated section " + s.tag);
    const std::string payload = r.raw(static_cast<std::size_t>(len));
    if (r.uint(8) != detail::fnv1a(payload)) throw InputError("snapshot: checksum mismatch in section " + s.tag);

    detail::Reader p(payload, 0, payload.size());
    const auto entries = p.uint(4);
    std::vector<std::pair<std::string, Shape>> manifest;
    for (std::uint64_t e = 0; e < entries; ++e) {
      std::string name = p.raw(static_cast<std::size_t>(p.uint(4)));
      const auto ndim = p.uint(4);
      Shape shape;
      for (std::uint64_t d = 0; d < ndim; ++d) shape.push_back(static_cast<std::size_t>(p.uint(8)));
      manifest.emplace_back(std::move(name), std::move(shape));
    }
    for (auto& [name, shape] : manifest) {
      std::size_t n = 1;
      for (auto x : shape) {
        if (x == 0 || x > p.remaining() / 8 || n > p.remaining() / 8 / x) {
          throw InputError("snapshot: bad extents for '" + name + "'");
        }
        n *= x;
      }
      std::vector<double> values(n);
      for (auto& v : values) v = std::bit_cast<double>(p.uint(8));
      s.entries.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
    if (p.remaining() != 0) throw InputError("snapshot: trailing bytes in section " + s.tag);
    snap.sections.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw InputError("snapshot: trailing bytes after last section");
  return snap;
}

inline Section encoder_section(const FrozenEncoder& enc) {
  Section s{"ENCW", {}};
  for (const auto& [name, w] : enc.named_weights()) s.entries.push_back({name, *w});
  return s;
}

inline Snapshot make_snapshot(const FrozenEncoder& enc, const PromptProjector& proj) {
  Snapshot snap;
  snap.sections.push_back(encoder_section(enc));
  Section state{"MPPS", {}}, hist{"HIST", {}};
  for (const auto& [name, t] : proj.named_state()) state.entries.push_back({name, *t});
  for (const auto& [name, t] : proj.named_history()) hist.entries.push_back({name, *t});
  snap.sections.push_back(std::move(state));
  snap.sections.push_back(std::move(hist));
  return snap;
}

/// Overwrites the encoder's weights; names and shapes must match exactly.
inline void load_encoder(const Snapshot& snap, FrozenEncoder& enc) {
  const Section* s = snap.find("ENCW");
  if (!s) throw InputError("snapshot: no ENCW section");
  auto weights = enc.named_weights_mut();
  if (weights.size() != s->entries.size()) throw InputError("snapshot: encoder weight count differs");
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const auto& e = s->entries[k];
    if (e.name != weights[k].first || e.value.shape() != weights[k].second->shape()) {
      throw InputError("snapshot: encoder weight '" + e.name + "' does not match '" + weights[k].first + "'");
    }
    std::copy(e.value.values().begin(), e.value.values().end(), weights[k].second->values().begin());
  }
}

inline void load_projector(const Snapshot& snap, PromptProjector& proj) {
  const Section* state = snap.find("MPPS");
  if (!state) throw InputError("snapshot: no MPPS section");
  const Section* hist = snap.find("HIST");
  proj.restore(state->as_map(), hist ? hist->as_map() : std::map<std::string, Tensor>{});
}

inline void write_snapshot(const std::string& path, const Snapshot& snap) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_snapshot(snap);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("write failed for '" + path + "'");
}

inline Snapshot read_snapshot(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_snapshot(bytes);
}

}  // namespace evoprompt
