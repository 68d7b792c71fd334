#pragma once

// Binary policy checkpoints.
//
// Layout (all integers little-endian):
//   magic     8 bytes  "LDDPOCK1"
//   order     u32
//   vocab     u32 size, i32 bos, i32 eos,
//             u32 n + n*i32 for each of prompt, content, filler ids
//   note      u32 length + bytes (provenance, free text)
//   logits    u64 count + count*f64 (IEEE-754 binary64), row-major by context
//
// Doubles are stored as raw bit patterns, so save/load is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "lddpo/error.hpp"
#include "lddpo/policy.hpp"

namespace lddpo {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

inline constexpr std::string_view kCheckpointMagic = "LDDPOCK1";

struct Checkpoint {
  PolicyModel policy;
  std::string note;
};

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError("checkpoint: truncated data");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_bytes(const PolicyModel& policy, std::string_view note = {}) {
  std::string buf(kCheckpointMagic);
  const Vocab& v = policy.vocab();
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(policy.order()));
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(v.size));
  detail::put<std::int32_t>(buf, v.bos_id);
  detail::put<std::int32_t>(buf, v.eos_id);
  for (const auto* ids : {&v.prompt_ids, &v.content_ids, &v.filler_ids}) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(ids->size()));
    for (TokenId id : *ids) detail::put<std::int32_t>(buf, id);
  }
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(note.size()));
  buf.append(note);
  const auto logits = policy.logits();
  detail::put<std::uint64_t>(buf, logits.size());
  for (double x : logits) detail::put<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(x));
  return buf;
}

inline Checkpoint checkpoint_from_bytes(std::string_view data) {
  detail::Reader in(data);
  if (in.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw IoError("checkpoint: bad magic");
  }
  const auto order = static_cast<int>(in.get<std::uint32_t>());
  Vocab v;
  v.size = static_cast<int>(in.get<std::uint32_t>());
  v.bos_id = in.get<std::int32_t>();
  v.eos_id = in.get<std::int32_t>();
  for (auto* ids : {&v.prompt_ids, &v.content_ids, &v.filler_ids}) {
    const auto n = in.get<std::uint32_t>();
    if (n > static_cast<std::uint32_t>(v.size)) throw IoError("checkpoint: corrupt id list");
    for (std::uint32_t i = 0; i < n; ++i) ids->push_back(in.get<std::int32_t>());
  }
  Checkpoint ck;
  const auto note_len = in.get<std::uint32_t>();
  ck.note = std::string(in.bytes(note_len));
  try {
    ck.policy = PolicyModel(std::move(v), order);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
  const auto n = in.get<std::uint64_t>();
  auto logits = ck.policy.logits();
  if (n != logits.size()) throw IoError("checkpoint: logit count does not match header");
  for (double& x : logits) x = std::bit_cast<double>(in.get<std::uint64_t>());
  if (!in.done()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const PolicyModel& policy, const std::string& path,
                            std::string_view note = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string buf = checkpoint_bytes(policy, note);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(data);
}

}  // namespace lddpo
