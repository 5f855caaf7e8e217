#pragma once

#include <cstdint>
#include <string>

#include "sbd/data.hpp"
#include "sbd/params.hpp"
#include "sbd/rng.hpp"
#include "sbd/transformer.hpp"

namespace sbd {

// Binary layout, little-endian:
//   "SBD1", u32 version (1), u32 n, n bytes of JSON header
//     {"model": {...}, "vocab": {"mode", "symbols"}, "train": {...}}
//   i64 training step, u64 rng key, u64 rng counter
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, rank x u64 dims, f32 values
// Tensors are the model parameters in canonical order followed by the AdamW
// moments "<name>#m" and "<name>#v".
struct Checkpoint {
  DenoiserConfig model;
  Vocab vocab;
  std::string train_json = "{}";  // training config echo, compact JSON
  std::int64_t step = 0;
  Rng::State rng;
  ParamStore<float> params;  // values plus optimizer moments
};

constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Throws IoError on unreadable, truncated or malformed files.
Checkpoint load_checkpoint(const std::string& path);

Transformer<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace sbd
