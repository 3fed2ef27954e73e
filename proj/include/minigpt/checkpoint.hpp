#pragma once

#include <string>
#include <string_view>

#include "minigpt/model.hpp"

namespace minigpt {

// Binary checkpoint container, little-endian throughout:
//   magic "MGPT", u32 version (1),
//   u64 config length + config JSON, u64 tokenizer length + tokenizer JSON,
//   u32 tensor count, then per tensor:
//     u16 name length, name bytes, u8 ndim, ndim x u64 dims, raw f32 payload.
std::string serialize_model(const ModelBundle& m);
ModelBundle deserialize_model(std::string_view bytes);

void save_model(const ModelBundle& m, const std::string& path);
ModelBundle load_model(const std::string& path);

// FNV-1a 64 over the serialized checkpoint bytes, as 16 hex digits. Stats
// and prune plans carry this to pin the exact weights they were computed on.
std::string model_fingerprint(const ModelBundle& m);

}  // namespace minigpt
