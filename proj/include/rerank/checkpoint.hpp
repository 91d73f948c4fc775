#pragma once

#include <string>

#include "rerank/params.hpp"

#include <nlohmann/json.hpp>

namespace rerank {

// Versioned checkpoint container: a magic tag, a JSON header recording the
// format version, model hyperparameters and parameter names/shapes, then the
// raw little-endian 32-bit payload in registration order. save(load(f))
// reproduces f byte for byte.
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const nlohmann::json& hyper);

struct LoadedCheckpoint {
  ParameterSet params;
  nlohmann::json hyper;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// FNV hash of the file bytes; used as a cache key for mined supervision.
uint64_t checkpoint_hash(const std::string& path);

}  // namespace rerank
