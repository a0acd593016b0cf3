#pragma once

#include <cstdint>
#include <string>

#include "l2p/nn.hpp"
#include "l2p/optim.hpp"

namespace l2p {

/// Versioned checkpoint: a JSON manifest (model spec, rng states, tensor
/// table, config provenance) followed by raw little-endian float64 payload.
/// load(save(m)) reproduces forward outputs bitwise given the restored rng
/// states; a spec-hash mismatch between manifest and payload model is
/// rejected.
struct LoadedCheckpoint {
  Model model;
  SgdOptimizer optimizer;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::string config_text;
  std::string config_digest;
};

void save_checkpoint(const std::string& path, const Model& model, const SgdOptimizer& optimizer,
                     int epoch, std::uint64_t seed, const std::string& config_text,
                     const std::string& config_digest);

LoadedCheckpoint load_checkpoint(const std::string& path);

/// FNV-1a over the raw file bytes.
std::string file_digest(const std::string& path);

}  // namespace l2p
