#pragma once

#include <filesystem>
#include <string>

#include "fbdebias/tensor.hpp"
#include "json.hpp"

namespace fbd {

/// Versioned binary model container: kind tag, JSON metadata, and named
/// tensors with their shape manifest.
struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  ParameterSet params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fbd
