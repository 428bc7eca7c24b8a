#pragma once

// Model checkpoints on top of the container format.
//
// Base checkpoint ("meta/kind" = "base"): full parameter set under "param/",
// BN running statistics under "bn/", the build config and seed under "meta/".
// Adapter checkpoint ("meta/kind" = "adapter"): only the low-rank factors
// ("lora/<conv>/X|Y"), adapted BN statistics, and metadata including the
// SHA-256 of the exact base file it was trained against.  No full kernels.
//
// An adapter checkpoint applies only to a model loaded from a base file with
// a matching checksum; anything else is a hard error.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convlora/serialize.hpp"
#include "convlora/unet.hpp"

namespace convlora {

struct BaseCheckpointInfo {
  UNetConfig config;
  std::uint64_t seed = 0;
};

struct AdapterMeta {
  std::string domain_id;
  int rank = 0;
  std::vector<std::size_t> selector;  // 1-based encoder block indices
  std::uint64_t seed = 0;
  std::string base_checksum;  // hex SHA-256 of the base checkpoint file
};

// Selector notation: "1", "1-3", "2,4", or "all" (expands against depth).
std::vector<std::size_t> parse_selector(const std::string& text, std::size_t depth);
std::string selector_to_string(const std::vector<std::size_t>& blocks);

void save_base_checkpoint(const std::filesystem::path& path, UNet<float>& net,
                          std::uint64_t seed);
UNet<float> load_base_checkpoint(const std::filesystem::path& path,
                                 BaseCheckpointInfo* info = nullptr);

void save_adapter_checkpoint(const std::filesystem::path& path, UNet<float>& adapted,
                             const AdapterMeta& meta);
AdapterMeta read_adapter_meta(const std::filesystem::path& path);

// Injects adapters into `net` (which must be freshly loaded from
// `base_ckpt_path`) and loads factors plus BN statistics from the adapter
// file.  Verifies the stored base checksum against the actual base file.
void apply_adapter_checkpoint(const std::filesystem::path& adapter_path,
                              UNet<float>& net,
                              const std::filesystem::path& base_ckpt_path);

}  // namespace convlora
